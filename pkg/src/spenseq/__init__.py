"""Energy-based sequence labeling with jointly trained inference networks."""

from .autodiff import (
    GROUPS,
    GradCheckReport,
    OpError,
    ParamStore,
    Tape,
    TapeError,
    Tensor,
    backward,
    constant,
    forward,
    grad_check,
)
from .data import (
    Dataset,
    Example,
    LabelSet,
    SynthSpec,
    Vocabulary,
    gen_synthetic,
    load_conll,
    make_hmm_spec,
    one_hot,
    synthetic_splits,
    to_bioes,
)
from .encoder import BiEncoder, encode, init_bi_encoder
from .energy import (
    EnergyModel,
    GlobalEnergyConfig,
    build_energy_model,
    chain_energy,
    global_energy,
    tlm_energy,
    total_energy,
)
from .evaluation import (
    DisagreementReport,
    disagreement,
    extract_spans_bioes,
    metrics_report,
    span_f1,
    token_accuracy,
)
from .gradcheck import run_gradcheck
from .infnet import (
    InfNet,
    cost_augmented_infer,
    count_params,
    discretize,
    infer,
    init_infnet,
)
from .objectives import (
    LossConfig,
    StepItem,
    cost_delta,
    energy_step_loss,
    inference_step_loss,
    inference_step_objective,
    local_ce,
)
from .trainer import (
    OptimizerConfig,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    TrajectoryLog,
    fine_tune_test_net,
    train,
)

__version__ = "0.1.0"
