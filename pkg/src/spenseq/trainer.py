"""Alternating minimax training of the energy function and inference nets.

Each minibatch gets k inference-net updates (ascent on the inference
objective via descent on its negation) followed by one energy update.
While the nets move, the energy side is frozen, so chain features and gold
energies enter the tape as constants; while the energy moves, the net
outputs are constants.  This halves the recorded graph without changing
any gradient.

Dropout, when enabled, is applied to whichever encoder is being trained in
the current phase; frozen-side and evaluation forwards always run clean.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .data import Dataset, Example, one_hot
from .encoder import encode
from .energy import (EnergyModel, GlobalEnergyConfig, build_energy_model, global_energy,
                     total_energy)
from .evaluation import first_non_bioes, span_f1, token_accuracy
from .infnet import InfNet, cost_augmented_infer, discretize, infer, init_infnet
from .objectives import (LossConfig, StepItem, cost_delta, energy_step_loss,
                         inference_step_loss, local_ce)

NET_GROUPS = ("cost_augmented", "test_time")
DEV_METRICS = ("accuracy", "span-f1")


class TrainingDiverged(RuntimeError):
    """Raised when a batch loss turns non-finite."""

    def __init__(self, epoch: int, batch_index: int, what: str):
        super().__init__(f"non-finite {what} in epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    algo: str = "adam"  # "adam" | "sgd-momentum"
    lr: float = 5e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algo not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.algo!r} (want adam or sgd-momentum)")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")


def _grad_for(name: str, grads: dict) -> np.ndarray:
    try:
        return grads[name]
    except KeyError:
        raise ValueError(f"no gradient for parameter {name!r}") from None


def sgd_momentum_step(store: ParamStore, names: Sequence[str], grads: dict, *,
                      lr: float, momentum: float) -> None:
    for name in names:
        g = _grad_for(name, grads)
        state = store.opt_state.setdefault(name, {})
        v = state.get("v")
        v = g.copy() if v is None else momentum * v + g
        state["v"] = v
        store.get(name).values -= lr * v


def adam_step(store: ParamStore, names: Sequence[str], grads: dict, *, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    for name in names:
        g = _grad_for(name, grads)
        state = store.opt_state.setdefault(name, {})
        t = state.get("t", 0) + 1
        m = state.get("m", 0.0) * beta1 + (1 - beta1) * g
        v = state.get("v", 0.0) * beta2 + (1 - beta2) * g * g
        state.update(t=t, m=m, v=v)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        store.get(name).values -= lr * m_hat / (np.sqrt(v_hat) + eps)


def apply_step(store: ParamStore, groups: Sequence[str], grads: dict,
               opt: OptimizerConfig) -> None:
    names = store.names(groups)
    if opt.algo == "sgd-momentum":
        sgd_momentum_step(store, names, grads, lr=opt.lr, momentum=opt.momentum)
    else:
        adam_step(store, names, grads, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2,
                  eps=opt.eps)


def default_inference_opt(loss: LossConfig) -> OptimizerConfig:
    """Plain SGD with momentum is stable once the cross-entropy term shapes
    the loss surface; without that term Adam is the reliable choice."""
    if loss.ce_weight != 0.0:
        return OptimizerConfig(algo="sgd-momentum", lr=0.1, momentum=0.9)
    return OptimizerConfig(algo="adam", lr=5e-4)


# ---------------------------------------------------------------------------
# configuration and logging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    k: int = 1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    parameterization: str = "separated"
    global_variant: str = "none"
    global_gamma: float = 1.0
    embed_dim: int = 64
    hidden: int = 64
    tlm_hidden: int | None = None
    tlm_label_embed: int = 32
    tlm_word_embed: int = 32
    dropout_keep: float = 1.0
    patience: int = 10
    dev_metric: str = "accuracy"
    energy_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    inference_opt: OptimizerConfig | None = None  # None picks the default rule
    fine_tune_steps: int | None = None  # None: one pass in margin-rescaled mode
    emb_init: np.ndarray | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dev_metric not in DEV_METRICS:
            raise ValueError(f"unknown dev metric {self.dev_metric!r} "
                             f"(want one of {DEV_METRICS})")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.loss.mode == "margin-rescaled" and self.parameterization != "separated":
            # the test net is produced by copying the cost net, which only
            # exists as a full standalone network in the separated layout
            raise ValueError("margin-rescaled mode requires the separated parameterization")

    def resolved_inference_opt(self) -> OptimizerConfig:
        return self.inference_opt or default_inference_opt(self.loss)

    def resolved_fine_tune_steps(self) -> int:
        if self.fine_tune_steps is not None:
            return self.fine_tune_steps
        return 1 if self.loss.mode == "margin-rescaled" else 0


@dataclass
class TrajectoryLog:
    """Append-only per-epoch records, serialized as JSON lines."""

    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record) + "\n")

    @classmethod
    def load(cls, path: str) -> "TrajectoryLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.append(json.loads(line))
        return log


@dataclass
class TrainResult:
    store: ParamStore
    model: EnergyModel | None
    net: InfNet
    log: TrajectoryLog
    best_epoch: int
    best_dev: float
    n_epochs: int


# ---------------------------------------------------------------------------
# system assembly and batching
# ---------------------------------------------------------------------------

def build_system(cfg: TrainConfig, vocab_size: int, n_labels: int,
                 rng: np.random.Generator) -> tuple[ParamStore, EnergyModel | None, InfNet]:
    store = ParamStore()
    model = None
    if cfg.loss.needs_energy:
        model = build_energy_model(
            store, rng, vocab_size=vocab_size, n_labels=n_labels,
            embed_dim=cfg.embed_dim, hidden=cfg.hidden,
            global_cfg=GlobalEnergyConfig(cfg.global_variant, cfg.global_gamma),
            tlm_hidden=cfg.tlm_hidden, tlm_label_embed=cfg.tlm_label_embed,
            tlm_word_embed=cfg.tlm_word_embed, emb_init=cfg.emb_init)
    net = init_infnet(store, rng, kind=cfg.parameterization, vocab_size=vocab_size,
                      n_labels=n_labels, embed_dim=cfg.embed_dim, hidden=cfg.hidden,
                      emb_init=cfg.emb_init)
    return store, model, net


def length_batches(items: Sequence, batch_size: int, length_of=len) -> list[list]:
    """Batches of uniform sequence length, in a deterministic order."""
    by_len: dict[int, list] = {}
    for item in items:
        by_len.setdefault(length_of(item), []).append(item)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        batches.extend(group[i:i + batch_size] for i in range(0, len(group), batch_size))
    return batches


def _group_norm(store: ParamStore, grads: dict, group: str,
                prefix: str | None = None) -> float:
    total = 0.0
    for name in store.names((group,)):
        if prefix is not None and not name.startswith(prefix):
            continue
        g = grads.get(name)
        if g is not None:
            total += float((g * g).sum())
    return math.sqrt(total)


def _check_finite(value: float, epoch: int, batch_index: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(epoch, batch_index, what)


# ---------------------------------------------------------------------------
# the two phases
# ---------------------------------------------------------------------------

def _freeze_energy_pieces(batch, model, lcfg: LossConfig):
    """Per-example constants for the inference phase: chain features and,
    when the truncated brackets need it, the gold energy."""
    pieces = []
    for ex, gold_np in batch:
        tokens = list(ex.tokens)
        feats_np = e_gold_val = None
        if lcfg.needs_energy:
            feats_np = encode(tokens, model.chain.enc).values
            if lcfg.truncate_inference_step:
                e_gold_val = total_energy(ad.constant(feats_np), ad.constant(gold_np),
                                          model, tokens).item()
        pieces.append((tokens, gold_np, feats_np, e_gold_val))
    return pieces


def _inference_phase(pieces, store, model, net, cfg: TrainConfig, inf_opt,
                     rng, epoch: int, batch_index: int):
    """k updates of the nets on one frozen-energy minibatch.  Returns the
    per-step test-net gradient norms and, in local-ce mode, the diagnostic
    triples the energy phase would otherwise supply."""
    lcfg = cfg.loss
    steps = 1 if lcfg.mode == "local-ce" else cfg.k
    psi_norms, diag = [], []
    for _ in range(steps):
        with ad.Tape():
            items = []
            for tokens, gold_np, feats_np, e_gold_val in pieces:
                gold = ad.constant(gold_np)
                a_out = f_out = None
                if lcfg.needs_test_net or net.kind == "stacked":
                    a_out = infer(tokens, net, dropout_keep=cfg.dropout_keep, rng=rng)
                if lcfg.needs_cost_net:
                    f_out = cost_augmented_infer(tokens, gold, net, a_out=a_out,
                                                 dropout_keep=cfg.dropout_keep, rng=rng)
                item = StepItem()
                feats = ad.constant(feats_np) if feats_np is not None else None
                if f_out is not None:
                    item.delta = cost_delta(f_out, gold)
                    if lcfg.needs_energy:
                        item.e_f = total_energy(feats, f_out, model, tokens)
                if a_out is not None and lcfg.mode in ("perceptron", "compound"):
                    item.e_a = total_energy(feats, a_out, model, tokens)
                if e_gold_val is not None:
                    item.e_gold = ad.constant(np.asarray(e_gold_val))
                if lcfg.ce_weight != 0.0 or lcfg.mode == "local-ce":
                    if lcfg.needs_test_net:
                        item.ce_a = local_ce(a_out, gold)
                    else:
                        item.ce_f = local_ce(f_out, gold)
                if lcfg.mode == "local-ce":
                    diag.append((float(np.abs(a_out.values - gold_np).sum()), 0.0, 0.0))
                items.append(item)
            loss = inference_step_loss(items, lcfg)
            _check_finite(loss.item(), epoch, batch_index, "inference loss")
            grads = ad.backward(loss, store, groups=NET_GROUPS)
        apply_step(store, NET_GROUPS, grads, inf_opt)
        psi_norms.append(_group_norm(store, grads, "test_time"))
    return psi_norms, diag


def _energy_phase(pieces, store, model, net, cfg: TrainConfig, rng,
                  epoch: int, batch_index: int):
    """One energy update with the current net outputs frozen.  Returns the
    energy gradient norm, the label-LM part of it, and per-example
    diagnostic triples (cost, energy of the tracked net, gold energy)."""
    lcfg = cfg.loss
    frozen = []
    for tokens, gold_np, _, _ in pieces:
        gold = ad.constant(gold_np)
        needs_a = lcfg.mode in ("perceptron", "compound")
        a_t = infer(tokens, net) if needs_a or net.kind == "stacked" else None
        f_vals = None
        if lcfg.needs_cost_net:
            f_vals = cost_augmented_infer(tokens, gold, net, a_out=a_t).values
        a_vals = a_t.values if needs_a else None
        frozen.append((tokens, gold_np, f_vals, a_vals))

    diag = []
    with ad.Tape():
        items = []
        for tokens, gold_np, f_vals, a_vals in frozen:
            feats = encode(tokens, model.chain.enc, dropout_keep=cfg.dropout_keep, rng=rng)
            item = StepItem(e_gold=total_energy(feats, ad.constant(gold_np), model, tokens))
            if f_vals is not None:
                item.delta = ad.constant(np.asarray(np.abs(f_vals - gold_np).sum()))
                item.e_f = total_energy(feats, ad.constant(f_vals), model, tokens)
            if a_vals is not None:
                item.e_a = total_energy(feats, ad.constant(a_vals), model, tokens)
            items.append(item)
            subject_vals = f_vals if f_vals is not None else a_vals
            subject_e = item.e_f if f_vals is not None else item.e_a
            diag.append((float(np.abs(subject_vals - gold_np).sum()), subject_e.item(),
                         item.e_gold.item()))
        loss = energy_step_loss(items, lcfg)
        _check_finite(loss.item(), epoch, batch_index, "energy loss")
        grads = ad.backward(loss, store, groups=("energy",))
    apply_step(store, ("energy",), grads, cfg.energy_opt)
    theta_norm = _group_norm(store, grads, "energy")
    tlm_norm = _group_norm(store, grads, "energy", prefix="tlm_")
    return theta_norm, tlm_norm, diag


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def predict_indices(examples: Sequence[Example], net: InfNet,
                    use_cost_net: bool = False) -> list[list[int]]:
    """Hard label indices from the test-time net (or the cost-augmented net
    when asked, with gold supplied for the stacked combiner)."""
    preds = []
    for ex in examples:
        tokens = list(ex.tokens)
        if use_cost_net:
            gold = ad.constant(one_hot(ex.gold, net.n_labels))
            out = cost_augmented_infer(tokens, gold, net)
        else:
            out = infer(tokens, net)
        preds.append(discretize(out))
    return preds


def dataset_metric(dataset: Dataset, preds: list[list[int]], metric: str) -> float:
    gold = [list(ex.gold) for ex in dataset.examples]
    if metric == "accuracy":
        return token_accuracy(preds, gold)
    names = dataset.labels.name
    pred_str = [[names(i) for i in seq] for seq in preds]
    gold_str = [[names(i) for i in seq] for seq in gold]
    return span_f1(pred_str, gold_str)[2]


def majority_label_accuracy(train_ds: Dataset, eval_ds: Dataset) -> float:
    """Accuracy of always predicting the training corpus's most common label."""
    counts = Counter(g for ex in train_ds.examples for g in ex.gold)
    majority = counts.most_common(1)[0][0]
    gold = [list(ex.gold) for ex in eval_ds.examples]
    return token_accuracy([[majority] * len(g) for g in gold], gold)


def mean_test_net_energy(examples: Sequence[Example], model: EnergyModel,
                         net: InfNet) -> float:
    values = []
    for ex in examples:
        tokens = list(ex.tokens)
        feats = encode(tokens, model.chain.enc)
        values.append(total_energy(feats, infer(tokens, net), model, tokens).item())
    return float(np.mean(values))


def _mean_gold_tlm_energy(dataset: Dataset, model: EnergyModel) -> float:
    n_labels = len(dataset.labels.labels)
    values = []
    for ex in dataset.examples:
        gold = ad.constant(one_hot(ex.gold, n_labels))
        values.append(global_energy(gold, model, list(ex.tokens)).item())
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# fine-tuning the test-time net
# ---------------------------------------------------------------------------

def copy_cost_net_into_test_net(store: ParamStore, net: InfNet) -> None:
    """Overwrite the test-time net with the cost-augmented net, matching
    tensors by name; only the separated layout has a full net to copy."""
    if net.kind != "separated":
        raise ValueError(f"architecture mismatch: a {net.kind!r} net has no standalone "
                         "cost net to copy (separated layout required)")
    for a_name in store.names(("test_time",)):
        f_name = "f" + a_name[1:]
        try:
            source = store.get(f_name)
        except KeyError:
            raise ValueError(f"architecture mismatch: no cost-net tensor {f_name!r} "
                             f"matching {a_name!r}") from None
        target = store.get(a_name)
        if source.values.shape != target.values.shape:
            raise ValueError(f"architecture mismatch: {f_name} has shape "
                             f"{source.values.shape}, {a_name} has {target.values.shape}")
        target.values = source.values.copy()
        store.opt_state.pop(a_name, None)


def fine_tune_test_net(examples: Sequence[Example], store: ParamStore,
                       model: EnergyModel, net: InfNet, *, steps: int,
                       lcfg: LossConfig, opt: OptimizerConfig, batch_size: int = 32,
                       rng: np.random.Generator | None = None) -> None:
    """Seed the test-time net from the cost-augmented net, then descend the
    energy of its outputs (plus cross entropy when configured) for the given
    number of passes over the data.  Energy parameters stay bitwise
    untouched."""
    copy_cost_net_into_test_net(store, net)
    if steps == 0:
        return
    rng = rng or np.random.default_rng(0)
    prepped = [(ex, one_hot(ex.gold, net.n_labels)) for ex in examples]
    batches = length_batches(prepped, batch_size, length_of=lambda pair: len(pair[0]))
    for _ in range(steps):
        order = rng.permutation(len(batches))
        for idx in order:
            consts = [(list(ex.tokens), gold_np,
                       encode(list(ex.tokens), model.chain.enc).values)
                      for ex, gold_np in batches[idx]]
            with ad.Tape():
                loss = None
                for tokens, gold_np, feats_np in consts:
                    a_out = infer(tokens, net)
                    term = total_energy(ad.constant(feats_np), a_out, model, tokens)
                    if lcfg.ce_weight != 0.0:
                        term = ad.add(term, ad.scale(local_ce(a_out, ad.constant(gold_np)),
                                                     lcfg.ce_weight))
                    loss = term if loss is None else ad.add(loss, term)
                grads = ad.backward(loss, store, groups=("test_time",))
            apply_step(store, ("test_time",), grads, opt)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train(train_ds: Dataset, dev_ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Alternating optimization with per-epoch dev evaluation, early
    stopping on the dev metric, and best-snapshot restoration.

    Model selection uses the test-time net whenever the objective trains
    one; in margin-rescaled mode the cost-augmented net stands in, and the
    test-time net is produced afterwards by copying plus fine-tuning.
    """
    if not train_ds.examples or not dev_ds.examples:
        raise ValueError("training and dev sets must be nonempty")
    if train_ds.labels.labels != dev_ds.labels.labels:
        raise ValueError("training and dev label sets differ")
    if cfg.dev_metric == "span-f1" and train_ds.labels.scheme != "bioes":
        offender = first_non_bioes(train_ds.labels.labels)
        raise ValueError(f"dev metric span-f1 needs BIOES labels; found {offender!r}")

    lcfg = cfg.loss
    n_labels = len(train_ds.labels.labels)
    rng = np.random.default_rng(cfg.seed)
    store, model, net = build_system(cfg, train_ds.vocab.size, n_labels, rng)
    inf_opt = cfg.resolved_inference_opt()

    prepped = [(ex, one_hot(ex.gold, n_labels)) for ex in train_ds.examples]
    batches = length_batches(prepped, cfg.batch_size, length_of=lambda pair: len(pair[0]))
    log = TrajectoryLog()
    log_extras = lcfg.needs_energy and cfg.global_variant != "none"

    best_dev = -math.inf
    best_epoch = 0
    best_snapshot = store.snapshot()
    evals_since_best = 0
    start = time.perf_counter()
    epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        epoch_start = time.perf_counter()
        order = rng.permutation(len(batches))
        psi_norms: list[float] = []
        theta_norms: list[float] = []
        tlm_norms: list[float] = []
        diag: list[tuple[float, float, float]] = []
        for bi, idx in enumerate(order):
            pieces = _freeze_energy_pieces(batches[idx], model, lcfg)
            step_norms, ce_diag = _inference_phase(pieces, store, model, net, cfg,
                                                   inf_opt, rng, epoch, bi)
            psi_norms.extend(step_norms)
            diag.extend(ce_diag)
            if lcfg.needs_energy:
                theta, tlm, e_diag = _energy_phase(pieces, store, model, net, cfg,
                                                   rng, epoch, bi)
                theta_norms.append(theta)
                tlm_norms.append(tlm)
                diag.extend(e_diag)

        preds = predict_indices(dev_ds.examples, net,
                                use_cost_net=not lcfg.needs_test_net)
        dev_value = dataset_metric(dev_ds, preds, cfg.dev_metric)
        epoch_seconds = time.perf_counter() - epoch_start
        record = {
            "epoch": epoch,
            "l0": float(np.mean([max(0.0, d - ef + eg) for d, ef, eg in diag])),
            "l1": float(np.mean([d - ef for d, ef, _ in diag])),
            "grad_norm_theta": float(np.mean(theta_norms)) if theta_norms else 0.0,
            "grad_norm_psi": float(np.mean(psi_norms)) if psi_norms else 0.0,
            "dev_metric": dev_value,
            "examples_per_sec": len(prepped) / max(epoch_seconds, 1e-9),
            "wallclock_s": time.perf_counter() - start,
        }
        if log_extras:
            record["grad_norm_tlm"] = float(np.mean(tlm_norms)) if tlm_norms else 0.0
            record["dev_gold_tlm_energy"] = _mean_gold_tlm_energy(dev_ds, model)
        log.append(record)

        if dev_value > best_dev:
            best_dev = dev_value
            best_epoch = epoch
            best_snapshot = store.snapshot()
            evals_since_best = 0
        else:
            evals_since_best += 1
            if evals_since_best >= cfg.patience:
                break

    store.restore(best_snapshot)
    if lcfg.mode == "margin-rescaled":
        fine_tune_test_net(list(train_ds.examples), store, model, net,
                           steps=cfg.resolved_fine_tune_steps(), lcfg=lcfg,
                           opt=inf_opt, batch_size=cfg.batch_size, rng=rng)
    return TrainResult(store=store, model=model, net=net, log=log,
                       best_epoch=best_epoch, best_dev=best_dev, n_epochs=epoch)
