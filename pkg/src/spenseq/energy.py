"""Energy functions over relaxed label sequences.

The chain energy scores per-position label affinities against BiLSTM features
plus adjacent-pair label transitions (the initial-position transition term is
omitted; positions t >= 2 contribute). Global energies add tag language
models: LSTMs that consume label distributions (soft embeddings: the
distribution-weighted average of label embeddings) and must assign
probability to the next label, with reserved start/end symbols bracketing the
sequence. TLM parameters are part of the energy group and are trained jointly
with everything else, never pretrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import BiEncoder, LstmParams, init_bi_encoder, init_lstm, run_lstm

LOG_FLOOR = 1e-12

GLOBAL_VARIANTS = ("none", "ge-a", "ge-b", "ge-c")


@dataclass
class ChainEnergyParams:
    enc: BiEncoder
    u: Tensor  # (2H, L): per-label weights over features
    w: Tensor  # (L, L): transition scores, w[j, k] for label j followed by k


@dataclass
class TlmParams:
    """One tag language model: a forward LSTM over (optionally
    word-conditioned) soft label embeddings with a softmax over L+2 symbols."""

    label_emb: Tensor            # (L+2, e_label)
    cell: LstmParams
    w_out: Tensor                # (H, L+2)
    b_out: Tensor                # (L+2,)
    n_labels: int
    direction: str               # "forward" | "backward"
    word_emb: Tensor | None = None  # (V, e_word) when conditioned on words
    boundary_word: int = 1          # token index standing in for x_0


@dataclass
class GlobalEnergyConfig:
    variant: str = "none"
    gamma: float = 1.0  # weight of the word-conditioned terms under ge-c

    def __post_init__(self):
        if self.variant not in GLOBAL_VARIANTS:
            raise ValueError(f"unknown global energy variant {self.variant!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class EnergyModel:
    chain: ChainEnergyParams
    global_cfg: GlobalEnergyConfig
    tlm_fwd: TlmParams | None = None
    tlm_bwd: TlmParams | None = None
    tlm_word_fwd: TlmParams | None = None
    tlm_word_bwd: TlmParams | None = None


def chain_energy(features: Tensor, y: Tensor, params: ChainEnergyParams) -> Tensor:
    """Negated sum of unary scores y_t . (U^T b_t) and transition scores
    y_{t-1}^T W y_t. Scalar; lower is better."""
    t_len = y.values.shape[0]
    if features.values.shape[0] != t_len:
        raise ad.OpError(f"chain-energy: features rows {features.values.shape[0]} != y rows {t_len}")
    score = ad.sum_all(ad.multiply(ad.matmul(features, params.u), y))
    if t_len > 1:
        prev = ad.slice_rows(y, 0, t_len - 1)
        nxt = ad.slice_rows(y, 1, t_len)
        score = ad.add(score, ad.sum_all(ad.multiply(ad.matmul(prev, params.w), nxt)))
    return ad.scale(score, -1.0)


def _reversed_rows(y: Tensor) -> Tensor:
    t_len = y.values.shape[0]
    flip = np.eye(t_len)[::-1].copy()
    return ad.matmul(ad.constant(flip), y)


def tlm_energy(y: Tensor, tlm: TlmParams, words: list[int] | None = None) -> Tensor:
    """-sum_t log(y_t . yhat_t) over positions 1..T+1, where yhat_t is the
    model's next-label distribution after consuming y_0..y_{t-1} (start and
    end are reserved one-hot symbols). Probabilities are floored at 1e-12.
    A backward-direction TLM scores the reversed sequence."""
    if tlm.word_emb is not None and words is None:
        raise ValueError("word-conditioned TLM needs the token sequence")
    if tlm.direction == "backward":
        y = _reversed_rows(y)
        words = list(reversed(words)) if words is not None else None
    t_len, n_labels = y.values.shape
    if n_labels != tlm.n_labels:
        raise ad.OpError(f"tlm-energy: y has {n_labels} labels, model expects {tlm.n_labels}")
    start = np.zeros((1, n_labels + 2))
    start[0, n_labels] = 1.0
    end = np.zeros((1, n_labels + 2))
    end[0, n_labels + 1] = 1.0
    y_ext = ad.concat_last([y, ad.constant(np.zeros((t_len, 2)))])
    inputs = ad.concat_rows([ad.constant(start), y_ext])   # rows y_0 .. y_T
    targets = ad.concat_rows([y_ext, ad.constant(end)])    # rows y_1 .. y_{T+1}
    x = ad.matmul(inputs, tlm.label_emb)                   # soft label embeddings
    if tlm.word_emb is not None:
        # the input at step t is the word one position back; a boundary token
        # stands in at the front, so the last word lines up with the end symbol
        x = ad.concat_last([x, ad.embedding(tlm.word_emb, [tlm.boundary_word] + list(words))])
    h = run_lstm(x, tlm.cell)
    probs = ad.row_softmax(ad.add(ad.matmul(h, tlm.w_out), tlm.b_out))
    picked = ad.row_sum(ad.multiply(probs, targets))
    return ad.scale(ad.sum_all(ad.log_floored(picked, LOG_FLOOR)), -1.0)


def global_energy(y: Tensor, model: EnergyModel, words: list[int] | None = None) -> Tensor:
    """Sum of the configured TLM energies. Under ge-c the word-conditioned
    terms are weighted by gamma (gamma = 0 reduces to ge-b exactly)."""
    variant = model.global_cfg.variant
    if variant == "none":
        raise ValueError("global_energy called with variant 'none'")
    total = tlm_energy(y, model.tlm_fwd, words)
    if variant == "ge-a":
        return total
    total = ad.add(total, tlm_energy(y, model.tlm_bwd, words))
    if variant == "ge-b" or model.global_cfg.gamma == 0.0:
        return total
    word_part = ad.add(tlm_energy(y, model.tlm_word_fwd, words),
                       tlm_energy(y, model.tlm_word_bwd, words))
    return ad.add(total, ad.scale(word_part, model.global_cfg.gamma))


def total_energy(features: Tensor, y: Tensor, model: EnergyModel,
                 words: list[int] | None = None) -> Tensor:
    e = chain_energy(features, y, model.chain)
    if model.global_cfg.variant != "none":
        e = ad.add(e, global_energy(y, model, words))
    return e


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def init_tlm(store: ParamStore, prefix: str, n_labels: int, label_embed: int,
             hidden: int, rng: np.random.Generator, direction: str,
             vocab_size: int | None = None, word_embed: int = 0,
             boundary_word: int = 1) -> TlmParams:
    scale = 1.0 / np.sqrt(hidden)
    label_emb = store.add(f"{prefix}.label_emb",
                          rng.uniform(-0.1, 0.1, size=(n_labels + 2, label_embed)), "energy")
    word_emb = None
    in_dim = label_embed
    if vocab_size is not None:
        word_emb = store.add(f"{prefix}.word_emb",
                             rng.uniform(-0.1, 0.1, size=(vocab_size, word_embed)), "energy")
        in_dim += word_embed
    cell = init_lstm(store, f"{prefix}.cell", "energy", in_dim, hidden, rng)
    w_out = store.add(f"{prefix}.w_out", rng.uniform(-scale, scale, size=(hidden, n_labels + 2)), "energy")
    b_out = store.add(f"{prefix}.b_out", np.zeros(n_labels + 2), "energy")
    return TlmParams(label_emb=label_emb, cell=cell, w_out=w_out, b_out=b_out,
                     n_labels=n_labels, direction=direction, word_emb=word_emb,
                     boundary_word=boundary_word)


def build_energy_model(store: ParamStore, rng: np.random.Generator, *, vocab_size: int,
                       n_labels: int, embed_dim: int, hidden: int,
                       global_cfg: GlobalEnergyConfig | None = None,
                       tlm_hidden: int | None = None, tlm_label_embed: int = 32,
                       tlm_word_embed: int = 32, boundary_word: int = 1,
                       emb_init: np.ndarray | None = None) -> EnergyModel:
    """Create all energy parameters (group "energy") on the store."""
    global_cfg = global_cfg or GlobalEnergyConfig()
    enc = init_bi_encoder(store, "e_enc", "energy", vocab_size, embed_dim, hidden, rng,
                          emb_init=emb_init)
    scale = 1.0 / np.sqrt(enc.out_dim)
    u = store.add("e_u", rng.uniform(-scale, scale, size=(enc.out_dim, n_labels)), "energy")
    w = store.add("e_w", rng.uniform(-scale, scale, size=(n_labels, n_labels)), "energy")
    model = EnergyModel(chain=ChainEnergyParams(enc=enc, u=u, w=w), global_cfg=global_cfg)
    lm_hidden = tlm_hidden or hidden
    if global_cfg.variant in ("ge-a", "ge-b", "ge-c"):
        model.tlm_fwd = init_tlm(store, "tlm_f", n_labels, tlm_label_embed, lm_hidden, rng, "forward")
    if global_cfg.variant in ("ge-b", "ge-c"):
        model.tlm_bwd = init_tlm(store, "tlm_b", n_labels, tlm_label_embed, lm_hidden, rng, "backward")
    if global_cfg.variant == "ge-c":
        model.tlm_word_fwd = init_tlm(store, "tlm_wf", n_labels, tlm_label_embed, lm_hidden, rng,
                                      "forward", vocab_size=vocab_size, word_embed=tlm_word_embed,
                                      boundary_word=boundary_word)
        model.tlm_word_bwd = init_tlm(store, "tlm_wb", n_labels, tlm_label_embed, lm_hidden, rng,
                                      "backward", vocab_size=vocab_size, word_embed=tlm_word_embed,
                                      boundary_word=boundary_word)
    return model
