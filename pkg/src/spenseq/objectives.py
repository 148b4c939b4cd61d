"""Training objectives for the energy / inference-net minimax game.

The energy step and the inference step see the same per-example pieces
(cost, energies of the two net outputs, gold energy, cross entropies) but
combine them with opposite intent: the energy parameters minimize hinged
brackets, the nets maximize the unhinged gains.  Callers build a
``StepItem`` per example, putting whichever side is frozen for the current
step in as constants so the tape only carries the moving side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("margin-rescaled", "perceptron", "compound", "local-ce")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "compound"
    lambda_weight: float = 1.0
    ce_weight: float = 1.0
    truncate_energy_step: bool = True
    truncate_inference_step: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown objective mode {self.mode!r}; choose from {MODES}")
        if self.lambda_weight < 0:
            raise ValueError(f"lambda_weight must be >= 0, got {self.lambda_weight}")

    @property
    def needs_cost_net(self) -> bool:
        return self.mode in ("margin-rescaled", "compound")

    @property
    def needs_test_net(self) -> bool:
        # margin-rescaled mode trains only the cost-augmented net; the
        # test-time net is produced afterwards by copying and fine-tuning
        return self.mode != "margin-rescaled"

    @property
    def needs_energy(self) -> bool:
        return self.mode != "local-ce"


@dataclass
class StepItem:
    """Scalar pieces of one example's contribution to a step loss."""
    delta: Tensor | None = None   # cost of the cost-augmented output vs gold
    e_f: Tensor | None = None     # energy of the cost-augmented output
    e_a: Tensor | None = None     # energy of the test-time output
    e_gold: Tensor | None = None  # energy of the gold sequence
    ce_f: Tensor | None = None
    ce_a: Tensor | None = None


def cost_delta(p: Tensor, gold: Tensor) -> Tensor:
    """Structured cost: summed L1 distance, in [0, 2T]."""
    return ad.l1_distance(p, gold)


def local_ce(p: Tensor, gold: Tensor) -> Tensor:
    """Position-wise label cross entropy of a row-stochastic matrix against
    one-hot gold, with the probability floored before the log."""
    picked = ad.row_sum(ad.multiply(p, gold))
    return ad.scale(ad.sum_all(ad.log_floored(picked)), -1.0)


def margin_rescaled_loss(delta: Tensor, e_f: Tensor, e_gold: Tensor, truncate: bool) -> Tensor:
    h = delta - e_f + e_gold
    return ad.hinge(h) if truncate else h


def perceptron_loss(e_a: Tensor, e_gold: Tensor, truncate: bool) -> Tensor:
    h = e_gold - e_a
    return ad.hinge(h) if truncate else h


def _need(item: StepItem, field: str) -> Tensor:
    value = getattr(item, field)
    if value is None:
        raise ValueError(f"step item lacks required piece {field!r}")
    return value


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def energy_step_loss(items: list[StepItem], cfg: LossConfig) -> Tensor:
    """Batch loss minimized w.r.t. the energy parameters."""
    if not cfg.needs_energy:
        raise ValueError("local-ce mode trains no energy function")
    terms = []
    for it in items:
        if cfg.needs_cost_net:
            terms.append(margin_rescaled_loss(_need(it, "delta"), _need(it, "e_f"),
                                              _need(it, "e_gold"), cfg.truncate_energy_step))
        if cfg.mode in ("perceptron", "compound"):
            p = perceptron_loss(_need(it, "e_a"), _need(it, "e_gold"),
                                cfg.truncate_energy_step)
            terms.append(ad.scale(p, cfg.lambda_weight) if cfg.mode == "compound" else p)
    return _total(terms)


def inference_step_objective(items: list[StepItem], cfg: LossConfig) -> Tensor:
    """Batch objective maximized w.r.t. both inference nets.

    Without truncation the gold-energy terms are constants for the nets and
    are dropped.  With ``truncate_inference_step`` they stay inside the
    hinge, which can zero out all gradient to the nets once the energy side
    wins the race.  The cross-entropy stabilizer is subtracted and never
    truncated; it anchors the test-time net when one is trained, otherwise
    the cost-augmented net that will later be copied into one.  In local-ce
    mode the objective is just the negated cross entropy of the test-time
    net.
    """
    terms = []
    for it in items:
        if cfg.mode == "local-ce":
            terms.append(ad.scale(_need(it, "ce_a"), -1.0))
            continue
        if cfg.needs_cost_net:
            if cfg.truncate_inference_step:
                gain = margin_rescaled_loss(_need(it, "delta"), _need(it, "e_f"),
                                            _need(it, "e_gold"), True)
            else:
                gain = _need(it, "delta") - _need(it, "e_f")
            terms.append(gain)
        if cfg.mode in ("perceptron", "compound"):
            if cfg.truncate_inference_step:
                gain = perceptron_loss(_need(it, "e_a"), _need(it, "e_gold"), True)
            else:
                gain = ad.scale(_need(it, "e_a"), -1.0)
            terms.append(ad.scale(gain, cfg.lambda_weight) if cfg.mode == "compound" else gain)
        if cfg.ce_weight != 0.0:
            # the CE anchor goes to whichever net will serve as the
            # test-time predictor: the cost-augmented net must stay free to
            # favor high-cost outputs whenever a test-time net is trained
            if cfg.needs_test_net:
                terms.append(ad.scale(_need(it, "ce_a"), -cfg.ce_weight))
            else:
                terms.append(ad.scale(_need(it, "ce_f"), -cfg.ce_weight))
    return _total(terms)


def inference_step_loss(items: list[StepItem], cfg: LossConfig) -> Tensor:
    """Negated inference objective, ready for a descent optimizer."""
    return ad.scale(inference_step_objective(items, cfg), -1.0)


def diagnostics(items: list[StepItem]) -> tuple[float, float]:
    """(l0, l1): batch means of the truncated margin bracket and of the raw
    cost-augmented gain, both read off already-built step items."""
    l0_vals, l1_vals = [], []
    for it in items:
        d = _need(it, "delta").item()
        e_f = _need(it, "e_f").item()
        e_gold = _need(it, "e_gold").item()
        l1_vals.append(d - e_f)
        l0_vals.append(max(0.0, d - e_f + e_gold))
    return float(np.mean(l0_vals)), float(np.mean(l1_vals))
