"""End-to-end finite-difference verification of every gradient path.

Each component builds a tiny fresh system (hidden size 4, sequences of at
most 5 tokens) and compares analytic gradients of a scalar probe against
central differences over every parameter coordinate.  The probes follow the
real computation paths: energies of relaxed label matrices, net outputs
through fixed projections, and the actual step losses.

The stacked cost net is checked only against its own parameters; the path
through the test-time net is blocked by design, so a difference quotient
there would measure exactly the dependence the model discards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .data import one_hot
from .encoder import encode
from .energy import (GlobalEnergyConfig, build_energy_model, chain_energy, global_energy,
                     init_tlm, tlm_energy, total_energy)
from .infnet import cost_augmented_infer, infer, init_infnet
from .objectives import (LossConfig, StepItem, cost_delta, energy_step_loss,
                         inference_step_loss, local_ce)

V, E, H, L = 10, 4, 4, 3
LENGTHS = (4, 3)  # kept at 5 or below so full-coordinate sweeps stay fast
TOLERANCE = 1e-4


@dataclass(frozen=True)
class ComponentCheck:
    name: str
    worst_rel_err: float
    ok: bool


def _examples(rng, relaxed=True):
    out = []
    for t in LENGTHS:
        tokens = [int(w) for w in rng.integers(2, V, size=t)]
        gold = one_hot([int(g) for g in rng.integers(0, L, size=t)], L)
        y = gold
        if relaxed:
            y = ad.row_softmax(ad.constant(rng.normal(size=(t, L)))).values
        out.append((tokens, y, gold))
    return out


def _projection_probe(outputs_fn, projections):
    """Scalar from fixed random projections of a list of (T, L) outputs."""
    total = None
    for out, proj in zip(outputs_fn(), projections):
        term = ad.sum_all(ad.multiply(out, ad.constant(proj)))
        total = term if total is None else ad.add(total, term)
    return total


def _sum(terms):
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def _check(name, store, f, groups, rows):
    report = ad.grad_check(f, store, epsilon=1e-5, tol=TOLERANCE, groups=groups)
    rows.append(ComponentCheck(name=name, worst_rel_err=report.worst_rel_err,
                               ok=report.ok))


def _chain_component(seed, rows):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    model = build_energy_model(store, rng, vocab_size=V, n_labels=L, embed_dim=E,
                               hidden=H)
    data = _examples(rng)

    def f(_):
        return _sum([chain_energy(encode(toks, model.chain.enc), ad.constant(y),
                                  model.chain)
                     for toks, y, _ in data])

    _check("chain-energy", store, f, ("energy",), rows)


def _label_lm_component(seed, rows):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    tlm = init_tlm(store, "tlm_f", n_labels=L, label_embed=3, hidden=H, rng=rng,
                   direction="fwd")
    data = _examples(rng)

    def f(_):
        return _sum([tlm_energy(ad.constant(y), tlm) for _, y, _ in data])

    _check("label-lm-energy", store, f, ("energy",), rows)


def _global_components(seed, rows):
    for variant in ("ge-a", "ge-b", "ge-c"):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        model = build_energy_model(store, rng, vocab_size=V, n_labels=L, embed_dim=E,
                                   hidden=H, global_cfg=GlobalEnergyConfig(variant, 0.8),
                                   tlm_hidden=H, tlm_label_embed=3, tlm_word_embed=3)
        data = _examples(rng)

        def f(_, model=model, data=data):
            return _sum([global_energy(ad.constant(y), model, toks)
                         for toks, y, _ in data])

        _check(f"global-{variant}", store, f, ("energy",), rows)


def _infnet_components(seed, rows):
    for kind in ("separated", "shared", "stacked"):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        net = init_infnet(store, rng, kind=kind, vocab_size=V, n_labels=L,
                          embed_dim=E, hidden=H)
        data = _examples(rng)
        projs = [rng.normal(size=(len(toks), L)) for toks, _, _ in data]

        def a_outputs(data=data, net=net):
            return [infer(toks, net) for toks, _, _ in data]

        def f_outputs(data=data, net=net):
            return [cost_augmented_infer(toks, ad.constant(g), net)
                    for toks, _, g in data]

        if kind == "stacked":
            _check("infnet-stacked-test-net", store,
                   lambda _: _projection_probe(a_outputs, projs), ("test_time",), rows)
            _check("infnet-stacked-cost-net", store,
                   lambda _: _projection_probe(f_outputs, projs), ("cost_augmented",),
                   rows)
        else:
            def f(_, a=a_outputs, fo=f_outputs, projs=projs):
                return ad.add(_projection_probe(a, projs), _projection_probe(fo, projs))

            _check(f"infnet-{kind}", store, f, ("cost_augmented", "test_time"), rows)


def _objective_components(seed, rows):
    modes = (("margin-rescaled", LossConfig(mode="margin-rescaled", ce_weight=1.0)),
             ("perceptron", LossConfig(mode="perceptron", ce_weight=1.0)),
             ("compound", LossConfig(mode="compound", ce_weight=1.0,
                                     lambda_weight=0.7)),
             ("local-ce", LossConfig(mode="local-ce")))
    for name, cfg in modes:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        model = None
        if cfg.needs_energy:
            model = build_energy_model(store, rng, vocab_size=V, n_labels=L,
                                       embed_dim=E, hidden=H)
        net = init_infnet(store, rng, kind="separated", vocab_size=V, n_labels=L,
                          embed_dim=E, hidden=H)
        data = _examples(rng)

        def items(cfg=cfg, model=model, net=net, data=data):
            built = []
            for toks, _, gold_np in data:
                gold = ad.constant(gold_np)
                a_out = infer(toks, net) if cfg.needs_test_net else None
                f_out = cost_augmented_infer(toks, gold, net) if cfg.needs_cost_net else None
                item = StepItem()
                feats = encode(toks, model.chain.enc) if model is not None else None
                if f_out is not None:
                    item.delta = cost_delta(f_out, gold)
                    item.e_f = total_energy(feats, f_out, model, toks)
                    item.ce_f = local_ce(f_out, gold)
                if a_out is not None:
                    if cfg.needs_energy:
                        item.e_a = total_energy(feats, a_out, model, toks)
                    item.ce_a = local_ce(a_out, gold)
                if cfg.needs_energy:
                    item.e_gold = total_energy(feats, gold, model, toks)
                built.append(item)
            return built

        if cfg.needs_energy:
            _check(f"objective-{name}-energy-step", store,
                   lambda _, c=cfg, b=items: energy_step_loss(b(), c), ("energy",), rows)
        _check(f"objective-{name}-inference-step", store,
               lambda _, c=cfg, b=items: inference_step_loss(b(), c),
               ("cost_augmented", "test_time"), rows)


def run_gradcheck(seed: int = 0) -> list[ComponentCheck]:
    """All finite-difference components at the forced tiny dimensions."""
    rows: list[ComponentCheck] = []
    _chain_component(seed, rows)
    _label_lm_component(seed, rows)
    _global_components(seed, rows)
    _infnet_components(seed, rows)
    _objective_components(seed, rows)
    return rows


def format_report(rows: list[ComponentCheck]) -> str:
    lines = [f"{'component':<40} {'worst rel err':>14}  status"]
    for row in rows:
        lines.append(f"{row.name:<40} {row.worst_rel_err:>14.3e}  "
                     f"{'ok' if row.ok else 'FAIL'}")
    return "\n".join(lines)
