"""Inference networks mapping token sequences to relaxed label matrices.

Two networks are trained jointly: a cost-augmented net used during training
and a test-time net used for prediction.  Three parameterizations couple
them with decreasing amounts of dedicated capacity:

* ``separated``: two full networks of identical shape, no sharing.
* ``shared``: one encoder trunk with two affine output heads.  The trunk
  belongs to the test-time side; the extra head is all the cost-augmented
  net adds.
* ``stacked``: the cost-augmented net owns no encoder at all.  At each
  position it reads the test-time distribution (as a constant) next to the
  gold one-hot row and maps the pair through a single affine layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import BiEncoder, encode, init_bi_encoder

PARAMETERIZATIONS = ("separated", "shared", "stacked")


@dataclass
class AffineHead:
    w: Tensor  # (in_dim, n_labels)
    b: Tensor  # (n_labels,)


@dataclass
class InfNet:
    kind: str
    n_labels: int
    a_enc: BiEncoder
    a_head: AffineHead
    f_enc: BiEncoder | None = None    # separated only
    f_head: AffineHead | None = None  # separated and shared
    combine: AffineHead | None = None  # stacked: acts on [test dist; gold]


def init_head(store: ParamStore, prefix: str, group: str, in_dim: int, n_labels: int,
              rng: np.random.Generator) -> AffineHead:
    scale = 1.0 / np.sqrt(in_dim)
    w = store.add(prefix + "_w", rng.uniform(-scale, scale, size=(in_dim, n_labels)), group)
    b = store.add(prefix + "_b", np.zeros(n_labels), group)
    return AffineHead(w=w, b=b)


def init_infnet(store: ParamStore, rng: np.random.Generator, *, kind: str, vocab_size: int,
                n_labels: int, embed_dim: int, hidden: int,
                emb_init: np.ndarray | None = None) -> InfNet:
    """Create both inference nets on the store.

    Test-time tensors join group "test_time", cost-augmented-only tensors
    join group "cost_augmented"; the shared trunk counts as test-time
    because prediction cannot run without it.
    """
    if kind not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {kind!r}; choose from {PARAMETERIZATIONS}")
    a_enc = init_bi_encoder(store, "a_enc", "test_time", vocab_size, embed_dim, hidden, rng,
                            emb_init=emb_init)
    a_head = init_head(store, "a", "test_time", a_enc.out_dim, n_labels, rng)
    net = InfNet(kind=kind, n_labels=n_labels, a_enc=a_enc, a_head=a_head)
    if kind == "separated":
        net.f_enc = init_bi_encoder(store, "f_enc", "cost_augmented", vocab_size, embed_dim,
                                    hidden, rng, emb_init=emb_init)
        net.f_head = init_head(store, "f", "cost_augmented", net.f_enc.out_dim, n_labels, rng)
    elif kind == "shared":
        net.f_head = init_head(store, "f", "cost_augmented", a_enc.out_dim, n_labels, rng)
    else:
        net.combine = init_head(store, "q", "cost_augmented", 2 * n_labels, n_labels, rng)
    return net


def _head_out(feats: Tensor, head: AffineHead) -> Tensor:
    return ad.row_softmax(ad.add(ad.matmul(feats, head.w), head.b))


def infer(tokens: Sequence[int], net: InfNet, *, dropout_keep: float = 1.0,
          rng: np.random.Generator | None = None) -> Tensor:
    """Test-time net: tokens -> row-stochastic (T, L) matrix."""
    feats = encode(tokens, net.a_enc, dropout_keep=dropout_keep, rng=rng)
    return _head_out(feats, net.a_head)


def cost_augmented_infer(tokens: Sequence[int], gold: Tensor, net: InfNet, *,
                         a_out: Tensor | None = None, dropout_keep: float = 1.0,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Cost-augmented net: tokens (+ gold for ``stacked``) -> (T, L) matrix.

    ``a_out`` lets the stacked combiner reuse an already computed test-time
    output; it is detached either way, so test-time parameters never receive
    gradient through this path.
    """
    if net.kind == "separated":
        feats = encode(tokens, net.f_enc, dropout_keep=dropout_keep, rng=rng)
        return _head_out(feats, net.f_head)
    if net.kind == "shared":
        feats = encode(tokens, net.a_enc, dropout_keep=dropout_keep, rng=rng)
        return _head_out(feats, net.f_head)
    if a_out is None:
        a_out = infer(tokens, net, dropout_keep=dropout_keep, rng=rng)
    pair = ad.concat_last([a_out.detach(), gold])
    return _head_out(pair, net.combine)


def discretize(y) -> list[int]:
    """Hard labels from a relaxed (T, L) matrix; ties pick the lowest index."""
    values = y.values if isinstance(y, Tensor) else np.asarray(y)
    return [int(i) for i in values.argmax(axis=1)]


@dataclass(frozen=True)
class ParamCounts:
    """``total`` tallies every stored scalar, ``inference`` only the tensors
    consulted at test time."""
    total: int
    inference: int
    by_group: dict


def count_params(store: ParamStore) -> ParamCounts:
    by_group = {g: 0 for g in ad.GROUPS}
    for name in store.names():
        by_group[store.group_of(name)] += store.get(name).values.size
    return ParamCounts(total=sum(by_group.values()), inference=by_group["test_time"],
                       by_group=by_group)
