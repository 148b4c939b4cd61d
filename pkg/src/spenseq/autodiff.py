"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: while a ``Tape`` is active, every op appends one record
(backward closure, output node, input nodes, op kind). Records are appended
in execution order, so inputs always precede consumers and a single reverse
sweep computes all adjoints. Ops executed with no active tape just compute
values and return constants; evaluation paths reuse the same code.

Conventions the whole package relies on:
  * everything is float64; scalars are rank-0 arrays;
  * backward closures never mutate their adjoint argument (they may return
    views of it, accumulation always allocates);
  * a fresh tape is built for every forward pass, and a tape can be swept
    at most once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .container import TAG_PARAMS, read_container, write_container

GROUPS = ("energy", "cost_augmented", "test_time")


class OpError(ValueError):
    """Shape or domain violation in a tensor operation."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (no tape, non-scalar loss, reused tape)."""


_active_tape: "Tape | None" = None  # single-threaded by design


class Tensor:
    """Float64 array plus an optional gradient and a handle into the tape
    that produced it. Tensors created outside any tape are constants."""

    __slots__ = ("values", "grad", "tape", "node")

    def __init__(self, values: np.ndarray):
        self.values = values
        self.grad: np.ndarray | None = None
        self.tape: "Tape | None" = None
        self.node: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """Same values, no tape connection (stop-gradient)."""
        return Tensor(self.values)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


class Tape:
    """Ordered op record for one forward pass. Use as a context manager;
    nesting is not supported (one pass at a time)."""

    def __init__(self):
        self._records: list[tuple[Callable, int, tuple[int, ...], str]] = []
        self._n_nodes = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a tape is already active; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _node_for(self, t: Tensor) -> int:
        # Tensors from other tapes (or constants) become fresh leaves here.
        if t.tape is not self:
            t.tape = self
            t.node = self._n_nodes
            self._n_nodes += 1
        return t.node

    def _sweep(self, root: Tensor) -> list:
        if root.values.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {root.values.shape}")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        self._consumed = True
        adjoints: list = [None] * self._n_nodes
        adjoints[root.node] = np.ones((), dtype=np.float64)
        for bwd, out_node, in_nodes, kind in reversed(self._records):
            g = adjoints[out_node]
            if g is None:
                continue
            for node, contrib in zip(in_nodes, bwd(g)):
                if contrib is None:
                    continue
                acc = adjoints[node]
                adjoints[node] = contrib if acc is None else acc + contrib
        return adjoints


def _apply(kind: str, inputs: tuple, out_values: np.ndarray, backward: Callable) -> Tensor:
    t = Tensor(out_values)
    tape = _active_tape
    if tape is not None:
        in_nodes = tuple(tape._node_for(x) for x in inputs)
        t.tape = tape
        t.node = tape._n_nodes
        tape._n_nodes += 1
        tape._records.append((backward, t.node, in_nodes, kind))
    return t


def backward(loss: Tensor, store: "ParamStore", groups: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Writes ``grad`` on parameters of the selected groups only and returns a
    name -> gradient map for them. Parameters outside the selected groups are
    left untouched; this is how gradient blocking between the energy and the
    inference nets is implemented.
    """
    if loss.tape is None:
        raise TapeError("loss is a constant (not produced under an active tape)")
    adjoints = loss.tape._sweep(loss)
    grads: dict[str, np.ndarray] = {}
    for name in store.names(groups):
        p = store.get(name)
        if p.tape is loss.tape and p.node >= 0 and adjoints[p.node] is not None:
            g = adjoints[p.node]
            if g.shape != p.values.shape:
                raise TapeError(f"adjoint shape {g.shape} != parameter shape {p.values.shape} for {name}")
        else:
            g = np.zeros_like(p.values)
        p.grad = g
        grads[name] = g
    return grads


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Adjoints of arbitrary tensors (constants included). Consumes the tape."""
    if loss.tape is None:
        raise TapeError("loss is a constant (not produced under an active tape)")
    adjoints = loss.tape._sweep(loss)
    out = []
    for t in wrt:
        if t.tape is loss.tape and t.node >= 0 and adjoints[t.node] is not None:
            out.append(np.asarray(adjoints[t.node]))
        else:
            out.append(np.zeros_like(t.values))
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _bad(kind: str, msg: str) -> OpError:
    return OpError(f"{kind}: {msg}")


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    # row vector against matrix rows
    if len(sa) == 2 and sb == sa[-1:]:
        return True
    if len(sb) == 2 and sa == sb[-1:]:
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if not _broadcast_ok(av.shape, bv.shape):
        raise _bad("add", f"incompatible shapes {av.shape} and {bv.shape}")
    sa, sb = av.shape, bv.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply("add", (a, b), av + bv, bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if not _broadcast_ok(av.shape, bv.shape):
        raise _bad("subtract", f"incompatible shapes {av.shape} and {bv.shape}")
    sa, sb = av.shape, bv.shape

    def bwd(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _apply("subtract", (a, b), av - bv, bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if not _broadcast_ok(av.shape, bv.shape):
        raise _bad("elementwise-multiply", f"incompatible shapes {av.shape} and {bv.shape}")
    sa, sb = av.shape, bv.shape

    def bwd(g):
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return _apply("elementwise-multiply", (a, b), av * bv, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim == 1 and bv.ndim == 1:
        raise _bad("matrix-multiply", "both inputs are vectors; use dot")
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise _bad("matrix-multiply", f"rank must be 1 or 2, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise _bad("matrix-multiply", f"inner dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    if av.ndim == 2 and bv.ndim == 2:
        def bwd(g):
            return g @ bv.T, av.T @ g
    elif av.ndim == 1:  # (n,) @ (n,k) -> (k,)
        def bwd(g):
            return bv @ g, np.outer(av, g)
    else:  # (m,n) @ (n,) -> (m,)
        def bwd(g):
            return np.outer(g, bv), av.T @ g

    return _apply("matrix-multiply", (a, b), out, bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise _bad("dot", f"wants two equal-length vectors, got {av.shape} and {bv.shape}")

    def bwd(g):
        return g * bv, g * av

    return _apply("dot", (a, b), np.asarray(av @ bv), bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise _bad("concat-last-axis", "empty input list")
    vals = [p.values for p in parts]
    nd = vals[0].ndim
    if nd not in (1, 2) or any(v.ndim != nd for v in vals):
        raise _bad("concat-last-axis", f"mixed or unsupported ranks {[v.shape for v in vals]}")
    if nd == 2 and any(v.shape[0] != vals[0].shape[0] for v in vals):
        raise _bad("concat-last-axis", f"leading dims differ: {[v.shape for v in vals]}")
    widths = [v.shape[-1] for v in vals]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.array_split(g, splits, axis=-1))

    return _apply("concat-last-axis", tuple(parts), np.concatenate(vals, axis=-1), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise _bad("concat-rows", "empty input list")
    vals = [p.values for p in parts]
    if any(v.ndim != 2 for v in vals) or any(v.shape[1] != vals[0].shape[1] for v in vals):
        raise _bad("concat-rows", f"wants 2-D inputs with equal columns, got {[v.shape for v in vals]}")
    heights = [v.shape[0] for v in vals]
    splits = np.cumsum(heights)[:-1]

    def bwd(g):
        return tuple(np.array_split(g, splits, axis=0))

    return _apply("concat-rows", tuple(parts), np.concatenate(vals, axis=0), bwd)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise _bad("stack-rows", "empty input list")
    vals = [p.values for p in parts]
    if any(v.ndim != 1 for v in vals) or any(v.shape != vals[0].shape for v in vals):
        raise _bad("stack-rows", f"wants equal-length vectors, got {[v.shape for v in vals]}")

    def bwd(g):
        return tuple(g[i] for i in range(len(vals)))

    return _apply("stack-rows", tuple(parts), np.stack(vals, axis=0), bwd)


def row(a: Tensor, index: int) -> Tensor:
    av = a.values
    if av.ndim != 2:
        raise _bad("row", f"wants a 2-D input, got {av.shape}")
    if not 0 <= index < av.shape[0]:
        raise _bad("row", f"index {index} out of range for {av.shape}")

    def bwd(g):
        out = np.zeros(av.shape)
        out[index] = g
        return (out,)

    return _apply("row", (a,), av[index], bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    av = a.values
    if av.ndim not in (1, 2):
        raise _bad("slice-rows", f"wants rank 1 or 2, got {av.shape}")
    if not 0 <= start <= stop <= av.shape[0]:
        raise _bad("slice-rows", f"range [{start}, {stop}) out of bounds for {av.shape}")

    def bwd(g):
        out = np.zeros(av.shape)
        out[start:stop] = g
        return (out,)

    return _apply("slice-rows", (a,), av[start:stop], bwd)


def row_softmax(a: Tensor) -> Tensor:
    av = a.values
    if av.ndim not in (1, 2):
        raise _bad("row-softmax", f"wants rank 1 or 2, got {av.shape}")
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _apply("row-softmax", (a,), out, bwd)


def row_sum(a: Tensor) -> Tensor:
    av = a.values
    if av.ndim != 2:
        raise _bad("row-sum", f"wants a 2-D input, got {av.shape}")
    k = av.shape[1]

    def bwd(g):
        return (np.repeat(g[:, None], k, axis=1),)

    return _apply("row-sum", (a,), av.sum(axis=1), bwd)


def log(a: Tensor) -> Tensor:
    av = a.values
    if av.size and av.min() <= 0.0:
        raise _bad("log", f"non-positive input (min {av.min() if av.size else 'n/a'})")

    def bwd(g):
        return (g / av,)

    return _apply("log", (a,), np.log(av), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return _apply("exp", (a,), out, bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _apply("tanh", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    av = a.values
    e = np.exp(-np.abs(av))  # stable for large |x|
    out = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _apply("sigmoid", (a,), out, bwd)


def hinge(a: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at x == 0."""
    av = a.values
    mask = av > 0

    def bwd(g):
        return (g * mask,)

    return _apply("hinge", (a,), np.maximum(av, 0.0), bwd)


def sum_all(a: Tensor) -> Tensor:
    av = a.values

    def bwd(g):
        return (np.full(av.shape, float(g)),)

    return _apply("sum", (a,), np.asarray(av.sum()), bwd)


def mean_all(a: Tensor) -> Tensor:
    av = a.values
    if av.size == 0:
        raise _bad("mean", "empty input")
    n = av.size

    def bwd(g):
        return (np.full(av.shape, float(g) / n),)

    return _apply("mean", (a,), np.asarray(av.mean()), bwd)


def scale(a: Tensor, coeff: float) -> Tensor:
    c = float(coeff)

    def bwd(g):
        return (g * c,)

    return _apply("scalar-multiply", (a,), a.values * c, bwd)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences; subgradient uses sign, 0 at ties."""
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise _bad("L1-distance", f"shapes differ: {av.shape} vs {bv.shape}")
    s = np.sign(av - bv)

    def bwd(g):
        return g * s, -g * s

    return _apply("L1-distance", (a, b), np.asarray(np.abs(av - bv).sum()), bwd)


def embedding(table: Tensor, indices: Sequence[int]) -> Tensor:
    tv = table.values
    if tv.ndim != 2:
        raise _bad("embedding-lookup", f"table must be 2-D, got {tv.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise _bad("embedding-lookup", f"indices must be a non-empty 1-D sequence, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= tv.shape[0]:
        raise _bad("embedding-lookup", f"index out of range for table with {tv.shape[0]} rows")

    def bwd(g):
        out = np.zeros(tv.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _apply("embedding-lookup", (table,), tv[idx], bwd)


def log_floored(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)) composed from hinge/add/log."""
    return log(add(hinge(subtract(a, constant(floor))), constant(floor)))


_DISPATCH: dict[str, Callable] = {
    "add": lambda inputs, attrs: add(*inputs),
    "subtract": lambda inputs, attrs: subtract(*inputs),
    "elementwise-multiply": lambda inputs, attrs: multiply(*inputs),
    "matrix-multiply": lambda inputs, attrs: matmul(*inputs),
    "concat-last-axis": lambda inputs, attrs: concat_last(inputs),
    "concat-rows": lambda inputs, attrs: concat_rows(inputs),
    "stack-rows": lambda inputs, attrs: stack_rows(inputs),
    "row": lambda inputs, attrs: row(inputs[0], attrs["index"]),
    "slice-rows": lambda inputs, attrs: slice_rows(inputs[0], attrs["start"], attrs["stop"]),
    "row-softmax": lambda inputs, attrs: row_softmax(inputs[0]),
    "row-sum": lambda inputs, attrs: row_sum(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "hinge": lambda inputs, attrs: hinge(inputs[0]),
    "sum": lambda inputs, attrs: sum_all(inputs[0]),
    "mean": lambda inputs, attrs: mean_all(inputs[0]),
    "dot": lambda inputs, attrs: dot(*inputs),
    "scalar-multiply": lambda inputs, attrs: scale(inputs[0], attrs["coeff"]),
    "L1-distance": lambda inputs, attrs: l1_distance(*inputs),
    "embedding-lookup": lambda inputs, attrs: embedding(inputs[0], attrs["indices"]),
}


def forward(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Uniform entry point: execute one op by kind name (and record it if a
    tape is active). The named helpers are the fast path; this is the
    contract surface and what generic tests drive."""
    if kind not in _DISPATCH:
        raise OpError(f"unknown op kind {kind!r}")
    return _DISPATCH[kind](tuple(inputs), attrs)


OP_KINDS = tuple(_DISPATCH)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors partitioned into the three disjoint
    optimization groups, plus per-parameter optimizer slots."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._group_of: dict[str, str] = {}
        self.opt_state: dict[str, dict] = {}

    def add(self, name: str, values: np.ndarray, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r} (want one of {GROUPS})")
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if "/" in name:
            raise ValueError(f"parameter name {name!r} may not contain '/'")
        t = Tensor(np.array(values, dtype=np.float64))
        self._tensors[name] = t
        self._group_of[name] = group
        return t

    def get(self, name: str) -> Tensor:
        return self._tensors[name]

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    def names(self, groups: Iterable[str] | None = None) -> list[str]:
        if groups is None:
            return list(self._tensors)
        wanted = set(groups)
        unknown = wanted - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        return [n for n in self._tensors if self._group_of[n] in wanted]

    def __len__(self) -> int:
        return len(self._tensors)

    def n_values(self, groups: Iterable[str] | None = None) -> int:
        return sum(self._tensors[n].values.size for n in self.names(groups))

    def zero_grads(self, groups: Iterable[str] | None = None) -> None:
        for n in self.names(groups):
            self._tensors[n].grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self._tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            t = self._tensors[n]
            if t.values.shape != v.shape:
                raise ValueError(f"snapshot shape mismatch for {n}: {v.shape} vs {t.values.shape}")
            t.values = v.copy()

    def save(self, path: str) -> None:
        write_container(path, TAG_PARAMS,
                        ((f"{self._group_of[n]}/{n}", t.values) for n, t in self._tensors.items()))

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        store = cls()
        for full_name, values in read_container(path, TAG_PARAMS):
            group, _, name = full_name.partition("/")
            if not name:
                raise ValueError(f"{path}: entry {full_name!r} lacks a group prefix")
            store.add(name, values, group)
        return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckRow:
    name: str
    max_abs_diff: float
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def worst_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    def __str__(self):
        lines = [f"{'param':<32} {'max|a-n|':>12} {'rel err':>12}  status"]
        for r in self.rows:
            lines.append(f"{r.name:<32} {r.max_abs_diff:>12.3e} {r.max_rel_err:>12.3e}  "
                         f"{'ok' if r.ok else 'FAIL'}")
        return "\n".join(lines)


_ABS_FALLBACK = 1e-7


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore,
               epsilon: float = 1e-5, tol: float = 1e-4,
               groups: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic scalar-valued function of the store. An
    entry passes when |a - n| <= 1e-7 (absolute fallback near zero) or the
    relative error |a - n| / max(|a|, |n|) is within ``tol``.
    """
    names = store.names(groups)
    with Tape():
        loss = f(store)
    if loss.values.shape != ():
        raise TapeError(f"grad_check wants a scalar-valued f, got shape {loss.values.shape}")
    if loss.tape is not None:
        analytic = backward(loss, store, groups)
    else:  # f never touched the parameters; all gradients are zero
        analytic = {n: np.zeros_like(store.get(n).values) for n in names}

    rows = []
    for name in names:
        p = store.get(name)
        a = analytic[name]
        flat = p.values.reshape(-1)
        n_grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(f(store).values)
            flat[i] = orig - epsilon
            down = float(f(store).values)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(f"grad_check: non-finite evaluation while perturbing {name}[{i}]")
            n_grad[i] = (up - down) / (2.0 * epsilon)
        n_grad = n_grad.reshape(p.values.shape)
        diff = np.abs(a - n_grad)
        denom = np.maximum(np.abs(a), np.abs(n_grad))
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
        ok_mask = (diff <= _ABS_FALLBACK) | (rel <= tol)
        reported = np.where(diff <= _ABS_FALLBACK, 0.0, rel)
        rows.append(GradCheckRow(name=name,
                                 max_abs_diff=float(diff.max()) if diff.size else 0.0,
                                 max_rel_err=float(reported.max()) if reported.size else 0.0,
                                 ok=bool(ok_mask.all())))
    return GradCheckReport(rows)
