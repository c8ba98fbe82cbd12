"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node on a :class:`Tape`.  ``Tape.backward`` walks the
recorded nodes once, newest first, and writes parameter gradients into a
:class:`ParameterStore`.

Shape rules (no general broadcasting):

* ``matmul``: ``(..., n, k) @ (k, m)`` or ``(..., n, k) @ (..., k, m)`` with equal
  leading dims.
* ``add`` / ``mul``: equal shapes, or the right operand's shape equals the trailing
  dims of the left operand (row bias / row gain).
* row ops (``softmax_rows``, ``masked_softmax_rows``, ``layernorm_rows``) act on
  the last axis.
* ``nll`` takes ``(N, K)`` logits and ``N`` integer targets, returns the mean
  negative log softmax probability of the targets as a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30


class NumericsError(Exception):
    """Raised when an operation produces NaN/Inf or receives bad input."""


class ShapeError(NumericsError):
    pass


class Tensor:
    __slots__ = ("data", "name", "_parents", "_backward", "_needs_grad", "_index")

    def __init__(self, data: np.ndarray, name: str | None = None):
        self.data = data
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._needs_grad = name is not None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class ParameterStore:
    """Named float64 parameters plus same-shaped gradient buffers."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.params.items()})

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"non-finite output in {op}")


def _row_broadcast_ok(left: tuple[int, ...], right: tuple[int, ...]) -> bool:
    return len(right) <= len(left) and left[len(left) - len(right):] == right


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


class Tape:
    """Records primitive operations for a single reverse sweep."""

    def __init__(self, store: ParameterStore | None = None):
        self.store = store
        self.nodes: list[Tensor] = []
        self.visits = 0

    # -- leaves -----------------------------------------------------------
    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64))

    def param(self, name: str) -> Tensor:
        if self.store is None:
            raise NumericsError("tape has no parameter store")
        return Tensor(self.store.params[name], name=name)

    def _record(self, op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        _check_finite(op, out)
        t = Tensor(out)
        if any(p._needs_grad for p in parents):
            t._parents = parents
            t._backward = backward
            t._needs_grad = True
            t._index = len(self.nodes)
            self.nodes.append(t)
        return t

    # -- primitives -------------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        ok = len(sa) >= 2 and len(sb) >= 2 and sa[-1] == sb[-2]
        if ok and len(sb) > 2:
            ok = sa[:-2] == sb[:-2]
        if not ok:
            raise ShapeError(f"matmul shape mismatch: {sa} vs {sb}")
        out = a.data @ b.data

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            if b.data.ndim == 2:
                a2 = a.data.reshape(-1, sa[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            return ga, gb

        return self._record("matmul", out, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape and not _row_broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = a.data + b.data
        return self._record("add", out, (a, b), lambda g: (g, _reduce_to(g, b.shape)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
        return self._record("sub", a.data - b.data, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape and not _row_broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        out = a.data * b.data
        return self._record(
            "mul", out, (a, b), lambda g: (g * b.data, _reduce_to(g * a.data, b.shape))
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._record("scale", a.data * c, (a,), lambda g: (g * c,))

    def relu(self, a: Tensor) -> Tensor:
        pos = a.data > 0
        return self._record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))

    def softmax_rows(self, a: Tensor) -> Tensor:
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._record("softmax-rows", p, (a,), backward)

    def masked_softmax_rows(self, a: Tensor, mask: np.ndarray) -> Tensor:
        """Softmax over entries where ``mask`` is true; masked entries get exactly 0."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"masked-softmax-rows mask mismatch: {a.shape} vs {mask.shape}")
        if not mask.any(axis=-1).all():
            raise NumericsError("masked-softmax-rows: a row has every entry masked")
        filled = np.where(mask, a.data, MASK_FILL)
        shifted = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._record("masked-softmax-rows", p, (a,), backward)

    def layernorm_rows(self, a: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalise the last axis to zero mean and unit variance (no affine)."""
        n = a.shape[-1]
        mu = a.data.mean(axis=-1, keepdims=True)
        xc = a.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).sum(axis=-1, keepdims=True) / n
            return (inv * (g - gm - y * gy),)

        return self._record("layernorm-rows", y, (a,), backward)

    def concat(self, parts: Sequence[Tensor], axis: int) -> Tensor:
        ref = parts[0].shape
        nd = len(ref)
        ax = axis % nd
        for p in parts[1:]:
            if len(p.shape) != nd or any(
                p.shape[i] != ref[i] for i in range(nd) if i != ax
            ):
                raise ShapeError(f"concat shape mismatch: {ref} vs {p.shape}")
        out = np.concatenate([p.data for p in parts], axis=ax)
        bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

        def backward(g):
            return tuple(
                np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                for i in range(len(parts))
            )

        return self._record("concat", out, tuple(parts), backward)

    def slice(self, a: Tensor, axis: int, start: int, stop: int) -> Tensor:
        ax = axis % a.data.ndim
        if not 0 <= start < stop <= a.shape[ax]:
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis {ax} of {a.shape}")
        index = [slice(None)] * a.data.ndim
        index[ax] = slice(start, stop)
        index = tuple(index)
        out = a.data[index].copy()

        def backward(g):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        return self._record("slice", out, (a,), backward)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        shape = tuple(shape)
        if int(np.prod(shape)) != a.data.size:
            raise ShapeError(f"reshape size mismatch: {a.shape} vs {shape}")
        src = a.shape
        return self._record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))

    def transpose(self, a: Tensor, axes: tuple[int, ...]) -> Tensor:
        inverse = tuple(np.argsort(axes))
        out = np.ascontiguousarray(np.transpose(a.data, axes))
        return self._record("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))

    def tile(self, a: Tensor, n: int) -> Tensor:
        """Stack ``n`` copies of ``a`` along a new leading axis."""
        out = np.broadcast_to(a.data, (n,) + a.shape).copy()
        return self._record("tile", out, (a,), lambda g: (g.sum(axis=0),))

    def mean_rows(self, a: Tensor) -> Tensor:
        """Mean over the leading axis."""
        n = a.shape[0]
        out = a.data.mean(axis=0)
        return self._record(
            "mean-rows", out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
        )

    def mean(self, a: Tensor) -> Tensor:
        size = a.data.size
        out = np.asarray(a.data.mean())
        return self._record("mean", out, (a,), lambda g: (np.full(a.shape, float(g) / size),))

    def sum_last(self, a: Tensor) -> Tensor:
        out = a.data.sum(axis=-1)
        return self._record("sum-last", out, (a,), lambda g: (np.repeat(g[..., None], a.shape[-1], axis=-1),))

    def nll(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        if logits.data.ndim != 2:
            raise ShapeError(f"neg-log-likelihood expects (N, K) logits, got {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64)
        n, k = logits.shape
        if targets.shape != (n,):
            raise ShapeError(f"neg-log-likelihood target mismatch: {logits.shape} vs {targets.shape}")
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        rows = np.arange(n)
        out = np.asarray(-logp[rows, targets].mean())

        def backward(g):
            grad = np.exp(logp)
            grad[rows, targets] -= 1.0
            return (grad * (float(g) / n),)

        return self._record("neg-log-likelihood", out, (logits,), backward)

    def proto_distances(self, z: Tensor, protos: np.ndarray, kind: str) -> Tensor:
        """Distances from each row of ``z`` (N, D) to constant prototypes (N, K, D)."""
        protos = np.asarray(protos, dtype=np.float64)
        if protos.ndim != 3 or protos.shape[0] != z.shape[0] or protos.shape[2] != z.shape[1]:
            raise ShapeError(f"proto-distances shape mismatch: {z.shape} vs {protos.shape}")
        zd = z.data[:, None, :]
        if kind == "squared-euclidean":
            diff = zd - protos
            out = (diff * diff).sum(axis=-1)

            def backward(g):
                return ((2.0 * g[..., None] * diff).sum(axis=1),)

        elif kind == "cosine":
            zn = np.linalg.norm(z.data, axis=1)
            cn = np.linalg.norm(protos, axis=2)
            if np.any(zn == 0) or np.any(cn == 0):
                raise NumericsError("proto-distances: cosine distance with a zero vector")
            dots = (zd * protos).sum(axis=-1)
            cos = dots / (zn[:, None] * cn)
            out = 1.0 - cos

            def backward(g):
                # d cos / dz = c/(|z||c|) - cos * z/|z|^2
                dz = protos / (zn[:, None, None] * cn[..., None]) - cos[..., None] * (
                    z.data[:, None, :] / (zn[:, None, None] ** 2)
                )
                return (-(g[..., None] * dz).sum(axis=1),)

        else:
            raise ValueError(f"unknown distance kind {kind!r}")
        return self._record("proto-distances", out, (z,), backward)

    # -- reverse sweep ----------------------------------------------------
    def backward(self, out: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(out)/d(param) into the store; unreachable params get zeros."""
        if out.data.size != 1 or out.data.ndim != 0:
            raise NumericsError(f"backward needs a scalar output, got shape {out.shape}")
        store = self.store
        if store is not None:
            store.zero_grad()
        if not out._needs_grad:
            return dict(store.grads) if store is not None else {}
        grads: dict[int, np.ndarray] = {id(out): np.ones((), dtype=np.float64)}
        self.visits = 0
        for node in reversed(self.nodes[: out._index + 1]):
            g = grads.pop(id(node), None)
            self.visits += 1
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._needs_grad:
                    continue
                if parent.name is not None:
                    if store is not None:
                        store.grads[parent.name] += pg
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return dict(store.grads) if store is not None else {}


@dataclass
class GradientCheck:
    """Per-parameter comparison of analytic and central-difference gradients."""

    entries: dict[str, tuple[np.ndarray, np.ndarray, float]] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def max_rel_error(self) -> float:
        return max((e[2] for e in self.entries.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < floor:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], float],
    params: ParameterStore,
    analytic: dict[str, np.ndarray],
    step: float = 1e-3,
    tolerance: float = 1e-3,
    names: Iterable[str] | None = None,
) -> GradientCheck:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|)``; a
    parameter whose gradients are both below 1e-8 everywhere counts as exact.
    ``params`` is perturbed in place and restored.
    """
    report = GradientCheck(tolerance=tolerance)
    for name in names if names is not None else params.names():
        value = params.params[name]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        a = np.asarray(analytic[name], dtype=np.float64)
        report.entries[name] = (a.copy(), numeric, relative_error(a, numeric))
    return report
