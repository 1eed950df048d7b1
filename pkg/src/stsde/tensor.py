"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Ops record themselves on the thread's active tape (use ``with Tape():``) and
``Tape.backward`` replays the recording in reverse. There is no broadcasting
beyond scalars and no in-place mutation: tensors are immutable values, and a
fresh tape is built for every forward pass. Besides the generic ops, this
module carries the layout-specific kernels the score network needs; they all
follow the same recording protocol so every one of them is checkable with
``gradient_check``.

Array layout conventions used by the network kernels:
  [B, C, N, T]  batch, channels, graph nodes, time steps
  [B, T, E]     per-step embedding rows
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class NotRecorded(ValueError):
    pass


class EmptyTensor(ValueError):
    pass


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """Immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for freshly computed op outputs: no copy.
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:  # 0-d arrays count as contiguous
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        t.tape = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise NotScalar(f"item() on shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("shape", "backfn")

    def __init__(self, shape, backfn):
        self.shape = shape
        self.backfn = backfn


class Tape:
    """Append-only op recording; activate with ``with``, then ``backward``.

    ``nodes`` grows as recorded ops execute; ``grads`` maps the node_id of
    every watched leaf to its gradient after ``backward`` ran.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tape = None
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Mark ``t`` as a differentiable leaf of this tape."""
        if t.tape is self and t.node_id is not None:
            return t
        t.tape = self
        t.node_id = self._append(t.data.shape, None)
        return t

    def _append(self, shape, backfn) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node(shape, backfn))
        return nid

    def backward(self, root: Tensor) -> None:
        """Fill ``grads`` for every watched leaf by a reverse sweep from root."""
        if root.tape is not self or root.node_id is None:
            raise NotRecorded("backward root was not recorded on this tape")
        if root.data.shape != ():
            raise NotScalar(f"backward needs a scalar root, got shape {root.data.shape}")
        self.grads = {}
        acc: dict[int, np.ndarray] = {root.node_id: np.ones((), dtype=np.float64)}
        for nid in range(root.node_id, -1, -1):
            g = acc.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backfn is None:
                self.grads[nid] = Tensor._wrap(g)
                continue
            for iid, ig in node.backfn(g):
                if iid in acc:
                    acc[iid] = acc[iid] + ig
                else:
                    acc[iid] = ig
        # Leaves the root does not depend on get explicit zeros.
        for nid, node in enumerate(self.nodes):
            if node.backfn is None and nid not in self.grads:
                self.grads[nid] = Tensor._wrap(np.zeros(node.shape))

    def grad(self, t: Tensor) -> Tensor:
        if t.tape is not self or t.node_id is None:
            raise NotRecorded("tensor was not watched on this tape")
        return self.grads[t.node_id]


_Pull = tuple[Tensor, Callable[[np.ndarray], np.ndarray]]


def _emit(out: np.ndarray, pulls: Sequence[_Pull]) -> Tensor:
    """Wrap an op result, recording a backward closure if any input is live."""
    t = Tensor._wrap(out)
    tape = _active_tape()
    if tape is None:
        return t
    tracked = [(p.node_id, fn) for p, fn in pulls if p.tape is tape and p.node_id is not None]
    if not tracked:
        return t
    def backfn(g: np.ndarray):
        return [(nid, fn(g)) for nid, fn in tracked]
    t.tape = tape
    t.node_id = tape._append(t.data.shape, backfn)
    return t


# ---------------------------------------------------------------------------
# generic ops


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """Componentwise add/sub/mul of equal-shape tensors, or scale by a constant."""
    if op_kind not in ("add", "sub", "mul", "scale"):
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if op_kind == "scale" and isinstance(b, Tensor):
        raise ShapeMismatch("scale expects a plain scalar, not a Tensor")
    if isinstance(b, Tensor):
        if b.data.shape != a.data.shape:
            raise ShapeMismatch(f"elementwise {op_kind}: {a.data.shape} vs {b.data.shape}")
        bd = b.data
    else:
        bd = float(b)
    ad = a.data
    if op_kind == "add":
        out = ad + bd
        pulls: list[_Pull] = [(a, lambda g: g)]
        if isinstance(b, Tensor):
            pulls.append((b, lambda g: g))
    elif op_kind == "sub":
        out = ad - bd
        pulls = [(a, lambda g: g)]
        if isinstance(b, Tensor):
            pulls.append((b, lambda g: -g))
    else:  # mul / scale
        out = ad * bd
        pulls = [(a, lambda g: g * bd)]
        if isinstance(b, Tensor):
            pulls.append((b, lambda g: g * ad))
    return _emit(out, pulls)


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return elementwise("scale", a, c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _emit(out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def _conv_cols(x: np.ndarray, k: int) -> np.ndarray:
    # x [M, C, T] -> im2col [M*T, C*k] with zero same-padding.
    m, c, t = x.shape
    p = (k - 1) // 2
    xp = np.zeros((m, c, t + 2 * p))
    xp[:, :, p:p + t] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # [M, C, T, k]
    return win.transpose(0, 2, 1, 3).reshape(m * t, c * k)


def _conv_core(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    # Same-padded correlation along the last axis: [M,C,T] x [O,C,k] -> [M,O,T].
    m, c, t = x.shape
    o, _, k = kern.shape
    y = _conv_cols(x, k) @ kern.reshape(o, c * k).T
    return np.ascontiguousarray(y.reshape(m, t, o).transpose(0, 2, 1))


def _conv_grad_kernel(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    m, c, t = x.shape
    o = g.shape[1]
    cols = _conv_cols(x, k)  # [M*T, C*k]
    gf = g.transpose(0, 2, 1).reshape(m * t, o)
    return (gf.T @ cols).reshape(o, c, k)


def _conv_grad_input(g: np.ndarray, kern: np.ndarray) -> np.ndarray:
    # Gradient flows through the transposed, time-flipped kernel.
    return _conv_core(g, np.ascontiguousarray(kern.transpose(1, 0, 2)[:, :, ::-1]))


def _check_kernel(kern: np.ndarray, c_in: int, op: str) -> None:
    if kern.ndim != 3 or kern.shape[1] != c_in:
        raise ShapeMismatch(f"{op}: kernel {kern.shape} does not match {c_in} input channels")
    if kern.shape[2] % 2 != 1:
        raise ShapeMismatch(f"{op}: kernel width must be odd for same padding, got {kern.shape[2]}")


def temporal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded 1-d convolution along time: [B,C,T] x [C',C,k] -> [B,C',T]."""
    if x.data.ndim != 3:
        raise ShapeMismatch(f"temporal_conv1d expects [B,C,T], got {x.data.shape}")
    _check_kernel(kernel.data, x.data.shape[1], "temporal_conv1d")
    xd, kd = x.data, kernel.data
    out = _conv_core(xd, kd)
    return _emit(out, [
        (x, lambda g: _conv_grad_input(g, kd)),
        (kernel, lambda g: _conv_grad_kernel(xd, g, kd.shape[2])),
    ])


def nonlinearity(x: Tensor, kind: str = "silu") -> Tensor:
    """Smooth activation; only silu(x) = x*sigmoid(x) is provided."""
    if kind != "silu":
        raise ValueError(f"unknown nonlinearity {kind!r}")
    xd = x.data
    # exp of -|x| never overflows, so huge inputs stay finite
    z = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = xd * sig
    return _emit(out, [(x, lambda g: g * (sig * (1.0 + xd * (1.0 - sig))))])


def silu(x: Tensor) -> Tensor:
    return nonlinearity(x, "silu")


def mean_sq(x: Tensor) -> Tensor:
    """Mean of squared entries, the scalar loss reduction."""
    if x.data.size == 0:
        raise EmptyTensor("mean_sq of an empty tensor")
    xd = x.data
    out = np.mean(xd * xd)
    n = xd.size
    return _emit(np.asarray(out), [(x, lambda g: g * (2.0 / n) * xd)])


def backward(root: Tensor) -> None:
    if root.tape is None or root.node_id is None:
        raise NotRecorded("backward root was not recorded on any tape")
    root.tape.backward(root)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of f at x and central differences."""
    if not (1e-7 < eps < 1e-3):
        raise ValueError(f"eps {eps} outside (1e-7, 1e-3)")
    with Tape() as tape:
        xw = Tensor(x.data)
        tape.watch(xw)
        y = f(xw)
        if y.data.shape != ():
            raise NotScalar(f"gradient_check needs a scalar-valued f, got {y.data.shape}")
        tape.backward(y)
        analytic = tape.grad(xw).data
    flat = x.data.ravel()
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        bump = np.zeros(flat.size)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.data.shape))).data
        lo = f(Tensor((flat - bump).reshape(x.data.shape))).data
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))


# ---------------------------------------------------------------------------
# network kernels on the [B, C, N, T] layout


def _want4(x: Tensor, op: str) -> np.ndarray:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"{op} expects [B,C,N,T], got {x.data.shape}")
    return x.data


def conv_time(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded temporal convolution on [B,C,N,T], kernel [C',C,k]."""
    xd = _want4(x, "conv_time")
    _check_kernel(kernel.data, xd.shape[1], "conv_time")
    b, c, n, t = xd.shape
    kd = kernel.data
    o = kd.shape[0]
    flat = np.ascontiguousarray(xd.transpose(0, 2, 1, 3)).reshape(b * n, c, t)
    y = _conv_core(flat, kd).reshape(b, n, o, t).transpose(0, 2, 1, 3)

    def d_x(g: np.ndarray) -> np.ndarray:
        gf = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b * n, o, t)
        dx = _conv_grad_input(gf, kd).reshape(b, n, c, t)
        return dx.transpose(0, 2, 1, 3)

    def d_k(g: np.ndarray) -> np.ndarray:
        gf = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b * n, o, t)
        return _conv_grad_kernel(flat, gf, kd.shape[2])

    return _emit(np.ascontiguousarray(y), [(x, d_x), (kernel, d_k)])


def channel_mix(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel map on [B,C,N,T]: w [C',C], optional bias [C']."""
    xd = _want4(x, "channel_mix")
    wd = w.data
    if wd.ndim != 2 or wd.shape[1] != xd.shape[1]:
        raise ShapeMismatch(f"channel_mix: w {wd.shape} vs {xd.shape[1]} channels")
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    pulls: list[_Pull] = [
        (x, lambda g: np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3)),
        (w, lambda g: np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))),
    ]
    if b is not None:
        bd = b.data
        if bd.shape != (wd.shape[0],):
            raise ShapeMismatch(f"channel_mix: bias {bd.shape} vs {wd.shape[0]} channels")
        out = out + bd[None, :, None, None]
        pulls.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _emit(np.ascontiguousarray(out), pulls)


def cheb_apply(x: Tensor, basis: np.ndarray) -> Tensor:
    """Stack K fixed node-space operators: [B,C,N,T] x [K,N,N] -> [B,K*C,N,T].

    The basis is a constant (Chebyshev polynomials of the scaled Laplacian);
    gradients flow through x only.
    """
    xd = _want4(x, "cheb_apply")
    bsz, c, n, t = xd.shape
    if basis.ndim != 3 or basis.shape[1] != n or basis.shape[2] != n:
        raise ShapeMismatch(f"cheb_apply: basis {basis.shape} vs {n} nodes")
    k = basis.shape[0]
    y = np.einsum("knm,bcmt->bkcnt", basis, xd, optimize=True).reshape(bsz, k * c, n, t)

    def d_x(g: np.ndarray) -> np.ndarray:
        g5 = g.reshape(bsz, k, c, n, t)
        return np.einsum("knm,bkcnt->bcmt", basis, g5, optimize=True)

    return _emit(np.ascontiguousarray(y), [(x, d_x)])


def row_affine(v: Tensor, scale_c: Tensor, shift_c: Tensor) -> Tensor:
    """v*scale + shift with v [B,C] and learned per-channel scale/shift [C]."""
    vd = v.data
    if vd.ndim != 2:
        raise ShapeMismatch(f"row_affine expects [B,C], got {vd.shape}")
    c = vd.shape[1]
    sd, hd = scale_c.data, shift_c.data
    if sd.shape != (c,) or hd.shape != (c,):
        raise ShapeMismatch(f"row_affine: scale {sd.shape} / shift {hd.shape} vs ({c},)")
    out = vd * sd[None, :] + hd[None, :]
    return _emit(out, [
        (v, lambda g: g * sd[None, :]),
        (scale_c, lambda g: (g * vd).sum(axis=0)),
        (shift_c, lambda g: g.sum(axis=0)),
    ])


def add_channel_vec(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample channel vector [B,C] onto [B,C,N,T]."""
    xd = _want4(x, "add_channel_vec")
    vd = v.data
    if vd.shape != xd.shape[:2]:
        raise ShapeMismatch(f"add_channel_vec: v {vd.shape} vs {xd.shape[:2]}")
    out = xd + vd[:, :, None, None]
    return _emit(out, [(x, lambda g: g), (v, lambda g: g.sum(axis=(2, 3)))])


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias [C] onto [B,C,N,T]."""
    xd = _want4(x, "add_channel_bias")
    bd = b.data
    if bd.shape != (xd.shape[1],):
        raise ShapeMismatch(f"add_channel_bias: b {bd.shape} vs {xd.shape[1]} channels")
    out = xd + bd[None, :, None, None]
    return _emit(out, [(x, lambda g: g), (b, lambda g: g.sum(axis=(0, 2, 3)))])


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """View x with a new shape of the same total size."""
    xd = x.data
    if int(np.prod(shape)) != xd.size:
        raise ShapeMismatch(f"reshape: {xd.shape} -> {shape} changes the element count")
    out = xd.reshape(shape)
    return _emit(out, [(x, lambda g: g.reshape(xd.shape))])


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Reorder axes; the gradient applies the inverse permutation."""
    xd = x.data
    if sorted(axes) != list(range(xd.ndim)):
        raise ShapeMismatch(f"permute: axes {axes} invalid for rank {xd.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(xd, axes)
    return _emit(out, [(x, lambda g: np.transpose(g, inverse))])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on row vectors: [B,F] x [F,O] (+ [O]) -> [B,O]."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeMismatch(f"linear: x {xd.shape} vs w {wd.shape}")
    out = xd @ wd
    pulls: list[_Pull] = [(x, lambda g: g @ wd.T), (w, lambda g: xd.T @ g)]
    if b is not None:
        bd = b.data
        if bd.shape != (wd.shape[1],):
            raise ShapeMismatch(f"linear: bias {bd.shape} vs {wd.shape[1]} outputs")
        out = out + bd[None, :]
        pulls.append((b, lambda g: g.sum(axis=0)))
    return _emit(out, pulls)


def time_linear(e: Tensor, w: Tensor) -> Tensor:
    """Map per-step embeddings [B,T,E] through w [E,C] to a [B,C,T] feature."""
    ed, wd = e.data, w.data
    if ed.ndim != 3 or wd.ndim != 2 or ed.shape[2] != wd.shape[0]:
        raise ShapeMismatch(f"time_linear: e {ed.shape} vs w {wd.shape}")
    out = np.einsum("bte,ec->bct", ed, wd)
    return _emit(out, [
        (e, lambda g: np.einsum("ec,bct->bte", wd, g)),
        (w, lambda g: np.einsum("bte,bct->ec", ed, g)),
    ])


def embedding_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of table [V,E] at integer idx [B,T] -> [B,T,E]."""
    td = table.data
    if td.ndim != 2:
        raise ShapeMismatch(f"embedding_rows: table {td.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch(f"embedding_rows: idx must be integer [B,T], got {idx.dtype} {idx.shape}")
    if idx.min() < 0 or idx.max() >= td.shape[0]:
        raise IndexError(f"embedding_rows: idx outside [0, {td.shape[0]})")
    out = td[idx]

    def d_table(g: np.ndarray) -> np.ndarray:
        d = np.zeros_like(td)
        np.add.at(d, idx.ravel(), g.reshape(-1, td.shape[1]))
        return d

    return _emit(out, [(table, d_table)])


def add_time_feature(x: Tensor, f: Tensor) -> Tensor:
    """Add a node-independent feature [B,C,T] onto [B,C,N,T]."""
    xd = _want4(x, "add_time_feature")
    fd = f.data
    b, c, n, t = xd.shape
    if fd.shape != (b, c, t):
        raise ShapeMismatch(f"add_time_feature: f {fd.shape} vs ({b}, {c}, {t})")
    out = xd + fd[:, :, None, :]
    return _emit(out, [(x, lambda g: g), (f, lambda g: g.sum(axis=2))])


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate two equal-rank tensors along one axis."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim:
        raise ShapeMismatch(f"concat: ranks {ad.ndim} vs {bd.ndim}")
    for i, (sa, sb) in enumerate(zip(ad.shape, bd.shape)):
        if i != axis % ad.ndim and sa != sb:
            raise ShapeMismatch(f"concat: {ad.shape} vs {bd.shape} along axis {axis}")
    ax = axis % ad.ndim
    na = ad.shape[ax]
    out = np.concatenate([ad, bd], axis=ax)

    def take(g: np.ndarray, start, stop):
        sl = [slice(None)] * g.ndim
        sl[ax] = slice(start, stop)
        return np.ascontiguousarray(g[tuple(sl)])

    return _emit(out, [
        (a, lambda g: take(g, 0, na)),
        (b, lambda g: take(g, na, None)),
    ])


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    """Keep time steps [start, stop) of the last axis."""
    xd = x.data
    t = xd.shape[-1]
    if not (0 <= start < stop <= t):
        raise ShapeMismatch(f"slice_time: [{start}, {stop}) outside T={t}")
    out = xd[..., start:stop]

    def d_x(g: np.ndarray) -> np.ndarray:
        d = np.zeros_like(xd)
        d[..., start:stop] = g
        return d

    return _emit(out, [(x, d_x)])


def subsample_time(x: Tensor, factor: int = 2) -> Tensor:
    """Keep every factor-th time step (stride-factor downsample)."""
    xd = x.data
    if xd.shape[-1] % factor != 0:
        raise ShapeMismatch(f"subsample_time: T={xd.shape[-1]} not divisible by {factor}")
    out = xd[..., ::factor]

    def d_x(g: np.ndarray) -> np.ndarray:
        d = np.zeros_like(xd)
        d[..., ::factor] = g
        return d

    return _emit(out, [(x, d_x)])


def upsample_time(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor repeat along time."""
    xd = x.data
    out = np.repeat(xd, factor, axis=-1)

    def d_x(g: np.ndarray) -> np.ndarray:
        return g.reshape(g.shape[:-1] + (xd.shape[-1], factor)).sum(axis=-1)

    return _emit(out, [(x, d_x)])


def scale_per_sample(x: Tensor, s: np.ndarray) -> Tensor:
    """Multiply sample b of x [B,...] by the constant scalar s[b]."""
    xd = x.data
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (xd.shape[0],):
        raise ShapeMismatch(f"scale_per_sample: s {s.shape} vs batch {xd.shape[0]}")
    sx = s.reshape((-1,) + (1,) * (xd.ndim - 1))
    out = xd * sx
    return _emit(out, [(x, lambda g: g * sx)])
