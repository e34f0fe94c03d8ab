"""Differentiable operations over :class:`~vhoi.tensor.Tensor`.

Every op validates shapes eagerly and raises ``ShapeError`` naming the
offending dimensions. Backward closures skip parents whose ``needs_grad``
is false, so constant inputs never cost gradient work.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.needs_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return Tensor(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate_grad(g * s)

    return Tensor(a.data * s, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (n, f_in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear inner dimensions differ: input has {x.shape[1]}, weight has {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.needs_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.needs_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return Tensor(out_data, (x, weight, bias), backward)


def _conv3d_out_dim(n: int, k: int, s: int, p: int, label: str) -> int:
    span = n + 2 * p - k
    if span < 0:
        raise ShapeError(f"conv3d kernel {label}={k} exceeds padded input extent {n + 2 * p}")
    if span % s != 0:
        raise ShapeError(
            f"conv3d {label}: (input {n} + 2*pad {p} - kernel {k}) not divisible by stride {s}"
        )
    return span // s + 1


def conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: tuple[int, int, int] = (1, 1, 1),
    pad: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """Cross-correlation of a (C_in,T,H,W) volume with (C_out,C_in,kt,kh,kw) kernels."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects 4-D input and 5-D kernel, got {x.shape} and {kernel.shape}")
    c_in, t, h, w = x.shape
    c_out, kc, kt, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv3d channel mismatch: input has {c_in}, kernel expects {kc}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias shape {bias.shape} does not match {c_out} outputs")
    st, sh, sw = stride
    pt, ph, pw = pad
    to = _conv3d_out_dim(t, kt, st, pt, "time")
    ho = _conv3d_out_dim(h, kh, sh, ph, "height")
    wo = _conv3d_out_dim(w, kw, sw, pw, "width")

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out_data = np.empty((c_out, to, ho, wo))
    out_data[:] = bias.data[:, None, None, None]
    # One GEMM per kernel offset over the full output volume.
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                patch = xp[:, a : a + to * st : st, b : b + ho * sh : sh, c : c + wo * sw : sw]
                out_data += np.tensordot(kernel.data[:, :, a, b, c], patch, axes=([1], [0]))

    def backward(g: np.ndarray) -> None:
        if kernel.needs_grad:
            gk = np.empty_like(kernel.data)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        patch = xp[
                            :, a : a + to * st : st, b : b + ho * sh : sh, c : c + wo * sw : sw
                        ]
                        gk[:, :, a, b, c] = np.tensordot(g, patch, axes=([1, 2, 3], [1, 2, 3]))
            kernel.accumulate_grad(gk)
        if bias.needs_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if x.needs_grad:
            gxp = np.zeros_like(xp)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[
                            :, a : a + to * st : st, b : b + ho * sh : sh, c : c + wo * sw : sw
                        ] += np.tensordot(kernel.data[:, :, a, b, c], g, axes=([0], [0]))
            x.accumulate_grad(gxp[:, pt : pt + t, ph : ph + h, pw : pw + w])

    return Tensor(out_data, (x, kernel, bias), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate_grad(g * mask)

    return Tensor(np.where(mask, a.data, 0.0), (a,), backward)


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid_values(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep outputs strictly inside (0, 1) even at saturating logits
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_values(a.data)

    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return Tensor(s, (a,), backward)


def mean_pool(a: Tensor, axes: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    """Arithmetic mean over one or more axes."""
    if isinstance(axes, int):
        axes = (axes,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"mean_pool axis {ax} out of range for shape {a.shape}")
    axes = tuple(ax % a.ndim for ax in axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if not a.needs_grad:
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        a.accumulate_grad(np.broadcast_to(gg, a.shape) / count)

    return Tensor(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def take_index(a: Tensor, axis: int, index: int) -> Tensor:
    """Select one slice along ``axis`` (e.g. a single timestep of a feature map)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"take_index axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    if not 0 <= index < a.shape[axis]:
        raise ShapeError(f"index {index} out of range for axis {axis} of shape {a.shape}")
    out_data = np.take(a.data, index, axis=axis)

    def backward(g: np.ndarray) -> None:
        if a.needs_grad:
            gfull = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = index
            gfull[tuple(sl)] = g
            a.accumulate_grad(gfull)

    return Tensor(out_data, (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            if p.needs_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                p.accumulate_grad(g[tuple(sl)])
            offset += n

    return Tensor(out_data, tuple(parts), backward)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_multilabel(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean per-class binary cross entropy in the numerically stable form.

    ``targets`` must be exactly {0,1}; the loss over a logit z with label y
    is ``y*softplus(-z) + (1-y)*softplus(z)``.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    y = targets.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_multilabel targets must be binary {0,1}")
    z = logits.data
    elem = y * _softplus(-z) + (1.0 - y) * _softplus(z)
    n = max(z.size, 1)
    out_data = elem.sum() / n

    def backward(g: np.ndarray) -> None:
        if logits.needs_grad:
            logits.accumulate_grad(g * (_sigmoid_values(z) - y) / n)

    return Tensor(out_data, (logits, targets), backward)
