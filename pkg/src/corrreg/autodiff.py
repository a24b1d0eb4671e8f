"""A small reverse-mode autodiff tape over dense numpy arrays.

Feature maps are ``(C, H, W)`` arrays (batch size one). Every op records its
inputs and a vector-Jacobian product on the tape shared by its operands;
:func:`backward` sweeps the records in reverse. Broadcasting is limited to
a scalar (shape ``()``) operand in the binary arithmetic ops.

Second derivatives are not taped. Mixed derivatives of the form
``d/dtheta (dL/dw)`` are taken by central differences of two first-order
passes, see :func:`mixed_second_grad_fd`.
"""

from __future__ import annotations

import builtins
import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericFailure(ArithmeticError):
    def __init__(self, op, msg="non-finite value"):
        super().__init__(f"{op}: {msg}")
        self.op = op


class Tape:
    def __init__(self):
        self.records = []  # (out_id, input_ids, vjp)
        self.leaf_names = {}
        self._count = 0

    def _new_id(self):
        self._count += 1
        return self._count

    def leaf(self, value, name=None) -> "Tensor":
        t = Tensor(value, self, self._new_id())
        self.leaf_names[t.node_id] = name
        return t

    def __len__(self):
        return len(self.records)


class Tensor:
    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def _record(op, out, inputs, vjp):
    if not np.all(np.isfinite(out)):
        raise NumericFailure(op)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ValueError(f"{op}: operands recorded on different tapes")
    tape = next(iter(tapes.values()))
    res = Tensor(out, tape, tape._new_id())
    tape.records.append((res.node_id, [t.node_id for t in inputs], vjp))
    return res


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _check_binary(op, a, b):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = constant(a), constant(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, [a, b],
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, [a, b],
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(-g, sb)])


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, [a, b],
                   lambda g: [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)])


def div(a, b):
    a, b = constant(a), constant(b)
    _check_binary("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, [a, b],
                   lambda g: [_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)])


def square(a):
    ad = a.data
    return _record("square", ad * ad, [a], lambda g: [2.0 * g * ad])


def sqrt(a):
    out = np.sqrt(a.data)
    return _record("sqrt", out, [a], lambda g: [0.5 * g / out])


def exp(a):
    out = np.exp(a.data)
    return _record("exp", out, [a], lambda g: [g * out])


def relu(a):
    mask = a.data > 0
    return _record("relu", a.data * mask, [a], lambda g: [g * mask])


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, [a], lambda g: [g * out * (1.0 - out)])


def tanh(a):
    out = np.tanh(a.data)
    return _record("tanh", out, [a], lambda g: [g * (1.0 - out * out)])


def clip(a, lo=-np.inf, hi=np.inf):
    mask = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), [a], lambda g: [g * mask])


def maximum(a, floor: float):
    mask = a.data >= floor
    return _record("maximum", np.maximum(a.data, floor), [a], lambda g: [g * mask])


# ----------------------------------------------------------------- reductions

def sum(a):  # noqa: A001 - mirrors the op name used throughout
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), [a], lambda g: [np.full(shape, float(g))])


def mean(a):
    shape, n = a.shape, a.data.size
    return _record("mean", np.asarray(a.data.mean()), [a], lambda g: [np.full(shape, float(g) / n)])


def dot(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("dot", np.asarray(np.sum(ad * bd)), [a, b], lambda g: [float(g) * bd, float(g) * ad])


def global_avg_pool(x):
    C, H, W = x.shape
    return _record("global_avg_pool", x.data.mean(axis=(1, 2)), [x],
                   lambda g: [np.broadcast_to(g[:, None, None] / (H * W), (C, H, W)).copy()])


# ----------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            return [np.outer(g, bd), ad.T @ g]
        return [g @ bd.T, ad.T @ g]

    return _record("matmul", ad @ bd, [a, b], vjp)


def conv2d(x, w, b=None):
    """Cross-correlation, stride 1, zero padding ``k // 2``. x: (Cin,H,W), w: (Cout,Cin,k,k)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: incompatible shapes x{x.shape} w{w.shape}")
    Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    # cols[(c, i, j), (h, w)] = xp[c, h + i, w + j]
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 3, 4, 1, 2).reshape(Cin * k * k, H * W)
    wm = w.data.reshape(Cout, -1)
    out = (wm @ cols).reshape(Cout, H, W)
    inputs = [x, w]
    if b is not None:
        if b.shape != (Cout,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({Cout},)")
        out = out + b.data[:, None, None]
        inputs.append(b)

    def vjp(g):
        gm = g.reshape(Cout, H * W)
        gw = (gm @ cols.T).reshape(w.shape)
        gcols = (wm.T @ gm).reshape(Cin, k, k, H, W)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + H, j:j + W] += gcols[:, i, j]
        grads = [gxp[:, p:p + H, p:p + W], gw]
        if b is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return _record("conv2d", out, inputs, vjp)


def avg_pool2d(x, size, stride=None):
    """Average pooling. ``stride == size``: non-overlapping downsampling.
    ``stride == 1``: same-size output, odd ``size``, padded positions excluded
    from the average."""
    stride = size if stride is None else stride
    C, H, W = x.shape
    if stride == size:
        if H % size or W % size:
            raise ValueError(f"avg_pool2d: {H}x{W} not divisible by {size}")
        out = x.data.reshape(C, H // size, size, W // size, size).mean(axis=(2, 4))

        def vjp(g):
            return [np.repeat(np.repeat(g, size, axis=1), size, axis=2) / (size * size)]

        return _record("avg_pool2d", out, [x], vjp)
    if stride != 1 or size % 2 == 0:
        raise ValueError("avg_pool2d: supports stride == size, or stride 1 with odd size")
    p = size // 2
    count = sliding_window_view(np.pad(np.ones((H, W)), p), (size, size)).sum(axis=(2, 3))

    def box(a):
        ap = np.pad(a, ((0, 0), (p, p), (p, p)))
        return sliding_window_view(ap, (size, size), axis=(1, 2)).sum(axis=(3, 4))

    out = box(x.data) / count
    return _record("avg_pool2d", out, [x], lambda g: [box(g / count)])


def channel_norm(x, eps=1e-5):
    """Normalisation over all of (C, H, W) jointly (group norm with one group)."""
    mu = x.data.mean()
    var = x.data.var()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        return [inv * (g - g.mean() - xhat * np.mean(g * xhat))]

    return _record("channel_norm", xhat, [x], vjp)


def channel_affine(x, gamma, beta=None):
    """``x * gamma[c] + beta[c]`` per channel."""
    C = x.shape[0]
    if gamma.shape != (C,) or (beta is not None and beta.shape != (C,)):
        raise ValueError(f"channel_affine: parameter shapes must be ({C},)")
    xd, gd = x.data, gamma.data
    out = xd * gd[:, None, None]
    inputs = [x, gamma]
    if beta is not None:
        out = out + beta.data[:, None, None]
        inputs.append(beta)

    def vjp(g):
        grads = [g * gd[:, None, None], np.sum(g * xd, axis=(1, 2))]
        if beta is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _record("channel_affine", out, inputs, vjp)


# ----------------------------------------------------------------- channel plumbing

def reshape(x, shape):
    old = x.shape
    return _record("reshape", x.data.reshape(shape), [x], lambda g: [g.reshape(old)])


def slice_channels(x, start, stop):
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return [full]

    return _record("slice_channels", x.data[start:stop], [x], vjp)


def split_channels(x, k=None):
    k = x.shape[0] // 2 if k is None else k
    return slice_channels(x, 0, k), slice_channels(x, k, x.shape[0])


def concat_channels(parts):
    sizes = [p.shape[0] for p in parts]
    if len({p.shape[1:] for p in parts}) != 1:
        raise ValueError("concat_channels: spatial shapes differ")
    bounds = np.cumsum([0] + sizes)
    return _record("concat_channels", np.concatenate([p.data for p in parts], axis=0), list(parts),
                   lambda g: [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))])


# ----------------------------------------------------------------- spectral

def rfft2(x):
    """(C, H, W) real -> (2C, H, W//2+1): real parts stacked over imaginary parts."""
    C, H, W = x.shape
    F = np.fft.rfft2(x.data)

    def vjp(g):
        G = g[:C] + 1j * g[C:]
        full = np.zeros((C, H, W), dtype=complex)
        full[:, :, :G.shape[2]] = G
        return [np.real(np.fft.ifft2(full, axes=(1, 2))) * (H * W)]

    return _record("rfft2", np.concatenate([F.real, F.imag], axis=0), [x], vjp)


def irfft2(y, width):
    """Inverse of :func:`rfft2`; ``width`` is the real-space width W."""
    C2, H, Wf = y.shape
    C = C2 // 2
    if C2 % 2 or Wf != width // 2 + 1:
        raise ValueError(f"irfft2: bad spectral shape {y.shape} for width {width}")
    out = np.fft.irfft2(y.data[:C] + 1j * y.data[C:], s=(H, width))
    mult = np.full(Wf, 2.0)
    mult[0] = 1.0
    if width % 2 == 0:
        mult[-1] = 1.0

    def vjp(g):
        Z = np.fft.rfft(g, axis=2) * (mult / width)
        Y = np.fft.fft(Z, axis=1) / H
        return [np.concatenate([Y.real, Y.imag], axis=0)]

    return _record("irfft2", out, [y], vjp)


# ----------------------------------------------------------------- sweeps

class Gradients(dict):
    """node_id -> gradient array; index with a Tensor to get zeros when unreached."""

    def __getitem__(self, t):
        if isinstance(t, Tensor):
            return self.get(t.node_id, np.zeros(t.shape))
        return dict.__getitem__(self, t)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.shape != () and loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        return Gradients()
    grads = {loss.node_id: np.ones(loss.shape)}
    for out_id, in_ids, vjp in reversed(tape.records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, gi in zip(in_ids, vjp(g)):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = np.array(gi, dtype=np.float64)
    return Gradients({k: v for k, v in grads.items() if k in tape.leaf_names})


def grad_wrt_input(tape: Tape, loss: Tensor, input_node: Tensor) -> np.ndarray:
    return backward(tape, loss)[input_node]


def mixed_second_grad_fd(net_eval, theta, direction, h=1e-3):
    """Central difference of the parameter gradient along a theta direction.

    ``net_eval(theta) -> (loss, grad_params)`` with ``grad_params`` a dict of
    arrays. Returns ``(g(theta + h d) - g(theta - h d)) / 2h`` per key, i.e.
    ``d/dw (d . dL/dtheta)`` to O(h^2).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(getattr(theta, "as_array", lambda: theta)(), dtype=np.float64)
    d = np.asarray(getattr(direction, "as_array", lambda: direction)(), dtype=np.float64)
    _, gp = net_eval(theta + h * d)
    _, gm = net_eval(theta - h * d)
    out = {}
    for k in gp:
        v = (np.asarray(gp[k]) - np.asarray(gm[k])) / (2.0 * h)
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"mixed_second_grad_fd[{k}]")
        out[k] = v
    return out


# ----------------------------------------------------------------- checkpoints

def save_params(params: dict, path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (names, shapes) and ``<path>.raw`` (f32le, header order)."""
    base = Path(path).with_suffix("")
    names = list(params)
    header = {"names": names, "shapes": [list(np.shape(params[n])) for n in names], "dtype": "f32le"}
    if extra:
        header["extra"] = extra
    base.with_suffix(".json").write_text(json.dumps(header, indent=1))
    payload = b"".join(np.asarray(params[n], dtype="<f4").tobytes() for n in names)
    base.with_suffix(".raw").write_bytes(payload)


def load_params(path):
    """Return ``(params, extra)``."""
    base = Path(path).with_suffix("")
    header = json.loads(base.with_suffix(".json").read_text())
    flat = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    need = builtins.sum(int(np.prod(s)) for s in header["shapes"])
    if flat.size != need:
        raise IOError(f"checkpoint payload has {flat.size} values, header needs {need}")
    out, pos = {}, 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    return out, header.get("extra", {})
