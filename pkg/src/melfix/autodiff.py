"""Reverse-mode automatic differentiation over N,C,H,W arrays.

Small tape design: ops run eagerly on numpy arrays and, when a Tape is
active and an input requires grad, append (output, [(input, grad_fn)])
records. Tape.backward walks the records once in reverse execution order,
which is already a topological order. Gradient need is captured at record
time, so freezing parameters around a forward pass sticks for the
matching backward pass.

Float32 is the working precision; verification (grad_check) builds
float64 tensors. Convolutions are direct (im2col + matmul), not FFT.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_debug_finite = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness assertions (slow, meant for tests)."""
    global _debug_finite
    _debug_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        if _debug_finite and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class Tape:
    """Ordered record of executed ops for one backward pass."""

    _stack: list = []

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @staticmethod
    def active():
        return Tape._stack[-1] if Tape._stack else None

    def _add(self, out: Tensor, pairs) -> None:
        out.requires_grad = True
        self._records.append((out, pairs))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into .grad of recorded inputs.

        Each recorded node is visited exactly once; outputs that never
        received a gradient (unused branches) are skipped.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        self._consumed = True
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, pairs in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for tensor, grad_fn in pairs:
                gi = grad_fn(g)
                if _debug_finite and not np.all(np.isfinite(gi)):
                    raise FloatingPointError("non-finite gradient")
                tensor.grad = gi if tensor.grad is None else tensor.grad + gi


@contextmanager
def paused():
    """Run a forward pass without recording (inference / detached)."""
    Tape._stack.append(None)
    try:
        yield
    finally:
        Tape._stack.pop()


@contextmanager
def frozen(tensors):
    """Temporarily clear requires_grad on `tensors`.

    Ops recorded inside the block keep the frozen view even if backward
    runs after the block exits.
    """
    saved = [(t, t.requires_grad) for t in tensors]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, rg in saved:
            t.requires_grad = rg


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


def _make(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data + b.data)
    tape = Tape.active()
    if tape is not None and (a.requires_grad or b.requires_grad):
        pairs = []
        if a.requires_grad:
            pairs.append((a, lambda g: g))
        if b.requires_grad:
            pairs.append((b, lambda g: g))
        tape._add(out, pairs)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _make(x.data * x.data.dtype.type(c))
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        tape._add(out, [(x, lambda g: g * x.data.dtype.type(c))])
    return out


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise multiply by a non-differentiable constant array."""
    const = np.asarray(arr, dtype=x.data.dtype)
    out = _make(x.data * const)
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        tape._add(out, [(x, lambda g: g * const)])
    return out


def mean_all(x: Tensor) -> Tensor:
    out = _make(np.asarray(x.data.mean(), dtype=x.data.dtype))
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        inv = 1.0 / x.data.size
        tape._add(out, [(x, lambda g: np.full_like(x.data, g * inv))])
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(np.concatenate([a.data, b.data], axis=1))
    tape = Tape.active()
    if tape is not None and (a.requires_grad or b.requires_grad):
        ca = a.data.shape[1]
        pairs = []
        if a.requires_grad:
            pairs.append((a, lambda g: g[:, :ca]))
        if b.requires_grad:
            pairs.append((b, lambda g: g[:, ca:]))
        tape._add(out, pairs)
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0))
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        mask = x.data > 0
        tape._add(out, [(x, lambda g: g * mask)])
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # the subgradient at exactly 0 takes the negative-slope branch
    pos = x.data > 0
    out = _make(np.where(pos, x.data, x.data * x.data.dtype.type(slope)))
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        factor = np.where(pos, x.data.dtype.type(1), x.data.dtype.type(slope))
        tape._add(out, [(x, lambda g: g * factor)])
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _make(y)
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        tape._add(out, [(x, lambda g: g * (1 - y * y))])
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; H and W must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even H and W, got {h}x{w}")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = _make(y)
    tape = Tape.active()
    if tape is not None and x.requires_grad:
        quarter = x.data.dtype.type(0.25)

        def bwd(g):
            return np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3)

        tape._add(out, [(x, bwd)])
    return out


# ---------------------------------------------------------------------------
# convolution internals


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Padded (N,C,Hp,Wp) -> columns (N, C*k*k, Ho*Wo) plus (Ho, Wo)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _corr_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Cross-correlate (N,Ci,H,W) with (Co,Ci,k,k); returns (out, cols)."""
    n, ci, h, wid = x.shape
    co, ci_w, k, k2 = w.shape
    if k != k2:
        raise ValueError("kernels must be square")
    if ci != ci_w:
        raise ValueError(f"channel mismatch: input {ci}, weight expects {ci_w}")
    if h + 2 * pad < k or wid + 2 * pad < k:
        raise ValueError("input smaller than kernel")
    if (h + 2 * pad - k) % stride or (wid + 2 * pad - k) % stride:
        raise ValueError(
            f"non-integer output size for H,W={h},{wid} k={k} stride={stride} pad={pad}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, ho, wo = _im2col(xp, k, stride)
    out = np.matmul(w.reshape(co, -1), cols).reshape(n, co, ho, wo)
    return out, cols


def _corr_bwd_weights(g: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    n, co = g.shape[:2]
    g2 = g.reshape(n, co, -1)
    return np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)


def _corr_bwd_data(g: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _corr_forward w.r.t. its input.

    Dilate the gradient by the stride, pad by k-1-pad, then correlate with
    the 180-degree-rotated, channel-transposed kernel at stride 1.
    """
    n, co, ho, wo = g.shape
    co_w, ci, k, _ = w.shape
    if co != co_w:
        raise ValueError(f"channel mismatch: grad {co}, weight {co_w}")
    edge = k - 1 - pad
    if edge < 0:
        raise ValueError("pad larger than kernel-1 not supported")
    if stride == 1:
        gd = g
    else:
        gd = np.zeros(
            (n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype
        )
        gd[:, :, ::stride, ::stride] = g
    gp = np.pad(gd, ((0, 0), (0, 0), (edge, edge), (edge, edge))) if edge else gd
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols, h2, w2 = _im2col(gp, k, 1)
    return np.matmul(wt.reshape(ci, -1), cols).reshape(n, ci, h2, w2)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    x: (N,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout,).
    H_out = (H + 2*pad - k)/stride + 1, which must be integral.
    """
    out_data, cols = _corr_forward(x.data, w.data, stride, pad)
    out_data += b.data.reshape(1, -1, 1, 1)
    out = _make(out_data)
    tape = Tape.active()
    if tape is not None and (x.requires_grad or w.requires_grad or b.requires_grad):
        pairs = []
        if x.requires_grad:
            pairs.append((x, lambda g: _corr_bwd_data(g, w.data, stride, pad)))
        if w.requires_grad:
            pairs.append((w, lambda g: _corr_bwd_weights(g, cols, w.data.shape)))
        if b.requires_grad:
            pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
        tape._add(out, pairs)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of the matching conv2d.

    x: (N,Cin,H,W), w: (Cin,Cout,k,k).
    H_out = (H - 1)*stride - 2*pad + k; the default k=4, stride=2, pad=1
    doubles H and W. Forward equals conv2d's backward-data pass on the
    identical weight array.
    """
    out_data = _corr_bwd_data(x.data, w.data, stride, pad)
    out_data += b.data.reshape(1, -1, 1, 1)
    out = _make(out_data)
    tape = Tape.active()
    if tape is not None and (x.requires_grad or w.requires_grad or b.requires_grad):
        pairs = []
        if x.requires_grad:
            pairs.append((x, lambda g: _corr_forward(g, w.data, stride, pad)[0]))
        if w.requires_grad:

            def bwd_w(g):
                gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
                k = w.data.shape[2]
                cols_g, _, _ = _im2col(gp, k, stride)
                n, ci = x.data.shape[:2]
                x2 = x.data.reshape(n, ci, -1)
                return np.matmul(x2, cols_g.transpose(0, 2, 1)).sum(axis=0).reshape(
                    w.data.shape
                )

            pairs.append((w, bwd_w))
        if b.requires_grad:
            pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
        tape._add(out, pairs)
    return out


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (n, c) slice to mean 0 / variance 1, then affine.

    Population variance; gain and bias are per-channel vectors.
    """
    n, c, h, w = x.data.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = _make(xhat * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1))
    tape = Tape.active()
    if tape is not None and (x.requires_grad or gain.requires_grad or bias.requires_grad):
        pairs = []
        if x.requires_grad:

            def bwd_x(g):
                dxhat = g * gain.data.reshape(1, c, 1, 1)
                dvar = (dxhat * xc).sum(axis=(2, 3), keepdims=True) * (-0.5) * inv**3
                dmu = (-dxhat * inv).sum(axis=(2, 3), keepdims=True)
                return dxhat * inv + (2.0 / m) * dvar * xc + dmu / m

            pairs.append((x, bwd_x))
        if gain.requires_grad:
            pairs.append((gain, lambda g: (g * xhat).sum(axis=(0, 2, 3))))
        if bias.requires_grad:
            pairs.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
        tape._add(out, pairs)
    return out


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy from logits, overflow-safe.

    mean(softplus(z) - t*z) with softplus(z) = max(z,0) + log1p(exp(-|z|)).
    target may be a scalar 0/1 or an array of them.
    """
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _make(np.asarray(loss.mean(), dtype=z.dtype))
    tape = Tape.active()
    if tape is not None and logits.requires_grad:
        inv = 1.0 / z.size

        def bwd(g):
            sig = 1.0 / (1.0 + np.exp(-z))
            return (sig - t) * (g * inv)

        tape._add(out, [(logits, bwd)])
    return out


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; sign(0) contributes zero gradient."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1 shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = _make(np.asarray(np.abs(diff).mean(), dtype=a.data.dtype))
    tape = Tape.active()
    if tape is not None and (a.requires_grad or b.requires_grad):
        sgn = np.sign(diff)
        inv = 1.0 / diff.size
        pairs = []
        if a.requires_grad:
            pairs.append((a, lambda g: sgn * (g * inv)))
        if b.requires_grad:
            pairs.append((b, lambda g: -sgn * (g * inv)))
        tape._add(out, pairs)
    return out


def mse_to(logits: Tensor, target: float) -> Tensor:
    """Mean squared distance to a scalar target (least-squares GAN term)."""
    z = logits.data
    diff = z - z.dtype.type(target)
    out = _make(np.asarray((diff * diff).mean(), dtype=z.dtype))
    tape = Tape.active()
    if tape is not None and logits.requires_grad:
        inv = 2.0 / z.size
        tape._add(out, [(logits, lambda g: diff * (g * inv))])
    return out


# ---------------------------------------------------------------------------
# verification


def grad_check(fn, inputs, eps: float = 1e-6) -> float:
    """Max relative error of tape gradients vs central finite differences.

    fn maps the Tensor inputs to a scalar Tensor. Inputs should be float64
    for the finite differences to be meaningful.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2 * eps)
        denom = np.maximum(1e-4, np.maximum(np.abs(analytic), np.abs(numeric)))
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst


def builtin_grad_report(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Run grad_check over every differentiable op; returns op -> max error."""
    rng = np.random.default_rng(seed)

    def t64(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)

    def away_from_zero(shape, margin=0.2):
        mag = rng.uniform(margin, 1.0, size=shape)
        sign = rng.choice([-1.0, 1.0], size=shape)
        return Tensor(mag * sign, requires_grad=True, dtype=np.float64)

    def readout(shape):
        const = rng.normal(size=shape)
        return lambda t: mean_all(mul_const(t, const))

    report = {}

    x, w, b = t64((1, 2, 6, 6)), t64((3, 2, 3, 3)), t64((3,))
    r = readout((1, 3, 6, 6))
    report["conv2d"] = grad_check(lambda x, w, b: r(conv2d(x, w, b, 1, 1)), [x, w, b], eps)

    x, w, b = t64((1, 2, 6, 6)), t64((3, 2, 4, 4)), t64((3,))
    r = readout((1, 3, 3, 3))
    report["conv2d_s2"] = grad_check(lambda x, w, b: r(conv2d(x, w, b, 2, 1)), [x, w, b], eps)

    x, w, b = t64((1, 3, 3, 3)), t64((3, 2, 4, 4)), t64((2,))
    r = readout((1, 2, 6, 6))
    report["conv_transpose2d"] = grad_check(
        lambda x, w, b: r(conv_transpose2d(x, w, b, 2, 1)), [x, w, b], eps
    )

    x, g, b = t64((2, 3, 4, 4)), t64((3,), 0.5, 1.5), t64((3,))
    r = readout((2, 3, 4, 4))
    report["instance_norm"] = grad_check(
        lambda x, g, b: r(instance_norm(x, g, b)), [x, g, b], eps
    )

    x = away_from_zero((2, 2, 3, 3))
    r = readout((2, 2, 3, 3))
    report["relu"] = grad_check(lambda x: r(relu(x)), [x], eps)

    x = away_from_zero((2, 2, 3, 3))
    report["leaky_relu"] = grad_check(lambda x: r(leaky_relu(x)), [x], eps)

    x = t64((2, 2, 3, 3))
    report["tanh"] = grad_check(lambda x: r(tanh(x)), [x], eps)

    x = t64((2, 3, 4, 4))
    r = readout((2, 3, 2, 2))
    report["avg_pool2"] = grad_check(lambda x: r(avg_pool2(x)), [x], eps)

    a, b2 = t64((1, 2, 4, 4)), t64((1, 3, 4, 4))
    r = readout((1, 5, 4, 4))
    report["concat_channels"] = grad_check(
        lambda a, b: r(concat_channels(a, b)), [a, b2], eps
    )

    z = t64((2, 1, 3, 3), -3.0, 3.0)
    report["bce_with_logits"] = grad_check(
        lambda z: add(bce_with_logits(z, 1.0), bce_with_logits(z, 0.0)), [z], eps
    )

    a = t64((1, 1, 4, 4), 0.5, 1.0)
    b3 = t64((1, 1, 4, 4), -1.0, -0.5)
    report["l1_loss"] = grad_check(lambda a, b: l1_loss(a, b), [a, b3], eps)

    z = t64((2, 1, 3, 3), -2.0, 2.0)
    report["mse_to"] = grad_check(lambda z: mse_to(z, 1.0), [z], eps)

    x, w, b = t64((1, 2, 8, 8)), t64((4, 2, 3, 3)), t64((4,))
    ng, nb = t64((4,), 0.5, 1.5), t64((4,))
    r = readout((1, 4, 4, 4))

    def chain(x, w, b, ng, nb):
        h = conv2d(x, w, b, 1, 1)
        h = instance_norm(h, ng, nb)
        h = leaky_relu(h)
        return r(avg_pool2(h))

    report["composite_chain"] = grad_check(chain, [x, w, b, ng, nb], eps)
    return report
