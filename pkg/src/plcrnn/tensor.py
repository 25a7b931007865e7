"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the enhancement network are provided. Heavy
layers (causal convolution, transposed convolution, LSTM, batch norm) are
single fused tape nodes with hand-written adjoints, which keeps the tape
short and the Python overhead per training step small.

Gradient semantics: ``backward`` *accumulates* into ``.grad`` of every
tensor on the tape. Calling it twice on the same graph doubles the
gradients; call :func:`zero_grad` between optimisation steps.
"""

import contextlib
import struct
import threading

import numpy as np

_default_dtype = np.float32
# per thread, so a worker evaluating under no_grad() never disables another's tape
_grad_state = threading.local()


class DimensionError(ValueError):
    pass


class BatchNormStateError(RuntimeError):
    pass


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _as_array(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=_default_dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def square(self):
        return mul(self, self)

    def backward(self, grad=None):
        """Populate ``.grad`` on every tracked tensor that reaches ``self``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        tape = ComputationTape(self)
        adj = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(tape.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return tape


class ComputationTape:
    """Topologically ordered record of the nodes that reach ``root``.

    Adjoints are replayed over ``reversed(nodes)``; each node appears once.
    """

    def __init__(self, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _node(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), backward, "mul")


def reciprocal(a):
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a):
    x = a.data
    # x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def elu(a):
    x = a.data
    pos = x >= 0
    out = np.where(pos, x, np.expm1(np.minimum(x, 0)))
    return _node(out, (a,), lambda g: (g * np.where(pos, 1.0, out + 1.0).astype(x.dtype),), "elu")


_ACTIVATIONS = {"elu": elu, "sigmoid": sigmoid, "softplus": softplus, "tanh": tanh}


def activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# -- reductions and shape ops --------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), backward, "slice")


def pad(a, widths, value=0.0):
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise DimensionError(f"pad widths for {len(widths)} axes, tensor has {a.ndim}")
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    out = np.pad(a.data, widths, constant_values=value)
    return _node(out, (a,), lambda g: (g[sl],), "pad")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def matmul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul expects operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def mse_loss(pred, target, weights=None):
    """Mean squared error.

    Without ``weights`` this is the mean over all elements. With
    ``weights`` (broadcastable to ``pred``) it is ``sum(weights * err**2)``;
    callers pass weights that already sum to one over the valid cells.
    """
    pred = _wrap(pred)
    target = _wrap(target, pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    sq = diff * diff
    if weights is None:
        return sq.mean()
    w = np.broadcast_to(np.asarray(weights, dtype=pred.dtype), pred.shape)
    return (sq * Tensor(w, dtype=pred.dtype)).sum()


# -- convolution ---------------------------------------------------------------

def _batched(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected a C x T x F or B x C x T x F tensor, got shape {x.shape}")
    return x, False


def conv2d_causal(x, weight, bias, stride=(1, 1), freq_pad=(0, 0)):
    """Convolution over (time, frequency) that never looks ahead in time.

    ``x`` is ``C_in x T x F`` (or batched ``B x C_in x T x F``), ``weight``
    is ``C_out x C_in x K_T x K_F``. ``K_T - 1`` zero frames are prepended in
    time; ``freq_pad`` zero columns are added (low, high) in frequency.
    Output width is ``(F + pad - K_F) // stride_f + 1``.
    """
    st, sf = stride
    if st != 1:
        raise ValueError("time stride must be 1")
    x, squeeze = _batched(x)
    B, C, T, F = x.shape
    Co, Ci, KT, KF = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d_causal: kernel expects {Ci} input channels, input has {C}")
    pl, ph = freq_pad
    Fo = (F + pl + ph - KF) // sf + 1
    if Fo < 1:
        raise DimensionError(f"conv2d_causal: frequency width {F} too small for kernel {KF}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (KT - 1, 0), (pl, ph)))
    span = sf * (Fo - 1) + 1
    # columns laid out (B, KT, KF, C, T, Fo) so that every copy below is contiguous
    cols = np.empty((B, KT, KF, C, T, Fo), dtype=xp.dtype)
    for kt in range(KT):
        for kf in range(KF):
            cols[:, kt, kf] = xp[:, :, kt:kt + T, kf:kf + span:sf]
    K = KT * KF * C
    cols3 = cols.reshape(B, K, T * Fo)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(Co, K)
    out = (w2 @ cols3).reshape(B, Co, T, Fo) + bias.data.reshape(1, Co, 1, 1)

    def backward(g):
        g3 = g.reshape(B, Co, T * Fo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.einsum("bon,bkn->ok", g3, cols3).reshape(Co, KT, KF, Ci).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (w2.T @ g3).reshape(B, KT, KF, C, T, Fo)
            gxp = np.zeros_like(xp)
            for kt in range(KT):
                for kf in range(KF):
                    gxp[:, :, kt:kt + T, kf:kf + span:sf] += dcols[:, kt, kf]
            gx = gxp[:, :, KT - 1:, pl:pl + F]
        return gx, gw, gb

    res = _node(out, (x, weight, bias), backward, "conv2d_causal")
    return reshape(res, res.shape[1:]) if squeeze else res


def conv_transpose2d(x, weight, bias, stride=(1, 1), out_pad=0, time_crop="end"):
    """Transposed convolution over (time, frequency).

    ``weight`` is ``C_in x C_out x K_T x K_F``. The full output has
    ``T + K_T - 1`` frames; ``time_crop="end"`` drops the trailing
    ``K_T - 1`` frames (causal), ``"start"`` drops the leading ones, which
    makes this the exact adjoint of :func:`conv2d_causal` with the same
    kernel. Output width is ``(F - 1) * stride_f + K_F + out_pad``; the
    ``out_pad`` extra columns receive only the bias.
    """
    st, sf = stride
    if st != 1:
        raise ValueError("time stride must be 1")
    if time_crop not in ("end", "start"):
        raise ValueError("time_crop must be 'end' or 'start'")
    x, squeeze = _batched(x)
    B, Ci, T, F = x.shape
    Wi, Co, KT, KF = weight.shape
    if Wi != Ci:
        raise DimensionError(f"deconv2d: kernel expects {Wi} input channels, input has {Ci}")
    Fo = (F - 1) * sf + KF + out_pad
    span = sf * (F - 1) + 1
    x3 = x.data.reshape(B, Ci, T * F)
    w2 = weight.data.transpose(2, 3, 1, 0).reshape(KT * KF * Co, Ci)
    y = (w2 @ x3).reshape(B, KT, KF, Co, T, F)
    full = np.zeros((B, Co, T + KT - 1, Fo), dtype=y.dtype)
    for kt in range(KT):
        for kf in range(KF):
            full[:, :, kt:kt + T, kf:kf + span:sf] += y[:, kt, kf]
    t0 = 0 if time_crop == "end" else KT - 1
    out = full[:, :, t0:t0 + T] + bias.data.reshape(1, Co, 1, 1)

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, :, t0:t0 + T] = g
        dy = np.empty_like(y)
        for kt in range(KT):
            for kf in range(KF):
                dy[:, kt, kf] = gfull[:, :, kt:kt + T, kf:kf + span:sf]
        dy3 = dy.reshape(B, KT * KF * Co, T * F)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.einsum("bkn,bcn->kc", dy3, x3).reshape(KT, KF, Co, Ci).transpose(3, 2, 0, 1)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = (w2.T @ dy3).reshape(B, Ci, T, F)
        return gx, gw, gb

    res = _node(out, (x, weight, bias), backward, "conv_transpose2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def deconv2d_causal(x, weight, bias, stride=(1, 1), out_pad=0, out_width=None):
    res = conv_transpose2d(x, weight, bias, stride, out_pad, time_crop="end")
    if out_width is not None and res.shape[-1] != out_width:
        raise DimensionError(f"deconv2d_causal: produced width {res.shape[-1]}, expected {out_width}")
    return res


# -- recurrent -----------------------------------------------------------------

def lstm(x, w_ih, w_hh, bias):
    """Unidirectional LSTM with zero initial state.

    ``x`` is ``T x D`` or ``B x T x D``; ``w_ih`` is ``D x 4H``, ``w_hh`` is
    ``H x 4H``, ``bias`` is ``4H``. Gate blocks are ordered input, forget,
    cell candidate, output.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, D = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (D, 4 * H) or w_hh.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise DimensionError(
            f"lstm: input dim {D}, hidden {H}; got w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}")
    dt = x.dtype
    Wi, Wh = w_ih.data, w_hh.data
    xw = x.data @ Wi + bias.data
    gates = np.empty((B, T, 4 * H), dtype=dt)
    cs = np.empty((B, T, H), dtype=dt)
    tcs = np.empty((B, T, H), dtype=dt)
    hs = np.empty((B, T, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    for t in range(T):
        z = xw[:, t] + h @ Wh
        a = gates[:, t]
        a[:, :2 * H] = _sigmoid_np(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid_np(z[:, 3 * H:])
        i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c = f * c + i * gg
        tc = np.tanh(c)
        h = o * tc
        cs[:, t], tcs[:, t], hs[:, t] = c, tc, h

    def backward(gout):
        dz_all = np.empty_like(gates)
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tcs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H), dtype=dt)
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            if t > 0:
                dWh += hs[:, t - 1].T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        dz2 = dz_all.reshape(B * T, 4 * H)
        gx = (dz_all @ Wi.T) if x.requires_grad else None
        gWi = x.data.reshape(B * T, D).T @ dz2 if w_ih.requires_grad else None
        gb = dz2.sum(axis=0) if bias.requires_grad else None
        return gx, gWi, dWh, gb

    res = _node(hs, (x, w_ih, w_hh, bias), backward, "lstm")
    return reshape(res, res.shape[1:]) if squeeze else res


# -- normalisation -------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, momentum=0.99, eps=1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False

    def copy(self):
        other = BatchNormState(len(self.mean), self.momentum, self.eps)
        other.mean, other.var = self.mean.copy(), self.var.copy()
        other.initialized = self.initialized
        return other


def batch_norm(x, gamma, beta, state, training, frame_mask=None):
    """Per-channel normalisation of ``B x C x T x F`` over batch, time, frequency.

    ``frame_mask`` (``B x T``, 1 for real frames) restricts the batch
    statistics to real frames so zero padding does not leak into them.
    In eval mode the running statistics in ``state`` are used and an
    uninitialised state raises :class:`BatchNormStateError`.
    """
    x, squeeze = _batched(x)
    B, C, T, F = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    dt = xd.dtype
    eps = state.eps
    g_ = gamma.data.reshape(1, C, 1, 1)
    b_ = beta.data.reshape(1, C, 1, 1)

    if not training:
        if not state.initialized:
            raise BatchNormStateError("batch_norm in eval mode before running statistics were collected")
        mu = state.mean.astype(dt).reshape(1, C, 1, 1)
        inv = (1.0 / np.sqrt(state.var + eps)).astype(dt).reshape(1, C, 1, 1)
        xhat = (xd - mu) * inv
        out = xhat * g_ + b_

        def backward_eval(g):
            gx = g * g_ * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        res = _node(out, (x, gamma, beta), backward_eval, "batch_norm")
        return reshape(res, res.shape[1:]) if squeeze else res

    if frame_mask is None:
        w = np.ones((B, 1, T, 1), dtype=dt)
    else:
        w = np.asarray(frame_mask, dtype=dt).reshape(B, 1, T, 1)
    n = w.sum() * F
    mu = (xd * w).sum(axis=(0, 2, 3), keepdims=True) / n
    xc = xd - mu
    var = (w * xc * xc).sum(axis=(0, 2, 3), keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_

    m = state.momentum
    if state.initialized:
        state.mean = m * state.mean + (1 - m) * mu.ravel().astype(np.float64)
        state.var = m * state.var + (1 - m) * var.ravel().astype(np.float64)
    else:
        state.mean = mu.ravel().astype(np.float64)
        state.var = var.ravel().astype(np.float64)
        state.initialized = True

    def backward(g):
        gxhat = g * g_
        gx = None
        if x.requires_grad:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv * (gxhat - w * s1 / n - w * xhat * s2 / n)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    res = _node(out, (x, gamma, beta), backward, "batch_norm")
    return reshape(res, res.shape[1:]) if squeeze else res


# -- gradient checking ---------------------------------------------------------

def gradient_check(f, inputs, eps=1e-5, max_entries=None, rng=None):
    """Largest relative gap between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor; ``inputs`` must be 64-bit.
    The error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_entries`` only that many randomly chosen entries per input are
    probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient_check needs float64 inputs")
        t.requires_grad = True
    zero_grad(inputs)
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            gflat = ga.reshape(-1)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                fp = f(*inputs).item()
                flat[j] = orig - eps
                fm = f(*inputs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                a = gflat[j]
                if not (np.isfinite(num) and np.isfinite(a)):
                    raise FloatingPointError(f"non-finite gradient at entry {j}: analytic {a}, numeric {num}")
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# -- serialisation -------------------------------------------------------------

MAGIC = b"PTNS"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class SerializationError(ValueError):
    pass


def write_tensor(fp, value):
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype(np.float64)
    tag = _DTYPE_TAGS[arr.dtype]
    fp.write(MAGIC)
    fp.write(struct.pack("<II", VERSION, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(struct.pack("<I", tag))
    fp.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def _read_exact(fp, n):
    buf = fp.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp):
    """Read one tensor block; returns a numpy array in native byte order."""
    if _read_exact(fp, 4) != MAGIC:
        raise SerializationError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(fp, 8))
    if version != VERSION:
        raise SerializationError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank)) if rank else ()
    (tag,) = struct.unpack("<I", _read_exact(fp, 4))
    if tag not in _TAG_DTYPES:
        raise SerializationError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(_read_exact(fp, count * dt.itemsize), dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(path, value):
    with open(path, "wb") as fp:
        write_tensor(fp, value)


def load_tensor(path):
    with open(path, "rb") as fp:
        return read_tensor(fp)
