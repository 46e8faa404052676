"""Differentiable layers with hand-written backward passes, plus Adam.

Every layer works on a leading batch axis. Forward functions return
``(output, cache)``; the matching backward takes the cache and the upstream
gradient and returns input gradients together with parameter gradients in the
same container type as the parameters.

Shapes used throughout:

* conv / pool: ``(batch, channels, length)``
* recurrent layers: ``(batch, time, features)``
* attention: states ``(batch, time, features)`` -> context ``(batch, features)``
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffcore import (
    DTYPE,
    LayoutError,
    ParamTree,
    ShapeError,
    as_tensor,
    check_same_layout,
    sigmoid,
    softmax,
)

ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid")


def _activate(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return a
    if activation == "tanh":
        return np.tanh(a)
    if activation == "relu":
        return np.maximum(a, 0.0)
    if activation == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def _activation_grad(a: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    """Derivative of the activation, evaluated from pre-activation ``a`` / output ``out``."""
    if activation == "identity":
        return np.ones_like(a)
    if activation == "tanh":
        return 1.0 - out * out
    if activation == "relu":
        return (a > 0).astype(DTYPE)
    if activation == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {activation!r}")


class _Params:
    """Mixin: build from / export to flat ``name -> array`` dicts."""

    @classmethod
    def from_dict(cls, d, prefix: str = ""):
        pre = prefix + "." if prefix else ""
        kw = {}
        for f in fields(cls):
            if isinstance(f.type, str) and f.type.endswith("Params"):
                sub = globals()[f.type]
                kw[f.name] = sub.from_dict(d, pre + f.name)
            else:
                kw[f.name] = d[pre + f.name]
        return cls(**kw)

    def to_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        pre = prefix + "." if prefix else ""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, _Params):
                out.update(v.to_dict(pre + f.name))
            else:
                out[pre + f.name] = v
        return out


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------

@dataclass
class Conv1dParams(_Params):
    kernels: np.ndarray  # (out_ch, in_ch, k)
    bias: np.ndarray  # (out_ch,)

    @classmethod
    def init(cls, rng, in_ch: int, out_ch: int, k: int) -> "Conv1dParams":
        if k < 1:
            raise ValueError("kernel width must be >= 1")
        w = glorot(rng, (out_ch, in_ch, k), in_ch * k, out_ch * k)
        return cls(w, np.zeros(out_ch))


def conv1d_forward(x, p: Conv1dParams, activation: str = "identity"):
    """Valid, stride-1 cross-correlation followed by ``activation``.

    Accepts ``(in_ch, L)`` or ``(batch, in_ch, L)``; output keeps the input rank.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    out_ch, in_ch, k = p.kernels.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv expects {in_ch} input channels, got input of shape {x.shape}")
    if x.shape[2] < k:
        raise ShapeError(f"input length {x.shape[2]} shorter than kernel width {k}")
    win = sliding_window_view(x, k, axis=2)  # (B, in, Lout, k)
    a = np.einsum("bilk,oik->bol", win, p.kernels) + p.bias[None, :, None]
    out = _activate(a, activation)
    cache = (x, win, a, out, p, activation, squeeze)
    return (out[0] if squeeze else out), cache


def conv1d_backward(cache, dout):
    x, win, a, out, p, activation, squeeze = cache
    dout = as_tensor(dout)
    if squeeze:
        dout = dout[None]
    da = dout * _activation_grad(a, out, activation)
    k = p.kernels.shape[2]
    lout = a.shape[2]
    dk = np.einsum("bol,bilk->oik", da, win)
    db = da.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    for j in range(k):
        dx[:, :, j:j + lout] += np.einsum("bol,oi->bil", da, p.kernels[:, :, j])
    return (dx[0] if squeeze else dx), Conv1dParams(dk, db)


def max_pool1d_forward(x, width: int, stride: int):
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if width < 1 or stride < 1:
        raise ValueError("pool width and stride must be >= 1")
    if width > x.shape[2]:
        raise ShapeError(f"pool width {width} exceeds input length {x.shape[2]}")
    win = sliding_window_view(x, width, axis=2)[:, :, ::stride]  # (B, C, Lout, width)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    cache = (x.shape, arg, stride, squeeze)
    return (out[0] if squeeze else out), cache


def max_pool1d_backward(cache, dout):
    shape, arg, stride, squeeze = cache
    dout = as_tensor(dout)
    if squeeze:
        dout = dout[None]
    b, c, lout = arg.shape
    idx = np.arange(lout)[None, None, :] * stride + arg
    dx = np.zeros(shape)
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(dx, (np.broadcast_to(bi, idx.shape), np.broadcast_to(ci, idx.shape), idx), dout)
    return dx[0] if squeeze else dx


def max_pool1d(x, width: int, stride: int) -> np.ndarray:
    return max_pool1d_forward(x, width, stride)[0]


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

@dataclass
class LstmCellParams(_Params):
    # weights act on the concatenation [previous hidden, input]
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    h_i: np.ndarray
    h_f: np.ndarray
    h_o: np.ndarray
    h_c: np.ndarray

    @classmethod
    def init(cls, rng, input_size: int, hidden: int) -> "LstmCellParams":
        def w():
            return glorot(rng, (hidden, hidden + input_size), hidden + input_size, hidden)

        # draw order fixed: i, f, o, c
        Wi, Wf, Wo, Wc = w(), w(), w(), w()
        z = np.zeros(hidden)
        return cls(Wi, Wf, Wo, Wc, z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    def fused(self):
        # gate block order inside fused arrays: input, forget, candidate, output
        W = np.concatenate([self.W_i, self.W_f, self.W_c, self.W_o], axis=0)
        b = np.concatenate([self.h_i, self.h_f, self.h_c, self.h_o])
        H = self.hidden
        return W[:, :H], W[:, H:], b

    @classmethod
    def unfuse(cls, dW: np.ndarray, db: np.ndarray) -> "LstmCellParams":
        H = dW.shape[0] // 4
        Wi, Wf, Wc, Wo = (dW[k * H:(k + 1) * H] for k in range(4))
        bi, bf, bc, bo = (db[k * H:(k + 1) * H] for k in range(4))
        return cls(Wi, Wf, Wo, Wc, bi, bf, bo, bc)


@dataclass
class LstmState:
    cell: np.ndarray  # G
    hidden: np.ndarray  # f

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def _gate_scale(H: int) -> np.ndarray:
    # sigmoid(x) = 0.5 + 0.5 tanh(x / 2): one tanh call covers all four blocks
    s = np.full(4 * H, 0.5)
    s[2 * H:3 * H] = 1.0
    return s


def _step(zx, WhT, h_prev, c_prev, H, scale):
    t = np.tanh((zx + h_prev @ WhT) * scale)
    i = 0.5 + 0.5 * t[:, :H]
    f = 0.5 + 0.5 * t[:, H:2 * H]
    g = t[:, 2 * H:3 * H]
    o = 0.5 + 0.5 * t[:, 3 * H:]
    c = i * g + f * c_prev
    tc = np.tanh(c)
    return o * tc, c, (i, f, g, o, tc)


def _step_back(dh, dc, gates, c_prev, Wh, out):
    """Fill ``out`` with the pre-activation gradient; return ``(dh_prev, dc_prev)``."""
    i, f, g, o, tc = gates
    H = i.shape[1]
    dc = dc + dh * o * (1.0 - tc * tc)
    out[:, :H] = dc * g * i * (1.0 - i)
    out[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
    out[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
    out[:, 3 * H:] = dh * tc * o * (1.0 - o)
    return out @ Wh, dc * f


def lstm_cell_forward(state_prev: LstmState, x, p: LstmCellParams):
    """One step of the gated cell; returns ``(LstmState, cache)``.

    Works on a single vector or a ``(batch, features)`` block.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 1
    h_prev = np.atleast_2d(as_tensor(state_prev.hidden))
    c_prev = np.atleast_2d(as_tensor(state_prev.cell))
    x2 = np.atleast_2d(x)
    H = p.hidden
    if x2.shape[1] != p.input_size or h_prev.shape[1] != H or c_prev.shape[1] != H:
        raise ShapeError(
            f"cell expects input {p.input_size} / hidden {H}, got input {x.shape}, "
            f"hidden {np.shape(state_prev.hidden)}, cell {np.shape(state_prev.cell)}"
        )
    Wh, Wx, b = p.fused()
    h, c, gates = _step(x2 @ Wx.T + b, Wh.T, h_prev, c_prev, H, _gate_scale(H))
    cache = (x2, h_prev, c_prev, gates, Wh, Wx, squeeze)
    if squeeze:
        return LstmState(c[0], h[0]), cache
    return LstmState(c, h), cache


def lstm_cell_backward(cache, d_hidden, d_cell=None):
    """Gradients of one cell step.

    Returns ``(dx, LstmState(d_prev_cell, d_prev_hidden), LstmCellParams grads)``.
    """
    x2, h_prev, c_prev, gates, Wh, Wx, squeeze = cache
    dh = np.atleast_2d(as_tensor(d_hidden))
    dc = np.zeros_like(dh) if d_cell is None else np.atleast_2d(as_tensor(d_cell))
    dz = np.empty((dh.shape[0], 4 * Wh.shape[1]))
    dh_prev, dc_prev = _step_back(dh, dc, gates, c_prev, Wh, dz)
    dx = dz @ Wx
    dW = dz.T @ np.concatenate([h_prev, x2], axis=1)
    grads = LstmCellParams.unfuse(dW, dz.sum(axis=0))
    if squeeze:
        return dx[0], LstmState(dc_prev[0], dh_prev[0]), grads
    return dx, LstmState(dc_prev, dh_prev), grads


def lstm_forward(xs, p: LstmCellParams):
    """Scan the cell over ``xs`` of shape ``(batch, time, input)`` from a zero state.

    Returns hidden states ``(batch, time, hidden)`` and a cache for BPTT.
    """
    xs = as_tensor(xs)
    if xs.ndim != 3 or xs.shape[1] == 0:
        raise ShapeError(f"expected a non-empty (batch, time, input) block, got {xs.shape}")
    if xs.shape[2] != p.input_size:
        raise ShapeError(f"cell expects input size {p.input_size}, got {xs.shape[2]}")
    B, T, _ = xs.shape
    H = p.hidden
    Wh, Wx, b = p.fused()
    zx = xs @ Wx.T + b  # (B, T, 4H)
    WhT = np.ascontiguousarray(Wh.T)
    scale = _gate_scale(H)
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = []
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        h, c, gt = _step(zx[:, t], WhT, h, c, H, scale)
        hs[:, t] = h
        cs[:, t] = c
        gates.append(gt)
    return hs, (xs, hs, cs, gates, Wh, Wx)


def lstm_backward(cache, dhs):
    """Backpropagation through time; returns ``(dxs, LstmCellParams grads)``."""
    xs, hs, cs, gates, Wh, Wx = cache
    B, T, H = hs.shape
    dzs = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zero = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in range(T - 1, -1, -1):
        c_prev = cs[:, t - 1] if t > 0 else zero
        dh_next, dc_next = _step_back(dhs[:, t] + dh_next, dc_next, gates[t], c_prev, Wh, dz)
        dzs[:, t] = dz
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    flat = dzs.reshape(B * T, 4 * H)
    dWh = flat.T @ h_prev.reshape(B * T, H)
    dWx = flat.T @ xs.reshape(B * T, -1)
    dxs = dzs @ Wx
    grads = LstmCellParams.unfuse(np.concatenate([dWh, dWx], axis=1), flat.sum(axis=0))
    return dxs, grads


# --------------------------------------------------------------------------
# BiLSTM
# --------------------------------------------------------------------------

@dataclass
class BiLstmParams(_Params):
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams
    W_fwd_out: np.ndarray  # (out, hidden)
    W_bwd_out: np.ndarray  # (out, hidden)

    @classmethod
    def init(cls, rng, input_size: int, hidden: int, out: int | None = None) -> "BiLstmParams":
        out = hidden if out is None else out
        fwd = LstmCellParams.init(rng, input_size, hidden)
        bwd = LstmCellParams.init(rng, input_size, hidden)
        wf = glorot(rng, (out, hidden), hidden, out)
        wb = glorot(rng, (out, hidden), hidden, out)
        return cls(fwd, bwd, wf, wb)


def bilstm_forward(xs, p: BiLstmParams):
    """Forward and reversed scans merged per step as ``tanh(Wf s_fwd + Wb s_bwd)``.

    ``xs`` is ``(batch, time, input)`` or a list/array of ``time`` input vectors.
    """
    xs = as_tensor(xs)
    if xs.size == 0 or len(xs) == 0:
        raise ValueError("bilstm needs a non-empty input sequence")
    squeeze = xs.ndim == 2
    if squeeze:
        xs = xs[None]
    hf, cf = lstm_forward(xs, p.forward_cell)
    hb_rev, cb = lstm_forward(xs[:, ::-1], p.backward_cell)
    hb = hb_rev[:, ::-1]
    out = np.tanh(hf @ p.W_fwd_out.T + hb @ p.W_bwd_out.T)
    cache = (hf, hb, cf, cb, out, p, squeeze)
    return (out[0] if squeeze else out), cache


def bilstm_states(cache):
    """Forward and backward hidden sequences held in a forward cache."""
    hf, hb, *_ , squeeze = cache
    return (hf[0], hb[0]) if squeeze else (hf, hb)


def bilstm_backward(cache, dout):
    hf, hb, cf, cb, out, p, squeeze = cache
    dout = as_tensor(dout)
    if squeeze:
        dout = dout[None]
    dpre = dout * (1.0 - out * out)
    flat = dpre.reshape(-1, dpre.shape[2])
    dWf = flat.T @ hf.reshape(-1, hf.shape[2])
    dWb = flat.T @ hb.reshape(-1, hb.shape[2])
    dxf, gf = lstm_backward(cf, dpre @ p.W_fwd_out)
    dxb_rev, gb = lstm_backward(cb, (dpre @ p.W_bwd_out)[:, ::-1])
    dxs = dxf + dxb_rev[:, ::-1]
    grads = BiLstmParams(gf, gb, dWf, dWb)
    return (dxs[0] if squeeze else dxs), grads


# --------------------------------------------------------------------------
# attention and dense
# --------------------------------------------------------------------------

@dataclass
class AttentionParams(_Params):
    W_score: np.ndarray  # (1, feat)
    b_score: np.ndarray  # (1,)

    @classmethod
    def init(cls, rng, feat: int) -> "AttentionParams":
        return cls(glorot(rng, (1, feat), feat, 1), np.zeros(1))


def attention_forward(states, p: AttentionParams):
    """Score each step with ``tanh(w.S_t + b)``, softmax over time, weighted sum.

    Returns ``(context, weights, cache)``; states may be ``(time, feat)`` or
    ``(batch, time, feat)``.
    """
    S = as_tensor(states)
    if S.size == 0 or len(S) == 0:
        raise ValueError("attention over an empty sequence")
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    e = np.tanh(S @ p.W_score[0] + p.b_score[0])  # (B, T)
    alpha = softmax(e, axis=1)
    Y = np.einsum("bt,btf->bf", alpha, S)
    cache = (S, e, alpha, p, squeeze)
    if squeeze:
        return Y[0], alpha[0], cache
    return Y, alpha, cache


def attention_backward(cache, dY):
    S, e, alpha, p, squeeze = cache
    dY = as_tensor(dY)
    if squeeze:
        dY = dY[None]
    dS = alpha[..., None] * dY[:, None, :]
    dalpha = np.einsum("btf,bf->bt", S, dY)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dpre = de * (1.0 - e * e)
    dS += dpre[..., None] * p.W_score[0][None, None, :]
    grads = AttentionParams(
        np.einsum("bt,btf->f", dpre, S)[None, :], np.array([dpre.sum()])
    )
    return (dS[0] if squeeze else dS), grads


@dataclass
class DenseParams(_Params):
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @classmethod
    def init(cls, rng, n_in: int, n_out: int) -> "DenseParams":
        return cls(glorot(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out))


def dense_forward(x, W, b, activation: str = "identity"):
    x = as_tensor(x)
    W = as_tensor(W)
    b = as_tensor(b)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense layer {W.shape} + bias {b.shape} cannot take input {x.shape}")
    a = x @ W.T + b
    out = _activate(a, activation)
    return out, (x, a, out, W, activation)


def dense_backward(cache, dout):
    x, a, out, W, activation = cache
    da = as_tensor(dout) * _activation_grad(a, out, activation)
    if x.ndim == 1:
        return da @ W, DenseParams(np.outer(da, x), da)
    return da @ W, DenseParams(da.T @ x, da.sum(axis=0))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: ParamTree
    v: ParamTree
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: ParamTree) -> "AdamState":
        z = params.map(np.zeros_like)
        return cls(z, z, 0)


def adam_step(params: ParamTree, grads: ParamTree, state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    try:
        check_same_layout(params, grads)
        check_same_layout(params, state.m)
        check_same_layout(params, state.v)
    except LayoutError as exc:
        raise LayoutError(f"adam: {exc}") from None
    t = state.step_count + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k] = m
        new_v[k] = v
    return ParamTree(new_p), AdamState(ParamTree(new_m), ParamTree(new_v), t)
