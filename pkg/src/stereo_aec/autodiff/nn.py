"""Layer-level differentiable ops: inplace (de)convolution, LSTM, linear, iSTFT.

These are fused ops with hand-written backward passes; the composed versions
built from `tensor` primitives (e.g. `lstm_step`) serve as cross-checks.
"""
from __future__ import annotations

import numpy as np

from ..dsp import StftConfig, analysis_window, istft_array, synthesis_envelope
from .tensor import Tensor, add, flip, matmul, mul, permute, sigmoid, tanh


class Parameter(Tensor):
    def __init__(self, data, name: str = "", dtype=np.float64):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------- convolution

def conv2d_freq(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad_freq: int = 2) -> Tensor:
    """Stride-1 convolution with a 1 x K kernel that slides along frequency only.

    x: [B, Cin, T, F]; weight: [Cout, Cin, 1, K]; bias: [Cout]. The frequency
    axis is zero padded by `pad_freq` on both sides, so with K = 2*pad_freq + 1
    the output keeps T and F of the input.
    """
    _check(x.ndim == 4, f"conv2d_freq input must be [B, C, T, F], got {x.shape}")
    _check(weight.ndim == 4 and weight.shape[2] == 1,
           f"conv2d_freq weight must be [Cout, Cin, 1, K], got {weight.shape}")
    cout, cin, _, k = weight.shape
    _check(x.shape[1] == cin, f"input has {x.shape[1]} channels, weight expects {cin}")
    _check(bias is None or bias.shape == (cout,), f"bias shape {None if bias is None else bias.shape}")
    b, _, t, f = x.shape
    fp = f + 2 * pad_freq
    f_out = fp - k + 1
    _check(f_out >= 1, "kernel wider than padded input")

    # channels-last, padded: one GEMM gives every tap's contribution at every bin,
    # then tap j is read back shifted by j bins
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (0, 0), (pad_freq, pad_freq), (0, 0)))
    xp2 = xp.reshape(-1, cin)
    w_all = weight.data[:, :, 0, :].transpose(1, 2, 0).reshape(cin, k * cout)
    z = (xp2 @ w_all).reshape(b, t, fp, k, cout)
    out = z[:, :, 0:f_out, 0, :].copy()
    for j in range(1, k):
        out += z[:, :, j:j + f_out, j, :]
    del z
    if bias is not None:
        out += bias.data

    def backward(g):
        gl = g.transpose(0, 2, 3, 1)
        dz = np.zeros((b, t, fp, k, cout), dtype=g.dtype)
        for j in range(k):
            dz[:, :, j:j + f_out, j, :] = gl
        dz2 = dz.reshape(-1, k * cout)
        dxp = (dz2 @ w_all.T).reshape(b, t, fp, cin)
        dw = (xp2.T @ dz2).reshape(cin, k, cout).transpose(2, 0, 1)[:, :, None, :]
        dx = dxp[:, :, pad_freq:pad_freq + f, :].transpose(0, 3, 1, 2)
        if bias is None:
            return dx, dw
        return dx, dw, gl.sum(axis=(0, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out.transpose(0, 3, 1, 2), parents=parents, op="conv2d_freq",
                  backward_fn=backward)


def deconv2d_freq(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad_freq: int = 2) -> Tensor:
    """Stride-1 transposed convolution along frequency.

    weight: [Cin, Cout, 1, K]. With unit stride this equals `conv2d_freq` with
    the in/out axes swapped and the kernel reversed, padded by K - 1 - pad_freq.
    """
    _check(weight.ndim == 4 and weight.shape[2] == 1,
           f"deconv2d_freq weight must be [Cin, Cout, 1, K], got {weight.shape}")
    k = weight.shape[3]
    w_eff = flip(permute(weight, (1, 0, 2, 3)), axis=3)
    return conv2d_freq(x, w_eff, bias, pad_freq=k - 1 - pad_freq)


# ---------------------------------------------------------------- dense / recurrent

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: [..., I]; weight: [O, I]; bias: [O] -> [..., O]."""
    _check(weight.ndim == 2 and x.shape[-1] == weight.shape[1],
           f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out.reshape(lead + (weight.shape[0],)), parents=parents, op="linear",
                  backward_fn=backward)


def lstm_step(x_t: Tensor, state, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor):
    """One LSTM step from primitive ops. Gate order in the stacked weights: i, f, g, o."""
    h, c = state
    hidden = w_hh.shape[1]
    _check(x_t.ndim == 2 and x_t.shape[1] == w_ih.shape[1], f"x_t shape {x_t.shape}")
    _check(h.shape == (x_t.shape[0], hidden) and c.shape == h.shape, f"state shape {h.shape}")
    z = add(add(matmul(x_t, permute(w_ih, (1, 0))), b_ih),
            add(matmul(h, permute(w_hh, (1, 0))), b_hh))
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden:2 * hidden])
    g = tanh(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def _sig(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_seq(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Run an LSTM over x: [N, T, I] from a zero state; returns hidden states [N, T, H].

    Backward is truncation-free BPTT over the full sequence.
    """
    _check(x.ndim == 3, f"lstm_seq input must be [N, T, I], got {x.shape}")
    n, steps, n_in = x.shape
    four_h, hidden = w_hh.shape
    _check(four_h == 4 * hidden and w_ih.shape == (four_h, n_in),
           f"lstm weights {w_ih.shape}, {w_hh.shape} do not match input size {n_in}")
    dtype = x.data.dtype
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))             # [T, N, I]
    zx = xt.reshape(-1, n_in) @ w_ih.data.T + (b_ih.data + b_hh.data)
    zx = zx.reshape(steps, n, four_h)
    gates = np.empty((steps, n, four_h), dtype=dtype)
    cells = np.empty((steps, n, hidden), dtype=dtype)
    hs = np.empty((steps, n, hidden), dtype=dtype)
    h = np.zeros((n, hidden), dtype=dtype)
    c = np.zeros((n, hidden), dtype=dtype)
    whh_t = w_hh.data.T
    for t in range(steps):
        z = zx[t] + h @ whh_t
        a = gates[t]
        a[:, :2 * hidden] = _sig(z[:, :2 * hidden])
        a[:, 2 * hidden:3 * hidden] = np.tanh(z[:, 2 * hidden:3 * hidden])
        a[:, 3 * hidden:] = _sig(z[:, 3 * hidden:])
        c = a[:, hidden:2 * hidden] * c + a[:, :hidden] * a[:, 2 * hidden:3 * hidden]
        h = a[:, 3 * hidden:] * np.tanh(c)
        cells[t] = c
        hs[t] = h

    def backward(gout):
        gh_all = gout.transpose(1, 0, 2)                              # [T, N, H]
        dz = np.empty_like(gates)
        dh_next = np.zeros((n, hidden), dtype=dtype)
        dc_next = np.zeros((n, hidden), dtype=dtype)
        zero = np.zeros((n, hidden), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            a = gates[t]
            i, f, g, o = (a[:, :hidden], a[:, hidden:2 * hidden],
                          a[:, 2 * hidden:3 * hidden], a[:, 3 * hidden:])
            tc = np.tanh(cells[t])
            c_prev = cells[t - 1] if t > 0 else zero
            dh = gh_all[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d = dz[t]
            d[:, :hidden] = dc * g * i * (1.0 - i)
            d[:, hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
            d[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
            d[:, 3 * hidden:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ w_hh.data
        dz2 = dz.reshape(-1, four_h)
        h_prev = np.concatenate([zero[None], hs[:-1]], axis=0).reshape(-1, hidden)
        dw_hh = dz2.T @ h_prev
        dw_ih = dz2.T @ xt.reshape(-1, n_in)
        db = dz2.sum(axis=0)
        dx = (dz2 @ w_ih.data).reshape(steps, n, n_in).transpose(1, 0, 2)
        return dx, dw_ih, dw_hh, db, db.copy()

    return Tensor(hs.transpose(1, 0, 2), parents=(x, w_ih, w_hh, b_ih, b_hh), op="lstm_seq",
                  backward_fn=backward)


# ---------------------------------------------------------------- synthesis

def istft(real: Tensor, imag: Tensor, cfg: StftConfig) -> Tensor:
    """Differentiable inverse STFT of [B, T, F] real/imag parts -> [B, samples]."""
    _check(real.shape == imag.shape and real.ndim == 3, f"istft inputs {real.shape}, {imag.shape}")
    _check(real.shape[2] == cfg.n_freq, f"istft expects F={cfg.n_freq}, got {real.shape[2]}")
    n_frames = real.shape[1]
    n = cfg.fft_size
    out = istft_array(real.data + 1j * imag.data, cfg)
    window = analysis_window(cfg)
    env = synthesis_envelope(cfg, n_frames)
    # adjoint of irfft: bins 1..N/2-1 appear twice in the real signal
    weight = np.full(cfg.n_freq, 2.0 / n)
    weight[0] = 1.0 / n
    weight[-1] = 1.0 / n
    imag_mask = np.ones(cfg.n_freq)
    imag_mask[0] = imag_mask[-1] = 0.0
    dtype = real.data.dtype

    def backward(g):
        gf = np.lib.stride_tricks.sliding_window_view(g / env, cfg.frame_len, axis=-1)
        gf = gf[..., :n_frames * cfg.hop:cfg.hop, :] * window
        spec = np.fft.rfft(gf, n=n, axis=-1)
        return ((spec.real * weight).astype(dtype),
                (spec.imag * weight * imag_mask).astype(dtype))

    return Tensor(out.astype(dtype), parents=(real, imag), op="istft", backward_fn=backward)
