"""Finite-difference gradient suite over every differentiable op and a tiny model.

Used by the `gradcheck` command and the test-suite. Everything runs in
float64 on small random inputs, so the whole suite takes well under a minute.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, finite_diff_check
from .dsp import StftConfig
from .model import LcsmConfig, LcsmModel

TINY_BINS = 9
TINY_FRAMES = 6
TINY_CHANNELS = 8


def _p(rng, shape, name, scale=1.0, positive=False):
    x = rng.standard_normal(shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Parameter(x, name)


def _weighted(t, w):
    # sum(w * t): a generic scalar readout with non-uniform upstream gradients
    return ad.tsum(ad.mul(t, w))


def op_cases(rng):
    """(name, closure, params) for each primitive and fused op."""
    cases = []
    a = _p(rng, (3, 4), "a")
    b = _p(rng, (3, 4), "b")
    row = _p(rng, (4,), "row")
    pos = _p(rng, (3, 4), "pos", positive=True)
    w = rng.standard_normal((3, 4))
    cases += [
        ("add(broadcast)", lambda: _weighted(ad.add(a, row), w), [a, row]),
        ("mul(broadcast)", lambda: _weighted(ad.mul(a, row), w), [a, row]),
        ("neg", lambda: _weighted(ad.neg(a), w), [a]),
        ("square", lambda: _weighted(ad.square(a), w), [a]),
        ("sqrt", lambda: _weighted(ad.sqrt(pos), w), [pos]),
        ("log", lambda: _weighted(ad.log(pos), w), [pos]),
        ("abs", lambda: _weighted(ad.abs_(a), w), [a]),
        ("sigmoid", lambda: _weighted(ad.sigmoid(a), w), [a]),
        ("tanh", lambda: _weighted(ad.tanh(a), w), [a]),
        ("elu", lambda: _weighted(ad.elu(a), w), [a]),
        ("minimum_const", lambda: _weighted(ad.minimum_const(a, 0.3), w), [a]),
        ("sum(axis)", lambda: ad.tsum(ad.square(ad.tsum(a, axis=1))), [a]),
        ("mean", lambda: ad.mean(ad.square(a)), [a]),
        ("reshape+permute", lambda: _weighted(ad.permute(ad.reshape(a, (4, 3)), (1, 0)), w), [a]),
        ("flip", lambda: _weighted(ad.flip(a, 1), w), [a]),
        ("getitem", lambda: ad.tsum(ad.square(a[:, 1::2])), [a]),
        ("concat", lambda: ad.tsum(ad.square(ad.concat([a, b], axis=1))), [a, b]),
        ("stack", lambda: ad.tsum(ad.square(ad.stack([a, b], axis=0))), [a, b]),
        ("matmul", lambda: _weighted(ad.matmul(a, ad.permute(b, (1, 0))), w[:, :3]), [a, b]),
    ]

    x = _p(rng, (2, 3, 4, 7), "x")
    gx = rng.standard_normal((2, 4, 4, 7))
    wc = _p(rng, (4, 3, 1, 5), "conv.w", 0.5)
    bc = _p(rng, (4,), "conv.b")
    wd = _p(rng, (3, 4, 1, 5), "deconv.w", 0.5)
    bd = _p(rng, (4,), "deconv.b")
    cases += [
        ("conv2d_freq", lambda: _weighted(ad.conv2d_freq(x, wc, bc), gx), [x, wc, bc]),
        ("deconv2d_freq", lambda: _weighted(ad.deconv2d_freq(x, wd, bd), gx), [x, wd, bd]),
        ("concat_channels", lambda: ad.tsum(ad.square(ad.concat_channels(x, x))), [x]),
    ]

    xs = _p(rng, (3, 5, 4), "seq")
    hidden = 3
    w_ih = _p(rng, (4 * hidden, 4), "w_ih", 0.5)
    w_hh = _p(rng, (4 * hidden, hidden), "w_hh", 0.5)
    b_ih = _p(rng, (4 * hidden,), "b_ih", 0.5)
    b_hh = _p(rng, (4 * hidden,), "b_hh", 0.5)
    gh = rng.standard_normal((3, 5, hidden))
    wl = _p(rng, (2, 4), "lin.w")
    bl = _p(rng, (2,), "lin.b")
    gl = rng.standard_normal((3, 5, 2))
    cases += [
        ("lstm_seq", lambda: _weighted(ad.lstm_seq(xs, w_ih, w_hh, b_ih, b_hh), gh),
         [xs, w_ih, w_hh, b_ih, b_hh]),
        ("linear", lambda: _weighted(ad.linear(xs, wl, bl), gl), [xs, wl, bl]),
    ]

    cfg = StftConfig.for_bins(TINY_BINS)
    re = _p(rng, (2, TINY_FRAMES, TINY_BINS), "re")
    im = _p(rng, (2, TINY_FRAMES, TINY_BINS), "im")
    gw = rng.standard_normal((2, cfg.n_samples(TINY_FRAMES)))
    cases.append(("istft", lambda: _weighted(ad.istft(re, im, cfg), gw), [re, im]))
    return cases


def tiny_model(variant: str = "dcdm", seed: int = 0) -> LcsmModel:
    cfg = LcsmConfig(variant, conv_channels=TINY_CHANNELS, lstm_hidden=TINY_CHANNELS)
    return LcsmModel(cfg, seed=seed, stft=StftConfig.for_bins(TINY_BINS))


def tiny_model_case(seed: int = 0, variant: str = "dcdm", lam: float = 0.1):
    """End-to-end combined loss of a tiny LCSM (F=9, T=6, 8 channels) on random data."""
    from .training import cross_domain_loss

    rng = np.random.default_rng(seed)
    model = tiny_model(variant, seed)
    cin, cout = model.variant.in_channels, model.variant.out_channels
    x = rng.standard_normal((1, cin, TINY_FRAMES, TINY_BINS))
    y = rng.standard_normal((1, cout, TINY_FRAMES, TINY_BINS))
    k = cout // 2
    n = model.stft.n_samples(TINY_FRAMES)
    wav = rng.standard_normal((k, n))

    def loss():
        out = model.forward(x)
        spec = ad.permute(ad.reshape(out, (k, 2, TINY_FRAMES, TINY_BINS)), (1, 0, 2, 3))
        est_wav = ad.istft(spec[0], spec[1], model.stft)
        return cross_domain_loss(out, y, est_wav, wav, lam=lam).graph

    return "tiny LCSM combined loss", loss, model.parameters()


def run_suite(seed: int = 0, tol: float = 1e-4, max_coords: int = 400):
    """Run every case; returns a list of (name, GradCheckReport, passed)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, params in op_cases(rng) + [tiny_model_case(seed)]:
        report = finite_diff_check(fn, params, h=1e-3, max_coords=max_coords,
                                   rng=np.random.default_rng(seed))
        results.append((name, report, report.passed(tol)))
    return results
