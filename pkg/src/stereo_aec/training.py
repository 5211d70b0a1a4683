"""Losses, optimizer, learning-rate schedule and the training loop.

The training objective combines a spectral term (IMAE: L1 on magnitude, real
and imaginary parts) with a waveform SDR term computed through a
differentiable inverse STFT:

    combined = imae - lam * sdr_db        (default, SDR is maximized)
    combined = imae + lam * sdr_db        (literal_sign=True, ablation only)

All L1 terms are means over every (batch, spectrum, frame, bin) element.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import serialize
from .dataset import DatasetManifest, MixtureExample
from .dsp import AudioBuffer, StftConfig, istft_array, stft_array
from .model import LcsmModel, pack_inputs

log = logging.getLogger(__name__)

MAG_DELTA = 1e-12
SDR_DELTA = 1e-10
SDR_CAP = 100.0
_DB = 10.0 / math.log(10.0)


# ---------------------------------------------------------------- losses

def _as_features(spec) -> ad.Tensor:
    """Tensor [B, 2K, T, F] (real/imag interleaved) from a Tensor, real array or complex array."""
    if isinstance(spec, ad.Tensor):
        return spec
    arr = np.asarray(spec)
    if np.iscomplexobj(arr):
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        feats = np.empty(arr.shape[:1] + (2 * arr.shape[1],) + arr.shape[2:])
        feats[:, 0::2] = arr.real
        feats[:, 1::2] = arr.imag
        arr = feats
    return ad.Tensor(arr)


def imae_loss(est_spec, target_spec) -> ad.Tensor:
    """Improved MAE between spectra in [B, 2K, T, F] feature layout (or complex arrays).

    Returns a scalar Tensor; call `.item()` for the value.
    """
    est = _as_features(est_spec)
    tgt = _as_features(target_spec)
    if est.shape != tgt.shape:
        raise ValueError(f"imae_loss shape mismatch: {est.shape} vs {tgt.shape}")
    tgt = ad.Tensor(tgt.data.astype(est.dtype, copy=False))
    er, ei = est[:, 0::2], est[:, 1::2]
    tr, ti = tgt.data[:, 0::2], tgt.data[:, 1::2]
    mag = ad.sqrt(ad.add(ad.add(ad.square(er), ad.square(ei)), MAG_DELTA))
    tmag = np.sqrt(tr * tr + ti * ti + MAG_DELTA)
    return ad.add(ad.add(ad.mean(ad.abs_(ad.add(mag, -tmag))),
                         ad.mean(ad.abs_(ad.add(er, -tr)))),
                  ad.mean(ad.abs_(ad.add(ei, -ti))))


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def sdr_db(target, estimate) -> float:
    """10 log10(|s|^2 / (|s - s_hat|^2 + 1e-10)), capped at 100 dB."""
    s, e = _samples(target), _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"sdr_db length mismatch: {s.shape} vs {e.shape}")
    num = float(np.sum(s * s))
    if num <= 0:
        raise ValueError("sdr_db: target has zero energy")
    den = float(np.sum((s - e) ** 2)) + SDR_DELTA
    return min(10.0 * math.log10(num / den), SDR_CAP)


def sdr_tensor(target: np.ndarray, estimate: ad.Tensor) -> ad.Tensor:
    """Differentiable per-row SDR in dB for [B, N] signals; returns a [B] Tensor."""
    s = np.asarray(target, dtype=estimate.dtype)
    if s.shape != estimate.shape or s.ndim != 2:
        raise ValueError(f"sdr shapes {s.shape} vs {estimate.shape}")
    num = np.sum(s.astype(np.float64) ** 2, axis=1)
    if np.any(num <= 0):
        raise ValueError("sdr: a target row has zero energy")
    den = ad.tsum(ad.square(ad.add(estimate, -s)), axis=1)
    sdr = ad.mul(ad.add(ad.neg(ad.log(ad.add(den, SDR_DELTA))),
                        np.log(num).astype(estimate.dtype)), _DB)
    return ad.minimum_const(sdr, SDR_CAP)


@dataclass
class LossBreakdown:
    imae: float
    sdr_db: float
    combined: float
    lam: float
    graph: ad.Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"imae": self.imae, "sdr_db": self.sdr_db, "combined": self.combined,
                "lambda": self.lam}


def cross_domain_loss(est_spec, target_spec, est_wav, target_wav, lam: float = 0.1,
                      literal_sign: bool = False, kind: str = "cd") -> LossBreakdown:
    """Combined spectral + waveform loss.

    est_spec/target_spec: [B, 2K, T, F]; est_wav (Tensor) / target_wav: [B*K, N],
    one row per estimated microphone, so the SDR term averages over mics.
    kind="mse" swaps the objective for a plain spectral MSE (baseline ablation);
    imae and sdr are still reported.
    """
    est = _as_features(est_spec)
    imae = imae_loss(est, target_spec)
    est_wav = est_wav if isinstance(est_wav, ad.Tensor) else ad.Tensor(np.asarray(est_wav))
    sdr = ad.mean(sdr_tensor(np.atleast_2d(target_wav), est_wav))
    if kind == "mse":
        tgt = _as_features(target_spec).data.astype(est.dtype)
        combined = ad.mean(ad.square(ad.add(est, -tgt)))
    elif kind == "cd":
        sign = 1.0 if literal_sign else -1.0
        combined = ad.add(imae, ad.mul(sdr, sign * lam)) if lam else imae
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    value = float(combined.item())
    if not math.isfinite(value):
        raise FloatingPointError(f"loss is not finite ({value})")
    return LossBreakdown(float(imae.item()), float(sdr.item()), value, lam, graph=combined)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls({p.name: np.zeros_like(p.data) for p in params},
                   {p.name: np.zeros_like(p.data) for p in params}, 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of `params` (list of Parameters).

    grads: one array (or None for "no gradient") per parameter.
    """
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError("adam_step: one gradient per parameter required")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} for parameter {p.name!r} {p.shape}")
        m, v = state.m[p.name], state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- schedule

class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without strict improvement."""

    def __init__(self, lr: float, factor: float = 0.3, patience: int = 3):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.stalled = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr *= self.factor
                self.stalled = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "stalled": self.stalled}


def plateau_scheduler(history, lr_initial: float = 1e-3, factor: float = 0.3,
                      patience: int = 3) -> float:
    """Learning rate after observing the validation-loss `history` (a pure function)."""
    sched = PlateauScheduler(lr_initial, factor, patience)
    for loss in history:
        sched.step(float(loss))
    return sched.lr


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_initial: float = 1e-3
    lr_factor: float = 0.3
    lr_patience: int = 3
    lam: float = 0.1
    seed: int = 0
    precision: str = "float32"      # "float32" or "float64"
    literal_sign: bool = False
    loss: str = "cd"                # "cd" or "mse"
    max_examples: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_patience < 1:
            raise ValueError("epochs, batch_size and lr_patience must be positive")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.loss not in ("cd", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class TrainItem:
    """One model input/target pair with whole-frame waveforms."""
    inputs: np.ndarray        # [C_in, T, F]
    target_spec: np.ndarray   # [C_out, T, F]
    target_wav: np.ndarray    # [K, N]


def prepare_items(model: LcsmModel, examples, dtype=np.float64) -> list[TrainItem]:
    """Turn mixture examples into training items for the model's variant.

    DCDM yields one item per example (both mics). DCSM yields one item per
    microphone, with that mic in the Y slot.
    """
    cfg = model.stft
    items = []
    for ex in examples:
        n_frames = cfg.n_frames(len(ex))
        if n_frames < 1:
            raise ValueError("example shorter than one STFT frame")
        far = [stft_array(b.samples, cfg) for b in ex.far_signals]
        mics = [stft_array(b.samples, cfg) for b in ex.mic_signals]
        tgts = [stft_array(b.samples, cfg) for b in ex.targets]
        groups = [(0, 1)] if model.variant.kind == "dcdm" else [(0,), (1,)]
        for group in groups:
            x = pack_inputs(far, [mics[j] for j in group])[0]
            y = pack_inputs(far, [tgts[j] for j in group])[0][4:]
            wav = np.stack([istft_array(tgts[j], cfg) for j in group])
            items.append(TrainItem(x.astype(dtype), y.astype(dtype), wav.astype(dtype)))
    return items


def _batch_losses(model: LcsmModel, batch: list[TrainItem], config: TrainConfig) -> LossBreakdown:
    t = min(it.inputs.shape[1] for it in batch)
    x = np.stack([it.inputs[:, :t] for it in batch])
    y = np.stack([it.target_spec[:, :t] for it in batch])
    n = model.stft.n_samples(t)
    wav = np.concatenate([it.target_wav[:, :n] for it in batch])
    out = model.forward(x)
    b, c = out.shape[:2]
    k = c // 2
    spec = ad.permute(ad.reshape(out, (b * k, 2) + out.shape[2:]), (1, 0, 2, 3))
    est_wav = ad.istft(spec[0], spec[1], model.stft)
    return cross_domain_loss(out, y, est_wav, wav, lam=config.lam,
                             literal_sign=config.literal_sign, kind=config.loss)


def _mean_breakdowns(parts: list[tuple[LossBreakdown, int]], lam: float) -> dict:
    total = sum(w for _, w in parts)
    out = {key: sum(getattr(bd, key) * w for bd, w in parts) / total
           for key in ("imae", "sdr_db", "combined")}
    out["lambda"] = lam
    return out


def evaluate_loss(model: LcsmModel, items: list[TrainItem], config: TrainConfig) -> dict:
    parts = []
    with ad.no_grad():
        for i in range(0, len(items), config.batch_size):
            batch = items[i:i + config.batch_size]
            parts.append((_batch_losses(model, batch, config), len(batch)))
    return _mean_breakdowns(parts, config.lam)


@dataclass
class FitResult:
    history: list
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path


def _load_examples(manifest, limit=None) -> list[MixtureExample]:
    if manifest is None:
        return []
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    n = len(manifest) if limit is None else min(limit, len(manifest))
    return [manifest.example(i) for i in range(n)]


def _save_optimizer(path: Path, state: AdamState):
    arrays = {}
    for name in state.m:
        arrays["m." + name] = state.m[name]
        arrays["v." + name] = state.v[name]
    serialize.save(path, arrays)


def _load_optimizer(path: Path, params, step: int, dtype) -> AdamState:
    arrays = serialize.load(path)
    state = AdamState.zeros(params)
    for p in params:
        state.m[p.name] = arrays["m." + p.name].astype(dtype)
        state.v[p.name] = arrays["v." + p.name].astype(dtype)
    state.step = step
    return state


def fit(model: LcsmModel, train_manifest, val_manifest=None, config: TrainConfig | None = None,
        out_dir=None, resume: bool = False, extra_meta: dict | None = None) -> FitResult:
    """Train `model` in place.

    Writes to out_dir: metrics.jsonl (one JSON object per epoch), last.lcsm
    (+ .json metadata and .optim moments, for resuming) and best.lcsm (lowest
    validation combined loss; training loss when no validation set is given).
    Shuffling uses a generator seeded by (seed, epoch), so a resumed run
    replays the same batches as an uninterrupted one.
    """
    config = config or TrainConfig()
    out_dir = Path(out_dir if out_dir is not None else "train_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype
    if model.dtype != dtype:
        model.astype(dtype)
    train_items = prepare_items(model, _load_examples(train_manifest, config.max_examples), dtype)
    val_items = prepare_items(model, _load_examples(val_manifest), dtype)
    if not train_items:
        raise ValueError("training manifest is empty")
    params = model.parameters()
    log_path = out_dir / "metrics.jsonl"
    last = out_dir / "last.lcsm"
    best = out_dir / "best.lcsm"
    meta = {"train_config": asdict(config), **(extra_meta or {})}

    history: list = []
    sched = PlateauScheduler(config.lr_initial, config.lr_factor, config.lr_patience)
    opt = AdamState.zeros(params)
    best_loss = math.inf
    start_epoch = 1
    if resume and last.exists():
        saved = LcsmModel.load(last, dtype=dtype)
        model.load_state_dict(saved.state_dict())
        info = json.loads(last.with_name(last.name + ".json").read_text())["resume"]
        history = info["history"]
        for rec in history:
            sched.step(rec["val"]["combined"] if rec.get("val") else rec["train"]["combined"])
        opt = _load_optimizer(last.with_name(last.name + ".optim"), params, info["step"], dtype)
        best_loss = info["best_loss"]
        start_epoch = len(history) + 1
        log.info("resuming at epoch %d", start_epoch)
    elif log_path.exists():
        log_path.unlink()

    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_items))
        parts = []
        for i in range(0, len(order), config.batch_size):
            batch = [train_items[j] for j in order[i:i + config.batch_size]]
            model.zero_grad()
            bd = _batch_losses(model, batch, config)
            bd.graph.backward()
            adam_step(params, [p.grad for p in params], opt, lr)
            parts.append((bd, len(batch)))
        train = _mean_breakdowns(parts, config.lam)
        val = evaluate_loss(model, val_items, config) if val_items else None
        monitor = (val or train)["combined"]
        sched.step(monitor)
        record = {"epoch": epoch, "lr": lr, "train": train, "val": val,
                  "wall_time": time.perf_counter() - t0}
        history.append(record)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        if monitor < best_loss:
            best_loss = monitor
            model.save(best, extra={**meta, "epoch": epoch, "monitor": monitor})
        _save_optimizer(last.with_name(last.name + ".optim"), opt)
        model.save(last, extra={**meta, "epoch": epoch,
                                "resume": {"history": history, "step": opt.step,
                                           "best_loss": best_loss}})
        log.info("epoch %d lr %.2e train %.4f val %s", epoch, lr, train["combined"],
                 "-" if val is None else f"{val['combined']:.4f}")
    return FitResult(history, best, last, log_path)
