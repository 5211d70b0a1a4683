"""LCSM: inplace convolutional encoder/decoder around a channel-wise LSTM.

Input/output channel layout (frozen):

    DCSM  in  [X1_R, X1_I, X2_R, X2_I, Y_R, Y_I]        out [S_R, S_I]
    DCDM  in  [X1_R, X1_I, X2_R, X2_I, Y1_R, Y1_I, Y2_R, Y2_I]
          out [S1_R, S1_I, S2_R, S2_I]

DCSM handles one microphone per pass; for microphone 2 its spectrum goes into
the Y slot. The frequency axis is never resampled: every conv/deconv has
stride 1 with padding 2, and the recurrent stage folds F into the batch axis.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import serialize
from .autodiff.nn import Parameter
from .dsp import SAMPLE_RATE, AudioBuffer, ComplexSpectrogram, StftConfig, istft_array, stft_array

VARIANTS = {"dcsm": (6, 2), "dcdm": (8, 4)}


@dataclass(frozen=True)
class LcsmVariant:
    kind: str = "dcsm"

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.kind!r}")

    @property
    def in_channels(self) -> int:
        return VARIANTS[self.kind][0]

    @property
    def out_channels(self) -> int:
        return VARIANTS[self.kind][1]

    @property
    def n_mics(self) -> int:
        return self.out_channels // 2


@dataclass(frozen=True)
class LcsmConfig:
    variant: str = "dcsm"
    conv_channels: int = 64
    n_conv: int = 6
    kernel: int = 5
    lstm_hidden: int = 128
    n_lstm: int = 2

    def __post_init__(self):
        LcsmVariant(self.variant)
        if self.kernel % 2 != 1:
            raise ValueError("kernel width must be odd to keep F unchanged")
        if min(self.conv_channels, self.n_conv, self.lstm_hidden, self.n_lstm) < 1:
            raise ValueError("all layer sizes must be positive")

    @property
    def kind(self) -> LcsmVariant:
        return LcsmVariant(self.variant)


class LcsmModel:
    """Parameters and forward pass of the LCSM network.

    >>> model = LcsmModel(LcsmConfig("dcsm"), seed=0)
    >>> model.count_params()
    550786
    """

    def __init__(self, config: LcsmConfig | None = None, seed: int = 0, dtype=np.float64,
                 stft: StftConfig | None = None):
        self.config = config or LcsmConfig()
        self.variant = self.config.kind
        self.stft = stft or StftConfig()
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(seed), dtype)

    # ------------------------------------------------------------ construction
    def _add(self, name, value, dtype):
        self.params[name] = Parameter(value, name=name, dtype=dtype)

    def _build(self, rng, dtype):
        cfg = self.config
        c, k, h = cfg.conv_channels, cfg.kernel, cfg.lstm_hidden

        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        cin = self.variant.in_channels
        for i in range(1, cfg.n_conv + 1):
            self._add(f"enc{i}.weight", glorot((c, cin, 1, k), cin * k, c * k), dtype)
            self._add(f"enc{i}.bias", np.zeros(c), dtype)
            cin = c
        n_in = c
        for i in range(1, cfg.n_lstm + 1):
            lim = 1.0 / np.sqrt(h)
            self._add(f"lstm{i}.w_ih", rng.uniform(-lim, lim, (4 * h, n_in)), dtype)
            self._add(f"lstm{i}.w_hh", rng.uniform(-lim, lim, (4 * h, h)), dtype)
            b_ih = np.zeros(4 * h)
            b_ih[h:2 * h] = 1.0  # forget gate
            self._add(f"lstm{i}.b_ih", b_ih, dtype)
            self._add(f"lstm{i}.b_hh", np.zeros(4 * h), dtype)
            n_in = h
        self._add("proj.weight", glorot((c, h), h, c), dtype)
        self._add("proj.bias", np.zeros(c), dtype)
        for i in range(cfg.n_conv, 0, -1):
            cout = self.variant.out_channels if i == 1 else c
            self._add(f"dec{i}.weight", glorot((2 * c, cout, 1, k), 2 * c * k, cout * k), dtype)
            self._add(f"dec{i}.bias", np.zeros(cout), dtype)

    # ------------------------------------------------------------ bookkeeping
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def count_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def zero_(self):
        for p in self.params.values():
            p.data[...] = 0.0
        return self

    def astype(self, dtype):
        for name, p in self.params.items():
            self.params[name] = Parameter(p.data, name=name, dtype=dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    # ------------------------------------------------------------ forward
    def _p(self, name):
        return self.params[name]

    def recurrent_stage(self, feats: ad.Tensor, trace=None) -> ad.Tensor:
        """[B, C, T, F] -> [B, C, T, F] through LSTMs + projection shared by all bins."""
        b, c, t, f = feats.shape
        x = ad.reshape(ad.permute(feats, (0, 3, 2, 1)), (b * f, t, c))
        _record(trace, "Reshape", feats.shape, x.shape, "-")
        for i in range(1, self.config.n_lstm + 1):
            y = ad.lstm_seq(x, self._p(f"lstm{i}.w_ih"), self._p(f"lstm{i}.w_hh"),
                            self._p(f"lstm{i}.b_ih"), self._p(f"lstm{i}.b_hh"))
            _record(trace, f"Channel-wise LSTM({i})", x.shape, y.shape, str(self.config.lstm_hidden))
            x = y
        y = ad.linear(x, self._p("proj.weight"), self._p("proj.bias"))
        _record(trace, "Channel-wise Linear", x.shape, y.shape, str(self.config.conv_channels))
        out = ad.permute(ad.reshape(y, (b, f, t, c)), (0, 3, 2, 1))
        _record(trace, "Reshape", y.shape, out.shape, "-")
        return out

    def forward(self, x, trace: list | None = None) -> ad.Tensor:
        """[B, C_in, T, F] features -> [B, C_out, T, F] estimated real/imag spectra."""
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.variant.in_channels:
            raise ValueError(f"{self.variant.kind.upper()} expects [B, {self.variant.in_channels}, "
                             f"T, F] input, got {x.shape}")
        k = self.config.kernel
        hyper = f"1x{k}, (1, 1), {self.config.conv_channels}"
        skips = []
        h = x
        for i in range(1, self.config.n_conv + 1):
            out = ad.elu(ad.conv2d_freq(h, self._p(f"enc{i}.weight"), self._p(f"enc{i}.bias"),
                                        pad_freq=k // 2))
            _record(trace, f"Inplace Conv2d({i})", h.shape, out.shape, hyper)
            skips.append(out)
            h = out
        h = self.recurrent_stage(h, trace)
        for i in range(self.config.n_conv, 0, -1):
            inp = ad.concat_channels(skips[i - 1], h)
            out = ad.deconv2d_freq(inp, self._p(f"dec{i}.weight"), self._p(f"dec{i}.bias"),
                                   pad_freq=k // 2)
            if i > 1:
                out = ad.elu(out)
            _record(trace, f"Inplace Deconv2d({i})", inp.shape, out.shape, hyper)
            h = out
        return h

    __call__ = forward

    # ------------------------------------------------------------ checkpoints
    def metadata(self) -> dict:
        return {"architecture": asdict(self.config), "stft": asdict(self.stft), "seed": self.seed,
                "n_params": self.count_params()}

    def save(self, path, extra: dict | None = None):
        """Write `path` (parameter file) and `path`.json (metadata record)."""
        path = Path(path)
        serialize.save(path, self.state_dict())
        meta = self.metadata()
        if extra:
            meta.update(extra)
        tmp = path.with_name(path.name + ".json.tmp")
        tmp.write_text(json.dumps(meta, indent=2))
        tmp.replace(_meta_path(path))

    @classmethod
    def load(cls, path, dtype=np.float64) -> "LcsmModel":
        path = Path(path)
        meta_file = _meta_path(path)
        if not meta_file.exists():
            raise FileNotFoundError(f"checkpoint metadata {meta_file} not found")
        meta = json.loads(meta_file.read_text())
        model = cls(LcsmConfig(**meta["architecture"]), seed=meta.get("seed", 0), dtype=dtype,
                    stft=StftConfig(**meta["stft"]))
        model.load_state_dict(serialize.load(path))
        return model


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _record(trace, name, in_shape, out_shape, hyper):
    if trace is not None:
        trace.append((name, tuple(in_shape), hyper, tuple(out_shape)))


def shape_table(variant: str = "dcsm", n_frames: int = 2, n_freq: int = 161) -> list[tuple]:
    """Per-layer (name, input shape, hyper-parameters, output shape) from a live forward pass."""
    model = LcsmModel(LcsmConfig(variant), seed=0)
    trace = []
    model.forward(np.zeros((1, model.variant.in_channels, n_frames, n_freq)), trace=trace)
    return trace


# ---------------------------------------------------------------- packing

def _as_complex(s) -> np.ndarray:
    return s.data if isinstance(s, ComplexSpectrogram) else np.asarray(s)


def pack_inputs(far_specs, mic_specs) -> np.ndarray:
    """Stack real/imag parts of [X1, X2] and [Y1] (DCSM) or [Y1, Y2] (DCDM).

    Each spectrogram is [T, F] or batched [B, T, F]; returns [B, C, T, F].
    """
    specs = [_as_complex(s) for s in list(far_specs) + list(mic_specs)]
    if len(far_specs) != 2 or len(mic_specs) not in (1, 2):
        raise ValueError("need two far-end spectrograms and one or two microphone spectrograms")
    shape = specs[0].shape
    for s in specs[1:]:
        if s.shape != shape:
            raise ValueError(f"spectrogram shape mismatch: {shape} vs {s.shape}")
    chans = []
    for s in specs:
        chans += [s.real, s.imag]
    out = np.stack(chans, axis=-3)
    return out if out.ndim == 4 else out[None]


def unpack_outputs(features) -> list[np.ndarray]:
    """[B, 2K, T, F] real features -> K complex arrays [B, T, F]."""
    arr = features.data if isinstance(features, ad.Tensor) else np.asarray(features)
    if arr.ndim != 4 or arr.shape[1] % 2:
        raise ValueError(f"expected [B, 2K, T, F] features, got {arr.shape}")
    return [arr[:, 2 * k] + 1j * arr[:, 2 * k + 1] for k in range(arr.shape[1] // 2)]


def dcsm_inputs(far_specs, mic_specs, mic: int) -> np.ndarray:
    """DCSM input for microphone `mic`: its spectrum occupies the Y slot."""
    return pack_inputs(far_specs, [mic_specs[mic]])


def model_inputs(variant: LcsmVariant, far_specs, mic_specs, mic: int | None = None) -> np.ndarray:
    if variant.kind == "dcdm":
        return pack_inputs(far_specs, mic_specs)
    return dcsm_inputs(far_specs, mic_specs, 0 if mic is None else mic)


# ---------------------------------------------------------------- inference

def _padded_length(n: int, cfg: StftConfig) -> int:
    if n <= cfg.frame_len:
        return cfg.frame_len
    return cfg.frame_len + int(np.ceil((n - cfg.frame_len) / cfg.hop)) * cfg.hop


def _samples(b) -> np.ndarray:
    return b.samples if isinstance(b, AudioBuffer) else np.asarray(b, dtype=np.float64)


def estimate_near_end(model: LcsmModel, far, mics, which: tuple | None = None,
                      return_spectra: bool = False):
    """Near-end estimates for the requested microphones (default: all).

    DCSM runs one forward pass per microphone, DCDM one pass for both. Inputs
    are zero padded to whole frames and the estimates trimmed back to the
    input length.
    """
    far, mics = [_samples(x) for x in far], [_samples(y) for y in mics]
    n = len(mics[0])
    rates = {b.sample_rate for b in [*far, *mics] if isinstance(b, AudioBuffer)}
    if rates - {SAMPLE_RATE}:
        raise ValueError(f"inputs must be {SAMPLE_RATE} Hz, got {sorted(rates)}")
    if any(len(x) != n for x in far + mics):
        raise ValueError("far-end and microphone signals must have equal length")
    which = tuple(range(len(mics))) if which is None else tuple(which)
    cfg = model.stft
    total = _padded_length(n, cfg)
    pad = lambda x: np.pad(x, (0, total - n))  # noqa: E731
    far_specs = [stft_array(pad(x), cfg) for x in far]
    mic_specs = [stft_array(pad(y), cfg) for y in mics]

    spectra = {}
    with ad.no_grad():
        if model.variant.kind == "dcdm":
            out = unpack_outputs(model.forward(pack_inputs(far_specs, mic_specs)))
            spectra = {j: out[j][0] for j in which}
        else:
            for j in which:
                feats = model.forward(dcsm_inputs(far_specs, mic_specs, j))
                spectra[j] = unpack_outputs(feats)[0][0]
    estimates = [AudioBuffer(istft_array(spectra[j], cfg)[:n]) for j in which]
    if return_spectra:
        return estimates, [ComplexSpectrogram(spectra[j], cfg) for j in which]
    return estimates
