"""Framing, STFT/iSTFT, linear convolution and WAV I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
ENVELOPE_FLOOR = 1e-8
DIRECT_CONV_MAX_TAPS = 128


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioBuffer expects a 1-D array, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Frame length, hop and FFT size in samples.

    Defaults give 20 ms frames with 50% overlap at 16 kHz.
    """

    frame_len: int = 320
    hop: int = 160
    fft_size: int = 320
    window: str = "hamming"

    def __post_init__(self):
        if self.frame_len <= 0 or self.frame_len % 2:
            raise ValueError(f"frame_len must be a positive even number, got {self.frame_len}")
        if self.hop * 2 != self.frame_len:
            raise ValueError(f"hop must be frame_len / 2 (50% overlap), got hop={self.hop}")
        if self.fft_size < self.frame_len or self.fft_size % 2:
            raise ValueError(f"fft_size must be even and >= frame_len, got {self.fft_size}")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    @classmethod
    def for_bins(cls, n_freq: int) -> "StftConfig":
        n = 2 * (n_freq - 1)
        return cls(frame_len=n, hop=n // 2, fft_size=n)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.frame_len


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # [T, F] complex
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[1] != self.config.n_freq:
            raise ValueError(
                f"spectrogram shape {self.data.shape} inconsistent with F={self.config.n_freq}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def analysis_window(cfg: StftConfig) -> np.ndarray:
    # periodic (DFT-even) window
    from scipy import signal as sps  # deferred: heavy import, not needed by every command

    return sps.get_window(cfg.window, cfg.frame_len, fftbins=True)


def synthesis_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Overlap-added squared analysis window, clamped away from zero."""
    w2 = analysis_window(cfg) ** 2
    env = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        env[t * cfg.hop:t * cfg.hop + cfg.frame_len] += w2
    return np.maximum(env, ENVELOPE_FLOOR)


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """View of `x` as overlapping frames along a new second-to-last axis."""
    n = (x.shape[-1] - frame_len) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=-1)[..., :n * hop:hop, :]


def stft(sig: AudioBuffer | np.ndarray, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    x = sig.samples if isinstance(sig, AudioBuffer) else np.asarray(sig, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise ValueError(f"signal of {len(x)} samples is shorter than one frame ({cfg.frame_len})")
    return ComplexSpectrogram(stft_array(x, cfg), cfg)


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT over the last axis of `x`; returns [..., T, F] complex."""
    frames = frame_signal(x, cfg.frame_len, cfg.hop) * analysis_window(cfg)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=-1)


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add [..., T, N] frames into [..., (T-1)*hop + N] samples."""
    n_frames, n = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + n,), dtype=frames.dtype)
    # 50% overlap: even and odd frames each tile the signal without overlap
    for start in range(n // hop):
        sel = frames[..., start::n // hop, :]
        k = sel.shape[-2]
        if k == 0:
            continue
        off = start * hop
        out[..., off:off + k * n] += sel.reshape(sel.shape[:-2] + (k * n,))
    return out


def istft_array(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Inverse of `stft_array` for [..., T, F] complex input."""
    n_frames = spec.shape[-2]
    if n_frames == 0:
        raise ValueError("cannot invert a spectrogram with zero frames")
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[..., :cfg.frame_len]
    frames = frames * analysis_window(cfg)
    return overlap_add(frames, cfg.hop) / synthesis_envelope(cfg, n_frames)


def istft(spec: ComplexSpectrogram, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    return AudioBuffer(istft_array(spec.data, spec.config), sample_rate)


def _convolve_direct(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = len(x)
    out = np.zeros(n)
    for k, hk in enumerate(h[:n]):
        if hk != 0.0:
            out[k:] += hk * x[:n - k]
    return out


def convolve(sig: AudioBuffer | np.ndarray, kernel) -> AudioBuffer | np.ndarray:
    """Linear convolution truncated to the length of `sig`.

    Returns the same type as `sig` (AudioBuffer in, AudioBuffer out).
    """
    x = sig.samples if isinstance(sig, AudioBuffer) else np.asarray(sig, dtype=np.float64)
    h = np.asarray(kernel, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolve needs non-empty signal and kernel")
    if len(h) > DIRECT_CONV_MAX_TAPS:
        from scipy import signal as sps

        out = sps.fftconvolve(x, h)[:len(x)]
    else:
        out = _convolve_direct(x, h)
    if isinstance(sig, AudioBuffer):
        return AudioBuffer(out, sig.sample_rate)
    return out


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> tuple[np.ndarray, int]:
    """Read a PCM WAV as float64 in [-1, 1]; returns ([n] or [n, channels], rate)."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read WAV file {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz "
                         "(resampling is not supported)")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    return data, rate


def quantize_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, x, sample_rate: int = SAMPLE_RATE):
    """Write float samples ([n] or [n, channels]) as 16-bit PCM."""
    if isinstance(x, AudioBuffer):
        sample_rate, x = x.sample_rate, x.samples
    wavfile.write(Path(path), int(sample_rate), quantize_pcm16(x))


def read_audio(path, expected_rate: int = SAMPLE_RATE) -> AudioBuffer:
    data, rate = read_wav(path, expected_rate)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    return AudioBuffer(data, rate)
