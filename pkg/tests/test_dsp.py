import numpy as np
import pytest
from hypothesis import given, strategies as st

from stereo_aec.dsp import (AudioBuffer, ComplexSpectrogram, StftConfig, analysis_window,
                            convolve, istft, istft_array, read_audio, read_wav, stft, stft_array,
                            write_wav)

CFG = StftConfig()


def naive_stft(x, cfg):
    """Direct DFT of every windowed frame (independent of numpy's FFT)."""
    n = cfg.frame_len
    w = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)   # periodic Hamming
    t = (len(x) - n) // cfg.hop + 1
    k = np.arange(cfg.fft_size // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / cfg.fft_size)
    return np.array([basis @ (x[i * cfg.hop:i * cfg.hop + n] * w) for i in range(t)])


def naive_convolve(x, h):
    out = np.zeros(len(x))
    for i in range(len(x)):
        for k in range(len(h)):
            if i - k >= 0:
                out[i] += h[k] * x[i - k]
    return out


def interior_error(x, y, cfg):
    sl = slice(cfg.frame_len, len(y) - cfg.frame_len)
    return np.linalg.norm(x[sl] - y[sl]) / np.linalg.norm(x[sl])


def test_config_defaults():
    assert (CFG.frame_len, CFG.hop, CFG.fft_size, CFG.n_freq) == (320, 160, 320, 161)


@pytest.mark.parametrize("kwargs", [dict(hop=100), dict(fft_size=256), dict(frame_len=321, hop=160)])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        StftConfig(**kwargs)


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(4), sample_rate=0)


def test_window_is_periodic_hamming():
    n = np.arange(320)
    np.testing.assert_allclose(analysis_window(CFG), 0.54 - 0.46 * np.cos(2 * np.pi * n / 320),
                               atol=1e-12)


def test_zero_second_of_audio():
    spec = stft(AudioBuffer(np.zeros(16000)))
    assert spec.data.shape == (99, 161)
    assert not spec.data.any()


def test_stft_matches_direct_dft(rng):
    x = rng.standard_normal(2000)
    np.testing.assert_allclose(stft_array(x, CFG), naive_stft(x, CFG), atol=1e-9)


def test_bin_centred_sinusoid_peaks_at_its_bin():
    k = np.arange(16000)
    x = np.cos(2 * np.pi * 25 * k / 320)
    mag = np.abs(stft(x).data)
    assert np.all(mag.argmax(axis=1) == 25)


def test_short_signal_rejected():
    with pytest.raises(ValueError):
        stft(np.zeros(319))


def test_white_noise_round_trip(rng):
    x = rng.standard_normal(16000)
    y = istft(stft(x)).samples
    assert len(y) == (99 - 1) * 160 + 320
    assert interior_error(x[:len(y)], y, CFG) < 1e-6


def test_istft_zero_and_empty():
    assert not istft(ComplexSpectrogram(np.zeros((5, 161), complex), CFG)).samples.any()
    with pytest.raises(ValueError):
        istft_array(np.zeros((0, 161), complex), CFG)


def test_stft_istft_stft_idempotent(rng):
    s1 = stft_array(rng.standard_normal(4000), CFG)
    s2 = stft_array(istft_array(s1, CFG), CFG)
    assert np.linalg.norm(s2 - s1) / np.linalg.norm(s1) < 1e-6


def test_single_frame_impulse():
    x = np.zeros(320)
    x[37] = 1.0
    spec = stft_array(x, CFG)
    assert spec.shape == (1, 161)
    y = istft_array(spec, CFG)
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_parseval_per_frame(rng):
    x = rng.standard_normal(3200)
    spec = stft_array(x, CFG)
    frames = np.lib.stride_tricks.sliding_window_view(x, 320)[::160] * analysis_window(CFG)
    power = np.abs(spec) ** 2
    weights = np.full(161, 2.0)
    weights[[0, -1]] = 1.0
    dft_energy = (power * weights).sum(axis=1) / 320
    np.testing.assert_allclose(dft_energy, (frames ** 2).sum(axis=1), rtol=1e-9)


@given(st.integers(320, 5000), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_shape_formula_and_linearity(n, a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(n), r.standard_normal(n)
    sx, sy = stft_array(x, CFG), stft_array(y, CFG)
    assert sx.shape == ((n - 320) // 160 + 1, 161)
    np.testing.assert_allclose(stft_array(a * x + b * y, CFG), a * sx + b * sy, atol=1e-9 * (1 + np.abs(sx).max()))


@given(st.integers(10, 60), st.integers(0, 2**31))
def test_round_trip_property(n_frames, seed):
    x = np.random.default_rng(seed).standard_normal(CFG.n_samples(n_frames))
    assert interior_error(x, istft_array(stft_array(x, CFG), CFG), CFG) < 1e-6


def test_convolve_identity_and_shift(rng):
    x = rng.standard_normal(50)
    np.testing.assert_array_equal(convolve(x, [1.0]), x)
    np.testing.assert_array_equal(convolve(x, [0.0, 1.0]), np.r_[0.0, x[:-1]])


@pytest.mark.parametrize("taps", [64, 300])
def test_convolve_matches_naive_loop(rng, taps):
    x, h = rng.standard_normal(700), rng.standard_normal(taps)
    assert np.max(np.abs(convolve(x, h) - naive_convolve(x, h))) < 1e-10


def test_convolve_keeps_buffer_type(rng):
    out = convolve(AudioBuffer(rng.standard_normal(10), 16000), [0.5])
    assert isinstance(out, AudioBuffer) and out.sample_rate == 16000


def test_wav_round_trip_and_rate_check(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "a.wav", x)
    y = read_audio(tmp_path / "a.wav").samples
    assert np.max(np.abs(x - y)) <= 1 / 32768
    write_wav(tmp_path / "b.wav", x, 8000)
    with pytest.raises(ValueError, match="8000"):
        read_wav(tmp_path / "b.wav")
    write_wav(tmp_path / "st.wav", np.stack([x, -x], axis=1))
    data, _ = read_wav(tmp_path / "st.wav")
    assert data.shape == (1000, 2)
    with pytest.raises(ValueError):
        read_audio(tmp_path / "st.wav")
