import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stereo_aec import acoustics as ac
from stereo_aec.acoustics import (NonlinearitySpec, RoomSpec, Rir, SceneGeometry, SceneRirs,
                                  hard_clip, image_method_rir, load_rir, polynomial_nonlinearity,
                                  render_scene, save_rir, schroeder_decay_db, schroeder_t60,
                                  split_rir)
from stereo_aec.dsp import AudioBuffer, convolve

C = 343.0
FS = 16000
ROOM = RoomSpec(5.0, 6.0, 3.0, 0.35)
SRC = np.array([1.3, 2.1, 1.4])
RCV = np.array([3.2, 4.0, 1.6])


def naive_images(room, src, rcv, order, beta, n_taps):
    """Allen-Berkley image sum by explicit loops over lattice index and mirror parity."""
    taps = np.zeros(n_taps)
    dims = room.dims
    rng_ = range(-order, order + 1)
    for n in itertools.product(rng_, rng_, rng_):
        for q in itertools.product((0, 1), repeat=3):
            img = [(1 - 2 * q[a]) * src[a] + 2 * n[a] * dims[a] for a in range(3)]
            d = math.dist(img, rcv)
            k = int(np.rint(d / C * FS))
            if d > n_taps * C / FS or k >= n_taps:
                continue
            bounces = sum(abs(n[a] - q[a]) + abs(n[a]) for a in range(3))
            taps[k] += beta ** bounces / (4 * math.pi * d)
    return taps


def test_rir_length_follows_t60():
    assert len(image_method_rir(ROOM, SRC, RCV)) == 5600


def test_anechoic_single_tap():
    r = image_method_rir(ROOM, SRC, RCV, reflection=0.0)
    d = np.linalg.norm(SRC - RCV)
    nz = np.flatnonzero(r.taps)
    assert nz.tolist() == [round(FS * d / C)]
    assert r.taps[nz[0]] == pytest.approx(1 / (4 * np.pi * d))


def test_image_sum_matches_loop_oracle():
    r = image_method_rir(ROOM, SRC, RCV, max_order=2, reflection=0.8)
    np.testing.assert_allclose(r.taps, naive_images(ROOM, SRC, RCV, 2, 0.8, 5600), atol=1e-14)


def test_direct_path_dominates_and_leads():
    r = image_method_rir(ROOM, SRC, RCV)
    d = np.linalg.norm(SRC - RCV)
    assert r.direct_index == round(FS * d / C)
    assert not r.taps[:r.direct_index].any()


@pytest.mark.parametrize("dims", [(5, 6, 3), (4, 13, 3), (10, 5, 3)])
def test_schroeder_t60_within_20_percent(dims):
    room = RoomSpec(*dims, 0.3)
    rng = np.random.default_rng(0)
    geom = ac.place_geometry(room, 1.2, 0.7, rng)
    r = image_method_rir(room, geom.near_speaker_position, geom.mic_positions[0])
    assert abs(schroeder_t60(r) - 0.3) <= 0.2 * 0.3


def test_schroeder_oracle_on_exponential():
    # an exactly exponential energy decay has a known T60
    t = np.arange(8000) / FS
    taps = np.exp(-3 * np.log(10) * t / 0.4)       # amplitude falls 60 dB in 0.4 s
    assert schroeder_t60(Rir(taps, FS)) == pytest.approx(0.4, rel=0.01)


def test_edc_monotone():
    edc = schroeder_decay_db(image_method_rir(ROOM, SRC, RCV).taps)
    finite = edc[np.isfinite(edc)]
    assert np.all(np.diff(finite) <= 1e-12)


def test_unrealizable_absorption_rejected():
    with pytest.raises(ValueError, match="unrealizable"):
        RoomSpec(2, 2, 2, 0.01)
    with pytest.raises(ValueError):
        RoomSpec(5, 6, 3, 0.0)


def test_sabine_absorption_closed_form():
    v, s = 90.0, 2 * (30 + 15 + 18)
    assert ROOM.sabine_absorption() == pytest.approx(24 * math.log(10) * v / (C * s * 0.35))


def test_polynomial_values():
    a = math.log(0.2) + 0.1
    assert a == pytest.approx(-1.50944, abs=1e-5)
    # 2a(0.1) + a(0.01) + 0.001 = 0.21a + 0.001
    assert polynomial_nonlinearity(np.array([0.1]), 2.0)[0] == pytest.approx(-0.315982, abs=1e-6)
    assert polynomial_nonlinearity(np.zeros(3), 4.2).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        polynomial_nonlinearity(np.zeros(3), 5.5)


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=50), st.floats(2, 5), st.randoms())
def test_polynomial_is_memoryless(xs, eps, rnd):
    x = np.array(xs)
    perm = np.arange(len(x))
    rnd.shuffle(perm)
    y = polynomial_nonlinearity(x, eps)
    y_perm = polynomial_nonlinearity(x[perm], eps)
    np.testing.assert_array_equal(y_perm[np.argsort(perm)], y)


def test_hard_clip_values():
    np.testing.assert_array_equal(hard_clip(np.array([0.5, 0.9, -0.9]), 0.7), [0.5, 0.7, -0.7])
    with pytest.raises(ValueError):
        hard_clip(np.zeros(2), 0.0)


def test_split_rir_partition_and_linearity(rng):
    r = image_method_rir(ROOM, SRC, RCV)
    early, late = split_rir(r)
    np.testing.assert_array_equal(early.taps + late.taps, r.taps)
    boundary = r.direct_index + 800
    assert not early.taps[boundary + 1:].any() and not late.taps[:boundary + 1].any()
    p = rng.standard_normal(4000)
    np.testing.assert_allclose(convolve(p, early.taps) + convolve(p, late.taps), convolve(p, r.taps),
                               atol=1e-12)


def test_split_beyond_length_leaves_no_late_part():
    r = image_method_rir(ROOM, SRC, RCV)
    _, late = split_rir(r, early_cutoff_ms=1000.0)
    assert not late.taps.any()


def _geometry():
    return ac.place_geometry(ROOM, 0.6, 1.3, np.random.default_rng(7))


def test_geometry_layout():
    g = _geometry()
    g.validate(ROOM)
    np.testing.assert_allclose(g.mic_positions, [[2.5, 3.05, 1.5], [2.5, 2.95, 1.5]])
    assert np.linalg.norm(g.near_speaker_position - g.mic_center) == pytest.approx(0.6)
    for p in g.loudspeaker_positions:
        assert np.linalg.norm(p - g.mic_center) == pytest.approx(1.3)
    a, b = g.loudspeaker_positions
    assert a[0] == b[0] and a[2] == b[2] and a[1] - 3.0 == pytest.approx(3.0 - b[1])


def test_geometry_outside_room_rejected():
    g = _geometry()
    bad = SceneGeometry(g.mic_positions, g.loudspeaker_positions, [9.0, 1.0, 1.0])
    with pytest.raises(ValueError, match="outside"):
        bad.validate(ROOM)


def test_training_scene_sampler_uses_listed_values():
    rng = np.random.default_rng(3)
    for _ in range(5):
        room, g = ac.sample_training_scene(rng)
        assert room.length in ac.TRAIN_LENGTHS and room.width in ac.TRAIN_WIDTHS
        assert room.t60 in ac.TRAIN_T60S
        d = np.linalg.norm(g.near_speaker_position - g.mic_center)
        assert min(abs(d - v) for v in ac.TRAIN_D_NEAR) < 1e-9


@pytest.fixture(scope="module")
def scene_rirs():
    return SceneRirs.simulate(ROOM, _geometry())


def test_render_identity_holds(scene_rirs, rng):
    far, near = rng.standard_normal(6000) * 0.3, rng.standard_normal(6000) * 0.3
    sc = render_scene(ROOM, _geometry(), far, near, rirs=scene_rirs)
    assert sc.mixing_residual() <= 1e-12
    silent = render_scene(ROOM, _geometry(), far, np.zeros(6000), rirs=scene_rirs)
    for j in range(2):
        np.testing.assert_array_equal(silent.mic_signals[j].samples, silent.echo_at_mic(j))
    quiet = render_scene(ROOM, _geometry(), np.zeros(6000), near, rirs=scene_rirs)
    for j in range(2):
        np.testing.assert_array_equal(quiet.mic_signals[j].samples,
                                      quiet.near_early[j].samples + quiet.near_late[j].samples)


def test_render_anechoic_identity_is_scaled_delay(rng):
    g = _geometry()
    far = rng.standard_normal(3000)
    sc = render_scene(ROOM, g, far, np.zeros(3000), NonlinearitySpec("identity"), reflection=0.0)
    for i, j in itertools.product(range(2), range(2)):
        d1 = np.linalg.norm(g.near_speaker_position - g.mic_positions[i])
        d2 = np.linalg.norm(g.loudspeaker_positions[i] - g.mic_positions[j])
        k = round(FS * d1 / C) + round(FS * d2 / C)
        expected = np.zeros(3000)
        expected[k:] = far[:3000 - k] / (16 * np.pi ** 2 * d1 * d2)
        np.testing.assert_allclose(sc.echoes[(i, j)].samples, expected, atol=1e-12)


def test_render_rejects_mismatched_inputs(scene_rirs):
    with pytest.raises(ValueError):
        render_scene(ROOM, _geometry(), np.zeros(10), np.zeros(11), rirs=scene_rirs)
    with pytest.raises(ValueError):
        render_scene(ROOM, _geometry(), AudioBuffer(np.zeros(10), 8000), np.zeros(10),
                     rirs=scene_rirs)


def test_render_is_deterministic(scene_rirs, rng):
    far, near = rng.standard_normal(2000), rng.standard_normal(2000)
    a = render_scene(ROOM, _geometry(), far, near, NonlinearitySpec("polynomial+clip", 3.0))
    b = render_scene(ROOM, _geometry(), far, near, NonlinearitySpec("polynomial+clip", 3.0))
    for j in range(2):
        np.testing.assert_array_equal(a.mic_signals[j].samples, b.mic_signals[j].samples)
    assert np.max(np.abs(a.nonlinear_far[0].samples)) <= 0.7


def test_rir_file_round_trip(tmp_path):
    r = image_method_rir(ROOM, SRC, RCV)
    save_rir(r, tmp_path / "a.rir")
    back = load_rir(tmp_path / "a.rir")
    np.testing.assert_array_equal(back.taps, r.taps)
    assert back.t60 == 0.35 and back.sample_rate == FS
    save_rir(r, tmp_path / "a.wav")
    assert np.max(np.abs(load_rir(tmp_path / "a.wav").taps - r.taps)) <= 1 / 32768
    (tmp_path / "bad.rir").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_rir(tmp_path / "bad.rir")
