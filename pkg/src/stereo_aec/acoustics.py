"""Room simulation and the stereo echo signal model.

Microphone j picks up the echoes of both loudspeakers plus the reverberant
near-end talker:

    x_i     = far_source * g_i                   (far room, RIRs shared with the near room)
    x_i^nl  = 2a x_i + a x_i^2 + x_i^3,  a = ln(eps/10) + 0.1
    e_ij    = x_i^nl * h_ij
    s_j     = p * g_j = s_j^early + s_j^late
    y_j     = e_1j + e_2j + s_j^early + s_j^late
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioBuffer, convolve, read_wav, write_wav

SPEED_OF_SOUND = 343.0
EARLY_CUTOFF_MS = 50.0
LOG = np.log  # base of the logarithm in the loudspeaker polynomial

TRAIN_LENGTHS = (4.0, 6.0, 8.0, 10.0)
TRAIN_WIDTHS = (5.0, 7.0, 9.0, 11.0, 13.0)
TRAIN_HEIGHT = 3.0
TRAIN_T60S = (0.2, 0.3, 0.4, 0.5, 0.6)
TRAIN_D_NEAR = (1.0, 1.2, 1.4)
TRAIN_D_LOUDSPEAKER = (0.5, 0.7, 0.9)
MIC_SPACING = 0.10


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    t60: float
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(f"room dimensions must be positive: {self.dims}")
        if not 0 < self.t60 <= 2.0:
            raise ValueError(f"t60 must lie in (0, 2] s, got {self.t60}")
        if self.sabine_absorption() > 1.0:
            raise ValueError(
                f"t60={self.t60} s is unrealizable in a {self.length}x{self.width}x{self.height} m "
                f"room (Sabine absorption {self.sabine_absorption():.3f} > 1)")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        return 2 * (self.length * self.width + self.length * self.height + self.width * self.height)

    def sabine_absorption(self) -> float:
        """Mean absorption coefficient from T60 = 24 ln(10) V / (c S alpha)."""
        return 24 * math.log(10) * self.volume / (SPEED_OF_SOUND * self.surface * self.t60)

    def reflection_coefficient(self) -> float:
        return math.sqrt(1.0 - self.sabine_absorption())

    def contains(self, pos, margin: float = 0.0) -> bool:
        pos = np.asarray(pos, dtype=float)
        return bool(np.all(pos > margin) and np.all(pos < self.dims - margin))


@dataclass
class SceneGeometry:
    mic_positions: np.ndarray           # [2, 3]
    loudspeaker_positions: np.ndarray   # [2, 3]
    near_speaker_position: np.ndarray   # [3]

    def __post_init__(self):
        self.mic_positions = np.asarray(self.mic_positions, dtype=float).reshape(2, 3)
        self.loudspeaker_positions = np.asarray(self.loudspeaker_positions, dtype=float).reshape(2, 3)
        self.near_speaker_position = np.asarray(self.near_speaker_position, dtype=float).reshape(3)

    @property
    def mic_center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)

    def validate(self, room: RoomSpec):
        for label, pos in self.named_positions():
            if not room.contains(pos):
                raise ValueError(f"{label} at {np.round(pos, 3).tolist()} is outside the room")
        spacing = np.linalg.norm(self.mic_positions[0] - self.mic_positions[1])
        if abs(spacing - MIC_SPACING) > 1e-9:
            raise ValueError(f"microphones must be {MIC_SPACING} m apart, got {spacing:.4f} m")

    def named_positions(self):
        yield "mic 1", self.mic_positions[0]
        yield "mic 2", self.mic_positions[1]
        yield "loudspeaker 1", self.loudspeaker_positions[0]
        yield "loudspeaker 2", self.loudspeaker_positions[1]
        yield "near-end talker", self.near_speaker_position

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE
    t60: float = 0.0
    direct_index: int | None = None

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("RIR taps must be finite")
        if self.direct_index is None:
            nz = np.flatnonzero(self.taps)
            self.direct_index = int(nz[0]) if nz.size else 0

    def __len__(self):
        return len(self.taps)


@dataclass
class SceneRender:
    far_signals: list          # x_i, 2 AudioBuffers
    nonlinear_far: list        # x_i^nl
    echoes: dict               # (i, j) -> e_ij
    near_early: list           # s_j^early
    near_late: list            # s_j^late
    mic_signals: list          # y_j
    metadata: dict = field(default_factory=dict)

    def echo_at_mic(self, j: int) -> np.ndarray:
        return self.echoes[(0, j)].samples + self.echoes[(1, j)].samples

    def mixing_residual(self) -> float:
        """max |y_j - (sum_i e_ij + s_j^early + s_j^late)| over both mics."""
        worst = 0.0
        for j in range(2):
            rebuilt = self.echo_at_mic(j) + self.near_early[j].samples + self.near_late[j].samples
            worst = max(worst, float(np.max(np.abs(self.mic_signals[j].samples - rebuilt))))
        return worst


# ---------------------------------------------------------------- image method

def _image_set(room: RoomSpec, source, receiver, max_dist: float, max_order=None):
    """Distances and wall-bounce counts of all images within `max_dist`."""
    dims = room.dims
    axis_terms = []
    for ax in range(3):
        order = max_order if max_order is not None else int(np.ceil(max_dist / (2 * dims[ax]))) + 1
        n = np.arange(-order, order + 1)
        # mirror parity q in {0, 1}: walls hit |n - q| + |n| = |2n - q| times
        coord = np.concatenate([source[ax] + 2 * n * dims[ax] - receiver[ax],
                                -source[ax] + 2 * n * dims[ax] - receiver[ax]])
        bounces = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        keep = np.abs(coord) <= max_dist
        axis_terms.append((coord[keep], bounces[keep]))
    (cx, bx), (cy, by), (cz, bz) = axis_terms
    dxy2 = cx[:, None] ** 2 + cy[None, :] ** 2
    bxy = bx[:, None] + by[None, :]
    keep = dxy2 <= max_dist ** 2
    dxy2, bxy = dxy2[keep], bxy[keep]
    dist = np.sqrt(dxy2[:, None] + cz[None, :] ** 2).ravel()
    bounce = (bxy[:, None] + bz[None, :]).ravel()
    keep = dist <= max_dist
    return dist[keep], bounce[keep]


def _decay_t60(delays: np.ndarray, dist: np.ndarray, bounce: np.ndarray, beta: float,
               n_taps: int, fs: int) -> float:
    taps = np.bincount(delays, weights=beta ** bounce / (4 * np.pi * dist), minlength=n_taps)
    return schroeder_t60(Rir(taps, fs, 0.0))


def calibrated_reflection(room: RoomSpec, source, receiver, iters: int = 40) -> float:
    """Uniform wall reflection coefficient whose image-source decay reaches room.t60.

    Starts from the Sabine value and bisects on beta so that the Schroeder T60
    of the rendered source -> receiver response equals the target.
    Needed because image-source decay is not diffuse: in flat rooms the
    Sabine value overshoots T60 by up to ~70%.
    """
    fs = room.sample_rate
    n_taps = int(round(room.t60 * fs))
    max_dist = n_taps * SPEED_OF_SOUND / fs
    dist, bounce = _image_set(room, np.asarray(source, float), np.asarray(receiver, float), max_dist)
    delays = np.rint(dist / SPEED_OF_SOUND * fs).astype(np.int64)
    keep = delays < n_taps
    dist, bounce, delays = dist[keep], bounce[keep], delays[keep]
    lo, hi = 1e-3, 1.0 - 1e-6
    beta = room.reflection_coefficient()
    for _ in range(iters):
        try:
            t = _decay_t60(delays, dist, bounce, beta, n_taps, fs)
        except ValueError:
            t = 0.0  # decays too fast to fit
        if abs(t - room.t60) < 1e-3 * room.t60:
            break
        if t > room.t60:
            hi = beta
        else:
            lo = beta
        beta = 0.5 * (lo + hi)
    return float(beta)


def image_method_rir(room: RoomSpec, source, receiver, max_order: int | None = None,
                     reflection: float | str | None = None) -> Rir:
    """Allen-Berkley image-source RIR for a shoebox room.

    Every image contributes beta**(number of wall bounces) / (4 pi d) at the
    sample nearest to d / c. `reflection` selects the wall coefficient beta:
    None calibrates it so the decay matches room.t60 (see
    `calibrated_reflection`), "sabine" uses sqrt(1 - alpha_sabine) directly,
    and a number is used as is (0 gives the free-field response). With
    `max_order=None` every image out to c * t60 is included. Output length is
    round(t60 * fs).
    """
    source = np.asarray(source, dtype=float)
    receiver = np.asarray(receiver, dtype=float)
    if not room.contains(source) or not room.contains(receiver):
        raise ValueError("source and receiver must lie strictly inside the room")
    if np.allclose(source, receiver):
        raise ValueError("source and receiver coincide")
    fs = room.sample_rate
    n_taps = int(round(room.t60 * fs))
    if reflection is None:
        beta = calibrated_reflection(room, source, receiver)
    elif reflection == "sabine":
        beta = room.reflection_coefficient()
    else:
        beta = float(reflection)
    taps = np.zeros(n_taps)
    max_dist = n_taps * SPEED_OF_SOUND / fs
    direct = float(np.linalg.norm(source - receiver))
    direct_index = int(round(direct / SPEED_OF_SOUND * fs))

    if beta == 0.0:
        if direct_index < n_taps:
            taps[direct_index] = 1.0 / (4 * np.pi * direct)
        return Rir(taps, fs, room.t60, direct_index)

    dist, bounce = _image_set(room, source, receiver, max_dist, max_order)
    idx = np.rint(dist / SPEED_OF_SOUND * fs).astype(np.int64)
    ok = idx < n_taps
    np.add.at(taps, idx[ok], beta ** bounce[ok] / (4 * np.pi * dist[ok]))
    return Rir(taps, fs, room.t60, direct_index)


def schroeder_decay_db(taps) -> np.ndarray:
    """Backward-integrated energy decay curve in dB (0 dB at t = 0)."""
    energy = np.cumsum(np.asarray(taps, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def schroeder_t60(rir: Rir, fit_range=(-5.0, -25.0)) -> float:
    """T60 extrapolated from a line fit to the decay curve between two levels (dB)."""
    edc = schroeder_decay_db(rir.taps)
    hi, lo = fit_range
    sel = np.flatnonzero((edc <= hi) & (edc >= lo))
    if sel.size < 2:
        raise ValueError("decay curve does not span the fit range")
    t = sel / rir.sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    return -60.0 / slope


# ---------------------------------------------------------------- distortions

def nonlinearity_coefficient(epsilon: float) -> float:
    return float(LOG(epsilon / 10.0) + 0.1)


def polynomial_nonlinearity(x, epsilon: float):
    """Memoryless 3rd-order loudspeaker model 2a x + a x^2 + x^3."""
    if not 2.0 <= epsilon <= 5.0:
        raise ValueError(f"epsilon must lie in [2, 5], got {epsilon}")
    a = nonlinearity_coefficient(epsilon)
    s = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=float)
    out = 2 * a * s + a * s * s + s ** 3
    return AudioBuffer(out, x.sample_rate) if isinstance(x, AudioBuffer) else out


def hard_clip(x, threshold: float = 0.7):
    if threshold <= 0:
        raise ValueError(f"clipping threshold must be positive, got {threshold}")
    s = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=float)
    out = np.clip(s, -threshold, threshold)
    return AudioBuffer(out, x.sample_rate) if isinstance(x, AudioBuffer) else out


@dataclass(frozen=True)
class NonlinearitySpec:
    """Loudspeaker distortion applied to x_i before the echo paths.

    kind: "polynomial" (uses epsilon), "hard_clip" (uses clip_threshold),
    "polynomial+clip" (polynomial, then clipping), or "identity".
    """

    kind: str = "polynomial"
    epsilon: float = 3.5
    clip_threshold: float = 0.7

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.array(x, dtype=float)
        if self.kind == "polynomial":
            return polynomial_nonlinearity(x, self.epsilon)
        if self.kind == "hard_clip":
            return hard_clip(x, self.clip_threshold)
        if self.kind == "polynomial+clip":
            return hard_clip(polynomial_nonlinearity(x, self.epsilon), self.clip_threshold)
        raise ValueError(f"unknown nonlinearity kind {self.kind!r}")


def split_rir(rir: Rir, early_cutoff_ms: float = EARLY_CUTOFF_MS) -> tuple[Rir, Rir]:
    """Split at direct path + cutoff; early keeps taps [0, boundary], late the rest."""
    if early_cutoff_ms <= 0:
        raise ValueError("early_cutoff_ms must be positive")
    boundary = rir.direct_index + int(round(early_cutoff_ms * rir.sample_rate / 1000.0))
    early = rir.taps.copy()
    early[boundary + 1:] = 0.0
    late = rir.taps - early
    return (Rir(early, rir.sample_rate, rir.t60, rir.direct_index),
            Rir(late, rir.sample_rate, rir.t60, rir.direct_index))


# ---------------------------------------------------------------- scenes

@dataclass
class SceneRirs:
    """g_j (talker -> mic j) and h_ij (loudspeaker i -> mic j)."""

    talker: list                # [Rir, Rir]
    echo_paths: dict            # (i, j) -> Rir

    @classmethod
    def simulate(cls, room: RoomSpec, geometry: SceneGeometry, reflection=None) -> "SceneRirs":
        geometry.validate(room)
        if reflection is None:
            # one wall coefficient per room, calibrated on the talker -> array-centre path
            reflection = calibrated_reflection(room, geometry.near_speaker_position,
                                               geometry.mic_center)
        talker = [image_method_rir(room, geometry.near_speaker_position, m, reflection=reflection)
                  for m in geometry.mic_positions]
        paths = {(i, j): image_method_rir(room, geometry.loudspeaker_positions[i],
                                          geometry.mic_positions[j], reflection=reflection)
                 for i in range(2) for j in range(2)}
        return cls(talker, paths)


def render_scene(room: RoomSpec, geometry: SceneGeometry, far_source, near_source,
                 nonlinearity: NonlinearitySpec | None = None, rng_seed=None,
                 rirs: SceneRirs | None = None, early_cutoff_ms: float = EARLY_CUTOFF_MS,
                 reflection=None) -> SceneRender:
    """Render all stems of one stereo echo scene.

    Pass precomputed `rirs` to skip the image-method simulation (e.g. measured
    RIRs loaded from disk). `rng_seed` is recorded in the metadata; rendering
    itself is deterministic.
    """
    nonlinearity = nonlinearity or NonlinearitySpec()
    far = far_source.samples if isinstance(far_source, AudioBuffer) else np.asarray(far_source, float)
    near = near_source.samples if isinstance(near_source, AudioBuffer) else np.asarray(near_source, float)
    if len(far) != len(near):
        raise ValueError(f"far ({len(far)}) and near ({len(near)}) sources differ in length")
    for src in (far_source, near_source):
        if isinstance(src, AudioBuffer) and src.sample_rate != room.sample_rate:
            raise ValueError(f"source rate {src.sample_rate} Hz != room rate {room.sample_rate} Hz")
    if rirs is None:
        rirs = SceneRirs.simulate(room, geometry, reflection=reflection)
    fs = room.sample_rate

    x = [convolve(far, g.taps) for g in rirs.talker]
    x_nl = [nonlinearity.apply(xi) for xi in x]
    echoes = {(i, j): convolve(x_nl[i], rirs.echo_paths[(i, j)].taps)
              for i in range(2) for j in range(2)}
    early, late = [], []
    for g in rirs.talker:
        g_early, g_late = split_rir(g, early_cutoff_ms)
        early.append(convolve(near, g_early.taps))
        late.append(convolve(near, g_late.taps))
    mics = [echoes[(0, j)] + echoes[(1, j)] + early[j] + late[j] for j in range(2)]

    buf = lambda a: AudioBuffer(a, fs)  # noqa: E731
    return SceneRender(
        far_signals=[buf(a) for a in x],
        nonlinear_far=[buf(a) for a in x_nl],
        echoes={k: buf(v) for k, v in echoes.items()},
        near_early=[buf(a) for a in early],
        near_late=[buf(a) for a in late],
        mic_signals=[buf(a) for a in mics],
        metadata={"room": asdict(room), "geometry": geometry.to_dict(),
                  "nonlinearity": asdict(nonlinearity), "rng_seed": rng_seed},
    )


# ---------------------------------------------------------------- geometry sampling

def place_geometry(room: RoomSpec, d_near: float, d_loudspeaker: float, rng,
                   max_tries: int = 200) -> SceneGeometry:
    """Mic pair at the room centre (0.1 m apart along y), talker at `d_near` and a
    mirror-symmetric loudspeaker pair at `d_loudspeaker` from the mic centre.

    The loudspeakers are reflections of each other across the plane y = w/2
    that bisects the microphone pair.
    """
    l, w, h = room.dims
    center = np.array([l / 2, w / 2, h / 2])
    mics = np.array([center + [0, MIC_SPACING / 2, 0], center - [0, MIC_SPACING / 2, 0]])
    for _ in range(max_tries):
        theta = rng.uniform(0, 2 * np.pi)
        talker = center + d_near * np.array([np.cos(theta), np.sin(theta), 0.0])
        phi = rng.uniform(0.15 * np.pi, 0.85 * np.pi)
        offset = d_loudspeaker * np.array([np.cos(phi), np.sin(phi), 0.0])
        front = rng.choice([-1.0, 1.0])
        speakers = np.array([center + [front * offset[0], offset[1], 0.0],
                             center + [front * offset[0], -offset[1], 0.0]])
        geom = SceneGeometry(mics, speakers, talker)
        if all(room.contains(p, margin=0.05) for _, p in geom.named_positions()):
            too_close = np.min(np.linalg.norm(speakers - talker, axis=1)) < 0.2
            if not too_close:
                return geom
    raise ValueError(f"could not place talker at {d_near} m and loudspeakers at {d_loudspeaker} m "
                     f"inside a {l}x{w}x{h} m room")


def sample_training_scene(rng, lengths=TRAIN_LENGTHS, widths=TRAIN_WIDTHS, height=TRAIN_HEIGHT,
                          t60s=TRAIN_T60S, d_near=TRAIN_D_NEAR, d_loudspeaker=TRAIN_D_LOUDSPEAKER,
                          sample_rate=SAMPLE_RATE) -> tuple[RoomSpec, SceneGeometry]:
    room = RoomSpec(float(rng.choice(lengths)), float(rng.choice(widths)), float(height),
                    float(rng.choice(t60s)), sample_rate)
    geom = place_geometry(room, float(rng.choice(d_near)), float(rng.choice(d_loudspeaker)), rng)
    return room, geom


# ---------------------------------------------------------------- RIR files

RIR_MAGIC = b"RIR1"


def save_rir(rir: Rir, path):
    """Write taps as 16-bit PCM (".wav" suffix) or as exact float64 binary.

    Binary layout, little-endian: b"RIR1", uint32 sample_rate, float64 t60,
    uint64 tap count, then the taps as float64.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        write_wav(path, rir.taps, rir.sample_rate)
        return
    header = RIR_MAGIC + struct.pack("<IdQ", rir.sample_rate, rir.t60, len(rir.taps))
    path.write_bytes(header + rir.taps.astype("<f8").tobytes())


def load_rir(path, sample_rate: int = SAMPLE_RATE) -> Rir:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        data, rate = read_wav(path, sample_rate)
        if data.ndim != 1:
            data = data[:, 0]
        return Rir(data, rate, len(data) / rate)
    buf = path.read_bytes()
    if buf[:4] != RIR_MAGIC or len(buf) < 24:
        raise ValueError(f"{path}: not an RIR file")
    rate, t60, n = struct.unpack_from("<IdQ", buf, 4)
    if len(buf) != 24 + 8 * n:
        raise ValueError(f"{path}: expected {n} taps, file size {len(buf)} disagrees")
    return Rir(np.frombuffer(buf, dtype="<f8", offset=24).copy(), rate, t60)
