"""Mixture generation: SER-controlled mixing, activity segments and on-disk datasets.

Each example places a near-end utterance over the tail of a longer far-end
utterance, so the timeline is far-end single talk followed by double talk.
Stems are stored as 16-bit WAVs next to a JSON-lines manifest.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import acoustics
from .acoustics import NonlinearitySpec, RoomSpec, SceneRirs, load_rir, render_scene
from .dsp import SAMPLE_RATE, AudioBuffer, quantize_pcm16, read_audio, read_wav, write_wav

log = logging.getLogger(__name__)

FAR_SINGLE_TALK = "far_single_talk"
NEAR_SINGLE_TALK = "near_single_talk"
DOUBLE_TALK = "double_talk"
SILENCE = "silence"
SEGMENT_LABELS = (FAR_SINGLE_TALK, NEAR_SINGLE_TALK, DOUBLE_TALK, SILENCE)

STEMS = ("y1", "y2", "x1", "x2", "s1_early", "s2_early", "e1", "e2", "s1_late", "s2_late")
PEAK_LIMIT = 0.99

TEST_ROOM = (5.0, 6.0, 3.0)
TEST_T60 = 0.35
TEST_D_NEAR = 0.6
TEST_D_LOUDSPEAKER = 1.3


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- synthetic sources

def synthetic_speech(n_samples: int, rng, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like signal: voiced/unvoiced syllables with pauses, peak 0.5.

    Voiced syllables are glottal pulse trains with a drifting pitch through
    two formant resonators; unvoiced ones are high-passed noise bursts.
    """
    from scipy import signal as sps

    out = np.zeros(n_samples)
    pos = int(rng.uniform(0.0, 0.1) * fs)
    while pos < n_samples:
        dur = int(rng.uniform(0.08, 0.3) * fs)
        seg = np.zeros(dur)
        if rng.random() < 0.75:
            f0 = rng.uniform(90, 240) * np.linspace(1.0, rng.uniform(0.8, 1.2), dur)
            phase = np.cumsum(f0 / fs)
            seg[np.flatnonzero(np.diff(np.floor(phase), prepend=0.0) > 0)] = 1.0
            seg += 0.02 * rng.standard_normal(dur)
            for lo, hi in ((300, 900), (900, 2500)):
                fc = rng.uniform(lo, hi)
                b, a = sps.iirpeak(fc, Q=rng.uniform(4, 10), fs=fs)
                seg = sps.lfilter(b, a, seg)
            rel = 1.0
        else:
            b, a = sps.butter(2, rng.uniform(2000, 4000), btype="high", fs=fs)
            seg = sps.lfilter(b, a, rng.standard_normal(dur))
            rel = 0.3
        # resonator gain varies by orders of magnitude with f0 and fc, so each
        # syllable is brought to a common RMS before its random level is applied
        seg *= rel / (np.sqrt(np.mean(seg ** 2)) + 1e-12)
        seg *= np.hanning(dur) * rng.uniform(0.3, 1.0)
        end = min(n_samples, pos + dur)
        out[pos:end] += seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.25) * fs)
    return _normalize_peak(out, 0.5)


def synthetic_music(n_samples: int, rng, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Sustained harmonic notes and chords without pauses, peak 0.5."""
    out = np.zeros(n_samples)
    t_all = np.arange(n_samples) / fs
    pos = 0
    while pos < n_samples:
        dur = int(rng.uniform(0.2, 0.6) * fs)
        end = min(n_samples, pos + dur)
        t = t_all[pos:end] - t_all[pos]
        env = np.exp(-t * rng.uniform(1.0, 4.0))
        for semitone in rng.choice(24, size=rng.integers(1, 4), replace=False):
            f = 130.8 * 2 ** (semitone / 12)
            for h in range(1, 6):
                if h * f < fs / 2:
                    out[pos:end] += env * np.sin(2 * np.pi * h * f * t) / h ** 1.5
        pos = end
    return _normalize_peak(out, 0.5)


def _normalize_peak(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x))
    return x * (peak / m) if m > 0 else x


@dataclass
class Corpus:
    """A pool of source signals: WAV files, or a synthetic generator when empty."""

    files: list = field(default_factory=list)
    synthetic: str = "speech"   # used when `files` is empty: "speech" or "music"

    @classmethod
    def from_dir(cls, path, synthetic: str = "speech") -> "Corpus":
        path = Path(path)
        if not path.is_dir():
            raise DataError(f"corpus directory {path} does not exist")
        files = sorted(str(p) for p in path.rglob("*.wav"))
        if not files:
            raise DataError(f"corpus directory {path} contains no .wav files")
        return cls(files, synthetic)

    def check(self):
        bad = []
        for f in self.files:
            try:
                read_audio(f)
            except ValueError as exc:
                bad.append(f"{f}: {exc}")
        if bad:
            raise DataError("unreadable corpus files:\n  " + "\n  ".join(bad))

    def draw(self, n_samples: int, rng) -> np.ndarray:
        """One utterance of exactly `n_samples`, looping or trimming a file as needed."""
        if not self.files:
            gen = synthetic_music if self.synthetic == "music" else synthetic_speech
            return gen(n_samples, rng)
        path = self.files[int(rng.integers(len(self.files)))]
        try:
            x = read_audio(path).samples
        except ValueError as exc:
            raise DataError(f"unreadable corpus file {path}: {exc}") from exc
        if len(x) == 0:
            raise DataError(f"corpus file {path} is empty")
        if len(x) >= n_samples:
            start = int(rng.integers(len(x) - n_samples + 1))
            return x[start:start + n_samples].copy()
        return np.resize(x, n_samples)


# ---------------------------------------------------------------- config

@dataclass
class DatasetConfig:
    utterance_seconds: float = 8.0
    sample_rate: int = SAMPLE_RATE
    ser_range: tuple = (-9.0, 9.0)
    ser_fixed: float | None = None
    ser_choices: tuple | None = None        # e.g. (-5, 0, 5) for the test buckets
    room_set: str = "train"                 # "train", "test" or "test_swapped"
    t60_choices: tuple = acoustics.TRAIN_T60S
    epsilon_range: tuple = (2.0, 5.0)
    nonlinearity: str = "polynomial"        # see acoustics.NonlinearitySpec.kind
    clip_threshold: float = 0.7
    far_peak: float = 0.8
    double_talk_start: tuple = (0.25, 0.6)  # fraction of the utterance
    early_cutoff_ms: float = acoustics.EARLY_CUTOFF_MS
    rir_scenes: tuple = ()                  # directories written by `rir-gen`
    condition: str = "simulated"

    def __post_init__(self):
        for name in ("ser_range", "t60_choices", "epsilon_range", "double_talk_start", "rir_scenes"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.ser_choices is not None:
            self.ser_choices = tuple(self.ser_choices)
        if self.utterance_seconds <= 0:
            raise ValueError("utterance_seconds must be positive")
        if self.room_set not in ("train", "test", "test_swapped"):
            raise ValueError(f"unknown room_set {self.room_set!r}")
        lo, hi = self.double_talk_start
        if not 0 < lo <= hi < 1:
            raise ValueError("double_talk_start must satisfy 0 < lo <= hi < 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.utterance_seconds * self.sample_rate))


# ---------------------------------------------------------------- examples

@dataclass
class MixtureExample:
    mic_signals: list       # y_j
    far_signals: list       # x_i
    targets: list           # s_j^early
    echoes: list            # sum_i e_ij per mic
    near_late: list         # s_j^late
    segments: list          # (start, end, label)
    ser_db: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.mic_signals[0])
        for b in self.buffers().values():
            if len(b) != n:
                raise DataError("all example buffers must have equal length")
        pos = 0
        for start, end, label in self.segments:
            if start != pos or end <= start or label not in SEGMENT_LABELS:
                raise DataError(f"segments do not partition the timeline: {self.segments}")
            pos = end
        if pos != n:
            raise DataError(f"segments end at {pos}, signal has {n} samples")
        if not np.isfinite(self.ser_db):
            raise DataError("ser_db must be finite")

    def __len__(self):
        return len(self.mic_signals[0])

    def buffers(self) -> dict:
        return {"y1": self.mic_signals[0], "y2": self.mic_signals[1],
                "x1": self.far_signals[0], "x2": self.far_signals[1],
                "s1_early": self.targets[0], "s2_early": self.targets[1],
                "e1": self.echoes[0], "e2": self.echoes[1],
                "s1_late": self.near_late[0], "s2_late": self.near_late[1]}

    def mask(self, label: str) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        for start, end, lab in self.segments:
            if lab == label:
                m[start:end] = True
        return m

    def measured_ser_db(self, mic: int = 0) -> float:
        return ser_db(self.targets[mic].samples, self.echoes[mic].samples, self.mask(DOUBLE_TALK))


def ser_db(near: np.ndarray, echo: np.ndarray, mask: np.ndarray) -> float:
    return float(10 * np.log10(np.sum(near[mask] ** 2) / np.sum(echo[mask] ** 2)))


def scale_to_ser(near_early, echoes, target_ser_db: float, double_talk_mask) -> float:
    """Gain for the echo components that sets the double-talk SER to `target_ser_db`.

    `echoes` are the echo signals at the reference microphone (summed before
    measuring energy); the SER is 10 log10(E_near / E_echo) over the mask.
    """
    mask = np.asarray(double_talk_mask, dtype=bool)
    if not mask.any():
        raise DataError("double-talk region is empty")
    s = near_early.samples if isinstance(near_early, AudioBuffer) else np.asarray(near_early)
    if isinstance(echoes, (list, tuple)):
        e = sum(x.samples if isinstance(x, AudioBuffer) else np.asarray(x) for x in echoes)
    else:
        e = echoes.samples if isinstance(echoes, AudioBuffer) else np.asarray(echoes)
    e_s = float(np.sum(s[mask] ** 2))
    e_e = float(np.sum(e[mask] ** 2))
    if e_s <= 0:
        raise DataError("near-end energy in the double-talk region is zero")
    if e_e <= 0:
        raise DataError("echo energy in the double-talk region is zero")
    return float(np.sqrt(e_s / (e_e * 10 ** (target_ser_db / 10))))


def _scene_for(config: DatasetConfig, rng):
    if config.room_set == "train":
        room, geom = acoustics.sample_training_scene(rng, t60s=config.t60_choices,
                                                     sample_rate=config.sample_rate)
        return room, geom
    d_near, d_ls = TEST_D_NEAR, TEST_D_LOUDSPEAKER
    if config.room_set == "test_swapped":
        d_near, d_ls = d_ls, d_near
    room = RoomSpec(*TEST_ROOM, TEST_T60, config.sample_rate)
    return room, acoustics.place_geometry(room, d_near, d_ls, rng)


def load_rir_scene(path) -> SceneRirs:
    """RIR set written by `rir-gen`: talker_mic{j}.rir and ls{i}_mic{j}.rir (1-based)."""
    path = Path(path)
    talker = [load_rir(_rir_file(path, f"talker_mic{j + 1}")) for j in range(2)]
    paths = {(i, j): load_rir(_rir_file(path, f"ls{i + 1}_mic{j + 1}"))
             for i in range(2) for j in range(2)}
    return SceneRirs(talker, paths)


def _rir_file(directory: Path, stem: str) -> Path:
    for suffix in (".rir", ".wav"):
        p = directory / (stem + suffix)
        if p.exists():
            return p
    raise DataError(f"missing RIR file {directory / stem}.rir (or .wav)")


def generate_example(config: DatasetConfig, far_corpus: Corpus, near_corpus: Corpus,
                     seed: int) -> MixtureExample:
    rng = np.random.default_rng(seed)
    n = config.n_samples
    fs = config.sample_rate

    if config.rir_scenes:
        scene_dir = config.rir_scenes[int(rng.integers(len(config.rir_scenes)))]
        rirs = load_rir_scene(scene_dir)
        room, geom = _scene_for(config, rng)
        scene_meta = {"rir_scene": str(scene_dir)}
    else:
        room, geom = _scene_for(config, rng)
        rirs = None
        scene_meta = {}

    eps = float(rng.uniform(*config.epsilon_range))
    nonlin = NonlinearitySpec(config.nonlinearity, eps, config.clip_threshold)
    if config.ser_fixed is not None:
        target_ser = float(config.ser_fixed)
    elif config.ser_choices:
        target_ser = float(rng.choice(config.ser_choices))
    else:
        target_ser = float(rng.uniform(*config.ser_range))

    far = far_corpus.draw(n, rng)
    start = int(round(rng.uniform(*config.double_talk_start) * n))
    near = np.zeros(n)
    near[start:] = near_corpus.draw(n - start, rng)

    if rirs is None:
        rirs = SceneRirs.simulate(room, geom)
    # far-end level so that the loudspeaker drive x_i peaks at far_peak
    x_peak = max(np.max(np.abs(acoustics.convolve(far, g.taps))) for g in rirs.talker)
    far = far * (config.far_peak / x_peak) if x_peak > 0 else far

    scene = render_scene(room, geom, AudioBuffer(far, fs), AudioBuffer(near, fs), nonlin,
                         rng_seed=seed, rirs=rirs, early_cutoff_ms=config.early_cutoff_ms)
    dt_mask = np.zeros(n, dtype=bool)
    dt_mask[start:] = True
    echo_ref = scene.echo_at_mic(0)
    gain = scale_to_ser(scene.near_early[0], echo_ref, target_ser, dt_mask)

    echoes = [gain * scene.echo_at_mic(j) for j in range(2)]
    early = [scene.near_early[j].samples for j in range(2)]
    late = [scene.near_late[j].samples for j in range(2)]
    mics = [echoes[j] + early[j] + late[j] for j in range(2)]
    peak = max(np.max(np.abs(m)) for m in mics)
    level = PEAK_LIMIT / peak if peak > PEAK_LIMIT else 1.0
    buf = lambda a: AudioBuffer(level * a, fs)  # noqa: E731

    segments = [(0, start, FAR_SINGLE_TALK), (start, n, DOUBLE_TALK)]
    metadata = {
        "condition": config.condition,
        "room": asdict(room),
        "geometry": geom.to_dict(),
        "epsilon": eps,
        "nonlinearity": config.nonlinearity,
        "echo_gain": gain,
        "level": level,
        "seed": int(seed),
        **scene_meta,
    }
    return MixtureExample(
        mic_signals=[buf(m) for m in mics],
        far_signals=[AudioBuffer(x.samples, fs) for x in scene.far_signals],
        targets=[buf(s) for s in early],
        echoes=[buf(e) for e in echoes],
        near_late=[buf(s) for s in late],
        segments=segments,
        ser_db=target_ser,
        metadata=metadata,
    )


# ---------------------------------------------------------------- disk format

def write_example(example: MixtureExample, directory, example_id: str) -> dict:
    """Write one WAV per stem under directory/example_id/ and return its manifest entry."""
    directory = Path(directory)
    ex_dir = directory / example_id
    ex_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for stem, b in example.buffers().items():
        rel = f"{example_id}/{stem}.wav"
        write_wav(directory / rel, b.samples, b.sample_rate)
        files[stem] = rel
    return {
        "id": example_id,
        "files": files,
        "ser_db": example.ser_db,
        "seed": example.metadata.get("seed"),
        "segments": [[int(s), int(e), lab] for s, e, lab in example.segments],
        "metadata": example.metadata,
    }


def read_example(entry: dict, root) -> MixtureExample:
    root = Path(root)
    data = {}
    for stem in STEMS:
        rel = entry["files"].get(stem)
        if rel is None:
            raise DataError(f"manifest entry {entry.get('id')!r} lacks stem {stem!r}")
        path = root / rel
        if not path.exists():
            raise DataError(f"missing file {path} for example {entry.get('id')!r}")
        try:
            samples, rate = read_wav(path)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        data[stem] = AudioBuffer(samples, rate)
    return MixtureExample(
        mic_signals=[data["y1"], data["y2"]],
        far_signals=[data["x1"], data["x2"]],
        targets=[data["s1_early"], data["s2_early"]],
        echoes=[data["e1"], data["e2"]],
        near_late=[data["s1_late"], data["s2_late"]],
        segments=[tuple(s) for s in entry["segments"]],
        ser_db=float(entry["ser_db"]),
        metadata=entry.get("metadata", {}),
    )


def quantized(example: MixtureExample) -> MixtureExample:
    """The example as it reads back from disk (one 16-bit quantization)."""
    q = lambda b: AudioBuffer(quantize_pcm16(b.samples) / 32768.0, b.sample_rate)  # noqa: E731
    return MixtureExample([q(b) for b in example.mic_signals], [q(b) for b in example.far_signals],
                          [q(b) for b in example.targets], [q(b) for b in example.echoes],
                          [q(b) for b in example.near_late], list(example.segments),
                          example.ser_db, dict(example.metadata))


@dataclass
class DatasetManifest:
    """JSON-lines manifest: one example entry per line, paths relative to `root`.

    Entry fields: id (str, unique), files ({stem: relative WAV path} for the
    stems in STEMS), ser_db (float), seed (int), segments ([[start, end,
    label], ...] in samples), metadata (room, geometry, epsilon, nonlinearity,
    echo_gain, level, condition, seed).
    """

    entries: list
    root: Path

    FILENAME = "manifest.jsonl"

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        for entry in self.entries:
            yield read_example(entry, self.root)

    def example(self, i: int) -> MixtureExample:
        return read_example(self.entries[i], self.root)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / self.FILENAME
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        if not path.exists():
            raise DataError(f"manifest {path} not found")
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: corrupt manifest line ({exc})") from exc
        return cls(entries, path.parent)


def example_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _generate_and_write(args):
    config, far_corpus, near_corpus, seed, out_dir, example_id = args
    ex = generate_example(config, far_corpus, near_corpus, seed)
    return write_example(ex, out_dir, example_id)


def generate_dataset(config: DatasetConfig, far_corpus: Corpus, near_corpus: Corpus, count: int,
                     seed: int, out_dir, workers: int = 1, prefix: str = "ex") -> DatasetManifest:
    """Generate `count` examples with per-example derived seeds and write the manifest."""
    far_corpus.check()
    near_corpus.check()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, far_corpus, near_corpus, example_seed(seed, i), out_dir, f"{prefix}{i:05d}")
            for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_generate_and_write, jobs))
    else:
        entries = [_generate_and_write(j) for j in jobs]
    manifest = DatasetManifest(entries, out_dir)
    manifest.save()
    log.info("wrote %d examples to %s", count, out_dir)
    return manifest
