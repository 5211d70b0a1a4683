"""Echo-reduction and near-end quality measures, plus report aggregation.

ERLE is measured where only the far end is active; SDR where both talk.
Both are reported for the reference (first) microphone and capped at 100 dB.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DOUBLE_TALK, FAR_SINGLE_TALK, DatasetManifest, MixtureExample
from .dsp import AudioBuffer, stft_array
from .model import LcsmModel, estimate_near_end
from .training import SDR_CAP, SDR_DELTA, sdr_db

ERLE_CAP = 100.0
SER_BUCKETS = (-5.0, 0.0, 5.0)
BUCKET_TOL_DB = 0.5
REFERENCE_MIC = 0


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def _segment_mask(segments, n: int, label=None) -> np.ndarray:
    """Boolean mask from (start, end[, label]) tuples; with `label`, keep only those."""
    mask = np.zeros(n, dtype=bool)
    for seg in segments:
        if label is not None and len(seg) > 2 and seg[2] != label:
            continue
        mask[int(seg[0]):int(seg[1])] = True
    return mask


def erle(mic, estimate, segments) -> float:
    """10 log10(sum y^2 / (sum s_hat^2 + 1e-10)) over the given single-talk segments."""
    y, s = _samples(mic), _samples(estimate)
    if y.shape != s.shape:
        raise ValueError(f"erle length mismatch: {y.shape} vs {s.shape}")
    mask = _segment_mask(segments, len(y), FAR_SINGLE_TALK)
    if not mask.any():
        raise ValueError("erle: no single-talk samples")
    num = float(np.sum(y[mask] ** 2))
    if num <= 0:
        raise ValueError("erle: microphone energy in the single-talk segments is zero")
    return min(10.0 * math.log10(num / (float(np.sum(s[mask] ** 2)) + SDR_DELTA)), ERLE_CAP)


def eval_sdr(target, estimate, segments) -> float:
    """SDR over the concatenated double-talk samples."""
    s, e = _samples(target), _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"eval_sdr length mismatch: {s.shape} vs {e.shape}")
    mask = _segment_mask(segments, len(s), DOUBLE_TALK)
    if not mask.any():
        raise ValueError("eval_sdr: no double-talk samples")
    return sdr_db(s[mask], e[mask])


def ser_bucket(ser: float, buckets=SER_BUCKETS, tol: float = BUCKET_TOL_DB) -> str:
    for b in buckets:
        if abs(ser - b) <= tol:
            return f"{b:g}"
    return "other"


@dataclass
class EvalReport:
    """Per-example rows, group means keyed by (condition, SER bucket), and failures.

    Row fields: id, condition, ser_db, ser_bucket, erle_db, sdr_db,
    far_single_talk_s, double_talk_s (segment coverage in seconds).
    """
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    METRICS = ("erle_db", "sdr_db", "ser_db", "far_single_talk_s", "double_talk_s")

    def groups(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault((r["condition"], r["ser_bucket"]), []).append(r)
        return {key: self._mean(rs) for key, rs in sorted(out.items())}

    def overall(self) -> dict:
        return self._mean(self.rows) if self.rows else {"n": 0}

    def _mean(self, rows) -> dict:
        agg = {"n": len(rows)}
        for key in self.METRICS:
            agg[key] = float(np.mean([r[key] for r in rows]))
        return agg

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "examples": self.rows,
            "groups": [{"condition": c, "ser_bucket": b, **v} for (c, b), v in self.groups().items()],
            "overall": self.overall(),
            "failures": self.failures,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        """Aligned text table: one row per (condition, SER bucket)."""
        header = ("condition", "SER (dB)", "n", "ERLE (dB)", "SDR (dB)")
        lines = [(c, b, str(v["n"]), f"{v['erle_db']:.2f}", f"{v['sdr_db']:.2f}")
                 for (c, b), v in self.groups().items()]
        if self.rows:
            o = self.overall()
            lines.append(("all", "-", str(o["n"]), f"{o['erle_db']:.2f}", f"{o['sdr_db']:.2f}"))
        widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
        out = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
        out += [fmt.format(*r) for r in lines]
        if self.failures:
            out.append(f"{len(self.failures)} example(s) failed: "
                       + ", ".join(f["id"] for f in self.failures))
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["id", "condition", "ser_bucket", *self.METRICS]
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in self.rows:
            writer.writerow(r)
        return buf.getvalue()

    def save(self, out_dir, csv_export: bool = True) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        (out_dir / "report.txt").write_text(self.to_table() + "\n")
        if csv_export:
            (out_dir / "report.csv").write_text(self.to_csv())
        return out_dir


def example_metrics(example: MixtureExample, estimate, example_id: str = "") -> dict:
    """Reference-mic ERLE/SDR row for one example and its near-end estimate."""
    fs = example.mic_signals[0].sample_rate
    segs = example.segments
    ref = REFERENCE_MIC
    return {
        "id": example_id,
        "condition": example.metadata.get("condition", "simulated"),
        "ser_db": float(example.ser_db),
        "ser_bucket": ser_bucket(example.ser_db),
        "erle_db": erle(example.mic_signals[ref], estimate, segs),
        "sdr_db": eval_sdr(example.targets[ref], estimate, segs),
        "far_single_talk_s": float(example.mask(FAR_SINGLE_TALK).sum() / fs),
        "double_talk_s": float(example.mask(DOUBLE_TALK).sum() / fs),
    }


def passthrough(example: MixtureExample) -> np.ndarray:
    """Baseline that does nothing: the estimate is the microphone signal."""
    return example.mic_signals[REFERENCE_MIC].samples


def model_estimator(model: LcsmModel):
    def run(example: MixtureExample) -> np.ndarray:
        return estimate_near_end(model, example.far_signals, example.mic_signals,
                                 which=(REFERENCE_MIC,))[0].samples
    return run


def save_spectrogram_png(path, signals: dict, model_stft=None):
    """Magnitude spectrograms (dB) of the named signals, stacked vertically."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .dsp import StftConfig
    cfg = model_stft or StftConfig()
    fig, axes = plt.subplots(len(signals), 1, figsize=(8, 2.2 * len(signals)), squeeze=False)
    for ax, (name, x) in zip(axes[:, 0], signals.items()):
        mag = np.abs(stft_array(_samples(x), cfg))
        ax.imshow(20 * np.log10(mag.T + 1e-8), origin="lower", aspect="auto", vmin=-80, vmax=20,
                  cmap="magma")
        ax.set_title(name)
        ax.set_ylabel("bin")
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def evaluate(model, manifest, conditions=None, estimator=None, workers: int = 1,
             png_dir=None) -> EvalReport:
    """Evaluate a model (or checkpoint path) on every example of a manifest.

    conditions: optional iterable of condition names to keep. estimator
    overrides the model with any callable example -> estimate (e.g.
    `passthrough`). A failing example is recorded in `report.failures`.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    if estimator is None:
        if not isinstance(model, LcsmModel):
            model = LcsmModel.load(model)
        estimator = model_estimator(model)
    keep = None if conditions is None else set(conditions)
    entries = [(i, e) for i, e in enumerate(manifest.entries)
               if keep is None or e.get("metadata", {}).get("condition", "simulated") in keep]

    def one(job):
        index, entry = job
        try:
            ex = manifest.example(index)
            est = estimator(ex)
            row = example_metrics(ex, est, entry["id"])
            if png_dir is not None:
                Path(png_dir).mkdir(parents=True, exist_ok=True)
                save_spectrogram_png(Path(png_dir) / f"{entry['id']}.png",
                                     {"microphone": ex.mic_signals[0], "estimate": est,
                                      "target": ex.targets[0]})
            return row, None
        except Exception as exc:  # recorded, not fatal
            return None, {"id": entry["id"], "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]
    report = EvalReport(meta={"manifest": str(manifest.root), "n_entries": len(entries),
                              "sdr_cap": SDR_CAP, "erle_cap": ERLE_CAP,
                              "reference_mic": REFERENCE_MIC + 1})
    for row, failure in results:
        if row is not None:
            report.rows.append(row)
        else:
            report.failures.append(failure)
    return report
