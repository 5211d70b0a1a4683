"""Command-line entry point.

    stereo-aec [--threads N] [--seed S] [-v] <command> ...

Commands: rir-gen, simulate, train, infer, evaluate, param-count, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command that writes an output directory also writes the resolved
experiment config (config.yaml) and its own arguments (args.json) there.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stereo_aec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _write_provenance(out_dir: Path, config, args):
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write(out_dir)
    record = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k != "func"}
    (out_dir / "args.json").write_text(json.dumps(record, indent=2, default=str))


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _load_config(args, overrides=None):
    from .config import ExperimentConfig
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    return ExperimentConfig.load(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------- commands

def cmd_rir_gen(args) -> int:
    import numpy as np

    from . import acoustics
    from .acoustics import RoomSpec, SceneRirs, save_rir
    from .dataset import TEST_D_LOUDSPEAKER, TEST_D_NEAR, TEST_ROOM, TEST_T60

    cfg = _load_config(args)
    out = Path(args.out)
    rng = np.random.default_rng(_seed(args))
    suffix = ".wav" if args.format == "wav" else ".rir"
    records = []
    for k in range(args.count):
        if args.room is not None or args.set in ("test", "test_swapped"):
            dims = args.room if args.room is not None else TEST_ROOM
            t60 = args.t60 if args.t60 is not None else TEST_T60
            room = RoomSpec(*dims, t60)
            d_near = args.d_near if args.d_near is not None else (
                TEST_D_LOUDSPEAKER if args.set == "test_swapped" else TEST_D_NEAR)
            d_ls = args.d_loudspeaker if args.d_loudspeaker is not None else (
                TEST_D_NEAR if args.set == "test_swapped" else TEST_D_LOUDSPEAKER)
            geom = acoustics.place_geometry(room, d_near, d_ls, rng)
        else:
            t60s = (args.t60,) if args.t60 is not None else cfg.dataset.t60_choices
            room, geom = acoustics.sample_training_scene(rng, t60s=t60s)
        rirs = SceneRirs.simulate(room, geom, reflection=0.0 if args.anechoic else None)
        scene = out / f"scene_{k:05d}"
        scene.mkdir(parents=True, exist_ok=True)
        for j, g in enumerate(rirs.talker):
            save_rir(g, scene / f"talker_mic{j + 1}{suffix}")
        for (i, j), h in rirs.echo_paths.items():
            save_rir(h, scene / f"ls{i + 1}_mic{j + 1}{suffix}")
        records.append({"scene": scene.name, "room": [room.length, room.width, room.height],
                        "t60": room.t60, "anechoic": bool(args.anechoic),
                        "n_taps": len(rirs.talker[0].taps), "geometry": geom.to_dict()})
    with open(out / "geometry.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    _write_provenance(out, cfg, args)
    print(f"wrote {len(records)} RIR scene(s) to {out}")
    return EXIT_OK


def _corpus(path, synthetic):
    from .dataset import Corpus, DataError
    if path is None:
        return Corpus(synthetic=synthetic)
    if not Path(path).is_dir():
        raise DataError(f"corpus directory {path} not found")
    corpus = Corpus.from_dir(path, synthetic=synthetic)
    if not corpus.files:
        raise DataError(f"corpus directory {path} contains no .wav files")
    return corpus


def cmd_simulate(args) -> int:
    from .dataset import generate_dataset

    overrides = {"dataset.utterance_seconds": args.seconds, "dataset.ser_fixed": args.ser,
                 "dataset.ser_choices": args.ser_choices, "dataset.room_set": args.room_set,
                 "dataset.condition": args.condition, "dataset.nonlinearity": args.nonlinearity,
                 "dataset.rir_scenes": args.rir_scenes, "corpus.far_dir": args.far_dir,
                 "corpus.near_dir": args.near_dir, "corpus.far_synthetic": args.far_synthetic}
    cfg = _load_config(args, overrides)
    out = Path(args.out)
    far = _corpus(cfg.corpus.far_dir, cfg.corpus.far_synthetic)
    near = _corpus(cfg.corpus.near_dir, cfg.corpus.near_synthetic)
    manifest = generate_dataset(cfg.dataset, far, near, args.count, _seed(args), out,
                                workers=args.threads or 1, prefix=args.prefix)
    _write_provenance(out, cfg, args)
    print(f"wrote {len(manifest)} example(s) and {manifest.root / manifest.FILENAME}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dsp import StftConfig
    from .model import LcsmModel
    from .training import fit

    overrides = {"model.variant": args.variant, "training.epochs": args.epochs,
                 "training.batch_size": args.batch_size, "training.lam": args.lam,
                 "training.lr_initial": args.lr, "training.precision": args.precision,
                 "training.loss": args.loss, "training.max_examples": args.max_examples,
                 "training.literal_sign": True if args.literal_sign else None,
                 "training.seed": args.seed, "model.seed": args.seed}
    cfg = _load_config(args, overrides)
    out = Path(args.out)
    _write_provenance(out, cfg, args)
    stft = StftConfig(**vars(cfg.stft)) if not isinstance(cfg.stft, StftConfig) else cfg.stft
    model = LcsmModel(cfg.model.lcsm(), seed=cfg.model.seed, stft=stft,
                      dtype=cfg.training.dtype)
    result = fit(model, args.manifest, args.val_manifest, cfg.training, out,
                 resume=args.resume, extra_meta={"experiment": cfg.to_dict()})
    last = result.history[-1] if result.history else None
    if last:
        print(f"epoch {last['epoch']}: train combined {last['train']['combined']:.4f}, "
              f"best checkpoint {result.best_checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .dsp import read_audio, write_wav
    from .model import LcsmModel, estimate_near_end

    model = LcsmModel.load(args.checkpoint)
    far = [read_audio(p) for p in args.far]
    mics = [read_audio(p) for p in args.mic]
    if len(far) != 2:
        raise UsageError("--far needs exactly two WAV files (x1 x2)")
    if len(mics) != 2:
        raise UsageError("--mic needs exactly two WAV files (y1 y2)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    which = None if args.mics is None else tuple(m - 1 for m in args.mics)
    estimates = estimate_near_end(model, far, mics, which=which)
    for j, est in zip(which or range(len(mics)), estimates):
        path = out / f"s{j + 1}_hat.wav"
        write_wav(path, est.samples, est.sample_rate)
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, passthrough

    cfg = _load_config(args)
    if args.checkpoint is None and not args.passthrough:
        raise UsageError("give --checkpoint or --passthrough")
    conditions = args.conditions or cfg.evaluation.conditions
    out = Path(args.out) if args.out else None
    report = evaluate(args.checkpoint, args.manifest, conditions=conditions,
                      estimator=passthrough if args.passthrough else None,
                      workers=args.threads or cfg.evaluation.workers,
                      png_dir=(out / "spectrograms") if (out and (args.png or cfg.evaluation.png))
                      else None)
    if out is not None:
        report.save(out, csv_export=args.csv or cfg.evaluation.csv)
        _write_provenance(out, cfg, args)
    print(report.to_json() if args.json else report.to_table())
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .model import LcsmConfig, LcsmModel

    variants = ["dcsm", "dcdm"] if args.variant == "all" else [args.variant]
    counts = {v: LcsmModel(LcsmConfig(v)).count_params() for v in variants}
    if args.json:
        print(json.dumps(counts))
    else:
        for v, n in counts.items():
            print(f"{v}: {n:,} parameters ({n / 1e6:.2f} M)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    results = run_suite(seed=_seed(args), tol=args.tol)
    ok = all(passed for _, _, passed in results)
    if args.json:
        print(json.dumps([{"case": name, "max_rel_error": r.max_rel_error,
                           "checked": r.n_checked, "excluded": len(r.excluded), "passed": p}
                          for name, r, p in results], indent=2))
    else:
        for name, r, p in results:
            print(f"{'PASS' if p else 'FAIL'}  {name:28s} max rel err {r.max_rel_error:.2e} "
                  f"({r.n_checked} coords)")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stereo-aec", description="Stereo acoustic echo cancellation toolkit.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads and workers")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    # the global flags are also accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("rir-gen", parents=[common], help="simulate image-method RIR scenes")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--count", type=int, default=1)
    r.add_argument("--set", choices=["train", "test", "test_swapped"], default="train",
                   help="room/geometry sampling rule when --room is not given")
    r.add_argument("--room", type=float, nargs=3, metavar=("L", "W", "H"))
    r.add_argument("--t60", type=float)
    r.add_argument("--d-near", type=float, help="talker distance from the mic centre (m)")
    r.add_argument("--d-loudspeaker", type=float, help="loudspeaker distance from the mic centre (m)")
    r.add_argument("--anechoic", action="store_true", help="direct path only")
    r.add_argument("--format", choices=["rir", "wav"], default="rir")
    r.set_defaults(func=cmd_rir_gen)

    s = sub.add_parser("simulate", parents=[common], help="generate a mixture dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seconds", type=float)
    s.add_argument("--ser", type=float, help="fixed SER in dB")
    s.add_argument("--ser-choices", type=float, nargs="+", help="e.g. -5 0 5")
    s.add_argument("--room-set", choices=["train", "test", "test_swapped"])
    s.add_argument("--condition")
    s.add_argument("--nonlinearity", choices=["polynomial", "hard_clip", "polynomial+clip",
                                              "identity"])
    s.add_argument("--rir-scenes", nargs="+", help="scene directories written by rir-gen")
    s.add_argument("--far-dir")
    s.add_argument("--near-dir")
    s.add_argument("--far-synthetic", choices=["speech", "music"])
    s.add_argument("--prefix", default="ex")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train an LCSM model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--variant", choices=["dcsm", "dcdm"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam", type=float, help="weight of the SDR term")
    t.add_argument("--literal-sign", action="store_true", help="add +lam*SDR (ablation)")
    t.add_argument("--loss", choices=["cd", "mse"])
    t.add_argument("--precision", choices=["float32", "float64"])
    t.add_argument("--max-examples", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="estimate near-end speech from WAV files")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--far", nargs=2, required=True, metavar=("X1", "X2"))
    i.add_argument("--mic", nargs=2, required=True, metavar=("Y1", "Y2"))
    i.add_argument("--mics", type=int, nargs="+", choices=[1, 2], help="which mics (default all)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", parents=[common], help="ERLE/SDR report over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--passthrough", action="store_true", help="evaluate the do-nothing baseline")
    e.add_argument("--config")
    e.add_argument("--conditions", nargs="+")
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")
    e.add_argument("--csv", action="store_true")
    e.add_argument("--png", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("param-count", parents=[common], help="count trainable parameters")
    c.add_argument("--variant", choices=["dcsm", "dcdm", "all"], default="all")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_param_count)

    g = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every op and a tiny model")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--json", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        from .autodiff.serialize import FormatError
        from .config import ConfigError
        from .dataset import DataError
        try:
            return args.func(args)
        except (DataError, ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        except FloatingPointError as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
