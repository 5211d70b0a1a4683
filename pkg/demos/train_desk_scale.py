"""Overfit a DCDM model on a tiny corpus and compare it with doing nothing.

    python demos/train_desk_scale.py --out /tmp/desk --epochs 60

This is the desk-scale learning check: 8 two-second examples, batch size 1.
A full run takes about 23 minutes on one CPU core; pass --epochs 5 for a
quick look. Afterwards the script reports ERLE and double-talk SDR for the
trained model next to the passthrough baseline (estimate = microphone).
"""
import argparse
import json
from pathlib import Path

from stereo_aec.dataset import Corpus, DatasetConfig, generate_dataset
from stereo_aec.metrics import evaluate, passthrough
from stereo_aec.model import LcsmConfig, LcsmModel
from stereo_aec.training import TrainConfig, fit

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="desk_run")
parser.add_argument("--epochs", type=int, default=60)
parser.add_argument("--lam", type=float, default=0.1)
parser.add_argument("--seconds", type=float, default=2.0)
args = parser.parse_args()
out = Path(args.out)

manifest = generate_dataset(DatasetConfig(utterance_seconds=args.seconds), Corpus(), Corpus(),
                            count=8, seed=1, out_dir=out / "data")

model = LcsmModel(LcsmConfig("dcdm"), seed=0)
print(f"training {model.count_params():,} parameters on {len(manifest)} examples")
result = fit(model, manifest, None,
             TrainConfig(epochs=args.epochs, batch_size=1, lam=args.lam), out / "run")

# one line per epoch is also in run/metrics.jsonl
for rec in result.history:
    tr = rec["train"]
    print(f"epoch {rec['epoch']:3d}  lr {rec['lr']:.1e}  combined {tr['combined']:+.4f}  "
          f"imae {tr['imae']:.4f}  sdr {tr['sdr_db']:+.2f} dB")

trained = evaluate(result.best_checkpoint, manifest)
baseline = evaluate(None, manifest, estimator=passthrough)
print("\ntrained model\n" + trained.to_table())
print("\npassthrough\n" + baseline.to_table())
summary = {"erle_db": trained.overall()["erle_db"],
           "sdr_gain_db": trained.overall()["sdr_db"] - baseline.overall()["sdr_db"]}
print("\n" + json.dumps(summary, indent=2))
