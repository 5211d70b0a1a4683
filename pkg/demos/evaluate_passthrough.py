"""Build a small test set in the fixed test room and score a model on it.

    python demos/evaluate_passthrough.py --out /tmp/testset
    python demos/evaluate_passthrough.py --out /tmp/testset --checkpoint run/best.lcsm

Without a checkpoint only the passthrough baseline is scored, which shows
the starting point: ERLE 0 dB and a double-talk SDR close to the SER.
"""
import argparse

from stereo_aec.dataset import Corpus, DatasetConfig, generate_dataset
from stereo_aec.metrics import evaluate, passthrough

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="testset")
parser.add_argument("--checkpoint")
parser.add_argument("--count", type=int, default=6)
args = parser.parse_args()

# three SER buckets, test-room geometry; music as the far end for variety
cfg = DatasetConfig(utterance_seconds=2.0, room_set="test", ser_choices=(-5, 0, 5))
manifest = generate_dataset(cfg, Corpus(synthetic="music"), Corpus(), count=args.count, seed=42,
                            out_dir=args.out)

report = evaluate(None, manifest, estimator=passthrough)
print("passthrough\n" + report.to_table())
if args.checkpoint:
    print("\n" + args.checkpoint + "\n" + evaluate(args.checkpoint, manifest).to_table())
