"""Train and evaluate the desk-scale MNIST runs used by the acceptance suite.

Runs on the 5k subset (60 epochs unless noted):
  agg_s0, agg_s1   full model, seeds 0 and 1
  noagg_s0         likelihood head on the last decoder state
  nou_s0, nou_s1   pseudoinputs disabled
  main             full model on the 200-epoch schedule (NLL target)

Each run lands in runs/<name>/ with checkpoints, train_log.jsonl and
test reports (test.json for the last checkpoint, test_epoch1.json for the
epoch-1 snapshot). Finished runs are skipped, so the script can be rerun.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

RUNS = [
    ("agg_s0", "mnist_desk.cfg", 0),
    ("noagg_s0", "mnist_desk_noagg.cfg", 0),
    ("nou_s0", "mnist_desk_nou.cfg", 0),
    ("agg_s1", "mnist_desk.cfg", 1),
    ("nou_s1", "mnist_desk_nou.cfg", 1),
    ("main", "mnist_desk_long.cfg", 0),
]

TEST_SEED = 2024


def dvpvae(*args: str) -> None:
    cmd = [sys.executable, "-m", "dvpvae.cli", *args]
    print("+", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)


def evaluate(run: Path, data: Path, ckpt: str, report: str) -> None:
    if not (run / report).exists():
        dvpvae("eval", "--ckpt", str(run / ckpt), "--data", str(data), "--split", "test",
               "--seed", str(TEST_SEED), "--metrics", "elbo,au", "--report", str(run / report))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default=str(ROOT / "data" / "mnist5k"))
    ap.add_argument("--out", default=str(ROOT / "runs"))
    ap.add_argument("--only", nargs="*", default=None, help="Subset of run names.")
    args = ap.parse_args(argv)
    data, out = Path(args.data), Path(args.out)
    for name, cfg, seed in RUNS:
        if args.only and name not in args.only:
            continue
        run = out / name
        if not (run / "metrics.json").exists():
            dvpvae("train", "--config", str(ROOT / "configs" / cfg), "--data", str(data),
                   "--out", str(run), "--seed", str(seed))
        evaluate(run, data, "last.ckpt", "test.json")
        evaluate(run, data, "epoch1.ckpt", "test_epoch1.json")
        rep = json.loads((run / "test.json").read_text())
        print(f"{name}: test NLL {rep['elbo']['nll']:.4f}  AU {100 * rep['au']['au']:.2f}%", flush=True)


if __name__ == "__main__":
    main()
