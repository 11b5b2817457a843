"""Run every algorithm on the synthetic benchmark and print a comparison table.

All runs share the same model init, client partition and sampling
schedule, so the only difference between rows is the local objective.
Default settings finish in a couple of minutes on one core:

    python3 scripts/compare_algorithms.py
    python3 scripts/compare_algorithms.py --rounds 10 --noise 32 --out table.csv
"""

import argparse
import csv
import time

from fedreg.data import dirichlet_partition, synth_dataset
from fedreg.federation import FLConfig, run_training
from fedreg.metrics import median_last_k
from fedreg.nn.model import default_cnn_spec, init_state
from fedreg.reprreg import RegConfig
from fedreg.rng import INIT, stream

ALGORITHMS = ("fedavg", "fedprox", "moon", "avg_ablation", "fedintr")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        description="compare local-training objectives under one federation setup")
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--local-epochs", type=int, default=5)
    ap.add_argument("--clients", type=int, default=10)
    ap.add_argument("--beta", type=float, default=0.1,
                    help="Dirichlet concentration; smaller is more skewed")
    ap.add_argument("--mu", type=float, default=1.0)
    ap.add_argument("--tau", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--noise", type=float, default=48.0,
                    help="synthetic dataset noise scale; higher is harder")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional CSV path for the table")
    args = ap.parse_args(argv)

    train, test = synth_dataset(n_train=5000, n_test=1000, n_classes=4,
                                shape=(1, 8, 8), noise=args.noise, seed=args.seed)
    spec = default_cnn_spec(train.input_shape, train.n_classes,
                            conv_channels=(4, 8), dense_widths=(32,),
                            projection_dim=16)
    partition = dirichlet_partition(train.labels, args.clients, args.beta, args.seed)
    init = init_state(spec, stream(args.seed, INIT))
    fl = FLConfig(n_clients=args.clients, rounds=args.rounds,
                  local_epochs=args.local_epochs, batch_size=512, lr=args.lr,
                  seed=args.seed)

    print(f"synthetic data: {len(train)} train / {len(test)} test, "
          f"noise {args.noise:g}, beta {args.beta:g}, "
          f"{spec.param_count()} parameters")
    rows = []
    for alg in ALGORITHMS:
        variant = "none" if alg == "fedavg" else alg
        reg = RegConfig(mu=args.mu, tau=args.tau, variant=variant)
        t0 = time.time()
        _, history = run_training(spec, train, test, partition, fl, reg, init)
        accs = history.accuracies()
        row = {
            "algorithm": alg,
            "headline": median_last_k(accs, 10),
            "best": max(accs),
            "final": accs[-1],
            "seconds": time.time() - t0,
        }
        rows.append(row)
        print(f"  {alg:>12}  headline {row['headline']:.4f}  "
              f"best {row['best']:.4f}  final {row['final']:.4f}  "
              f"({row['seconds']:.1f}s)", flush=True)

    base = next(r for r in rows if r["algorithm"] == "fedavg")
    print("\nheadline accuracy vs fedavg:")
    for row in sorted(rows, key=lambda r: -r["headline"]):
        delta = row["headline"] - base["headline"]
        print(f"  {row['algorithm']:>12}  {row['headline']:.4f}  ({delta:+.4f})")

    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
