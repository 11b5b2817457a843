"""Plot accuracy curves from one or more `fedreg run` output directories.

Each sweep-point directory holds a rounds.csv; this overlays them.

    python3 scripts/plot_rounds.py runs/fedintr_mu1_beta0.5_E10 runs/fedavg_* -o curves.png
"""

import argparse
import csv
import os


def read_rounds(point_dir):
    path = os.path.join(point_dir, "rounds.csv")
    rounds, accs = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rounds.append(int(row["round"]))
            accs.append(float(row["accuracy"]))
    return rounds, accs


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="overlay accuracy curves")
    ap.add_argument("dirs", nargs="+", help="sweep-point directories with rounds.csv")
    ap.add_argument("-o", "--out", default="rounds.png")
    args = ap.parse_args(argv)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for point_dir in args.dirs:
        rounds, accs = read_rounds(point_dir)
        ax.plot(rounds, accs, label=os.path.basename(os.path.normpath(point_dir)))
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
