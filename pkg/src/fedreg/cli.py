"""Experiment front-end.

    fedreg run --config exp.json [--seed N] [--out DIR]
               [--parallel-clients K] [--save-rounds] [--dry-run]
    fedreg partition-stats --config exp.json [--out DIR]

Configs are strict JSON: every key must be known, unknown keys are an
error naming the offender. A run sweeps the cartesian product of the
optional mu/beta/epoch value lists (a missing list means just the base
value), writes one directory per sweep point with rounds.csv,
report.json and heatmap.csv, and a summary.csv at the top. Reruns of
the same config produce byte-identical summaries.
"""

import argparse
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from fedreg.data import (
    Dataset,
    dirichlet_partition,
    load_cifar_binary,
    load_idx_dataset,
    partition_class_counts,
    synth_dataset,
)
from fedreg.errors import ConfigError, FedRegError
from fedreg.federation import FLConfig, run_training
from fedreg.metrics import median_last_k, write_heatmap_csv, write_report
from fedreg.nn.model import default_cnn_spec, init_state
from fedreg.reprreg import RegConfig
from fedreg.rng import INIT, stream

ALGORITHMS = ("fedavg", "fedprox", "moon", "fedintr", "avg_ablation")

_SCALAR_DEFAULTS = {
    "mu": 1.0,
    "tau": 0.5,
    "beta": 0.5,
    "seed": 0,
    "rounds": 100,
    "local_epochs": 10,
    "batch_size": 512,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 1e-5,
    "n_clients": 10,
    "client_fraction": 1.0,
    "min_client_size": 2,
    "augment": False,
    "differentiable_alpha": False,
}
_TOP_KEYS = {"algorithm", "dataset", "model", "sweep", *_SCALAR_DEFAULTS}
_DATASET_KEYS = {
    "synth": {"kind", "n_train", "n_test", "n_classes", "shape", "noise", "seed"},
    "cifar10": {"kind", "train_paths", "test_path"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels",
            "n_classes"},
}
_MODEL_KEYS = {"conv_channels", "dense_widths", "extraction_points", "projection_dim"}
_SWEEP_KEYS = {"mu_values", "beta_values", "epoch_values"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _number(cfg: dict, key: str, default) -> float:
    v = cfg.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {v!r}")
    return float(v)


def _flag(cfg: dict, key: str, default: bool) -> bool:
    v = cfg.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"config key {key!r} must be true or false, got {v!r}")
    return v


def _int(cfg: dict, key: str, default: int) -> int:
    v = cfg.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not float(v).is_integer():
        raise ConfigError(f"config key {key!r} must be an integer, got {v!r}")
    return int(v)


def _number_list(section: dict, key: str):
    v = section[key]
    if (not isinstance(v, list) or not v
            or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v)):
        raise ConfigError(f"sweep key {key!r} must be a non-empty list of numbers")
    return list(v)


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    dataset: dict
    model: dict | None = None
    sweep: dict | None = None
    mu: float = 1.0
    tau: float = 0.5
    beta: float = 0.5
    seed: int = 0
    rounds: int = 100
    local_epochs: int = 10
    batch_size: int = 512
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    n_clients: int = 10
    client_fraction: float = 1.0
    min_client_size: int = 2
    augment: bool = False
    differentiable_alpha: bool = False

    @property
    def variant(self) -> str:
        return "none" if self.algorithm == "fedavg" else self.algorithm


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    for required in ("algorithm", "dataset"):
        if required not in raw:
            raise ConfigError(f"config is missing required key {required!r}")
    algorithm = raw["algorithm"]
    if algorithm not in ALGORITHMS:
        raise ConfigError(
            f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}"
        )

    dataset = raw["dataset"]
    if not isinstance(dataset, dict) or "kind" not in dataset:
        raise ConfigError("dataset section must be an object with a 'kind' key")
    kind = dataset["kind"]
    if kind not in _DATASET_KEYS:
        raise ConfigError(
            f"unknown dataset kind {kind!r}; expected one of {sorted(_DATASET_KEYS)}"
        )
    _reject_unknown(dataset, _DATASET_KEYS[kind], f"dataset ({kind})")

    model = raw.get("model")
    if model is not None:
        if not isinstance(model, dict):
            raise ConfigError("model section must be an object")
        _reject_unknown(model, _MODEL_KEYS, "model")

    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("sweep section must be an object")
        _reject_unknown(sweep, _SWEEP_KEYS, "sweep")
        for key in sweep:
            _number_list(sweep, key)

    scalars = {k: (
        _flag(raw, k, d) if isinstance(d, bool)
        else _int(raw, k, d) if isinstance(d, int)
        else _number(raw, k, d)
    ) for k, d in _SCALAR_DEFAULTS.items()}
    return ExperimentConfig(algorithm=algorithm, dataset=dict(dataset),
                            model=dict(model) if model else None,
                            sweep=dict(sweep) if sweep else None, **scalars)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return parse_config(raw)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[float, float, int]]:
    """(mu, beta, local_epochs) triples, cartesian, in config list order."""
    sweep = cfg.sweep or {}
    mus = sweep.get("mu_values", [cfg.mu])
    betas = sweep.get("beta_values", [cfg.beta])
    epochs = sweep.get("epoch_values", [cfg.local_epochs])
    if any(not float(e).is_integer() or e < 0 for e in epochs):
        raise ConfigError("epoch_values must be non-negative integers")
    return [(float(m), float(b), int(e))
            for m, b, e in itertools.product(mus, betas, epochs)]


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    kind = d["kind"]
    if kind == "synth":
        shape = tuple(d.get("shape", (1, 8, 8)))
        return synth_dataset(
            n_train=int(d.get("n_train", 5000)),
            n_test=int(d.get("n_test", 1000)),
            n_classes=int(d.get("n_classes", 4)),
            shape=shape,
            noise=float(d.get("noise", 32.0)),
            seed=int(d.get("seed", cfg.seed)),
        )
    if kind == "cifar10":
        paths = d.get("train_paths")
        if not isinstance(paths, list) or not paths:
            raise ConfigError("dataset.train_paths must be a non-empty list")
        shards = [load_cifar_binary(p) for p in paths]
        train = Dataset(
            np.concatenate([s.images for s in shards]),
            np.concatenate([s.labels for s in shards]),
            10,
        )
        return train, load_cifar_binary(d["test_path"])
    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in d:
                raise ConfigError(f"dataset section is missing {key!r}")
        n_classes = int(d.get("n_classes", 10))
        train = load_idx_dataset(d["train_images"], d["train_labels"], n_classes)
        test = load_idx_dataset(d["test_images"], d["test_labels"], n_classes)
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_spec(cfg: ExperimentConfig, input_shape: tuple, n_classes: int):
    m = cfg.model or {}
    ep = m.get("extraction_points")
    return default_cnn_spec(
        input_shape=input_shape,
        classes=n_classes,
        conv_channels=tuple(m.get("conv_channels", (8, 16, 32))),
        dense_widths=tuple(m.get("dense_widths", (128, 96))),
        extraction_points=tuple(ep) if ep is not None else None,
        projection_dim=int(m.get("projection_dim", 256)),
    )


def _point_name(cfg: ExperimentConfig, mu: float, beta: float, epochs: int) -> str:
    return f"{cfg.algorithm}_mu{mu:g}_beta{beta:g}_E{epochs}"


def _echo_config(cfg: ExperimentConfig, mu: float, beta: float, epochs: int) -> dict:
    """Flat, sweep-free config dict for this point; parse_config accepts it."""
    out = {"algorithm": cfg.algorithm, "dataset": cfg.dataset}
    if cfg.model is not None:
        out["model"] = cfg.model
    for key in _SCALAR_DEFAULTS:
        out[key] = getattr(cfg, key)
    out.update(mu=mu, beta=beta, local_epochs=epochs)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    points = sweep_points(cfg)
    train, test = build_dataset(cfg)
    spec = build_spec(cfg, train.input_shape, train.n_classes)

    if args.dry_run:
        print(f"config: {args.config}")
        print(f"algorithm: {cfg.algorithm}  seed: {cfg.seed}")
        print(f"train: {len(train)} samples {train.input_shape}, "
              f"{train.n_classes} classes; test: {len(test)}")
        print(f"model: {spec.param_count()} parameters, "
              f"{spec.n_extraction} extraction points")
        print(f"{len(points)} sweep point(s):")
        for mu, beta, epochs in points:
            print(f"  {_point_name(cfg, mu, beta, epochs)}")
        return 0

    os.makedirs(args.out, exist_ok=True)
    summary_rows = []
    for mu, beta, epochs in points:
        name = _point_name(cfg, mu, beta, epochs)
        point_dir = os.path.join(args.out, name)
        os.makedirs(point_dir, exist_ok=True)
        fl = FLConfig(
            n_clients=cfg.n_clients, rounds=cfg.rounds, local_epochs=epochs,
            batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, client_fraction=cfg.client_fraction,
            seed=cfg.seed, augment=cfg.augment,
            parallel_clients=args.parallel_clients,
        )
        reg = RegConfig(mu=mu, tau=cfg.tau, variant=cfg.variant,
                        differentiable_alpha=cfg.differentiable_alpha)
        partition = dirichlet_partition(train.labels, cfg.n_clients, beta,
                                        cfg.seed, cfg.min_client_size)
        init = init_state(spec, stream(cfg.seed, INIT))
        snapshot_dir = None
        if args.save_rounds:
            snapshot_dir = os.path.join(point_dir, "snapshots")
            os.makedirs(snapshot_dir, exist_ok=True)

        t0 = time.time()

        def progress(rec):
            print(f"[{name}] round {rec.round + 1}/{cfg.rounds} "
                  f"acc {rec.accuracy:.4f} loss {rec.mean_local_loss:.4f}",
                  flush=True)

        _, history = run_training(spec, train, test, partition, fl, reg, init,
                                  snapshot_dir=snapshot_dir, on_round=progress)
        report = write_report(point_dir, _echo_config(cfg, mu, beta, epochs), history)
        write_heatmap_csv(os.path.join(point_dir, "heatmap.csv"), partition,
                          train.labels, train.n_classes)
        headline = report["headline_accuracy"]
        print(f"[{name}] done in {time.time() - t0:.1f}s, "
              f"headline accuracy {headline:.4f}", flush=True)
        summary_rows.append((cfg.algorithm, mu, beta, epochs, cfg.n_clients, headline))

    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as f:
        f.write("algorithm,mu,beta,E,N,headline_accuracy\n")
        for alg, mu, beta, epochs, n, headline in summary_rows:
            f.write(f"{alg},{mu:g},{beta:g},{epochs},{n},{headline:.6f}\n")
    return 0


def cmd_partition_stats(args) -> int:
    cfg = load_config(args.config)
    train, _ = build_dataset(cfg)
    partition = dirichlet_partition(train.labels, cfg.n_clients, cfg.beta,
                                    cfg.seed, cfg.min_client_size)
    counts = partition_class_counts(partition, train.labels, train.n_classes)
    shares = counts.max(axis=1) / counts.sum(axis=1)
    print(f"{len(train)} samples over {cfg.n_clients} clients, "
          f"beta={cfg.beta:g}, seed={cfg.seed}")
    print("client  size  max-class-share  class counts")
    for i in range(cfg.n_clients):
        row = " ".join(f"{c:5d}" for c in counts[i])
        print(f"{i:6d}  {counts[i].sum():4d}  {shares[i]:15.3f}  {row}")
    print(f"mean max-class-share: {shares.mean():.3f}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "heatmap.csv")
        write_heatmap_csv(path, partition, train.labels, train.n_classes)
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedreg",
        description="Federated training with intermediate-layer regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a config")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument("--seed", type=int, default=None, help="override config seed")
    run.add_argument("--out", default="runs", help="output directory")
    run.add_argument("--parallel-clients", type=int, default=1,
                     help="thread pool size for client updates")
    run.add_argument("--save-rounds", action="store_true",
                     help="snapshot the global model every round")
    run.add_argument("--dry-run", action="store_true",
                     help="print the plan without training")
    run.set_defaults(fn=cmd_run)

    stats = sub.add_parser("partition-stats",
                           help="show how a config splits data across clients")
    stats.add_argument("--config", required=True, help="JSON config file")
    stats.add_argument("--out", default=None, help="also write heatmap.csv here")
    stats.set_defaults(fn=cmd_partition_stats)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FedRegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
