"""Federated training loop: sampling, local updates, aggregation.

One round samples a client subset, runs E local epochs on each from the
current global weights, then replaces the global model with the
size-weighted average of the returned states. Clients keep the model
they uploaded last time; it is the negative anchor of the contrastive
regularizer on their next participation (first-timers use the global
model, which makes both contrastive sides coincide).

Client updates are pure functions of (global state, stored previous
state, named RNG streams), so running them on a thread pool gives
results identical to the sequential loop.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedreg.data import Dataset, Partition, augment_flip, batches, normalize
from fedreg.errors import ConfigError
from fedreg.metrics import evaluate
from fedreg.nn.model import ModelSpec, ModelState, forward, state_to_bytes
from fedreg.nn.optim import SgdMomentum
from fedreg.reprreg import RegConfig, head_params, local_loss_and_grads, project
from fedreg.rng import AUGMENT, CLIENT, SAMPLING, stream


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 10
    rounds: int = 100
    local_epochs: int = 10
    batch_size: int = 512
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    client_fraction: float = 1.0
    seed: int = 0
    augment: bool = False
    parallel_clients: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must be in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.parallel_clients < 1:
            raise ConfigError("parallel_clients must be >= 1")


def sample_clients(n_clients: int, fraction: float, seed: int, round_idx: int) -> np.ndarray:
    """ceil(fraction * n) distinct clients, drawn per (seed, round)."""
    m = min(n_clients, max(1, math.ceil(fraction * n_clients)))
    rng = stream(seed, SAMPLING, round_idx)
    return np.sort(rng.choice(n_clients, size=m, replace=False))


@dataclass
class LocalResult:
    client_id: int
    state: ModelState
    n_samples: int
    mean_loss: float
    mean_sup_loss: float
    alpha: np.ndarray | None  # mean layer weights over this client's batches


def _frozen_cache(spec: ModelSpec, state: ModelState, images: np.ndarray,
                  active: list[int], chunk: int) -> list[np.ndarray]:
    """Projected representations of a frozen model over a whole client
    dataset, in dataset order, computed in chunks to bound memory."""
    parts: list[list[np.ndarray]] = [[] for _ in active]
    for start in range(0, len(images), chunk):
        x = normalize(images[start:start + chunk])
        _, exts, _ = forward(spec, state, x, need_trace=False)
        for j, k in enumerate(active):
            z, _ = project(exts[k], head_params(state, k))
            parts[j].append(z)
    return [np.concatenate(p) for p in parts]


def local_update(spec: ModelSpec, data: Dataset, global_state: ModelState,
                 prev_state: ModelState, fl: FLConfig, reg: RegConfig,
                 client_id: int, round_idx: int) -> LocalResult:
    """Train a copy of the global model on one client's data for
    fl.local_epochs epochs and return the resulting state."""
    state = global_state.copy()
    if fl.local_epochs == 0 or len(data) == 0:
        return LocalResult(client_id, state, len(data), float("nan"), float("nan"), None)

    opt = SgdMomentum(fl.lr, fl.momentum, fl.weight_decay)
    active = None
    cache = None
    if reg.needs_representations:
        K = spec.n_extraction
        active = [K - 1] if reg.variant == "moon" else list(range(K))
        if not fl.augment:
            # global and previous models are fixed for the whole round, so
            # their representations can be computed once; augmentation would
            # change the inputs per epoch and invalidate this.
            zg = _frozen_cache(spec, global_state, data.images, active, fl.batch_size)
            zp = zg if prev_state is global_state else _frozen_cache(
                spec, prev_state, data.images, active, fl.batch_size)
            cache = (zg, zp)

    batch_rng = stream(fl.seed, CLIENT, client_id, round_idx)
    aug_rng = stream(fl.seed, AUGMENT, client_id, round_idx) if fl.augment else None

    losses, sup_losses, alphas = [], [], []
    for _ in range(fl.local_epochs):
        for x, y, idx in batches(data, fl.batch_size, batch_rng, with_indices=True):
            frozen = None
            if fl.augment:
                x = augment_flip(x, aug_rng)
            elif cache is not None:
                zg_all, zp_all = cache
                frozen = ([z[idx] for z in zg_all], [z[idx] for z in zp_all])
            bundle = local_loss_and_grads(
                spec, state, x, y, reg,
                global_state=global_state, prev_state=prev_state, frozen=frozen,
            )
            opt.step(state, bundle.grads)
            losses.append(bundle.loss)
            sup_losses.append(bundle.sup_loss)
            if bundle.alpha is not None:
                alphas.append(bundle.alpha)

    alpha = np.mean(alphas, axis=0) if alphas else None
    return LocalResult(client_id, state, len(data),
                       float(np.mean(losses)), float(np.mean(sup_losses)), alpha)


def aggregate(states: list[ModelState], sizes: list[int]) -> ModelState:
    """Dataset-size weighted average of client states.

    Weights are renormalized over the given states, so sampling a subset
    of clients just reweights among the participants. Equal inputs come
    back unchanged and equal sizes use an exact uniform mean.
    """
    if not states:
        raise ConfigError("nothing to aggregate")
    if len(states) != len(sizes):
        raise ConfigError(f"{len(states)} states but {len(sizes)} sizes")
    w = np.asarray(sizes, dtype=np.float64)
    if (w <= 0).any():
        raise ConfigError("client sizes must be positive")
    keys = states[0].params.keys()
    for s in states[1:]:
        if s.params.keys() != keys:
            raise ConfigError("cannot aggregate states of different specs")
    uniform = bool((w == w[0]).all())
    w = w / w.sum()
    out = {}
    for name in keys:
        arrs = [s.params[name] for s in states]
        if all(np.array_equal(a, arrs[0]) for a in arrs[1:]):
            out[name] = arrs[0].copy()
        elif uniform:
            out[name] = np.mean(arrs, axis=0)
        else:
            acc = w[0] * arrs[0]
            for wi, a in zip(w[1:], arrs[1:]):
                acc += wi * a
            out[name] = acc
    return ModelState(out)


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    mean_local_loss: float
    participants: list[int]
    alpha: np.ndarray | None = None


@dataclass
class RoundHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.records])

    def __len__(self):
        return len(self.records)


def run_training(spec: ModelSpec, train: Dataset, test: Dataset,
                 partition: Partition, fl: FLConfig, reg: RegConfig,
                 init: ModelState, snapshot_dir: str | None = None,
                 on_round=None) -> tuple[ModelState, RoundHistory]:
    """Run the full federation and return (final global state, history).

    `init` is the round-0 global model; clients that have never
    participated use the current global state as their previous model.
    `on_round` is called with each RoundRecord as it is produced.
    """
    if partition.n_clients != fl.n_clients:
        raise ConfigError(
            f"partition has {partition.n_clients} clients, config says {fl.n_clients}"
        )
    client_data = [train.subset(ix) for ix in partition.client_indices]
    prev_states: dict[int, ModelState] = {}
    global_state = init.copy()
    history = RoundHistory()

    for t in range(fl.rounds):
        chosen = sample_clients(fl.n_clients, fl.client_fraction, fl.seed, t)

        def job(cid: int) -> LocalResult:
            prev = prev_states.get(cid, global_state)
            return local_update(spec, client_data[cid], global_state, prev,
                                fl, reg, cid, t)

        if fl.parallel_clients > 1 and len(chosen) > 1:
            with ThreadPoolExecutor(max_workers=fl.parallel_clients) as pool:
                results = list(pool.map(job, [int(c) for c in chosen]))
        else:
            results = [job(int(c)) for c in chosen]

        for r in results:
            prev_states[r.client_id] = r.state
        global_state = aggregate([r.state for r in results],
                                 [r.n_samples for r in results])

        accuracy = evaluate(spec, global_state, test)
        alphas = [r.alpha for r in results if r.alpha is not None]
        record = RoundRecord(
            round=t,
            accuracy=accuracy,
            mean_local_loss=float(np.mean([r.mean_loss for r in results])),
            participants=[r.client_id for r in results],
            alpha=np.mean(alphas, axis=0) if alphas else None,
        )
        history.records.append(record)
        if snapshot_dir is not None:
            path = f"{snapshot_dir}/round_{t:04d}.bin"
            with open(path, "wb") as f:
                f.write(state_to_bytes(spec, global_state))
        if on_round is not None:
            on_round(record)

    return global_state, history
