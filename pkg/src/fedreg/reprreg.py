"""Representation regularization for local training.

Intermediate activations are projected through per-layer 2-layer MLP heads
into fixed-width vectors. For each extraction point k the local training
loss gains a two-way contrastive term that pulls the local representation
z_k toward the global model's z_g_k and pushes it away from the previous
local model's z_p_k. Layer contributions are mixed either by a
similarity softmax (fedintr), uniformly (avg_ablation), or collapsed to
the final layer only (moon). fedprox replaces all of this with an L2
proximal term on the parameters; none is plain supervised training.

The global and previous models are frozen: their representations enter
the loss as constants and no gradients are produced for them. The layer
weights alpha are computed from batch-mean similarities and treated as
constants during backprop unless `differentiable_alpha` is set.
"""

from dataclasses import dataclass

import numpy as np

from fedreg.errors import ConfigError, NumericError
from fedreg.nn.losses import cross_entropy
from fedreg.nn.model import ModelSpec, ModelState, backward, forward, zero_grads

VARIANTS = ("fedintr", "avg_ablation", "moon", "fedprox", "none")

_NORM_FLOOR = 1e-12  # below this a vector counts as zero: similarity 0, no gradient


@dataclass(frozen=True)
class RegConfig:
    """Local-loss configuration: balancing weight, temperature, variant."""

    mu: float = 1.0
    tau: float = 0.5
    variant: str = "fedintr"
    differentiable_alpha: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")

    @property
    def needs_representations(self) -> bool:
        return self.variant in ("fedintr", "avg_ablation", "moon")


def head_params(state: ModelState, k: int):
    p = state.params
    return p[f"head{k}.w1"], p[f"head{k}.b1"], p[f"head{k}.w2"], p[f"head{k}.b2"]


def project(x: np.ndarray, head, need_cache: bool = False):
    """Projection head: Dense -> ReLU -> Dense. x: (B, D) -> z: (B, P)."""
    w1, b1, w2, b2 = head
    if x.ndim != 2 or x.shape[1] != w1.shape[1]:
        raise ConfigError(f"projection input {x.shape} does not match head ({w1.shape[1]})")
    pre = x @ w1.T + b1
    a = np.maximum(pre, 0.0)
    z = a @ w2.T + b2
    cache = (x, pre > 0, a, head) if need_cache else None
    return z, cache


def project_backward(cache, dz: np.ndarray):
    """Returns (dx, {w1, b1, w2, b2 gradients})."""
    x, mask, a, (w1, b1, w2, b2) = cache
    dw2 = dz.T @ a
    db2 = dz.sum(axis=0)
    da = dz @ w2
    dpre = da * mask
    dw1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    dx = dpre @ w1
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def cosine_sim(a: np.ndarray, b: np.ndarray):
    """Cosine similarity along the last axis; (D,)->scalar, (B,D)->(B,).

    A vector with norm below 1e-12 gets similarity 0 (dead-ReLU guard).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = (a * b).sum(axis=-1)
    ok = (na >= _NORM_FLOOR) & (nb >= _NORM_FLOOR)
    sim = np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)
    return float(sim) if sim.ndim == 0 else sim


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _pair_losses(sim_g: np.ndarray, sim_p: np.ndarray, tau: float):
    """Per-sample two-way contrastive loss and its derivative factor.

    loss_b = -log( e^{sg/tau} / (e^{sg/tau} + e^{sp/tau}) )
           = log1p(e^{(sp - sg)/tau})
    Returns (losses, sigma) with dloss/dsg = -sigma/tau, dloss/dsp = +sigma/tau.
    """
    u = (sim_p - sim_g) / tau
    return np.logaddexp(0.0, u), _sigmoid(u)


def layer_loss(z: np.ndarray, z_g: np.ndarray, z_p: np.ndarray, tau: float) -> float:
    """Contrastive loss for one extraction point, mean over the batch."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    losses, _ = _pair_losses(cosine_sim(z, z_g), cosine_sim(z, z_p), tau)
    out = float(np.mean(losses))
    if not np.isfinite(out):
        raise NumericError("non-finite layer loss")
    return out


def layer_weights(sims: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over per-layer similarities scaled by 1/tau; sums to 1."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    s = np.asarray(sims, dtype=np.float64) / tau
    e = np.exp(s - s.max())
    return e / e.sum()


def compose_local_loss(
    sup_loss: float,
    layer_losses: np.ndarray,
    alpha: np.ndarray | None,
    config: RegConfig,
) -> float:
    """Combine the supervised loss with the variant's regularizer."""
    ell = np.asarray(layer_losses, dtype=np.float64)
    if config.variant == "fedintr":
        if alpha is None or len(alpha) != len(ell):
            raise ConfigError("fedintr needs one alpha per layer loss")
        return float(sup_loss + config.mu * float(np.dot(alpha, ell)))
    if config.variant == "avg_ablation":
        return float(sup_loss + config.mu / len(ell) * float(ell.sum()))
    if config.variant == "moon":
        if len(ell) < 1:
            raise ConfigError("moon needs the final layer loss")
        return float(sup_loss + config.mu * float(ell[-1]))
    if config.variant == "none":
        return float(sup_loss)
    raise ConfigError(f"variant {config.variant!r} is not composed from layer losses")


def prox_term(state: ModelState, anchor: ModelState, mu: float) -> float:
    """(mu/2) * ||w - w_anchor||^2 over every parameter, heads included."""
    if state.params.keys() != anchor.params.keys():
        raise ConfigError("proximal term needs states of the same spec")
    sq = 0.0
    for name, w in state.params.items():
        d = w - anchor.params[name]
        sq += float((d * d).sum())
    return 0.5 * mu * sq


def prox_grads(state: ModelState, anchor: ModelState, mu: float) -> dict[str, np.ndarray]:
    if state.params.keys() != anchor.params.keys():
        raise ConfigError("proximal term needs states of the same spec")
    return {name: mu * (w - anchor.params[name]) for name, w in state.params.items()}


def frozen_representations(
    spec: ModelSpec,
    state: ModelState,
    x: np.ndarray,
    active: list[int] | None = None,
) -> list[np.ndarray]:
    """Projected representations of a frozen model, no caches kept."""
    if active is None:
        active = list(range(spec.n_extraction))
    _, exts, _ = forward(spec, state, x, need_trace=False)
    return [project(exts[k], head_params(state, k))[0] for k in active]


def _cosine_and_grad(z: np.ndarray, c: np.ndarray):
    """sim(z, c) per row plus what's needed for d sim/dz (c is constant).

    d sim/dz = (c_hat - sim * z_hat) / ||z||; zero when either norm is tiny.
    """
    nz = np.linalg.norm(z, axis=1)
    nc = np.linalg.norm(c, axis=1)
    ok = (nz >= _NORM_FLOOR) & (nc >= _NORM_FLOOR)
    safe_nz = np.where(ok, nz, 1.0)
    safe_nc = np.where(ok, nc, 1.0)
    z_hat = z / safe_nz[:, None]
    c_hat = c / safe_nc[:, None]
    sim = np.where(ok, (z_hat * c_hat).sum(axis=1), 0.0)

    def dz(upstream):  # upstream: (B,) dLoss/dsim
        coef = np.where(ok, upstream / safe_nz, 0.0)
        return coef[:, None] * (c_hat - sim[:, None] * z_hat)

    return sim, dz


@dataclass
class LossBundle:
    loss: float
    grads: dict[str, np.ndarray]
    sup_loss: float
    layer_losses: np.ndarray | None  # batch-mean contrastive loss per active layer
    alpha: np.ndarray | None  # weights actually applied (fedintr / avg_ablation)


def local_loss_and_grads(
    spec: ModelSpec,
    state: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    reg: RegConfig,
    global_state: ModelState | None = None,
    prev_state: ModelState | None = None,
    frozen: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
    alpha_override: np.ndarray | None = None,
) -> LossBundle:
    """Full local objective for one batch: value plus exact gradients for
    every parameter of `state` (and only of `state`).

    `frozen` optionally supplies precomputed (z_g, z_p) lists for the
    active extraction points, in batch row order; otherwise they are
    recomputed from global_state / prev_state on this batch.
    `alpha_override` pins the layer weights (used by gradient checks to
    probe the loss at fixed alpha; rejected when alpha is differentiable).
    """
    logits, exts, trace = forward(spec, state, x)
    sup_loss, dlogits = cross_entropy(logits, y)

    if reg.variant == "none":
        grads = backward(trace, dlogits)
        return LossBundle(sup_loss, grads, sup_loss, None, None)

    if reg.variant == "fedprox":
        if global_state is None:
            raise ConfigError("fedprox needs the global model")
        grads = backward(trace, dlogits)
        loss = sup_loss + prox_term(state, global_state, reg.mu)
        for name, g in prox_grads(state, global_state, reg.mu).items():
            grads[name] = grads[name] + g
        return LossBundle(loss, grads, sup_loss, None, None)

    # representation variants ------------------------------------------------
    K = spec.n_extraction
    active = [K - 1] if reg.variant == "moon" else list(range(K))
    B = x.shape[0]
    tau = reg.tau

    z_list, head_caches = [], []
    for k in active:
        z, cache = project(exts[k], head_params(state, k), need_cache=True)
        z_list.append(z)
        head_caches.append(cache)

    if frozen is not None:
        zg_list, zp_list = frozen
        if len(zg_list) != len(active) or len(zp_list) != len(active):
            raise ConfigError("frozen representations do not match active layers")
    else:
        if global_state is None or prev_state is None:
            raise ConfigError(f"{reg.variant} needs global and previous models")
        zg_list = frozen_representations(spec, global_state, x, active)
        zp_list = frozen_representations(spec, prev_state, x, active)

    sims_g, dsim_g, sims_p, dsim_p = [], [], [], []
    for z, zg, zp in zip(z_list, zg_list, zp_list):
        sg, dg = _cosine_and_grad(z, zg)
        sp, dp = _cosine_and_grad(z, zp)
        sims_g.append(sg)
        dsim_g.append(dg)
        sims_p.append(sp)
        dsim_p.append(dp)

    per_sample = [_pair_losses(sg, sp, tau) for sg, sp in zip(sims_g, sims_p)]
    ell = np.array([losses.mean() for losses, _ in per_sample])

    alpha = None
    mean_sims = np.array([sg.mean() for sg in sims_g])
    if reg.variant == "fedintr":
        if alpha_override is not None:
            if reg.differentiable_alpha:
                raise ConfigError("cannot override alpha when it is differentiable")
            alpha = np.asarray(alpha_override, dtype=np.float64)
            if alpha.shape != (K,):
                raise ConfigError("alpha override must have one weight per layer")
        else:
            alpha = layer_weights(mean_sims, tau)
        coefs = reg.mu * alpha
    elif reg.variant == "avg_ablation":
        alpha = np.full(len(active), 1.0 / len(active))
        coefs = reg.mu * alpha
    else:  # moon
        coefs = np.array([reg.mu])

    loss = compose_local_loss(sup_loss, ell, alpha, reg)
    if not np.isfinite(loss):
        raise NumericError("non-finite local loss")

    # gradient of the regularizer through each z_k (frozen models: none)
    dexts: list[np.ndarray | None] = [None] * K
    grads_heads = {}
    for j, k in enumerate(active):
        _, sigma = per_sample[j]
        dsg = -(coefs[j] / (tau * B)) * sigma  # (B,)
        dsp = +(coefs[j] / (tau * B)) * sigma
        if reg.variant == "fedintr" and reg.differentiable_alpha:
            # d/ds_bar_k of mu * sum_j alpha_j ell_j, spread over the batch mean
            dalpha_path = (reg.mu / tau) * alpha[j] * (ell[j] - float(np.dot(alpha, ell)))
            dsg = dsg + dalpha_path / B
        dz = dsim_g[j](dsg) + dsim_p[j](dsp)
        dx, hgrads = project_backward(head_caches[j], dz)
        dexts[k] = dx
        for part, g in hgrads.items():
            grads_heads[f"head{k}.{part}"] = g

    grads = backward(trace, dlogits, dexts)
    for name, g in grads_heads.items():
        grads[name] = g
    return LossBundle(loss, grads, sup_loss, ell, alpha)
