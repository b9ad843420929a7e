"""Client rounds, server aggregation and the full training loop."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .config import RunConfig
from .data import SplitPlan, SyntheticDataset, dirichlet_split, eval_sets, generate, neighbor_classes, pathological_split
from .factorization import FactoredPrompt, factorize, reconstruct_gradient
from .model import FrozenEncoders, PromptState, accuracy, build_encoders, loss_and_grads, pretrained_class_means
from .numeric import RngStream, frobenius_norm, gaussian_matrix
from .privacy import NoiseScales, PrivacySpec, account, clipped_mean

logger = logging.getLogger(__name__)

EVAL_BASE = 2000


class InvariantError(RuntimeError):
    """A protocol invariant broke mid-run."""


@dataclass(frozen=True)
class Variant:
    mode: str = "dp-fpl"
    rank: int = 8
    noise: bool = True

    @property
    def factorizes(self) -> bool:
        return self.mode in ("dp-fpl", "dp-fpl-no-residual")

    @property
    def residual(self) -> bool:
        return self.mode != "dp-fpl-no-residual"


@dataclass
class ClientState:
    id: int
    p_local: np.ndarray
    p_global_copy: np.ndarray
    shard: np.ndarray  # indices into the training set
    rng: RngStream
    lr: float
    local_classes: list[int] = field(default_factory=list)
    factors: FactoredPrompt | None = None  # persistent-low-rank only


@dataclass
class ServerState:
    p_global: np.ndarray
    lr: float
    rng: RngStream
    round: int = 0


@dataclass
class ClientUpdate:
    client: int
    grad_global: np.ndarray  # clipped, batch-averaged, noiseless
    loss: float
    local_noise_norm: float
    weight: int  # shard size


def sample_batch(client: ClientState, batch_size: int) -> np.ndarray:
    n = len(client.shard)
    if n == 0:
        raise ValueError(f"client {client.id} has an empty shard")
    if n < batch_size:
        warnings.warn(
            f"client {client.id}: shard of {n} < batch size {batch_size}; sampling with replacement",
            RuntimeWarning,
            stacklevel=2,
        )
        return client.shard[client.rng.gen.integers(0, n, size=batch_size)]
    return client.shard[client.rng.gen.choice(n, size=batch_size, replace=False)]


def _noise(shape, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma == 0:
        return np.zeros(shape)
    return gaussian_matrix(shape[0], shape[1], sigma, rng)


def client_round(
    client: ClientState,
    p_global: np.ndarray,
    data: tuple[np.ndarray, np.ndarray],
    spec: PrivacySpec,
    scales: NoiseScales,
    variant: Variant,
    enc: FrozenEncoders,
) -> ClientUpdate:
    """One local step; mutates ``client`` and returns what goes to the server."""
    x_all, y_all = data
    client.p_global_copy = p_global.copy()
    idx = sample_batch(client, spec.batch_size)
    batch = (x_all[idx], y_all[idx])
    sigma = scales.sigma_local if variant.noise else 0.0
    c_th, denom = spec.clip_threshold, spec.batch_size
    noise_norm = 0.0

    if variant.factorizes:
        fp = factorize(client.p_local, variant.rank, client.rng)
        prompts = PromptState(client.p_global_copy, fp.recompose(True))
        # Noise goes on gradients of orthonormal carriers; see FactoredPrompt.carriers.
        if variant.residual:
            carrier = fp.carriers()
        else:
            carrier = FactoredPrompt(fp.u, fp.v, np.zeros_like(fp.r)).carriers()
        lg = loss_and_grads(PromptState(prompts.p_global, carrier.recompose()), carrier, enc, batch)
        grad_g = clipped_mean(lg.grad_prompt, c_th, denom)
        grad_u = clipped_mean(lg.grad_u, c_th, denom)
        grad_v = clipped_mean(lg.grad_v, c_th, denom)
        n_u = _noise(grad_u.shape, sigma, client.rng)
        n_v = _noise(grad_v.shape, sigma, client.rng)
        noise_norm = math.hypot(frobenius_norm(n_u), frobenius_norm(n_v))
        grad_local = reconstruct_gradient(grad_u + n_u, grad_v + n_v, carrier.u, carrier.v)
        client.p_local = prompts.p_local - client.lr * grad_local
    elif variant.mode == "persistent-low-rank":
        if client.factors is None:
            fp = factorize(client.p_local, variant.rank, client.rng)
            client.factors = FactoredPrompt(fp.u, fp.v, np.zeros_like(fp.r))
        fp = client.factors
        prompts = PromptState(client.p_global_copy, fp.low_rank())
        lg = loss_and_grads(prompts, fp, enc, batch, residual=False)
        grad_g = clipped_mean(lg.grad_prompt, c_th, denom)
        grad_u = clipped_mean(lg.grad_u, c_th, denom)
        grad_v = clipped_mean(lg.grad_v, c_th, denom)
        n_u = _noise(grad_u.shape, sigma, client.rng)
        n_v = _noise(grad_v.shape, sigma, client.rng)
        noise_norm = math.hypot(frobenius_norm(n_u), frobenius_norm(n_v))
        u = fp.u - client.lr * (grad_u + n_u)
        v = fp.v - client.lr * (grad_v + n_v)
        client.factors = FactoredPrompt(u, v, fp.r)
        client.p_local = u @ v
    elif variant.mode == "full-rank-local":
        prompts = PromptState(client.p_global_copy, client.p_local)
        lg = loss_and_grads(prompts, None, enc, batch)
        # p enters additively, so the local and global partials coincide.
        grad_g = clipped_mean(lg.grad_prompt, c_th, denom)
        n_l = _noise(grad_g.shape, sigma, client.rng)
        noise_norm = frobenius_norm(n_l)
        client.p_local = client.p_local - client.lr * (grad_g + n_l)
    elif variant.mode == "shared-only":
        prompts = PromptState(client.p_global_copy, np.zeros_like(client.p_local))
        lg = loss_and_grads(prompts, None, enc, batch)
        grad_g = clipped_mean(lg.grad_prompt, c_th, denom)
    else:
        raise ValueError(f"unknown variant mode {variant.mode!r}")

    if not np.all(np.isfinite(client.p_local)):
        raise InvariantError(f"client {client.id}: local prompt became non-finite")
    return ClientUpdate(client.id, grad_g, lg.loss, noise_norm, len(client.shard))


def server_aggregate(
    updates: list[ClientUpdate],
    server: ServerState,
    scales: NoiseScales,
    clip_threshold: float | None = None,
    noise: bool = True,
) -> float:
    """Average client gradients (client-id order), add global noise, step.

    Returns the Frobenius norm of the injected global noise.
    """
    if not updates:
        raise ValueError("server_aggregate needs at least one client gradient")
    updates = sorted(updates, key=lambda u: u.client)
    shape = server.p_global.shape
    for u in updates:
        if u.grad_global.shape != shape:
            raise ValueError(f"client {u.client} gradient shape {u.grad_global.shape} != {shape}")
        if clip_threshold is not None and frobenius_norm(u.grad_global) > clip_threshold * (1 + 1e-12):
            raise InvariantError(f"client {u.client} sent an unclipped gradient")
    weights = [u.weight for u in updates]
    total = np.zeros(shape)
    if len(set(weights)) == 1:
        for u in updates:
            total = total + u.grad_global
        mean = total / len(updates)
    else:
        wsum = float(sum(weights))
        for u in updates:
            total = total + (u.weight / wsum) * u.grad_global
        mean = total
    sigma = scales.sigma_global if noise else 0.0
    n_g = _noise(shape, sigma, server.rng)
    server.p_global = server.p_global - server.lr * (mean + n_g)
    server.round += 1
    if not np.all(np.isfinite(server.p_global)):
        raise InvariantError("global prompt became non-finite")
    return frobenius_norm(n_g)


@dataclass
class RoundMetrics:
    round: int
    loss: float
    local_acc: list[float] | None
    neighbor_acc: list[float] | None
    noise_local: float
    noise_global: float
    eps_spent: float | None

    @property
    def mean_local(self) -> float | None:
        return None if self.local_acc is None else float(np.mean(self.local_acc))

    @property
    def mean_neighbor(self) -> float | None:
        if self.neighbor_acc is None:
            return None
        vals = [a for a in self.neighbor_acc if not math.isnan(a)]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "loss": self.loss,
            "local_acc": self.local_acc,
            "neighbor_acc": self.neighbor_acc,
            "noise_local": self.noise_local,
            "noise_global": self.noise_global,
            "eps_spent": self.eps_spent,
        }


@dataclass
class Simulation:
    """Everything a run needs, built deterministically from a config."""

    config: RunConfig
    encoders: FrozenEncoders
    dataset: SyntheticDataset
    plan: SplitPlan
    clients: list[ClientState]
    server: ServerState
    spec: PrivacySpec
    scales: NoiseScales
    variant: Variant
    eval_rngs: list[RngStream]

    def effective_local(self, client: ClientState) -> np.ndarray:
        """The local prompt as the forward pass sees it."""
        mode = self.variant.mode
        if mode == "shared-only":
            return np.zeros_like(client.p_local)
        if mode == "dp-fpl-no-residual":
            return factorize(client.p_local, self.variant.rank, self.eval_rngs[client.id]).low_rank()
        return client.p_local

    def client_prompt(self, client: ClientState) -> np.ndarray:
        return self.server.p_global + self.effective_local(client)


def build_simulation(cfg: RunConfig) -> Simulation:
    cfg.validate()
    pop = cfg.pop_seed
    enc = build_encoders(
        cfg.prompt_len, cfg.prompt_dim, cfg.token_dim, cfg.image_dim, cfg.num_classes,
        RngStream(pop, numeric.ENCODER_STREAM), temperature=cfg.temperature, hidden=cfg.hidden,
    )
    means = pretrained_class_means(enc, RngStream(pop, numeric.MEANS_STREAM), cfg.image_dim,
                                   cfg.alignment, cfg.ref_std, cfg.mean_scale)
    ds = generate(cfg.num_classes, cfg.per_class, cfg.image_dim, cfg.data_noise,
                  RngStream(cfg.seed, numeric.DATA_STREAM), class_means=means)
    split_rng = RngStream(cfg.seed, numeric.SPLIT_STREAM)
    if cfg.split == "pathological":
        plan = pathological_split(ds, cfg.num_clients, cfg.classes_per_client, split_rng)
    else:
        plan = dirichlet_split(ds, cfg.num_clients, cfg.alpha, split_rng)
    init = RngStream(cfg.seed, numeric.INIT_STREAM)
    shape = (cfg.prompt_len, cfg.prompt_dim)
    p_global = init.normal(shape, scale=cfg.init_std)
    clients = []
    for i in range(cfg.num_clients):
        p_local = init.normal(shape, scale=cfg.init_std)
        if cfg.variant == "shared-only":
            p_local = np.zeros(shape)
        clients.append(ClientState(
            id=i, p_local=p_local, p_global_copy=p_global.copy(), shard=plan.shard(i),
            rng=RngStream(cfg.seed, numeric.CLIENT_BASE + i), lr=cfg.lr_local,
            local_classes=list(plan.local_classes[i]),
        ))
    server = ServerState(p_global, cfg.lr_global, RngStream(cfg.seed, numeric.SERVER_STREAM))
    spec = PrivacySpec(cfg.epsilon, cfg.delta, cfg.clip_threshold, cfg.rounds, cfg.batch_size, cfg.num_clients)
    scales = NoiseScales.from_spec(spec) if cfg.noise else NoiseScales.off()
    variant = Variant(cfg.variant, cfg.rank, cfg.noise)
    eval_rngs = [RngStream(cfg.seed, EVAL_BASE + i) for i in range(cfg.num_clients)]
    return Simulation(cfg, enc, ds, plan, clients, server, spec, scales, variant, eval_rngs)


def evaluate(sim: Simulation) -> tuple[list[float], list[float] | None]:
    """Per-client local and neighbor test accuracy.

    Each test set is scored with predictions restricted to its own label set.
    Dirichlet splits report accuracy on the client's local-class test samples
    over all labels, and no neighbor figure.
    """
    ds = sim.dataset
    local_acc, neigh_acc = [], []
    sets = eval_sets(sim.plan, ds)
    pathological = sim.plan.scheme == "pathological"
    for client, (loc, nb) in zip(sim.clients, sets):
        prompt = sim.client_prompt(client)
        if pathological:
            local_acc.append(accuracy(prompt, sim.encoders, ds.x_test[loc], ds.y_test[loc], client.local_classes))
            neigh_acc.append(accuracy(prompt, sim.encoders, ds.x_test[nb], ds.y_test[nb],
                                      neighbor_classes(sim.plan, client.id)))
        else:
            local_acc.append(accuracy(prompt, sim.encoders, ds.x_test[loc], ds.y_test[loc]))
    return local_acc, (neigh_acc if pathological else None)


def run_round(sim: Simulation, pool: ThreadPoolExecutor | None = None) -> tuple[float, float, float]:
    """All clients then the server; returns (mean loss, mean local noise, global noise)."""
    data = (sim.dataset.x_train, sim.dataset.y_train)
    p_global = sim.server.p_global

    def one(client):
        return client_round(client, p_global, data, sim.spec, sim.scales, sim.variant, sim.encoders)

    if pool is None:
        updates = [one(c) for c in sim.clients]
    else:
        updates = list(pool.map(one, sim.clients))
    g_noise = server_aggregate(updates, sim.server, sim.scales, sim.spec.clip_threshold, sim.variant.noise)
    losses = [u.loss for u in updates]
    return float(np.mean(losses)), float(np.mean([u.local_noise_norm for u in updates])), g_noise


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[RoundMetrics]
    p_global: np.ndarray
    p_locals: list[np.ndarray]
    budget: dict | None
    completed: bool = True
    error: str | None = None
    simulation: Simulation | None = field(default=None, repr=False)

    def final_accuracy(self, window: int = 10) -> tuple[float, float | None]:
        """Mean local / neighbor accuracy over the last ``window`` evaluated rounds."""
        evals = [m for m in self.metrics if m.local_acc is not None][-window:]
        loc = float(np.mean([m.mean_local for m in evals]))
        nb = [m.mean_neighbor for m in evals if m.mean_neighbor is not None]
        return loc, (float(np.mean(nb)) if nb else None)


def run_training(cfg: RunConfig, on_round=None) -> RunResult:
    """Run ``cfg.rounds`` rounds of the protocol and collect per-round metrics.

    ``on_round`` (optional) is called with each :class:`RoundMetrics`.
    """
    sim = build_simulation(cfg)
    metrics: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    error = None
    try:
        for t in range(1, cfg.rounds + 1):
            loss, n_local, n_global = run_round(sim, pool)
            evaluated = t % cfg.eval_every == 0 or t == cfg.rounds
            loc, nb = evaluate(sim) if evaluated else (None, None)
            eps = account(sim.spec, t).epsilon_spent_local if cfg.noise else None
            m = RoundMetrics(t, loss, loc, nb, n_local, n_global, eps)
            metrics.append(m)
            if on_round is not None:
                on_round(m)
    except (InvariantError, FloatingPointError) as exc:
        error = str(exc)
        logger.error("run aborted at round %d: %s", len(metrics) + 1, exc)
    finally:
        if pool is not None:
            pool.shutdown()
    budget = account(sim.spec, len(metrics)).to_dict() if cfg.noise else None
    return RunResult(
        cfg, metrics, sim.server.p_global.copy(), [c.p_local.copy() for c in sim.clients],
        budget, completed=error is None, error=error, simulation=sim,
    )
