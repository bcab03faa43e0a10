"""Federated orchestration: EM-weighted personalized aggregation and baselines.

One simulated communication round follows this order:

1. server broadcasts the global model;
2. each BS scores it against its own personalized model on held-out batches
   (posterior -> aggregation weight pi), or uses its strategy's fixed rule;
3. each BS mixes (1 - pi) * local + pi * global;
4. each BS runs local Adam epochs on its training stream;
5. the server averages the resulting personalized models;
6. utilities are recorded on each BS's evaluation slice with the model that
   BS would deploy: its own post-training model for the personalization
   strategies, the fresh global model for traditional federated averaging,
   and aggregated-shared-plus-local-head for FedPer.

Inter-cell interference is frozen at round boundaries: each BS publishes the
beamformers its current model produces on its evaluation slice, and peers pair
those with their own samples by index. Clients are independent between the
broadcast and the aggregation barrier, so they may run on any number of
threads without changing a single bit of the result.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from isacfl.channel import RngStream
from isacfl.datagen import BsDataset
from isacfl.metrics import Scenario
from isacfl.nn import (
    AdamState,
    LossContext,
    ModelParams,
    NetConfig,
    adam_step,
    forward_batch,
    init_params,
    layer_dims,
    load_adam,
    load_params,
    param_count,
    save_adam,
    save_params,
)

STRATEGIES = ("em_pfl", "fixed_pfl", "fedavg", "fedper", "pfedme", "local_only")

# rng sub-domains of the master stream
_DOMAIN_INIT = 0
_DOMAIN_TRAIN = 1
_DOMAIN_PI = 2


class NumericalError(ArithmeticError):
    """A non-finite value surfaced in training or metrics."""


@dataclass(frozen=True)
class EmConfig:
    """Temperature and batching of the aggregation-weight posterior."""

    kappa: float = 1.0
    eval_batch: int = 64

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if self.eval_batch < 1:
            raise ValueError("eval_batch must be >= 1")


def e_step(loss_global: float, loss_local: float, em: EmConfig) -> float:
    """Posterior weight of the global model given both models' batch losses.

    Evaluated as sigmoid(kappa * (loss_local - loss_global)), which is the
    overflow-free form of the two-way softmax over negated scaled losses.
    """
    if not (math.isfinite(loss_global) and math.isfinite(loss_local)):
        raise NumericalError("non-finite loss passed to the posterior")
    x = em.kappa * (loss_local - loss_global)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def m_step(lambdas: list[float]) -> float:
    """Aggregation weight: plain average of the per-batch posteriors."""
    if not lambdas:
        raise ValueError("m_step needs at least one posterior value")
    if any(not 0.0 <= v <= 1.0 for v in lambdas):
        raise ValueError("posterior values must lie in [0, 1]")
    return float(sum(lambdas) / len(lambdas))


def mix_models(local: ModelParams, global_: ModelParams, pi: float) -> ModelParams:
    """Convex combination (1 - pi) * local + pi * global."""
    if local.cfg != global_.cfg:
        raise ValueError("cannot mix models with different layouts")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    return ModelParams((1.0 - pi) * local.data + pi * global_.data, local.cfg)


def fedavg_aggregate(client_params: list[ModelParams], weights: list[float]) -> ModelParams:
    """Weighted average of client models (weights are local dataset sizes)."""
    if not client_params:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(client_params):
        raise ValueError("one weight per client required")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("weights must be non-negative and not all zero")
    cfg = client_params[0].cfg
    if any(p.cfg != cfg for p in client_params):
        raise ValueError("cannot aggregate models with different layouts")
    total = float(sum(weights))
    out = np.zeros_like(client_params[0].data)
    for p, w in zip(client_params, weights):
        out += (w / total) * p.data
    return ModelParams(out, cfg)


@dataclass
class ClientState:
    """One BS: personalized model, optimizer, data, and its last pi."""

    m: int
    params: ModelParams
    adam: AdamState
    rho: float
    data: BsDataset
    ctx: LossContext
    pi: float = 0.5

    @property
    def k_m(self) -> int:
        return self.data.scenario.k_per_cell[self.m]


@dataclass
class RoundMetrics:
    """Per-round record of what every figure and CSV row is built from."""

    round_index: int
    pi: list[float]
    loss: list[float]
    comm_rate: list[float]
    radar_rate: list[float]
    utility: list[float]
    system_utility: float
    duration_sec: float = 0.0

    def check_finite(self) -> None:
        values = [self.system_utility, *self.pi, *self.loss, *self.comm_rate, *self.radar_rate, *self.utility]
        if not all(math.isfinite(v) for v in values):
            raise NumericalError(f"non-finite metric in round {self.round_index}")


@dataclass
class RunConfig:
    """Everything one experiment needs beyond the scenario and the data."""

    strategy: str = "em_pfl"
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    kappa: float = 1.0
    eval_batch: int = 64
    pi_fixed: float = 0.5
    lambda_prox: float = 15.0
    inner_steps: int = 5
    fedper_shared: tuple[str, ...] = ("comm", "sens", "fusion")
    hidden: int = 256
    pi_eval_cap: int = 1024
    seed: int = 0
    client_threads: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs, and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.pi_fixed <= 1.0:
            raise ValueError("pi_fixed must lie in [0, 1]")
        if self.lambda_prox < 0:
            raise ValueError("lambda_prox must be >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        unknown = set(self.fedper_shared) - set(layer_dims(NetConfig(1, 1, 1)))
        if unknown:
            raise ValueError(f"unknown fedper layers: {sorted(unknown)}")
        if self.client_threads < 1:
            raise ValueError("client_threads must be >= 1")

    @property
    def em(self) -> EmConfig:
        return EmConfig(kappa=self.kappa, eval_batch=self.eval_batch)


def _peer_batch(pools: dict[int, np.ndarray], idx: np.ndarray) -> dict[int, np.ndarray]:
    """Pair own sample indices with peer beamformers (index modulo pool size)."""
    return {i: pool[idx % pool.shape[0]] for i, pool in pools.items()}


def compute_pi(
    client: ClientState,
    global_params: ModelParams,
    em: EmConfig,
    rng: RngStream,
    peer_pools: dict[int, np.ndarray],
    eval_cap: int = 1024,
) -> float:
    """EM aggregation weight: how much of the global model this BS should take.

    Scores both models on re-shuffled mini-batches of a fixed evaluation
    slice (never the training stream) and averages the per-batch posteriors.
    """
    if client.data.n_samples < em.eval_batch:
        raise ValueError(
            f"client dataset has {client.data.n_samples} samples; need at least eval_batch={em.eval_batch}"
        )
    subset = client.data.eval_indices[:eval_cap]
    perm = rng.generator().permutation(subset.size)
    shuffled = subset[perm]
    lambdas = []
    for start in range(0, shuffled.size, em.eval_batch):
        idx = shuffled[start : start + em.eval_batch]
        peers = _peer_batch(peer_pools, idx)
        loss_g, _, _, _ = client.ctx.evaluate(global_params, idx, peers, want_grad=False)
        loss_l, _, _, _ = client.ctx.evaluate(client.params, idx, peers, want_grad=False)
        lambdas.append(e_step(loss_g, loss_l, em))
    return m_step(lambdas)


def local_train(
    client: ClientState,
    epochs: int,
    batch_size: int,
    peer_pools: dict[int, np.ndarray],
    rng: RngStream,
    prox_ref: ModelParams | None = None,
    lambda_prox: float = 0.0,
    inner_steps: int = 1,
) -> ClientState:
    """Mini-batch Adam epochs over the training stream; mutates the client.

    With ``prox_ref`` set, every gradient gains lambda_prox * (params - ref)
    and each batch is revisited ``inner_steps`` times (proximal local
    training); otherwise one step per batch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n_train = client.data.n_train
    for epoch in range(epochs):
        perm = rng.child(epoch).generator().permutation(n_train)
        for start in range(0, n_train, batch_size):
            idx = perm[start : start + batch_size]
            peers = _peer_batch(peer_pools, idx)
            for _ in range(inner_steps):
                _, grad, _, _ = client.ctx.evaluate(client.params, idx, peers)
                if prox_ref is not None and lambda_prox != 0.0:
                    grad = grad + lambda_prox * (client.params.data - prox_ref.data)
                client.params, client.adam = adam_step(client.params, grad, client.adam)
    return client


class FederatedSimulation:
    """Drives one experiment: clients, server state, metrics, checkpoints."""

    def __init__(self, scn: Scenario, datasets: list[BsDataset], run: RunConfig):
        if len(datasets) != scn.n_cells:
            raise ValueError("one dataset per cell required")
        self.scn = scn
        self.run = run
        self.net = NetConfig(n_t=scn.n_t, k_max=scn.k_max, hidden=run.hidden)
        self.master = RngStream(run.seed)
        self.global_params = init_params(self.net, self.master.child(_DOMAIN_INIT))
        self.clients = []
        for m, ds in enumerate(datasets):
            ctx = LossContext(
                self.net,
                scn,
                m,
                h=ds.comm_direct,
                h_cross=ds.comm_cross,
                theta=ds.target_theta,
                beta=ds.target_beta,
                radar_cross=ds.radar_cross,
            )
            self.clients.append(
                ClientState(
                    m=m,
                    params=self.global_params.copy(),
                    adam=AdamState.fresh(param_count(self.net), lr=run.lr),
                    rho=scn.rho_per_cell[m],
                    data=ds,
                    ctx=ctx,
                )
            )
        self.round_index = 0
        self.history: list[RoundMetrics] = []
        self._shared_mask = self._build_shared_mask(run.fedper_shared)

    def _build_shared_mask(self, shared_layers: tuple[str, ...]) -> np.ndarray:
        mask = np.zeros(param_count(self.net), dtype=bool)
        offset = 0
        for name, (fi, fo) in layer_dims(self.net).items():
            size = fi * fo + fo
            if name in shared_layers:
                mask[offset : offset + size] = True
            offset += size
        return mask

    def _eval_pools(self, params_by_client: list[ModelParams]) -> dict[int, np.ndarray]:
        """Each BS's beamformers on its evaluation slice (the published pool)."""
        pools = {}
        for client, params in zip(self.clients, params_by_client):
            idx = client.data.eval_indices
            pools[client.m] = forward_batch(
                params, self.net, client.ctx.xc[idx], client.ctx.xs[idx], client.k_m, self.scn.p_t
            )
        return pools

    def _pools_excluding(self, pools: dict[int, np.ndarray], m: int) -> dict[int, np.ndarray]:
        return {i: p for i, p in pools.items() if i != m}

    def _client_round(self, client: ClientState, t: int, pools: dict[int, np.ndarray]) -> None:
        """Steps 2-4 for one client; independent of every other client."""
        run = self.run
        peers = self._pools_excluding(pools, client.m)
        strategy = run.strategy
        if strategy == "em_pfl":
            pi = compute_pi(
                client,
                self.global_params,
                run.em,
                rng=self.master.child(_DOMAIN_PI).child(t).child(client.m),
                peer_pools=peers,
                eval_cap=run.pi_eval_cap,
            )
            client.params = mix_models(client.params, self.global_params, pi)
        elif strategy == "fixed_pfl":
            pi = run.pi_fixed
            client.params = mix_models(client.params, self.global_params, pi)
        elif strategy == "fedavg":
            pi = 1.0
            client.params = self.global_params.copy()
        elif strategy == "fedper":
            pi = 1.0
            merged = client.params.copy()
            merged.data[self._shared_mask] = self.global_params.data[self._shared_mask]
            client.params = merged
        elif strategy == "local_only":
            pi = 0.0
        elif strategy == "pfedme":
            pi = 0.0  # personalization via the proximal pull, not mixing
        else:  # pragma: no cover - guarded by RunConfig
            raise ValueError(strategy)
        client.pi = pi

        train_rng = self.master.child(_DOMAIN_TRAIN).child(t).child(client.m)
        if strategy == "pfedme":
            local_train(
                client,
                run.local_epochs,
                run.batch_size,
                peers,
                train_rng,
                prox_ref=self.global_params,
                lambda_prox=run.lambda_prox,
                inner_steps=run.inner_steps,
            )
        else:
            local_train(client, run.local_epochs, run.batch_size, peers, train_rng)

    def run_round(self) -> RoundMetrics:
        """One full communication round; returns the recorded metrics."""
        t = self.round_index
        started = time.perf_counter()
        pools = self._eval_pools([c.params for c in self.clients])

        if self.run.client_threads > 1:
            with ThreadPoolExecutor(max_workers=self.run.client_threads) as pool:
                list(pool.map(lambda c: self._client_round(c, t, pools), self.clients))
        else:
            for client in self.clients:
                self._client_round(client, t, pools)

        new_global = fedavg_aggregate([c.params for c in self.clients], [c.data.n_train for c in self.clients])
        if self.run.strategy == "fedper":
            merged = self.global_params.copy()
            merged.data[self._shared_mask] = new_global.data[self._shared_mask]
            new_global = merged
        self.global_params = new_global

        metrics = self._evaluate_round(t)
        metrics.duration_sec = time.perf_counter() - started
        metrics.check_finite()
        self.history.append(metrics)
        self.round_index = t + 1
        return metrics

    def _deployed_params(self, client: ClientState) -> ModelParams:
        """The model a BS actually runs after the round closes.

        Personalization strategies deploy the BS's own post-training model;
        traditional FL deploys the freshly aggregated global model, and FedPer
        deploys the aggregated shared layers on top of the local head.
        """
        if self.run.strategy == "fedavg":
            return self.global_params
        if self.run.strategy == "fedper":
            merged = client.params.copy()
            merged.data[self._shared_mask] = self.global_params.data[self._shared_mask]
            return merged
        return client.params

    def _evaluate_round(self, t: int) -> RoundMetrics:
        """Step 6: held-out utilities under each BS's deployed model."""
        deployed = [self._deployed_params(c) for c in self.clients]
        pools = self._eval_pools(deployed)
        pis, losses, comm, radar, util = [], [], [], [], []
        for client, params in zip(self.clients, deployed):
            idx = client.data.eval_indices
            peers = _peer_batch(self._pools_excluding(pools, client.m), idx)
            loss, _, r_c, r_s = client.ctx.evaluate(params, idx, peers, want_grad=False)
            pis.append(client.pi)
            losses.append(loss)
            comm.append(float(np.mean(r_c)))
            radar.append(float(np.mean(r_s)))
            util.append(-loss)
        return RoundMetrics(
            round_index=t,
            pi=pis,
            loss=losses,
            comm_rate=comm,
            radar_rate=radar,
            utility=util,
            system_utility=float(sum(util)),
        )

    def run_rounds(self, rounds: int, on_round=None) -> list[RoundMetrics]:
        out = []
        for _ in range(rounds):
            metrics = self.run_round()
            out.append(metrics)
            if on_round is not None:
                on_round(self, metrics)
        return out

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, run_dir) -> Path:
        """Write round_<t> with the post-round server and client state."""
        t = self.round_index - 1
        if t < 0:
            raise ValueError("no completed round to checkpoint")
        cdir = Path(run_dir) / f"round_{t}"
        cdir.mkdir(parents=True, exist_ok=True)
        save_params(cdir / "global.bin", self.global_params)
        for client in self.clients:
            save_params(cdir / f"bs{client.m}.bin", client.params)
            save_adam(cdir / f"bs{client.m}.opt.bin", client.adam)
        return cdir

    def restore_checkpoint(self, cdir) -> None:
        cdir = Path(cdir)
        t = int(cdir.name.removeprefix("round_"))
        self.global_params = load_params(cdir / "global.bin")
        for client in self.clients:
            client.params = load_params(cdir / f"bs{client.m}.bin")
            client.adam = load_adam(cdir / f"bs{client.m}.opt.bin")
        self.round_index = t + 1

    @staticmethod
    def latest_checkpoint(run_dir) -> Path | None:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            return None
        rounds = []
        for child in run_dir.iterdir():
            if child.is_dir() and child.name.startswith("round_"):
                try:
                    rounds.append((int(child.name.removeprefix("round_")), child))
                except ValueError:
                    continue
        if not rounds:
            return None
        return max(rounds)[1]


# convenience constructors mirroring the strategy names


def strategy_fixed_pfl(scn: Scenario, datasets: list[BsDataset], run: RunConfig, pi_fixed: float = 0.5) -> FederatedSimulation:
    return FederatedSimulation(scn, datasets, dataclasses.replace(run, strategy="fixed_pfl", pi_fixed=pi_fixed))


def strategy_fedper(scn: Scenario, datasets: list[BsDataset], run: RunConfig, shared: tuple[str, ...]) -> FederatedSimulation:
    return FederatedSimulation(scn, datasets, dataclasses.replace(run, strategy="fedper", fedper_shared=shared))


def strategy_pfedme(
    scn: Scenario, datasets: list[BsDataset], run: RunConfig, lambda_prox: float = 15.0, inner_steps: int = 5
) -> FederatedSimulation:
    return FederatedSimulation(
        scn, datasets, dataclasses.replace(run, strategy="pfedme", lambda_prox=lambda_prox, inner_steps=inner_steps)
    )
