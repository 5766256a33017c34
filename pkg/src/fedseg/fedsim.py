"""Cross-silo federated training: local epochs, FedAvg, broadcast, round schedule."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datastore import ClientDataset, ConfigurationError
from .episodes import AugmentRanges, SuperpixelParams, make_episode
from .evaluation import DiceReport, one_shot_validate
from .losses import LossBreakdown, total_loss
from .protoseg import ProtoConfig, init_params
from .tensor import ModelParams, Tensor, sgd_step

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite loss or parameters during training."""


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    local_epochs: int = 1
    iteration_cap: int | None = 1000
    base_lr: float = 1e-3
    lr_decay: float = 0.96
    batch_size: int = 1
    global_seed: int = 0
    baseline_mode: bool = False
    workers: int = 1
    eval_classes: tuple[int, ...] = (1, 2, 3, 4)
    dice_weights: tuple[float, float] = (1.0, 1.0)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    superpixel: SuperpixelParams = field(default_factory=SuperpixelParams)
    augment: AugmentRanges = field(default_factory=AugmentRanges)

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigurationError("rounds and local_epochs must be >= 1")
        if self.iteration_cap is not None and self.iteration_cap < 1:
            raise ConfigurationError("iteration_cap must be >= 1 when set")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size = 1 is supported")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def lr(self, round_index: int) -> float:
        """Closed-form per-round schedule ``base_lr * decay**r``."""
        return self.base_lr * self.lr_decay ** round_index


@dataclass
class ClientRound:
    client_id: str
    slice_count: int
    iterations: int
    losses: LossBreakdown
    dice: dict[int, float | None] = field(default_factory=dict)
    evaluation: DiceReport | None = None


@dataclass
class RoundReport:
    round: int
    lr: float
    weights: list[float]
    clients: list[ClientRound]
    holdout: DiceReport | None = None

    def mean_dice(self, class_id: int) -> float | None:
        vals = [c.dice.get(class_id) for c in self.clients]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class FederationRun:
    reports: list[RoundReport]
    initial: list[DiceReport]
    params: ModelParams
    initial_holdout: DiceReport | None = None


def aggregation_weights(slice_counts, cap: int | None = None) -> list[float]:
    counts = [int(c) for c in slice_counts]
    if not counts:
        raise ConfigurationError("aggregation needs at least one client")
    if any(c <= 0 for c in counts):
        raise ConfigurationError(f"slice counts must be positive, got {counts}")
    eff = [min(c, cap) if cap is not None else c for c in counts]
    total = sum(eff)
    return [e / total for e in eff]


def fedavg(models: list[ModelParams], weights) -> ModelParams:
    """Weighted parameter average, summed in client-index order."""
    if not models or len(models) != len(weights):
        raise AggregationError(f"{len(models)} models but {len(weights)} weights")
    ref = models[0]
    for k, m in enumerate(models[1:], start=1):
        for i, name in enumerate(ref.names):
            if i >= len(m.names) or m.names[i] != name or m.tensors[i].shape != ref.tensors[i].shape:
                raise AggregationError(f"client {k} diverges from client 0 at tensor {name!r}")
        if len(m.names) != len(ref.names):
            raise AggregationError(f"client {k} has {len(m.names)} tensors, expected {len(ref.names)}")
    out = []
    for i, t in enumerate(ref.tensors):
        # float64 accumulation, one rounding back: N identical copies come back bit-exact
        acc = float(weights[0]) * models[0].tensors[i].data.astype(np.float64)
        for k in range(1, len(models)):
            acc = acc + float(weights[k]) * models[k].tensors[i].data.astype(np.float64)
        out.append(Tensor(acc.astype(t.data.dtype), requires_grad=True))
    return ModelParams(list(ref.names), out)


def episode_rng(global_seed: int, client_seed: int, round_index: int, epoch: int, iteration: int):
    return np.random.default_rng([global_seed, client_seed, round_index, epoch, iteration])


def iterations_per_epoch(slice_count: int, cap: int | None) -> int:
    return min(slice_count, cap) if cap is not None else slice_count


def _segments(client: ClientDataset, scan: int, z: int, sp: SuperpixelParams):
    key = (scan, z, sp)
    seg = client._segments.get(key)
    if seg is None:
        seg = client._segments[key] = sp.segment(client.training[scan].voxels[z])
    return seg


def local_train(client: ClientDataset, start: ModelParams, round_index: int,
                cfg: FedConfig) -> tuple[ModelParams, dict]:
    """E local epochs of one-episode SGD steps from the broadcast parameters."""
    slices = client.training_slices()
    if not slices:
        raise ConfigurationError(f"client {client.client_id} has no training slices")
    params = start.copy()
    lr = cfg.lr(round_index)
    n_iter = iterations_per_epoch(len(slices), cfg.iteration_cap)
    history = []
    for epoch in range(cfg.local_epochs):
        for it in range(n_iter):
            rng = episode_rng(cfg.global_seed, client.seed, round_index, epoch, it)
            scan, z = slices[int(rng.integers(len(slices)))]
            ep = make_episode(client.training[scan].voxels[z], rng, cfg.superpixel, cfg.augment,
                              segments=_segments(client, scan, z, cfg.superpixel),
                              meta={"client": client.client_id, "scan": scan, "slice": z})
            losses = total_loss(params, ep, cfg.proto, baseline=cfg.baseline_mode,
                                dice_weights=cfg.dice_weights)
            if not math.isfinite(losses.total):
                raise NumericError(f"non-finite loss at {client.client_id} round {round_index} iteration {it}")
            params.zero_grad()
            losses.objective.backward()
            sgd_step(params, lr)
            losses.objective = None
            history.append(losses)
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"parameter {name} became non-finite at {client.client_id}")
    stats = {"iterations": n_iter * cfg.local_epochs, "iterations_per_epoch": n_iter,
             "slice_count": len(slices), "losses": LossBreakdown.mean(history), "lr": lr}
    return params, stats


def _train_task(args):
    client, params, round_index, cfg = args
    return local_train(client, params, round_index, cfg)


def evaluate_clients(params: ModelParams, clients: list[ClientDataset], cfg: FedConfig) -> list[DiceReport]:
    return [one_shot_validate(params, c, cfg.eval_classes, cfg.proto) for c in clients]


def run_federation(cfg: FedConfig, clients: list[ClientDataset], init: ModelParams | None = None,
                   on_round: Callable[[RoundReport], None] | None = None,
                   holdout: ClientDataset | None = None,
                   on_initial: Callable[[list[DiceReport], DiceReport | None], None] | None = None,
                   ) -> FederationRun:
    """Broadcast -> local training on every client -> FedAvg -> evaluate, per round.

    ``holdout`` is an unseen client that never trains; the server evaluates
    the global model on it after every round.
    """
    if not clients:
        raise ConfigurationError("federation needs at least one client")
    params = init.copy() if init is not None else init_params(cfg.proto.encoder, cfg.global_seed)
    counts = [c.slice_count for c in clients]
    weights = aggregation_weights(counts, cfg.iteration_cap)
    initial = evaluate_clients(params, clients, cfg)
    initial_holdout = evaluate_clients(params, [holdout], cfg)[0] if holdout is not None else None
    if on_initial is not None:
        on_initial(initial, initial_holdout)
    reports = []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(cfg.rounds):
            tasks = [(c, params, r, cfg) for c in clients]
            results = list(pool.map(_train_task, tasks)) if pool else [_train_task(t) for t in tasks]
            params = fedavg([p for p, _ in results], weights)
            evals = evaluate_clients(params, clients, cfg)
            report = RoundReport(r, cfg.lr(r), list(weights), [
                ClientRound(c.client_id, st["slice_count"], st["iterations"], st["losses"],
                            {cid: ev.class_mean(cid) for cid in cfg.eval_classes}, ev)
                for c, (_, st), ev in zip(clients, results, evals)
            ])
            if holdout is not None:
                report.holdout = evaluate_clients(params, [holdout], cfg)[0]
            log.info("round %d lr=%.6g mean dice=%s", r, report.lr,
                     {cid: report.mean_dice(cid) for cid in cfg.eval_classes})
            reports.append(report)
            if on_round is not None:
                on_round(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationRun(reports, initial, params, initial_holdout)


def train_centralized(client: ClientDataset, cfg: FedConfig, init: ModelParams | None = None) -> ModelParams:
    """Sequential local training without any aggregation step (single-silo reference)."""
    params = init.copy() if init is not None else init_params(cfg.proto.encoder, cfg.global_seed)
    for r in range(cfg.rounds):
        params, _ = local_train(client, params, r, cfg)
    return params
