"""FedAvg-style round loop with pluggable local-training strategies.

Each round: sample participants, broadcast the global model, train every
participant locally, aggregate by sample count, evaluate, and record the
classifier's singular values. Every client derives its own RNG stream from
``(seed, round, client_id)`` so results do not depend on worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import objectives as obj
from .data import Dataset, PartitionPlan, batches
from .numerics import RngStream, svd_values

STRATEGIES = ("fedavg", "fedprox", "freeze", "feduv")

# Labels for the top-level RNG streams.
_INIT, _FREEZE, _PARTICIPANTS, _CLIENT = 0, 1, 2, 3


@dataclass(frozen=True)
class Strategy:
    kind: str = "fedavg"
    mu_prox: float = 0.01
    weights: obj.LossWeights | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.mu_prox < 0:
            raise ValueError("mu_prox must be >= 0")
        if self.kind == "feduv" and self.weights is None:
            raise ValueError("feduv needs loss weights")

    @property
    def name(self) -> str:
        return self.kind


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 30
    local_epochs: int = 10
    num_clients: int = 10
    participation: float = 1.0
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    strategy: Strategy = field(default_factory=Strategy)
    # Record L_V / L_U for strategies that do not train on them.
    track_regularizers: bool = True
    sigma: float | None = None

    def __post_init__(self):
        if min(self.rounds, self.num_clients, self.batch_size) < 1 or self.local_epochs < 0:
            raise ValueError("rounds, num_clients, batch_size must be >= 1 and local_epochs >= 0")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def participants_per_round(self) -> int:
        return participant_count(self.num_clients, self.participation)


@dataclass(frozen=True)
class ClientState:
    client_id: int
    indices: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.indices.size)


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    client_losses: dict[int, obj.LossBreakdown]
    test_accuracy: float
    singular_values: np.ndarray
    wall_seconds: float

    @property
    def mean_loss(self) -> obj.LossBreakdown:
        return obj.LossBreakdown.mean([self.client_losses[k] for k in self.participants])


@dataclass
class RunResult:
    reports: list[RoundReport]
    params: mdl.ModelParams


def participant_count(num_clients: int, rho: float) -> int:
    # Rounding first keeps e.g. 0.7 * 10 from ceiling to 8.
    return max(1, math.ceil(round(rho * num_clients, 9)))


def sample_participants(num_clients: int, rho: float, rng: RngStream) -> list[int]:
    m = participant_count(num_clients, rho)
    if m >= num_clients:
        return list(range(num_clients))
    chosen = rng.generator().choice(num_clients, size=m, replace=False)
    return sorted(int(k) for k in chosen)


def local_train(
    global_params: mdl.ModelParams,
    client: ClientState,
    ds: Dataset,
    cfg: RoundConfig,
    rng: RngStream,
) -> tuple[mdl.ModelParams, obj.LossBreakdown]:
    strat = cfg.strategy
    params = global_params.copy()
    if strat.kind == "freeze":
        params.layers[-1].frozen = True
    state = mdl.SgdState.zeros_like(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    c = obj.variance_threshold(ds.num_classes).c
    history = []
    for epoch in range(cfg.local_epochs):
        for idx in batches(client.indices, cfg.batch_size, rng.child(epoch)):
            x, y = ds.features[idx], ds.labels[idx]
            cache = mdl.forward(params, x)
            grad_reps = None
            if strat.kind == "feduv":
                br, grad_logits, grad_reps = obj.feduv_loss(cache, y, strat.weights, c, cfg.sigma)
            else:
                ce, grad_logits = obj.cross_entropy(cache.logits, y)
                br = obj.LossBreakdown(ce=ce, total=ce)
                if cfg.track_regularizers:
                    br.l_v = obj.variance_loss(cache.logits, c)[0]
                    br.l_u = obj.uniformity_loss(cache.reps, cfg.sigma)[0]
            grads = mdl.backward(params, cache, grad_logits, grad_reps)
            if strat.kind == "fedprox":
                prox, prox_grads = obj.fedprox_penalty(params, global_params, strat.mu_prox)
                grads = [(gw + pw, gb + pb) for (gw, gb), (pw, pb) in zip(grads, prox_grads)]
                br.prox = prox
                br.total = br.total + prox
            params = mdl.sgd_step(params, grads, state)
            history.append(br)
    return params, obj.LossBreakdown.mean(history)


def aggregate(updates: list[tuple[mdl.ModelParams, int]]) -> mdl.ModelParams:
    """Sample-count weighted mean, accumulated as offsets from the first update.

    Anchoring on the first model makes identical inputs and single updates
    come back bit-exactly.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    base = updates[0][0]
    for p, n in updates:
        base.check_congruent(p)
        if n <= 0:
            raise ValueError("sample counts must be positive")
    total = float(sum(n for _, n in updates))
    layers = []
    for i, layer in enumerate(base.layers):
        dw = np.zeros_like(layer.weights)
        db = np.zeros_like(layer.bias)
        for p, n in updates[1:]:
            w = n / total
            dw += w * (p.layers[i].weights - layer.weights)
            db += w * (p.layers[i].bias - layer.bias)
        layers.append(mdl.Layer(layer.weights + dw, layer.bias + db, layer.frozen))
    return mdl.ModelParams(base.config, layers)


def predict(params: mdl.ModelParams, x) -> np.ndarray:
    # argmax returns the first maximum, i.e. the smallest class index on ties.
    return np.argmax(mdl.forward(params, x).logits, axis=1)


def evaluate(params: mdl.ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(params, test.features) == test.labels))


# Worker-side copy of the training set, installed once per process.
_WORKER_DS: Dataset | None = None


def _install_dataset(ds: Dataset) -> None:
    global _WORKER_DS
    _WORKER_DS = ds


def _train_job(args):
    global_params, client, cfg, rng = args
    return local_train(global_params, client, _WORKER_DS, cfg, rng)


def run_experiment(
    cfg: RoundConfig,
    ds_train: Dataset,
    ds_test: Dataset,
    plan: PartitionPlan,
    model_config: mdl.MlpConfig | None = None,
    workers: int = 1,
    progress=None,
) -> RunResult:
    if plan.num_clients != cfg.num_clients:
        raise ValueError(f"plan has {plan.num_clients} clients, config expects {cfg.num_clients}")
    if plan.n_samples != len(ds_train):
        raise ValueError("partition plan does not match the training set size")
    if model_config is None:
        model_config = mdl.MlpConfig(input_dim=ds_train.input_dim, num_classes=ds_train.num_classes)
    root = RngStream(cfg.seed)
    params = mdl.init_params(model_config, root.child(_INIT))
    if cfg.strategy.kind == "freeze":
        params = mdl.freeze_classifier(params, root.child(_FREEZE))
    clients = [ClientState(k, idx) for k, idx in enumerate(plan.assignments)]

    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_install_dataset, initargs=(ds_train,))
    reports = []
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            ids = sample_participants(cfg.num_clients, cfg.participation, root.child(_PARTICIPANTS, r))
            jobs = [(params, clients[k], cfg, root.child(_CLIENT, r, k)) for k in ids]
            if pool is None:
                results = [local_train(p, cl, ds_train, c, s) for p, cl, c, s in jobs]
            else:
                results = list(pool.map(_train_job, jobs))
            # ids are ascending, so the summation order is fixed.
            params = aggregate([(res[0], clients[k].n_samples) for k, res in zip(ids, results)])
            acc = evaluate(params, ds_test)
            sv = svd_values(params.classifier.weights)
            report = RoundReport(
                round=r + 1,
                participants=ids,
                client_losses={k: res[1] for k, res in zip(ids, results)},
                test_accuracy=acc,
                singular_values=sv,
                wall_seconds=time.perf_counter() - t0,
            )
            reports.append(report)
            if progress is not None:
                progress(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(reports, params)
