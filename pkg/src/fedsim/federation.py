"""Round engine: client selection, straggler clock, deadlines, and strategies.

Simulated time is measured in seconds of client compute: a client with
capability ``c`` trains one sample in ``1/c`` seconds, so a full round costs
``E*m/c``. The engine is deterministic given the dataset, profiles, config and
seeds; all strategies share the same selection and local-training streams so
paired comparisons are exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import coreset as cs
from . import models
from .data import FederatedDataset
from .rng import stream

FEDAVG = "fedavg"
FEDAVG_DS = "fedavg_ds"
FEDPROX = "fedprox"
FEDCORE = "fedcore"
STRATEGIES = (FEDAVG, FEDAVG_DS, FEDPROX, FEDCORE)

METRICS_COLUMNS = [
    "round", "strategy", "train_loss", "test_loss", "test_acc",
    "mean_client_time", "max_client_time", "tau", "dropped", "mean_epsilon",
]

TIME_SLACK = 1e-9


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    m: int
    c: float  # capability: samples per simulated second
    p: float  # selection probability, proportional to m


@dataclass(frozen=True)
class LrSpec:
    """Fixed learning rate, or the strong-convexity schedule 2/mu / (t + beta)."""

    kind: str  # "fixed" | "theorem"
    value: float = 0.0
    mu: float = 0.0
    smooth: float = 0.0

    def at(self, t: int, e_epochs: int) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "theorem":
            from .analysis import lr_schedule

            return lr_schedule(t, self.mu, self.smooth, e_epochs)
        raise ValueError(f"unknown lr kind {self.kind!r}")


@dataclass(frozen=True)
class RoundConfig:
    strategy: str
    e_epochs: int
    rounds: int
    k_clients: int
    tau: float
    lr: LrSpec
    batch_size: int  # <= 0 means full-batch epochs
    mu_prox: float = 0.0
    distance_kind: Optional[str] = None  # default: model-dependent proxy
    gamma: float = 0.0  # coreset-build surcharge, fraction of one full epoch
    pool_cap: int = 1024
    probes: bool = True
    trace_params: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.e_epochs < 1 or self.rounds < 0 or self.k_clients < 1:
            raise ValueError("invalid round shape")
        if not (self.tau > 0):
            raise ValueError("tau must be positive (or infinite)")
        if self.distance_kind is not None and self.distance_kind not in cs.DIST_KINDS:
            raise ValueError(f"unknown distance kind {self.distance_kind!r}")


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    test_loss: float
    test_acc: float
    client_ids: list[int]
    client_times: list[float]
    client_dropped: list[bool]
    epochs_done: Optional[list[int]] = None  # fedprox
    epsilons: dict[int, float] = field(default_factory=dict)  # fedcore
    dropped: int = 0  # fedavg_ds

    def _active_times(self) -> list[float]:
        return [t for t, d in zip(self.client_times, self.client_dropped) if not d]

    @property
    def mean_client_time(self) -> float:
        active = self._active_times()
        return sum(active) / len(active) if active else 0.0

    @property
    def max_client_time(self) -> float:
        active = self._active_times()
        return max(active) if active else 0.0


@dataclass(frozen=True)
class ProbeRecord:
    round: int
    client_id: int
    t: int  # global epoch index r*E + k
    grad_err: float  # ||g - G|| at the epoch-start parameters
    grad_bound: float  # max(||g||, ||G||)


@dataclass
class RunLog:
    config: RoundConfig
    model_spec: models.ModelSpec
    seeds: dict
    provenance: dict
    records: list[RoundRecord]
    final_params: models.ParamVector
    param_trace: Optional[list[np.ndarray]] = None
    probes: list[ProbeRecord] = field(default_factory=list)

    def mean_normalized_time(self) -> float:
        if not self.records or math.isinf(self.config.tau):
            return 0.0
        return sum(r.max_client_time for r in self.records) / (
            len(self.records) * self.config.tau
        )


def capabilities(n_clients: int, seed: int) -> np.ndarray:
    """Per-client capabilities ~ Normal(1, 0.25), truncated below at 0.1."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    draws = stream(seed, "capabilities").normal(1.0, 0.5, size=n_clients)
    return np.maximum(draws, 0.1)


def build_profiles(dataset: FederatedDataset, caps: np.ndarray) -> list[ClientProfile]:
    sizes = np.array([c.m for c in dataset.clients], dtype=np.float64)
    p = sizes / sizes.sum()
    return [
        ClientProfile(cd.client_id, cd.m, float(caps[i]), float(p[i]))
        for i, cd in enumerate(dataset.clients)
    ]


def full_work_time(profile: ClientProfile, e_epochs: int) -> float:
    return e_epochs * profile.m / profile.c


def deadline_for_stragglers(
    profiles: list[ClientProfile], e_epochs: int, s_percent: float
) -> float:
    """Deadline at the (100-s)th nearest-rank percentile of full-set round times.

    The slowest ~s% of clients cannot finish full-set training within the
    returned deadline.
    """
    if not 0 <= s_percent < 100:
        raise ValueError("s_percent must be in [0, 100)")
    times = sorted(full_work_time(p, e_epochs) for p in profiles)
    rank = math.ceil((100.0 - s_percent) / 100.0 * len(times))
    return times[rank - 1]


def select_clients(
    profiles: list[ClientProfile], k_clients: int, rng: np.random.Generator
) -> np.ndarray:
    """K iid draws (with replacement) from the size-proportional distribution."""
    ids = np.array([p.client_id for p in profiles], dtype=np.int64)
    probs = np.array([p.p for p in profiles], dtype=np.float64)
    probs = probs / probs.sum()
    return rng.choice(ids, size=k_clients, replace=True, p=probs)


def _prox_epochs(m: int, c: float, e_epochs: int, tau: float) -> int:
    if math.isinf(tau):
        return e_epochs
    return min(e_epochs, max(1, int(math.floor(c * tau / m))))


def fallback_size(m: int, c: float, e_epochs: int, tau: float) -> int:
    """Coreset size when even one full-set epoch does not fit the deadline."""
    return max(1, min(int(math.floor(c * tau / e_epochs)), m))


def client_round_time(
    strategy: str,
    m: int,
    c: float,
    e_epochs: int,
    tau: float,
    b: Optional[int] = None,
    gamma: float = 0.0,
) -> float:
    """Simulated seconds one selected client spends in a round.

    Deadline-aware strategies never report more than tau: the round ends at
    the deadline even when the minimum quantum of work (one epoch for fedprox,
    one sample per epoch in the fedcore fallback) nominally exceeds it.
    """
    full = e_epochs * m / c
    if strategy == FEDAVG:
        return full
    if strategy == FEDAVG_DS:
        return min(full, tau)
    if strategy == FEDPROX:
        return min(_prox_epochs(m, c, e_epochs, tau) * m / c, tau)
    if strategy == FEDCORE:
        if e_epochs == 1 or e_epochs * m <= c * tau:
            return min(full, tau)
        if b is None:
            raise ValueError("fedcore coreset path requires a budget")
        if b >= 1:
            return (m + (e_epochs - 1) * b) / c + gamma * m / c
        return min(e_epochs * fallback_size(m, c, e_epochs, tau) / c, tau)
    raise ValueError(f"unknown strategy {strategy!r}")


def _probe(
    sink: Optional[list], r: int, cid: int, t: int,
    params: models.ParamVector, x, y, view: Optional[models.WeightedView],
) -> None:
    if sink is None:
        return
    g_full = models.mean_grad(params, x, y)
    if view is None:
        err, bound = 0.0, float(np.linalg.norm(g_full))
    else:
        g_core = models.mean_grad(params, x[view.indices], y[view.indices], view.weights)
        err = float(np.linalg.norm(g_core - g_full))
        bound = float(max(np.linalg.norm(g_core), np.linalg.norm(g_full)))
    sink.append(ProbeRecord(r, cid, t, err, bound))


def _local_epochs(
    params: models.ParamVector,
    client,
    cfg: RoundConfig,
    run_seed: int,
    r: int,
    n_epochs: int,
    view: Optional[models.WeightedView] = None,
    prox: Optional[tuple[float, models.ParamVector]] = None,
    first_epoch: int = 0,
    probe_sink: Optional[list] = None,
) -> models.ParamVector:
    w = params
    for k in range(first_epoch, first_epoch + n_epochs):
        t = r * cfg.e_epochs + k
        _probe(probe_sink, r, client.client_id, t, w, client.x, client.y, view)
        w = models.sgd_epoch(
            w, client.x, client.y, view,
            cfg.lr.at(t, cfg.e_epochs), cfg.batch_size,
            stream(run_seed, "local", r, client.client_id, k), prox,
        )
    return w


class CoresetBuilder:
    """Builds per-client coresets, caching parameter-independent ones.

    Euclid-proxy coresets never read the parameters, so they are built once
    per (client, size) and reused across rounds (and across runs that share a
    dataset). Candidate pools for oversized clients are drawn from a stream
    keyed only by client shape, keeping the cache run-independent.
    """

    def __init__(self, pool_cap: int):
        self.pool_cap = pool_cap
        self.cache: dict = {}

    def _inputs(self, client, params: models.ParamVector, kind: str) -> np.ndarray:
        if kind == cs.EUCLID_PROXY:
            return client.x
        if kind == cs.LASTLAYER_PROXY:
            return models.last_layer_grads(params, client.x, client.y)
        return models.batch_grads(params, client.x, client.y)

    @staticmethod
    def _distances(points: np.ndarray, kind: str) -> cs.DistMatrix:
        if kind == cs.EXACT:
            return cs.dist_exact(points)
        if kind == cs.EUCLID_PROXY:
            return cs.dist_euclid_proxy(points)
        return cs.dist_lastlayer_proxy(points)

    def build(self, client, params: models.ParamVector, kind: str, k: int) -> cs.Coreset:
        k = min(k, self.pool_cap)
        cache_key = (client.client_id, kind, k)
        if kind == cs.EUCLID_PROXY and cache_key in self.cache:
            return self.cache[cache_key]
        points = self._inputs(client, params, kind)
        m = client.m
        if m <= self.pool_cap:
            built = cs.kmedoids(self._distances(points, kind), min(k, m))
        else:
            # Candidate pool capped for memory/build time; weights still
            # cover all m samples via nearest-medoid assignment.
            pool = np.sort(
                stream(0, "pool", client.client_id, m, self.pool_cap).choice(
                    m, size=self.pool_cap, replace=False
                )
            )
            inner = cs.kmedoids(self._distances(points[pool], kind), k)
            medoids = pool[inner.medoids]
            from scipy.spatial.distance import cdist

            cols = cdist(points, points[medoids])
            weights, pos = cs.assign_to_medoids(cols)
            built = cs.Coreset(
                medoids.astype(np.int64), weights, pos,
                float(cols[np.arange(m), pos].sum()), kind,
            )
        if kind == cs.EUCLID_PROXY:
            self.cache[cache_key] = built
        return built


def _train_fedcore(
    client, profile: ClientProfile, params: models.ParamVector,
    cfg: RoundConfig, kind: str, run_seed: int, r: int,
    builder: CoresetBuilder, probe_sink: Optional[list],
) -> tuple[models.ParamVector, float, Optional[float]]:
    m, c, e, tau = profile.m, profile.c, cfg.e_epochs, cfg.tau
    if e == 1 or e * m <= c * tau:
        w = _local_epochs(params, client, cfg, run_seed, r, e, probe_sink=probe_sink)
        return w, client_round_time(FEDCORE, m, c, e, tau), None

    tau_eff = tau - cfg.gamma * m / c
    b = cs.budget(m, c, tau_eff, e) if tau_eff > 0 else 0
    if b >= 1:
        built = builder.build(client, params, kind, b)
        eps = _measure_epsilon(client, params, built, cfg)
        w = _local_epochs(params, client, cfg, run_seed, r, 1, probe_sink=probe_sink)
        w = _local_epochs(
            w, client, cfg, run_seed, r, e - 1,
            view=built.view(), first_epoch=1, probe_sink=probe_sink,
        )
        k_used = len(built.medoids)  # may be below b when the pool cap binds
        return w, client_round_time(FEDCORE, m, c, e, tau, b=k_used, gamma=cfg.gamma), eps
    # Extreme straggler: even one full epoch misses the deadline. Train all
    # epochs on a parameter-independent proxy coreset sized to fit.
    b_fb = fallback_size(m, c, e, tau)
    built = builder.build(client, params, cs.EUCLID_PROXY, b_fb)
    eps = _measure_epsilon(client, params, built, cfg)
    w = _local_epochs(
        params, client, cfg, run_seed, r, e, view=built.view(), probe_sink=probe_sink
    )
    return w, client_round_time(FEDCORE, m, c, e, tau, b=0), eps


def _measure_epsilon(
    client, params: models.ParamVector, built: cs.Coreset, cfg: RoundConfig
) -> Optional[float]:
    if not cfg.probes:
        return None
    total = models.grad_sum(params, client.x, client.y)
    core = models.grad_sum(
        params, client.x[built.medoids], client.y[built.medoids],
        built.weights.astype(np.float64),
    )
    return float(np.linalg.norm(total - core)) / client.m


def run_round(
    params: models.ParamVector,
    round_index: int,
    dataset: FederatedDataset,
    profiles: list[ClientProfile],
    config: RoundConfig,
    run_seed: int,
    builder: Optional[CoresetBuilder] = None,
    probe_sink: Optional[list] = None,
    pooled: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[models.ParamVector, RoundRecord]:
    """Execute one federated round and evaluate the aggregated model."""
    cfg = config
    r = round_index
    if builder is None:
        builder = CoresetBuilder(cfg.pool_cap)
    kind = cfg.distance_kind or (
        cs.EUCLID_PROXY if params.spec.kind == models.LOGISTIC else cs.LASTLAYER_PROXY
    )
    by_id = {c.client_id: c for c in dataset.clients}
    prof_by_id = {p.client_id: p for p in profiles}
    selected = select_clients(profiles, cfg.k_clients, stream(run_seed, "select", r))

    results: dict[int, tuple[models.ParamVector, float, bool, int, Optional[float]]] = {}
    for cid in selected:
        cid = int(cid)
        if cid in results:
            continue
        client, prof = by_id[cid], prof_by_id[cid]
        eps = None
        epochs = cfg.e_epochs
        dropped = False
        if cfg.strategy == FEDAVG:
            w = _local_epochs(params, client, cfg, run_seed, r, epochs, probe_sink=probe_sink)
            t = client_round_time(FEDAVG, prof.m, prof.c, epochs, cfg.tau)
        elif cfg.strategy == FEDAVG_DS:
            t = client_round_time(FEDAVG_DS, prof.m, prof.c, epochs, cfg.tau)
            if full_work_time(prof, epochs) > cfg.tau:
                w, dropped = params, True
            else:
                w = _local_epochs(params, client, cfg, run_seed, r, epochs, probe_sink=probe_sink)
        elif cfg.strategy == FEDPROX:
            epochs = _prox_epochs(prof.m, prof.c, cfg.e_epochs, cfg.tau)
            w = _local_epochs(
                params, client, cfg, run_seed, r, epochs,
                prox=(cfg.mu_prox, params), probe_sink=probe_sink,
            )
            t = client_round_time(FEDPROX, prof.m, prof.c, cfg.e_epochs, cfg.tau)
        else:  # fedcore
            w, t, eps = _train_fedcore(
                client, prof, params, cfg, kind, run_seed, r, builder, probe_sink
            )
        results[cid] = (w, t, dropped, epochs, eps)

    times, dropped_flags, epochs_done, epsilons = [], [], [], {}
    agg = np.zeros_like(params.values)
    n_active = 0
    for cid in selected:
        w, t, dropped, epochs, eps = results[int(cid)]
        times.append(t)
        dropped_flags.append(dropped)
        epochs_done.append(epochs)
        if eps is not None:
            epsilons[int(cid)] = eps
        if not dropped:
            agg += w.values
            n_active += 1
        if cfg.strategy != FEDAVG and not math.isinf(cfg.tau) and t > cfg.tau + TIME_SLACK:
            raise RuntimeError(
                f"deadline violated: strategy {cfg.strategy}, client {cid}, "
                f"time {t} > tau {cfg.tau}"
            )

    if n_active > 0:
        new_params = models.ParamVector(agg / n_active, params.spec)
    else:
        new_params = params  # every selected client was dropped

    if pooled is None:
        pooled = dataset.pooled_train()
    train_loss, _ = models.evaluate(new_params, *pooled)
    if len(dataset.test_y):
        test_loss, test_acc = models.evaluate(new_params, dataset.test_x, dataset.test_y)
    else:
        test_loss, test_acc = math.nan, math.nan

    record = RoundRecord(
        round=r,
        train_loss=train_loss,
        test_loss=test_loss,
        test_acc=test_acc,
        client_ids=[int(c) for c in selected],
        client_times=times,
        client_dropped=dropped_flags,
        epochs_done=epochs_done if cfg.strategy == FEDPROX else None,
        epsilons=epsilons,
        dropped=sum(dropped_flags),
    )
    return new_params, record


def run(
    dataset: FederatedDataset,
    profiles: list[ClientProfile],
    model_spec: models.ModelSpec,
    config: RoundConfig,
    seeds: dict,
    builder: Optional[CoresetBuilder] = None,
) -> RunLog:
    """Run R rounds from a fresh initialization; fully seeded and deterministic.

    Repeated runs over the same dataset may share a ``builder`` to reuse
    parameter-independent coresets.
    """
    run_seed = seeds["run"]
    params = models.init_params(model_spec, run_seed)
    pooled = dataset.pooled_train()
    if builder is None:
        builder = CoresetBuilder(config.pool_cap)
    probe_sink: Optional[list] = [] if config.probes else None
    trace = [params.values.copy()] if config.trace_params else None

    records: list[RoundRecord] = []
    for r in range(config.rounds):
        params, record = run_round(
            params, r, dataset, profiles, config, run_seed,
            builder=builder, probe_sink=probe_sink, pooled=pooled,
        )
        records.append(record)
        if trace is not None:
            trace.append(params.values.copy())

    return RunLog(
        config=config,
        model_spec=model_spec,
        seeds=dict(seeds),
        provenance=dict(dataset.provenance),
        records=records,
        final_params=params,
        param_trace=trace,
        probes=probe_sink or [],
    )


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as f:
        f.write(text)
    os.replace(tmp, path)


def write_metrics_csv(runlog: RunLog, path) -> None:
    """Stable per-round metrics table; see README for the column schema."""
    lines = [",".join(METRICS_COLUMNS)]
    for rec in runlog.records:
        eps_vals = list(rec.epsilons.values())
        mean_eps = repr(sum(eps_vals) / len(eps_vals)) if eps_vals else ""
        lines.append(
            ",".join(
                [
                    str(rec.round),
                    runlog.config.strategy,
                    repr(rec.train_loss),
                    repr(rec.test_loss),
                    repr(rec.test_acc),
                    repr(rec.mean_client_time),
                    repr(rec.max_client_time),
                    repr(runlog.config.tau),
                    str(rec.dropped),
                    mean_eps,
                ]
            )
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def config_as_dict(cfg: RoundConfig) -> dict:
    return {
        "strategy": cfg.strategy,
        "epochs": cfg.e_epochs,
        "rounds": cfg.rounds,
        "clients_per_round": cfg.k_clients,
        "tau": cfg.tau,
        "lr": {
            "kind": cfg.lr.kind, "value": cfg.lr.value,
            "mu": cfg.lr.mu, "smooth": cfg.lr.smooth,
        },
        "batch_size": cfg.batch_size,
        "mu_prox": cfg.mu_prox,
        "distance_kind": cfg.distance_kind,
        "gamma": cfg.gamma,
        "pool_cap": cfg.pool_cap,
        "probes": cfg.probes,
    }


def write_run_json(runlog: RunLog, path) -> None:
    spec = runlog.model_spec
    final = runlog.records[-1] if runlog.records else None
    doc = {
        "config": config_as_dict(runlog.config),
        "model": {
            "kind": spec.kind, "d_feat": spec.d_feat, "n_classes": spec.n_classes,
            "hidden": spec.hidden, "l2": spec.l2,
        },
        "seeds": runlog.seeds,
        "dataset": runlog.provenance,
        "summary": {
            "rounds": len(runlog.records),
            "final_test_acc": final.test_acc if final else None,
            "final_train_loss": final.train_loss if final else None,
            "mean_normalized_time": runlog.mean_normalized_time(),
        },
    }
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
