"""Convergence-bound instrumentation for the strongly convex setting.

Estimates the constants entering the O(eps) + O(1/R) distance bound from data
and completed runs, computes the theoretical curve, and checks it against
empirical trajectories at every synchronization step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import federation, models
from .data import FederatedDataset, generate_synthetic
from .rng import stream


class ConvergenceError(RuntimeError):
    """An inner optimization failed to reach the requested gradient norm."""


class ScheduleMismatchError(ValueError):
    """A run was not executed in the schedule/batching form the check requires."""


def lr_schedule(t: int, mu: float, smooth: float, e_epochs: int) -> float:
    """Diminishing step size (2/mu) / (t + max(E, 8L/mu))."""
    if mu <= 0 or smooth <= 0:
        raise ValueError("mu and L must be positive")
    if e_epochs < 1:
        raise ValueError("E must be >= 1")
    beta = max(float(e_epochs), 8.0 * smooth / mu)
    return (2.0 / mu) / (t + beta)


@dataclass(frozen=True)
class TheoryConstants:
    mu: float
    smooth: float  # L
    eps: float
    grad_bound: float  # D
    gamma: float  # heterogeneity
    e_epochs: int
    rounds: int
    k_clients: int
    alpha: float
    beta: float
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    w_star_dist0: float

    @classmethod
    def derive(
        cls,
        mu: float,
        smooth: float,
        eps: float,
        grad_bound: float,
        gamma: float,
        e_epochs: int,
        rounds: int,
        k_clients: int,
        w_star_dist0: float,
    ) -> "TheoryConstants":
        if mu <= 0 or smooth < mu:
            raise ValueError("need 0 < mu <= L")
        e, d = float(e_epochs), grad_bound
        alpha = 2.0 / mu
        beta = max(e, 8.0 * smooth / mu)
        a1 = 2.0 * eps * d / mu**2
        a3 = 2.0 * eps * d / mu
        a4 = 8.0 * (e - 1.0) ** 2 * d**2 + 6.0 * smooth * gamma + eps**2 + 2.0 * eps * d
        a5 = 4.0 * e**2 * d**2 / k_clients + a4
        a2 = max(beta * w_star_dist0, (4.0 / mu**2) * a5)
        return cls(
            mu=mu, smooth=smooth, eps=eps, grad_bound=d, gamma=gamma,
            e_epochs=e_epochs, rounds=rounds, k_clients=k_clients,
            alpha=alpha, beta=beta, a1=a1, a2=a2, a3=a3, a4=a4, a5=a5,
            w_star_dist0=w_star_dist0,
        )


def theoretical_bound(consts: TheoryConstants, rounds: int) -> float:
    """Distance bound A1 + A2/(E*R + beta) after R rounds."""
    return consts.a1 + consts.a2 / (consts.e_epochs * rounds + consts.beta)


def bound_at_step(consts: TheoryConstants, t: int) -> float:
    return consts.a1 + consts.a2 / (t + consts.beta)


def loss_gap_bound(consts: TheoryConstants, rounds: int) -> float:
    """Objective-value form: (L/2) times the distance bound."""
    return 0.5 * consts.smooth * theoretical_bound(consts, rounds)


def gd_minimize(
    spec: models.ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    start: models.ParamVector | None = None,
) -> models.ParamVector:
    """Deterministic full-batch gradient descent to ||grad|| <= tol.

    Steps are seeded with the Barzilai-Borwein quotient and safeguarded by
    nonmonotone Armijo backtracking, which keeps the iteration a plain
    steepest-descent line search while handling ill-conditioned problems in
    far fewer gradient evaluations than a fixed 1/L step.
    """
    w = start.values.copy() if start is not None else np.zeros(spec.n_params())
    pv = models.ParamVector(w, spec)
    loss = float(np.mean(models.batch_losses(pv, x, y)))
    recent = [loss]
    g = models.mean_grad(pv, x, y)
    step = 1.0
    prev_w = prev_g = None
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return pv
        if prev_w is not None:
            s = w - prev_w
            yv = g - prev_g
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy
        step = min(max(step, 1e-12), 1e8)
        ref = max(recent)
        while True:
            trial = models.ParamVector(w - step * g, spec)
            trial_loss = float(np.mean(models.batch_losses(trial, x, y)))
            if trial_loss <= ref - 1e-4 * step * gnorm**2 or step < 1e-16:
                break
            step *= 0.5
        prev_w, prev_g = w, g
        pv, w, loss = trial, trial.values, trial_loss
        recent.append(loss)
        if len(recent) > 10:
            recent.pop(0)
        g = models.mean_grad(pv, x, y)
    raise ConvergenceError(f"gradient norm {gnorm:.3e} > tol {tol:.1e} after {max_iter} iters")


def estimate_mu_L(
    spec: models.ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    trials: int = 500,
    rng: np.random.Generator | None = None,
    safety: float = 1.2,
) -> tuple[float, float]:
    """Strong-convexity and smoothness constants of the pooled objective.

    mu is the ridge coefficient (analytic lower bound); L is the largest
    gradient-difference quotient over sampled parameter pairs, inflated by the
    safety factor because sampling can only underestimate the true constant.
    """
    if spec.kind != models.LOGISTIC:
        raise ValueError("curvature constants are only defined for the convex model")
    if spec.l2 <= 0:
        raise ValueError("strong convexity requires l2 > 0")
    if rng is None:
        rng = stream(0, "mu_L")
    n_params = spec.n_params()
    worst = 0.0
    for _ in range(trials):
        scale = math.exp(rng.uniform(math.log(0.03), math.log(3.0)))
        w1 = rng.standard_normal(n_params) * scale
        w2 = w1 + rng.standard_normal(n_params) * scale * rng.uniform(0.01, 1.0)
        g1 = models.mean_grad(models.ParamVector(w1, spec), x, y)
        g2 = models.mean_grad(models.ParamVector(w2, spec), x, y)
        denom = float(np.linalg.norm(w1 - w2))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(g1 - g2)) / denom)
    return spec.l2, safety * worst


def estimate_gamma(
    dataset: FederatedDataset,
    spec: models.ModelSpec,
    tol: float = 1e-8,
    w_star: models.ParamVector | None = None,
) -> float:
    """Heterogeneity: global minimum value minus the weighted per-client minima.

    Pass a precomputed ``w_star`` (solved at least as tightly as ``tol``) to
    skip the global solve. Per-client solves warm-start from the global
    minimizer.
    """
    if spec.kind != models.LOGISTIC:
        raise ValueError("heterogeneity estimation requires the convex model")
    pooled_x, pooled_y = dataset.pooled_train()
    if w_star is None:
        w_star = gd_minimize(spec, pooled_x, pooled_y, tol=tol)
    global_min = float(np.mean(models.batch_losses(w_star, pooled_x, pooled_y)))
    sizes = np.array([c.m for c in dataset.clients], dtype=np.float64)
    p = sizes / sizes.sum()
    local = 0.0
    for weight, client in zip(p, dataset.clients):
        w_i = gd_minimize(spec, client.x, client.y, tol=tol, start=w_star)
        local += weight * float(np.mean(models.batch_losses(w_i, client.x, client.y)))
    return max(global_min - local, 0.0)


def measure_eps_D(runlogs: list[federation.RunLog]) -> tuple[float, float]:
    """Trajectory maxima of the coreset gradient error and the gradient norms."""
    probes = [p for log in runlogs for p in log.probes]
    if not probes:
        raise ValueError("runs carry no gradient probes; rerun with probes enabled")
    eps = max(p.grad_err for p in probes)
    grad_bound = max(p.grad_bound for p in probes)
    return eps, grad_bound


def _require_bound_form(runlogs: list[federation.RunLog]) -> None:
    reference = runlogs[0].config
    for log in runlogs:
        if log.config.lr.kind != "theorem":
            raise ScheduleMismatchError("bound check requires the theorem lr schedule")
        if log.config.batch_size > 0:
            raise ScheduleMismatchError("bound check requires full-batch epochs")
        if log.param_trace is None:
            raise ScheduleMismatchError("bound check requires traced parameters")
        if log.config.e_epochs != reference.e_epochs or log.config.lr != reference.lr:
            raise ScheduleMismatchError("runs disagree on epochs or schedule constants")


def check_bound(
    runlogs: list[federation.RunLog],
    consts: TheoryConstants,
    w_star: models.ParamVector,
) -> dict:
    """Compare mean squared distance to w* against the bound at each sync step."""
    _require_bound_form(runlogs)
    e_epochs = runlogs[0].config.e_epochs
    n_rounds = min(len(log.param_trace) for log in runlogs) - 1
    steps = []
    ok = True
    for r in range(n_rounds + 1):
        t = r * e_epochs
        sq = [float(np.sum((log.param_trace[r] - w_star.values) ** 2)) for log in runlogs]
        empirical = sum(sq) / len(sq)
        bound = bound_at_step(consts, t)
        margin = bound - empirical
        ok = ok and empirical <= bound
        steps.append({"t": t, "empirical": empirical, "bound": bound, "margin": margin})
    return {
        "constants": asdict(consts),
        "n_runs": len(runlogs),
        "steps": steps,
        "verdict": "pass" if ok else "fail",
    }


def bound_experiment(
    n_runs: int = 10,
    rounds: int = 50,
    e_epochs: int = 5,
    k_clients: int = 10,
    s_percent: float = 30.0,
    l2: float = 0.1,
    n_clients: int = 30,
    data_seed: int = 101,
    cap_seed: int = 202,
    run_seed_base: int = 1000,
) -> dict:
    """Reference strongly convex scenario: run, measure constants, check the bound.

    Returns the check report, with a secondary block computed from the raw
    (un-inflated) smoothness estimate for comparison.
    """
    dataset = generate_synthetic(0.0, 0.0, n_clients, data_seed)
    caps = federation.capabilities(n_clients, cap_seed)
    profiles = federation.build_profiles(dataset, caps)
    tau = federation.deadline_for_stragglers(profiles, e_epochs, s_percent)
    spec = models.ModelSpec(models.LOGISTIC, dataset.d_feat, dataset.n_classes, l2=l2)
    pooled_x, pooled_y = dataset.pooled_train()

    mu, smooth = estimate_mu_L(spec, pooled_x, pooled_y, rng=stream(data_seed, "mu_L"))
    config = federation.RoundConfig(
        strategy=federation.FEDCORE,
        e_epochs=e_epochs,
        rounds=rounds,
        k_clients=k_clients,
        tau=tau,
        lr=federation.LrSpec("theorem", mu=mu, smooth=smooth),
        batch_size=0,
        probes=True,
        trace_params=True,
    )
    builder = federation.CoresetBuilder(config.pool_cap)  # shared: same dataset
    runlogs = [
        federation.run(
            dataset, profiles, spec, config,
            {"data": data_seed, "cap": cap_seed, "run": run_seed_base + i},
            builder=builder,
        )
        for i in range(n_runs)
    ]

    eps, grad_bound = measure_eps_D(runlogs)
    w_star = gd_minimize(spec, pooled_x, pooled_y, tol=1e-10)
    gamma = estimate_gamma(dataset, spec, tol=1e-6, w_star=w_star)
    w0_dist = float(np.sum(w_star.values**2))  # zero initialization

    consts = TheoryConstants.derive(
        mu, smooth, eps, grad_bound, gamma, e_epochs, rounds, k_clients, w0_dist
    )
    report = check_bound(runlogs, consts, w_star)
    report["scenario"] = {
        "n_runs": n_runs, "rounds": rounds, "epochs": e_epochs,
        "clients_per_round": k_clients, "s_percent": s_percent, "l2": l2,
        "n_clients": n_clients, "tau": tau,
        "data_seed": data_seed, "cap_seed": cap_seed, "run_seed_base": run_seed_base,
    }
    # Same trajectories scored against constants from the raw L estimate; the
    # schedule itself used the inflated L, so this block is informational.
    raw_consts = TheoryConstants.derive(
        mu, smooth / 1.2, eps, grad_bound, gamma, e_epochs, rounds, k_clients, w0_dist
    )
    raw_steps = [
        {"t": s["t"], "bound": bound_at_step(raw_consts, s["t"]),
         "empirical": s["empirical"]}
        for s in report["steps"]
    ]
    report["raw_L"] = {
        "constants": asdict(raw_consts),
        "verdict": "pass" if all(s["empirical"] <= s["bound"] for s in raw_steps) else "fail",
    }
    return report
