import math

import numpy as np
import pytest

from fedsim import federation as fed
from fedsim import models
from fedsim.data import ClientDataset, FederatedDataset, generate_synthetic
from fedsim.federation import (
    ClientProfile,
    LrSpec,
    RoundConfig,
    capabilities,
    build_profiles,
    client_round_time,
    deadline_for_stragglers,
    select_clients,
    run,
)
from fedsim.rng import stream


def small_world(n_clients=10, alpha=0.0, beta=0.0, data_seed=1, cap_seed=2):
    ds = generate_synthetic(alpha, beta, n_clients, data_seed)
    caps = capabilities(n_clients, cap_seed)
    profiles = build_profiles(ds, caps)
    return ds, profiles


def config(strategy, tau, rounds=4, e_epochs=5, k=4, lr=0.001, batch=8, **kw):
    return RoundConfig(
        strategy, e_epochs, rounds, k, tau, LrSpec("fixed", value=lr), batch, **kw
    )


class TestCapabilities:
    def test_truncated_below(self):
        caps = capabilities(10_000, 3)
        assert caps.min() >= 0.1

    def test_monte_carlo_mean(self):
        caps = capabilities(10_000, 3)
        assert 0.97 <= caps.mean() <= 1.05

    def test_deterministic(self):
        assert np.array_equal(capabilities(50, 4), capabilities(50, 4))


class TestDeadline:
    def _profiles(self, times, e_epochs=1):
        # full_work_time = E*m/c; build m=t, c=1 so times are direct
        return [ClientProfile(i, int(t), 1.0, 1 / len(times)) for i, t in enumerate(times)]

    def test_s_zero_is_max(self):
        profs = self._profiles(range(1, 11))
        assert deadline_for_stragglers(profs, 1, 0) == 10

    def test_nearest_rank(self):
        profs = self._profiles(range(1, 11))
        tau = deadline_for_stragglers(profs, 1, 30)
        assert tau == 7
        stragglers = [p for p in profs if fed.full_work_time(p, 1) > tau]
        assert sorted(p.client_id for p in stragglers) == [7, 8, 9]

    @pytest.mark.parametrize("s", [10, 30])
    def test_straggler_fraction(self, s):
        ds, profiles = small_world(n_clients=30)
        tau = deadline_for_stragglers(profiles, 10, s)
        frac = sum(fed.full_work_time(p, 10) > tau for p in profiles) / 30
        assert abs(frac - s / 100) <= 1 / 30 + 1e-12


class TestSelection:
    def test_single_client_population(self):
        profs = [ClientProfile(3, 10, 1.0, 1.0)]
        sel = select_clients(profs, 5, stream(1, "s"))
        assert list(sel) == [3] * 5

    def test_deterministic(self):
        ds, profiles = small_world()
        a = select_clients(profiles, 6, stream(2, "sel"))
        b = select_clients(profiles, 6, stream(2, "sel"))
        assert np.array_equal(a, b)

    def test_empirical_frequencies(self):
        ds, profiles = small_world(n_clients=8)
        n = 100_000
        sel = select_clients(profiles, n, stream(3, "freq"))
        counts = np.bincount(sel, minlength=8)
        for prof in profiles:
            expect = n * prof.p
            sigma = math.sqrt(n * prof.p * (1 - prof.p))
            assert abs(counts[prof.client_id] - expect) <= 3 * sigma + 1e-9


class TestClientRoundTime:
    def test_fedavg_arithmetic(self):
        assert client_round_time("fedavg", 100, 2.0, 10, 50.0) == 500.0

    def test_fedcore_budget_fits_deadline(self):
        from fedsim.coreset import budget

        for m, c, tau, e in [(100, 1.0, 120.0, 10), (500, 0.5, 700.0, 10), (50, 2.0, 30.0, 5)]:
            if e * m <= c * tau:
                continue
            b = budget(m, c, tau, e)
            if b >= 1:
                t = client_round_time("fedcore", m, c, e, tau, b=b)
                assert t <= tau + 1e-9

    def test_deadline_aware_capped(self):
        assert client_round_time("fedavg_ds", 100, 1.0, 10, 50.0) == 50.0
        assert client_round_time("fedprox", 100, 1.0, 10, 50.0) == 50.0
        assert client_round_time("fedavg", 100, 1.0, 10, 50.0) > 50.0

    def test_fedprox_partial_epochs(self):
        # c*tau/m = 3.5 -> 3 full epochs
        assert client_round_time("fedprox", 10, 1.0, 10, 35.0) == 30.0


class TestRoundEngine:
    def test_fedcore_infinite_tau_identical_to_fedavg(self):
        ds, profiles = small_world()
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        seeds = {"data": 1, "cap": 2, "run": 5}
        cfg_a = config("fedavg", math.inf, rounds=3, trace_params=True)
        cfg_c = config("fedcore", math.inf, rounds=3, trace_params=True)
        log_a = run(ds, profiles, spec, cfg_a, seeds)
        log_c = run(ds, profiles, spec, cfg_c, seeds)
        for wa, wc in zip(log_a.param_trace, log_c.param_trace):
            assert wa.tobytes() == wc.tobytes()

    def test_fedprox_reduces_to_fedavg_without_stragglers(self):
        ds, profiles = small_world()
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        seeds = {"data": 1, "cap": 2, "run": 6}
        log_a = run(ds, profiles, spec, config("fedavg", math.inf, rounds=3), seeds)
        log_p = run(
            ds, profiles, spec, config("fedprox", math.inf, rounds=3, mu_prox=0.0), seeds
        )
        assert log_a.final_params.values.tobytes() == log_p.final_params.values.tobytes()

    def test_identical_clients_aggregate_to_single_result(self):
        base = generate_synthetic(0.0, 0.0, 1, 3)
        client = base.clients[0]
        ds = FederatedDataset(
            [client], base.test_x, base.test_y, base.n_classes, base.d_feat, {}
        )
        profiles = [ClientProfile(0, client.m, 1.0, 1.0)]
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedavg", math.inf, rounds=1, k=4)
        log = run(ds, profiles, spec, cfg, {"data": 3, "cap": 0, "run": 7})
        # aggregate of K copies equals one client's local result
        w0 = models.init_params(spec, 7)
        w = w0
        for k in range(cfg.e_epochs):
            w = models.sgd_epoch(
                w, client.x, client.y, None, 0.001, 8, stream(7, "local", 0, 0, k)
            )
        assert np.allclose(log.final_params.values, w.values, rtol=1e-12, atol=1e-15)

    def test_deadline_compliance_and_epsilons(self):
        ds, profiles = small_world(n_clients=12)
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        for strategy in ("fedavg_ds", "fedprox", "fedcore"):
            cfg = config(strategy, tau, rounds=6, k=5)
            log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 8})
            for rec in log.records:
                for t, dropped in zip(rec.client_times, rec.client_dropped):
                    assert t <= tau + 1e-9
        # fedcore straggler rounds carry measured epsilons
        cfg = config("fedcore", tau, rounds=6, k=5)
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 8})
        eps = [e for rec in log.records for e in rec.epsilons.values()]
        assert eps and all(v >= 0 for v in eps)

    def test_fedavg_ds_all_dropped_keeps_params(self):
        # one giant straggler dominates selection; when every selected slot is
        # dropped the aggregate must stay unchanged
        base = generate_synthetic(0.0, 0.0, 2, 9)
        big, small = base.clients
        profiles = [
            ClientProfile(0, 100_000, 1.0, 100_000 / 100_010),
            ClientProfile(1, 10, 1.0, 10 / 100_010),
        ]
        ds = FederatedDataset(
            [big, small], base.test_x, base.test_y, base.n_classes, base.d_feat, {}
        )
        tau = 50.0  # both clients are stragglers at E=5 except neither fits
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedavg_ds", tau, rounds=1, k=3)
        log = run(ds, profiles, spec, cfg, {"data": 9, "cap": 0, "run": 1})
        rec = log.records[0]
        if rec.dropped == cfg.k_clients:
            w0 = models.init_params(spec, 1)
            assert np.array_equal(log.final_params.values, w0.values)
        assert rec.dropped >= 1

    def test_zero_rounds(self):
        ds, profiles = small_world()
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        log = run(ds, profiles, spec, config("fedavg", math.inf, rounds=0), {"data": 1, "cap": 2, "run": 3})
        assert log.records == []
        assert np.all(log.final_params.values == 0)

    def test_run_deterministic_bytes(self, tmp_path):
        ds, profiles = small_world()
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedcore", tau, rounds=3)
        seeds = {"data": 1, "cap": 2, "run": 4}
        log_a = run(ds, profiles, spec, cfg, seeds)
        log_b = run(ds, profiles, spec, cfg, seeds)
        fed.write_metrics_csv(log_a, tmp_path / "a.csv")
        fed.write_metrics_csv(log_b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_monotone_work_for_stragglers(self):
        from fedsim.coreset import budget

        ds, profiles = small_world(n_clients=20)
        e_epochs = 10
        tau = deadline_for_stragglers(profiles, e_epochs, 30)
        for p in profiles:
            if fed.full_work_time(p, e_epochs) <= tau:
                continue
            b = budget(p.m, p.c, tau, e_epochs)
            if b >= 1:
                processed = p.m + (e_epochs - 1) * b
                assert processed <= p.c * tau < e_epochs * p.m

    def test_probes_full_set_error_zero(self):
        ds, profiles = small_world()
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedavg", math.inf, rounds=2, probes=True)
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 3})
        assert log.probes
        assert all(p.grad_err == 0.0 for p in log.probes)
        assert all(np.isfinite(p.grad_bound) for p in log.probes)

    def test_fedcore_mlp_uses_lastlayer_proxy(self):
        ds, profiles = small_world(n_clients=8)
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("mlp", ds.d_feat, ds.n_classes, hidden=8)
        cfg = config("fedcore", tau, rounds=3, k=4)
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 10})
        assert len(log.records) == 3
        eps = [e for rec in log.records for e in rec.epsilons.values()]
        assert eps  # stragglers built coresets from last-layer distances

    def test_fedcore_exact_distance_kind(self):
        ds, profiles = small_world(n_clients=8)
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedcore", tau, rounds=2, k=4, distance_kind="exact")
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 11})
        assert len(log.records) == 2

    def test_fedcore_pool_cap_engages(self):
        ds, profiles = small_world(n_clients=8)
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedcore", tau, rounds=2, k=4, pool_cap=64)
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 12})
        for rec in log.records:
            for t in rec.client_times:
                assert t <= tau + 1e-9

    def test_gamma_surcharge_respects_deadline(self):
        ds, profiles = small_world(n_clients=8)
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        cfg = config("fedcore", tau, rounds=3, k=4, gamma=0.5)
        log = run(ds, profiles, spec, cfg, {"data": 1, "cap": 2, "run": 13})
        for rec in log.records:
            for t in rec.client_times:
                assert t <= tau + 1e-9


class TestWriters:
    def test_metrics_schema(self, tmp_path):
        ds, profiles = small_world()
        tau = deadline_for_stragglers(profiles, 5, 30)
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        log = run(ds, profiles, spec, config("fedcore", tau, rounds=2), {"data": 1, "cap": 2, "run": 3})
        path = tmp_path / "metrics.csv"
        fed.write_metrics_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(fed.METRICS_COLUMNS)
        assert len(lines) == 3
        for line in lines[1:]:
            fields = line.split(",")
            assert len(fields) == len(fed.METRICS_COLUMNS)
            float(fields[2]), float(fields[3]), float(fields[4])
            assert fields[1] == "fedcore"

    def test_run_json(self, tmp_path):
        import json

        ds, profiles = small_world()
        spec = models.ModelSpec("logistic", ds.d_feat, ds.n_classes)
        log = run(ds, profiles, spec, config("fedavg", math.inf, rounds=1), {"data": 1, "cap": 2, "run": 3})
        fed.write_run_json(log, tmp_path / "run.json")
        doc = json.loads((tmp_path / "run.json").read_text())
        assert doc["config"]["strategy"] == "fedavg"
        assert doc["seeds"] == {"data": 1, "cap": 2, "run": 3}
        assert doc["dataset"]["kind"] == "synthetic"
        assert "final_test_acc" in doc["summary"]
