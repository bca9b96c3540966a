import time

import numpy as np
import pytest

from gridl1.adaptive import design_matrix
from gridl1.certify import (CertReport, HyperbolicityError, L1Design,
                            are_residual, certify, coupling_bound,
                            l1_norm_condition, min_distance, recertify_plugin,
                            solve_local_are, theta_bound)
from gridl1.network import LineParams, MicrogridTopology, linearize_all

from test_network import make_dgu


def coupling_matrix(entry):
    m = np.zeros((3, 3))
    m[1, 1] = entry
    return m


class TestCouplingBound:
    def test_no_neighbors(self):
        assert coupling_bound([]) == 0.0

    def test_single_entry_matches_eigen_oracle(self):
        a = coupling_matrix(5.3148e4)
        got = coupling_bound([a])
        oracle = np.linalg.eigvalsh(a.T @ a).max()
        assert got == pytest.approx(oracle, rel=1e-12)
        assert got == pytest.approx(2.8247e9, rel=1e-4)

    def test_additivity(self):
        a = coupling_matrix(1234.5)
        assert coupling_bound([a, a]) == pytest.approx(2 * coupling_bound([a]), rel=1e-12)

    def test_general_matrix(self):
        rng = np.random.default_rng(7)
        mats = [rng.normal(size=(3, 3)) for _ in range(3)]
        want = sum(np.linalg.eigvalsh(m.T @ m).max() for m in mats)
        assert coupling_bound(mats) == pytest.approx(want, rel=1e-12)


class TestMinDistance:
    def test_diagonal(self):
        assert min_distance(np.diag([-3.0, -4.0, -5.0])) == pytest.approx(3.0, abs=1e-6)

    def test_normal_block_with_rotation(self):
        a = np.zeros((3, 3))
        a[:2, :2] = [[-1.0, 10.0], [-10.0, -1.0]]
        a[2, 2] = -20.0
        assert min_distance(a) == pytest.approx(1.0, abs=1e-6)

    def test_companion_non_normality_shrinks_distance(self):
        a = design_matrix([-900.0, -1000.0, -1100.0], form="companion")
        gamma = min_distance(a)
        assert gamma < 900.0
        # oracle: dense scan of the smallest singular value over frequency
        eigs = np.linalg.eigvals(a)
        w_max = 10.0 * (np.abs(eigs.imag).max() + np.abs(eigs.real).max())
        ws = np.linspace(0.0, w_max, 100000)
        eye = np.eye(3)
        scan = min(np.linalg.svd(a - 1j * w * eye, compute_uv=False)[-1] for w in ws)
        assert gamma == pytest.approx(scan, rel=1e-4)

    def test_non_hurwitz_rejected(self):
        with pytest.raises(ValueError):
            min_distance(np.diag([1.0, -2.0, -3.0]))

    def test_default_design_matrix(self):
        assert min_distance(L1Design().a_m()) == pytest.approx(1.2e5, rel=1e-6)


class TestLocalAre:
    def test_scalar_analytic_root(self):
        # p^2 - 10 p + 9 = 0; the stabilising solution is the smaller root
        p = solve_local_are(np.array([[-5.0]]), 1, 8.0, 1.0)
        assert p[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_scalar_hyperbolicity_failure(self):
        with pytest.raises(HyperbolicityError):
            solve_local_are(np.array([[-1.0]]), 1, 8.0, 1.0)

    def test_default_design_worst_table1_coupling(self, table1_models):
        xi_sq = max(coupling_bound(m.a_ij_aug.values()) for m in table1_models.values())
        design = L1Design()
        eps = design.epsilon(xi_sq)
        p = solve_local_are(design.a_m(), 3, xi_sq, eps)
        assert are_residual(design.a_m(), p, 3, xi_sq, eps) < 1e-8
        assert np.linalg.eigvalsh(p).min() > 0

    def test_companion_design_fails_on_table1_coupling(self, table1_models):
        # the companion realisation cannot dominate physical couplings
        xi_sq = max(coupling_bound(m.a_ij_aug.values()) for m in table1_models.values())
        a = design_matrix([-900.0, -1000.0, -1100.0], form="companion")
        with pytest.raises(HyperbolicityError):
            solve_local_are(a, 3, xi_sq, 0.01 * (xi_sq + 1.0))

    def test_decoupled_reduces_to_lyapunov(self):
        a = np.diag([-2.0, -3.0, -4.0])
        p = solve_local_are(a, 0, 0.0, 0.5)
        # N = 0 drops the quadratic term: A'P + PA + eps I = 0
        res = a.T @ p + p @ a + 0.5 * np.eye(3)
        assert np.abs(res).max() < 1e-12
        assert np.linalg.eigvalsh(p).min() > 0

    def test_vdot_bound(self):
        # for any x~, the certified P gives x~'(A'P+PA+NPP+Xi^2 I)x~ <= -eps|x~|^2
        a = np.diag([-50.0, -60.0, -70.0])
        n_i, xi_sq, eps = 2, 100.0, 3.0
        p = solve_local_are(a, n_i, xi_sq, eps)
        q_form = a.T @ p + p @ a + n_i * (p @ p) + xi_sq * np.eye(3)
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.normal(size=3)
            assert x @ q_form @ x <= -eps * (x @ x) + 1e-9 * (x @ x)


class TestThetaBound:
    def test_symmetric_box(self):
        assert theta_bound([1.0, 2.0, 3.0]) == 6.0

    def test_degenerate(self):
        assert theta_bound([0.0, 0.0, 0.0]) == 0.0

    def test_asymmetric_pairs(self):
        assert theta_bound([(-1.0, 4.0), (0.0, 2.0), (-3.0, 0.0)]) == 9.0


class TestFilterCondition:
    def test_scalar_analytic(self):
        # H = 1/(s+1), wc = 1: impulse of G is (1-t)e^{-t}, |integral| = 2/e
        lam, ok = l1_norm_condition(np.array([[-1.0]]), np.array([1.0]), 1.0, 1.0)
        assert lam == pytest.approx(2.0 / np.e, abs=1e-6)
        assert ok

    def test_wide_filter_limit(self):
        design = L1Design()
        lam, ok = l1_norm_condition(design.a_m(), design.b(), 1e9, design.theta_max())
        assert lam < 1e-3 and ok

    def test_zero_bound(self):
        design = L1Design()
        lam, ok = l1_norm_condition(design.a_m(), design.b(), design.omega_c, 0.0)
        assert lam == 0.0 and ok

    def test_monotone_in_bandwidth(self):
        design = L1Design()
        lams = [l1_norm_condition(design.a_m(), design.b(), wc, 1.0)[0]
                for wc in (500.0, 2000.0, 8000.0, 32000.0)]
        assert all(a > b for a, b in zip(lams, lams[1:]))


def two_dgu_topology(r_line=0.5):
    d1 = make_dgu(id="d1")
    d2 = make_dgu(id="d2", v_in=100.0, v_ref=380.5, c_t=51.67e-6)
    return MicrogridTopology(
        dgus=(d1, d2),
        lines=(LineParams(endpoints=("d1", "d2"), r=r_line, l=10e-6),))


class TestCertify:
    def test_table1_global_pass_within_budget(self, table1_cfg):
        from gridl1.cli import certify_config
        t0 = time.time()
        report, _, _ = certify_config(table1_cfg)
        assert time.time() - t0 < 1.0
        assert report.global_pass
        for rec in report.records.values():
            assert rec.are_residual < 1e-8
            assert rec.p_min_eigenvalue > 0
            assert rec.gamma > rec.gamma_threshold
            assert rec.lam < 1.0

    def test_single_decoupled_always_passes(self):
        d1 = make_dgu(id="solo")
        topo = MicrogridTopology(dgus=(d1,), lines=())
        report = certify(topo, linearize_all(topo))
        rec = report.records["solo"]
        assert report.global_pass
        assert rec.xi_sq == 0.0 and rec.gamma_threshold == 0.0

    def test_inflated_coupling_names_distance_condition(self):
        topo = two_dgu_topology(r_line=1e-4)
        report = certify(topo, linearize_all(topo))
        assert not report.global_pass
        for rec in report.records.values():
            assert not rec.passed
            assert any("distance condition" in f for f in rec.failures)

    def test_threshold_monotone_in_coupling_and_count(self):
        thresholds = []
        for r in (4.0, 2.0, 1.0, 0.5):
            topo = two_dgu_topology(r_line=r)
            report = certify(topo, linearize_all(topo))
            thresholds.append(report.records["d1"].gamma_threshold)
        assert all(a < b for a, b in zip(thresholds, thresholds[1:]))
        # adding a second, weaker neighbour still raises the threshold
        d1 = make_dgu(id="d1")
        d2 = make_dgu(id="d2", v_in=100.0, v_ref=380.5)
        d3 = make_dgu(id="d3", v_in=90.0, v_ref=380.2)
        three = MicrogridTopology(
            dgus=(d1, d2, d3),
            lines=(LineParams(endpoints=("d1", "d2"), r=4.0, l=10e-6),
                   LineParams(endpoints=("d1", "d3"), r=50.0, l=10e-6)))
        rep3 = certify(three, linearize_all(three))
        assert rep3.records["d1"].gamma_threshold > thresholds[0]

    def test_json_round_trip(self, table1_report):
        text = table1_report.to_json()
        back = CertReport.from_json(text)
        assert back.to_json() == text
        assert back.global_pass == table1_report.global_pass

    def test_plugin_recertification_locality(self, table1_cfg, table1_report):
        from gridl1.network import DguParams
        topo = table1_cfg.grid
        d7 = DguParams(id="dgu7", v_in=96.0, r_t=0.1, l_t=60e-6, c_t=45e-6,
                       p_rated=5000.0, p_load=2200.0, v_ref=380.0)
        topo7 = MicrogridTopology(
            dgus=topo.dgus + (d7,),
            lines=topo.lines + (LineParams(endpoints=("dgu4", "dgu7"), r=8.0, l=50e-6),))
        models7 = linearize_all(topo7)
        design = table1_cfg.l1
        incremental = recertify_plugin(table1_report, topo7, models7, design, ["dgu7"])
        full = certify(topo7, models7, design)
        # incremental equals the full recompute
        assert incremental.to_json() == full.to_json()
        # non-adjacent units keep byte-identical records
        import json
        for i in ("dgu1", "dgu2", "dgu3", "dgu5", "dgu6"):
            a = json.dumps(table1_report.records[i].as_dict(), sort_keys=True)
            b = json.dumps(full.records[i].as_dict(), sort_keys=True)
            assert a == b
        assert full.records["dgu4"].n_i == 4
        assert full.global_pass
