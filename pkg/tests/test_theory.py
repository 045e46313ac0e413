import numpy as np
import pytest

from metaboot import theory
from metaboot.base import DegenerateProblem
from metaboot.config import ExperimentConfig
from metaboot.theory import (
    REPORT_COLUMNS,
    GramBundle,
    SyntheticProblem,
    compute_gram,
    delta_f,
    dual_path_error,
    identity_gram_problem,
    jacobian_np,
    make_xi_targets,
    quadratic_equivalence_gap,
    random_problem,
    run_verification,
    unroll_np,
    verify_bmg_dominance,
    verify_mg_descent,
    verify_bmg_descent,
    xi_r_target,
)
from metaboot.util import dumps

BETAS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def _problems(n, seed=0):
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [random_problem(np.random.default_rng(s)) for s in seqs]


def test_problem_validation():
    A = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        SyntheticProblem(A, np.zeros(2), 1, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        SyntheticProblem(-np.eye(2), np.zeros(2), 1, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        SyntheticProblem(np.eye(2), np.zeros(2), 0, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        SyntheticProblem(np.eye(2), np.zeros(3), 1, np.zeros(2), np.zeros(2))


def test_random_problem_ranges(rng):
    for _ in range(20):
        p = random_problem(rng, max_dim=20, max_K=5)
        assert 2 <= p.n_x <= 20 and 1 <= p.K <= 5
        assert np.linalg.eigvalsh(p.A)[0] > 0


def test_delta_f_is_exact_for_quadratics(rng):
    p = random_problem(rng, n_x=6, K=2)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    assert np.isclose(delta_f(p, a, b), p.f(b) - p.f(a))


def test_reverse_mode_jacobian_matches_forward_recurrence(rng):
    for _ in range(5):
        p = random_problem(rng, max_dim=10)
        bundle = compute_gram(p)
        assert np.allclose(bundle.D, jacobian_np(p, p.w0), rtol=1e-10, atol=1e-12)
        assert np.allclose(bundle.x_K, unroll_np(p, p.w0))
        assert np.allclose(bundle.Gt, bundle.Gt.T)
        assert dual_path_error(p, bundle) < 1e-10


def test_gram_is_identity_on_constructed_instances(rng):
    p = identity_gram_problem(rng, n_x=5)
    bundle = compute_gram(p)
    assert np.allclose(bundle.D, -np.eye(5), atol=1e-12)
    assert np.allclose(bundle.Gt, np.eye(5), atol=1e-12)
    assert bundle.idempotent_gap < 1e-10
    assert bundle.r == pytest.approx(1.0)


def test_degenerate_bundle_has_no_ratio():
    n = 3
    bundle = GramBundle(np.zeros(n), np.zeros(n), np.zeros((n, n)), np.zeros((n, n)), np.ones(n), None)
    assert bundle.degenerate
    with pytest.raises(DegenerateProblem):
        xi_r_target(bundle, np.zeros(n), 0.5)
    targets = make_xi_targets(bundle, np.zeros(n), 0.1)
    assert targets.r_G is None
    with pytest.raises(ValueError):
        targets.alpha_G[0] = 1.0


def test_xi_targets(rng):
    p = random_problem(rng, n_x=4, K=2)
    bundle = compute_gram(p)
    t = make_xi_targets(bundle, bundle.x_K, 0.1)
    assert np.allclose(t.plain, bundle.x_K - 0.1 * bundle.g)
    assert np.allclose(t.alpha_G, bundle.x_K - 0.1 * bundle.Gt @ bundle.g)
    # the r-scaled target sits exactly alpha * ||g|| away
    assert np.isclose(np.linalg.norm(t.r_G - bundle.x_K), 0.1 * np.linalg.norm(bundle.g))
    with pytest.raises(ValueError):
        make_xi_targets(bundle, bundle.x_K, 0.0)


def test_mg_descent_rate_on_fifty_instances():
    for i, p in enumerate(_problems(50)):
        rep = verify_mg_descent(p, BETAS, 0.01, f"mg-descent-{i}")
        assert rep.passed, rep.rows[-1]
        if not rep.degenerate:
            assert 0.99 <= rep.rows[-1]["ratio"] <= 1.01
            assert rep.rows[-1]["delta_f_actual"] < 0.0
        assert all(set(row) == set(REPORT_COLUMNS) for row in rep.rows)


def test_bmg_descent_rate_on_fifty_instances():
    for i, p in enumerate(_problems(50, seed=1)):
        rep = verify_bmg_descent(p, 1e-5, [1e-5], 0.05, f"bmg-descent-{i}", rng=np.random.default_rng(i))
        assert rep.passed, rep.rows[-1]
        if not rep.degenerate:
            assert 0.95 <= rep.rows[-1]["ratio"] <= 1.05
            assert rep.extra["perturbed_descent"]
            # the literal -(beta/alpha) mu rate is off by exactly a factor of two
            assert rep.rows[-1]["delta_f_predicted"] == pytest.approx(2.0 * rep.extra["literal_rate"], rel=1e-6)


def test_bmg_never_worse_than_mg():
    strict = eligible = 0
    for i, p in enumerate(_problems(200, seed=2)):
        rep = verify_bmg_dominance(p, [1e-6], f"dominance-{i}")
        assert rep.passed
        if rep.extra["strict_eligible"]:
            eligible += 1
            strict += rep.extra["strict"]
    assert eligible > 0
    assert strict / eligible >= 0.99


def test_identity_gram_makes_mg_and_bmg_coincide(rng):
    for _ in range(5):
        rep = verify_bmg_dominance(identity_gram_problem(rng, n_x=int(rng.integers(2, 9))), [1e-6], identity=True)
        assert rep.passed
        assert rep.extra["gap"] <= 1e-10


def test_mg_ratios_approach_one_monotonically():
    reports = [verify_mg_descent(p, BETAS) for p in _problems(40, seed=11)]
    assert np.mean([r.monotone for r in reports]) >= 0.95


def test_quadratic_equivalence_on_hundred_instances():
    worst = max(quadratic_equivalence_gap(p) for p in _problems(100, seed=3))
    assert worst <= 1e-8


def test_run_verification_summary():
    cfg = ExperimentConfig(experiment="verify", theory_instances=4, theory_dominance_instances=20,
                           theory_max_dim=6, theory_max_K=3)
    report = run_verification(cfg)
    assert report.passed
    s = report.summary
    assert s["instances"] == 4 and s["dominance_instances"] == 20
    assert s["mg_descent_passed"] == 4 and s["bmg_descent_passed"] == 4
    assert s["identity_max_gap"] <= 1e-10
    assert s["dual_path_max_error"] < 1e-10
    assert s["equivalence_max_error"] <= 1e-8
    assert s["monotone_ok"] and s["monotone_fraction"] >= 0.95
    # 4 * 5 MG rows + 4 * 5 BMG rows + 20 + 5 single-beta rows
    assert len(report.rows) == 4 * 5 * 2 + 20 + 5
    again = run_verification(cfg)
    assert dumps(again.rows) == dumps(report.rows)


def test_non_monotone_instances_fail_the_report(monkeypatch):
    monkeypatch.setattr(theory, "_monotone", lambda ratios: False)
    cfg = ExperimentConfig(experiment="verify", theory_instances=2, theory_dominance_instances=2,
                           theory_max_dim=4, theory_max_K=2)
    report = run_verification(cfg)
    assert report.summary["monotone_fraction"] < 0.95
    assert not report.summary["monotone_ok"] and not report.passed
