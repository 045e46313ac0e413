"""Descent checks for MG and BMG on synthetic quadratics.

Each instance is f(x) = 0.5 x'Ax + b'x with A = M'M + delta*I and the
update rule x <- x - softplus(w) * grad f(x), unrolled K times from x0.
D = [dx^(K)/dw]' is formed densely (one reverse pass per coordinate of
x^(K)) and G' = D'D is the metric both meta-updates descend in.

Changes in f are evaluated exactly as g'd + 0.5 d'Ad, which avoids the
cancellation of subtracting two nearly equal objective values.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import autodiff as ad
from .autodiff import Node
from .base import DegenerateProblem
from .config import ExperimentConfig
from .matching import l2_params
from .meta import equivalence_gap

_LOGGER = logging.getLogger("theory")

REPORT_COLUMNS = ("instance_id", "n_x", "K", "beta", "alpha", "delta_f_actual", "delta_f_predicted", "ratio",
                  "pass")

GRAM_EPS = 1e-12        # ||g||^2 in G' (or ||G'g||^2) at or below this is degenerate
IDEMPOTENT_EPS = 1e-8   # ||GG' - G'|| above this makes BMG strictly better than MG
SYMMETRY_EPS = 1e-10
DOMINANCE_SLACK = 1e-8  # relative slack when comparing the two descents
IDENTITY_EPS = 1e-10
MONOTONE_FRACTION = 0.95  # share of MG instances whose ratio error shrinks with beta
MAX_DENSE = 400


@dataclass(frozen=True)
class SyntheticProblem:
    """Quadratic objective plus an elementwise learned-rate update rule."""
    A: np.ndarray
    b: np.ndarray
    K: int
    x0: np.ndarray
    w0: np.ndarray

    def __post_init__(self) -> None:
        n = self.b.shape[0]
        if self.A.shape != (n, n) or self.x0.shape != (n,) or self.w0.shape != (n,):
            raise ValueError(f"inconsistent problem shapes: A{self.A.shape} b{self.b.shape} "
                             f"x0{self.x0.shape} w0{self.w0.shape}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not np.allclose(self.A, self.A.T, atol=SYMMETRY_EPS):
            raise ValueError("A must be symmetric")
        if linalg.eigvalsh(self.A)[0] < -SYMMETRY_EPS:
            raise ValueError("A must be positive semi-definite")

    @property
    def n_x(self) -> int:
        return self.b.shape[0]

    def f(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.A @ x + self.b @ x)

    def grad_f(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b

    def condition_number(self) -> float:
        eig = linalg.eigvalsh(self.A)
        return float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf


def random_problem(rng: np.random.Generator, n_x: Optional[int] = None, K: Optional[int] = None,
                   max_dim: int = 20, max_K: int = 5, delta: float = 1e-3) -> SyntheticProblem:
    n = int(n_x if n_x is not None else rng.integers(2, max_dim + 1))
    k = int(K if K is not None else rng.integers(1, max_K + 1))
    m = rng.standard_normal((n, n)) / math.sqrt(n)
    A = m.T @ m + delta * np.eye(n)
    A = 0.5 * (A + A.T)
    # softplus(w0) stays below ~0.32 so the unrolled steps remain stable
    return SyntheticProblem(A, rng.standard_normal(n), k, rng.standard_normal(n), rng.uniform(-3.0, -1.0, n))


def identity_gram_problem(rng: np.random.Generator, n_x: int = 4, delta: float = 1e-3) -> SyntheticProblem:
    """K = 1 instance with D = -I, hence G' = I.

    dx^(1)/dw = -diag(sigmoid(w0) * grad f(x0)); choosing b so that
    grad f(x0) = 1 / sigmoid(w0) makes that exactly -I.
    """
    m = rng.standard_normal((n_x, n_x)) / math.sqrt(n_x)
    A = m.T @ m + delta * np.eye(n_x)
    A = 0.5 * (A + A.T)
    x0 = rng.standard_normal(n_x)
    w0 = rng.uniform(-3.0, -1.0, n_x)
    b = 1.0 / _sigmoid(w0) - A @ x0
    return SyntheticProblem(A, b, 1, x0, w0)


def _sigmoid(w: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * w))


def _softplus(w: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, w)


def unroll_np(problem: SyntheticProblem, w: np.ndarray) -> np.ndarray:
    x = problem.x0.copy()
    s = _softplus(w)
    for _ in range(problem.K):
        x = x - s * problem.grad_f(x)
    return x


def jacobian_np(problem: SyntheticProblem, w: np.ndarray) -> np.ndarray:
    """D by forward recurrence on dx/dw; a dense oracle for compute_gram."""
    n = problem.n_x
    s, ds = _softplus(w), _sigmoid(w)
    x = problem.x0.copy()
    J = np.zeros((n, n))
    for _ in range(problem.K):
        g = problem.grad_f(x)
        J = J - s[:, None] * (problem.A @ J) - np.diag(ds * g)
        x = x - s * g
    return J.T


def unroll(problem: SyntheticProblem, w: Node) -> Node:
    """x^(K)(w) as a (1, n_x) row on w's graph."""
    graph = w.graph
    A = graph.constant(problem.A)
    b = graph.constant(problem.b)
    x = graph.constant(problem.x0[None, :])
    s = ad.softplus(w)
    for _ in range(problem.K):
        x = x - s * (ad.matmul(x, A) + b)
    return x


def quadratic_objective(problem: SyntheticProblem, x: Node) -> Node:
    graph = x.graph
    xa = ad.matmul(x, graph.constant(problem.A))
    return 0.5 * ad.sum(xa * x) + ad.sum(graph.constant(problem.b) * x)


def delta_f(problem: SyntheticProblem, x_from: np.ndarray, x_to: np.ndarray) -> float:
    d = x_to - x_from
    return float(problem.grad_f(x_from) @ d + 0.5 * d @ problem.A @ d)


@dataclass(frozen=True)
class GramBundle:
    w: np.ndarray
    x_K: np.ndarray
    D: np.ndarray
    Gt: np.ndarray
    g: np.ndarray
    r: Optional[float]

    @property
    def G(self) -> np.ndarray:
        return self.Gt.T

    @property
    def Gtg(self) -> np.ndarray:
        return self.Gt @ self.g

    @property
    def gram_norm_sq(self) -> float:
        """||g||^2 in the metric G'."""
        return float(self.g @ self.Gt @ self.g)

    @property
    def idempotent_gap(self) -> float:
        return float(np.linalg.norm(self.G @ self.Gt - self.Gt))

    @property
    def degenerate(self) -> bool:
        return self.r is None


def compute_gram(problem: SyntheticProblem, w: Optional[np.ndarray] = None) -> GramBundle:
    w_arr = np.array(problem.w0 if w is None else w, dtype=np.float64)
    n = problem.n_x
    if n * w_arr.shape[0] > MAX_DENSE:
        raise ValueError(f"dense Jacobian of size {n}x{w_arr.shape[0]} exceeds {MAX_DENSE} entries")
    with ad.Graph("gram") as graph:
        wl = graph.leaf("w", w_arr)
        x_K = unroll(problem, wl)
        cols = [ad.grad(x_K[0, i], [wl])[0].value for i in range(n)]
    D = np.stack(cols, axis=1)
    Gt = D.T @ D
    Gt = 0.5 * (Gt + Gt.T)
    x = np.array(x_K.value[0])
    g = problem.grad_f(x)
    norm = float(np.linalg.norm(Gt @ g))
    r = float(np.linalg.norm(g)) / norm if norm > 0.0 else None
    return GramBundle(w_arr, x, D, Gt, g, r)


def dual_path_error(problem: SyntheticProblem, bundle: GramBundle) -> float:
    """Relative error between grad_w f(x^(K)(w)) by one reverse pass and D g."""
    with ad.Graph("dual-path") as graph:
        wl = graph.leaf("w", bundle.w)
        f = quadratic_objective(problem, unroll(problem, wl))
        (direct,) = ad.grad(f, [wl])
    via_d = bundle.D @ bundle.g
    return float(np.linalg.norm(direct.value - via_d) / max(np.linalg.norm(via_d), 1e-300))


@dataclass(frozen=True)
class XiTargets:
    alpha: float
    alpha_G: np.ndarray
    plain: np.ndarray
    r_G: Optional[np.ndarray]


def xi_r_target(bundle: GramBundle, x_K: np.ndarray, alpha: float) -> np.ndarray:
    """x - alpha * r * G'g, which sits exactly alpha * ||g|| away from x."""
    if bundle.r is None:
        raise DegenerateProblem("G'g = 0: the gradient-norm ratio is undefined")
    return x_K - alpha * bundle.r * bundle.Gtg


def make_xi_targets(bundle: GramBundle, x_K: np.ndarray, alpha: float) -> XiTargets:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    r_G: Optional[np.ndarray] = None
    if not bundle.degenerate:
        r_G = xi_r_target(bundle, x_K, alpha)
    targets = XiTargets(alpha, x_K - alpha * bundle.Gtg, x_K - alpha * bundle.g, r_G)
    for arr in (targets.alpha_G, targets.plain, targets.r_G):
        if arr is not None:
            arr.flags.writeable = False
    return targets


def mg_meta_step(bundle: GramBundle, beta: float) -> np.ndarray:
    return bundle.w - beta * bundle.D @ bundle.g


def bmg_meta_step(problem: SyntheticProblem, w: np.ndarray, target: np.ndarray, beta: float) -> Tuple[np.ndarray, float]:
    """One step on mu = ||target - x^(K)(w)||^2; returns (w', mu)."""
    with ad.Graph("bmg-step") as graph:
        wl = graph.leaf("w", w)
        x_K = ad.reshape(unroll(problem, wl), (problem.n_x,))
        mu = l2_params([graph.constant(target)], [x_K])
        (gw,) = ad.grad(mu, [wl])
    return w - beta * gw.value, float(mu.value)


def _row(instance_id: str, problem: SyntheticProblem, beta: float, alpha: Optional[float], actual: float,
         predicted: float) -> Dict[str, Any]:
    ratio = actual / predicted if predicted != 0.0 else math.nan
    return {"instance_id": instance_id, "n_x": problem.n_x, "K": problem.K, "beta": beta, "alpha": alpha,
            "delta_f_actual": actual, "delta_f_predicted": predicted, "ratio": ratio, "pass": True}


def _monotone(ratios: Sequence[float]) -> bool:
    errs = [abs(r - 1.0) for r in ratios]
    return all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


@dataclass
class InstanceReport:
    rows: List[Dict[str, Any]]
    passed: bool
    degenerate: bool = False
    monotone: bool = True
    extra: Dict[str, Any] = field(default_factory=dict)

    def _stamp(self) -> "InstanceReport":
        for row in self.rows:
            row["pass"] = self.passed
        return self


def verify_mg_descent(problem: SyntheticProblem, betas: Sequence[float], tolerance: float = 0.01,
                      instance_id: str = "mg-descent-0") -> InstanceReport:
    """MG step w - beta*D g against the predicted -beta * ||g||^2_{G'}.

    Passes when the ratio at the smallest beta is within ``tolerance`` of 1.
    """
    bundle = compute_gram(problem)
    norm_sq = bundle.gram_norm_sq
    rows = []
    for beta in betas:
        actual = delta_f(problem, bundle.x_K, unroll_np(problem, mg_meta_step(bundle, beta)))
        rows.append(_row(instance_id, problem, beta, None, actual, -beta * norm_sq))
    if norm_sq <= GRAM_EPS:
        _LOGGER.warning("%s: degenerate, ||g||^2_G' = %.3e", instance_id, norm_sq)
        return InstanceReport(rows, True, degenerate=True)._stamp()
    ratios = [r["ratio"] for r in rows]
    passed = abs(ratios[-1] - 1.0) <= tolerance and rows[-1]["delta_f_actual"] < 0.0
    return InstanceReport(rows, passed, monotone=_monotone(ratios))._stamp()


def verify_bmg_descent(problem: SyntheticProblem, alpha: float, betas: Sequence[float], tolerance: float = 0.05,
                       instance_id: str = "bmg-descent-0", rng: Optional[np.random.Generator] = None,
                       n_perturb: int = 8) -> InstanceReport:
    """BMG step towards the x - alpha*G'g target.

    delta_f_predicted is the first-order change -beta * <grad_x mu, G'g>,
    which for the squared L2 match equals -(2 beta / alpha) * mu. Targets
    perturbed within a tenth of ||x - target|| must still give descent.
    """
    bundle = compute_gram(problem)
    targets = make_xi_targets(bundle, bundle.x_K, alpha)
    gtg = bundle.Gtg
    grad_mu = 2.0 * (bundle.x_K - targets.alpha_G)
    rows = []
    mu = 0.0
    for beta in betas:
        w_new, mu = bmg_meta_step(problem, bundle.w, targets.alpha_G, beta)
        actual = delta_f(problem, bundle.x_K, unroll_np(problem, w_new))
        rows.append(_row(instance_id, problem, beta, alpha, actual, -beta * float(grad_mu @ gtg)))
    if float(gtg @ gtg) <= GRAM_EPS:
        _LOGGER.warning("%s: degenerate, ||G'g||^2 = %.3e", instance_id, float(gtg @ gtg))
        return InstanceReport(rows, True, degenerate=True)._stamp()

    rng = rng or np.random.default_rng(0)
    radius = 0.1 * float(np.linalg.norm(bundle.x_K - targets.alpha_G))
    beta = betas[-1]
    perturbed_ok = True
    for _ in range(n_perturb):
        direction = rng.standard_normal(problem.n_x)
        step = direction / np.linalg.norm(direction) * radius * rng.uniform()
        w_new, _ = bmg_meta_step(problem, bundle.w, targets.alpha_G + step, beta)
        if delta_f(problem, bundle.x_K, unroll_np(problem, w_new)) >= 0.0:
            perturbed_ok = False
            break
    ratios = [r["ratio"] for r in rows]
    passed = (abs(ratios[-1] - 1.0) <= tolerance and rows[-1]["delta_f_actual"] < 0.0 and perturbed_ok)
    literal = -(betas[-1] / alpha) * mu
    return InstanceReport(rows, passed, monotone=_monotone(ratios),
                          extra={"perturbed_descent": perturbed_ok, "literal_rate": literal})._stamp()


def verify_bmg_dominance(problem: SyntheticProblem, betas: Sequence[float], instance_id: str = "dominance-0",
                         identity: bool = False) -> InstanceReport:
    """BMG with the half-step r-scaled target against plain MG.

    delta_f_actual is the BMG change and delta_f_predicted the MG change at
    the same beta; ratio >= 1 means BMG descended at least as far. On
    identity-Gram instances both must agree to IDENTITY_EPS.
    """
    bundle = compute_gram(problem)
    gtg = bundle.Gtg
    if bundle.degenerate or float(gtg @ gtg) <= GRAM_EPS:
        _LOGGER.warning("%s: degenerate, G'g = 0", instance_id)
        rows = [_row(instance_id, problem, beta, 0.5, math.nan, math.nan) for beta in betas]
        return InstanceReport(rows, True, degenerate=True, extra={"strict_eligible": False})._stamp()

    target = xi_r_target(bundle, bundle.x_K, 0.5)
    rows = []
    for beta in betas:
        mg = delta_f(problem, bundle.x_K, unroll_np(problem, mg_meta_step(bundle, beta)))
        w_new, _ = bmg_meta_step(problem, bundle.w, target, beta)
        bmg = delta_f(problem, bundle.x_K, unroll_np(problem, w_new))
        rows.append(_row(instance_id, problem, beta, 0.5, bmg, mg))
    bmg, mg = rows[-1]["delta_f_actual"], rows[-1]["delta_f_predicted"]
    slack = DOMINANCE_SLACK * abs(mg)
    assert bundle.r is not None
    lhs = bundle.r * float(gtg @ gtg)
    rhs = float(gtg @ bundle.g)
    extra = {
        "strict_eligible": bundle.idempotent_gap > IDEMPOTENT_EPS,
        "strict": bmg < mg - slack,
        "inner_product_ok": lhs >= rhs - 1e-12 * abs(lhs),
        "gap": abs(bmg - mg) / max(abs(mg), 1e-300),
    }
    passed = bmg <= mg + slack and extra["inner_product_ok"]
    if identity:
        passed = passed and extra["gap"] <= IDENTITY_EPS
    return InstanceReport(rows, passed, extra=extra)._stamp()


def quadratic_equivalence_gap(problem: SyntheticProblem) -> float:
    """Relative gap between the MG and half-step L2 BMG meta-gradients."""
    with ad.Graph("equivalence") as graph:
        wl = graph.leaf("w", problem.w0)
        x_K = unroll(problem, wl)
        _, _, err = equivalence_gap([wl], [x_K], lambda it: quadratic_objective(problem, it[0]))
    return err


@dataclass
class TheoryReport:
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]

    @property
    def passed(self) -> bool:
        return (all(r["pass"] for r in self.rows) and bool(self.summary.get("dominance_strict_ok", True))
                and bool(self.summary.get("monotone_ok", True)))


def run_verification(cfg: ExperimentConfig, seed: Optional[int] = None) -> TheoryReport:
    """MG descent, the G'-target BMG rate and the MG-vs-BMG
    comparison over random instances, plus identity-Gram and
    equivalence checks."""
    seed = cfg.seed if seed is None else seed
    betas = list(cfg.theory_beta_grid)
    n_main, n_cor = cfg.theory_instances, cfg.theory_dominance_instances
    seqs = np.random.SeedSequence(seed).spawn(n_main + n_cor + 1)
    rows: List[Dict[str, Any]] = []
    monotone = bmg_monotone = degenerate = 0
    eq_err = dual_err = 0.0
    mg_ok = bmg_ok = 0
    _LOGGER.info("Verifying %d instances (%d for the MG/BMG comparison), betas=%s alpha=%g",
                 n_main, n_cor, betas, cfg.theory_alpha)
    for i in range(n_main):
        rng = np.random.default_rng(seqs[i])
        problem = random_problem(rng, max_dim=cfg.theory_max_dim, max_K=cfg.theory_max_K)
        _LOGGER.debug("instance %d: n_x=%d K=%d cond(A)=%.3e", i, problem.n_x, problem.K,
                      problem.condition_number())
        mgd = verify_mg_descent(problem, betas, cfg.theory_tolerance, f"mg-descent-{i}")
        bmg = verify_bmg_descent(problem, cfg.theory_alpha, betas, cfg.theory_bmg_tolerance, f"bmg-descent-{i}",
                                 rng=rng)
        rows += mgd.rows + bmg.rows
        mg_ok += mgd.passed
        bmg_ok += bmg.passed
        monotone += mgd.monotone
        bmg_monotone += bmg.monotone
        degenerate += mgd.degenerate or bmg.degenerate
        dual_err = max(dual_err, dual_path_error(problem, compute_gram(problem)))
        eq_err = max(eq_err, quadratic_equivalence_gap(problem))

    eligible = strict = cor_ok = 0
    for j in range(n_cor):
        problem = random_problem(np.random.default_rng(seqs[n_main + j]), max_dim=cfg.theory_max_dim,
                                 max_K=cfg.theory_max_K)
        cor = verify_bmg_dominance(problem, betas[-1:], f"dominance-{j}")
        rows += cor.rows
        cor_ok += cor.passed
        if cor.extra.get("strict_eligible"):
            eligible += 1
            strict += bool(cor.extra.get("strict"))

    id_rng = np.random.default_rng(seqs[-1])
    identity_gap = 0.0
    for j in range(5):
        cor = verify_bmg_dominance(identity_gram_problem(id_rng, n_x=int(id_rng.integers(2, 9))), betas[-1:],
                                   f"dominance-identity-{j}", identity=True)
        rows += cor.rows
        identity_gap = max(identity_gap, float(cor.extra.get("gap", 0.0)))

    strict_fraction = strict / eligible if eligible else 1.0
    monotone_fraction = monotone / n_main if n_main else 1.0
    summary = {
        "instances": n_main,
        "dominance_instances": n_cor,
        "mg_descent_passed": mg_ok,
        "bmg_descent_passed": bmg_ok,
        "dominance_passed": cor_ok,
        "degenerate": degenerate,
        "monotone_fraction": monotone_fraction,
        "monotone_ok": monotone_fraction >= MONOTONE_FRACTION,
        "bmg_monotone_fraction": bmg_monotone / n_main if n_main else 1.0,
        "dominance_strict_fraction": strict_fraction,
        "dominance_strict_ok": strict_fraction >= 0.99,
        "identity_max_gap": identity_gap,
        "dual_path_max_error": dual_err,
        "equivalence_max_error": eq_err,
    }
    _LOGGER.info("Verification: MG descent %d/%d, BMG descent %d/%d, dominance %d/%d (strict %.3f), "
                 "equivalence err %.2e", mg_ok, n_main, bmg_ok, n_main, cor_ok, n_cor, strict_fraction, eq_err)
    return TheoryReport(rows, summary)
