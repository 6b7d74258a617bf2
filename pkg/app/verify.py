"""
Verification Suites
===================
Self-checks a build runs on itself. Each suite returns a SuiteReport of
named checks with the measured value and its threshold; nothing here raises
on a failed check.

Suites:
- attn: fast mechanisms against their dense oracles, the alpha -> 0 collapse
- grad: taped PSLA head gradients against central differences
- pbrs: telescoping, gamma = 1 collapse, Q' = Q - Phi identity, Taylor gap, beta schedule
- pdn:  Kron reduction against the full inverse, 2-node closed form, decay law
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from app.attention import (
    AttentionBatch,
    BiasMode,
    HeadConfig,
    dense_psla_reference,
    linear_attention,
    psla_rank1,
    psla_symmetric_1d,
    psla_symmetric_grid,
)
from app.autodiff import check_psla_head
from app.config import GenerationSettings
from app.dpp import DppInstance, generate_instance
from app.kernel import DecayParams, grid_centers
from app.pdn import FrequencyBand, MeshPdnSpec, build_admittance, fit_decay, kron_reduce
from app.rl import PolicyParams, sample_trajectory
from app.shaping import (
    BetaSchedule,
    Net,
    PotentialKind,
    PotentialSpec,
    beta_at,
    conn_hpwl_gap,
    gamma_one_collapse_gap,
    shaped_q_check,
    telescoping_residual,
)

logger = logging.getLogger(__name__)

ORACLE_LENGTHS = (1, 2, 7, 64, 256)
ORACLE_DIMS = (1, 4, 8)


# =============================================================================
# Reports
# =============================================================================

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "value": self.value,
                "threshold": self.threshold, "detail": self.detail}


@dataclass
class SuiteReport:
    suite: str
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, threshold: float, detail: str = "",
            at_least: bool = False) -> CheckResult:
        ok = value >= threshold if at_least else value <= threshold
        check = CheckResult(name, bool(ok), float(value), float(threshold), detail)
        self.checks.append(check)
        if not ok:
            logger.warning("[Verify] %s/%s failed: %.3e vs %.3e", self.suite, name, value, threshold)
        return check

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


# =============================================================================
# Attention
# =============================================================================

def _random_batch(rng: np.random.Generator, L: int, d: int, positions: np.ndarray) -> AttentionBatch:
    return AttentionBatch(rng.normal(size=(L, d)), rng.normal(size=(L, d)),
                          rng.normal(size=(L, d)), positions)


def _row_positions(rng: np.random.Generator, L: int) -> np.ndarray:
    xs = np.sort(rng.uniform(0.0, 1.0, size=L))
    return np.stack([xs, np.full(L, 0.5)], axis=1)


def verify_attention(seed: int = 0, cases: int = 100) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport("attn")
    worst: Dict[str, float] = {"linear": 0.0, "psla_rank1": 0.0, "causal": 0.0,
                               "symmetric_1d": 0.0, "symmetric_grid": 0.0}
    for L in ORACLE_LENGTHS:
        grid = (L, 1) if L < 64 else (int(np.sqrt(L)), int(np.sqrt(L)))
        for d in ORACLE_DIMS:
            for _ in range(cases):
                head = HeadConfig(decay=DecayParams(float(rng.normal()), float(rng.normal())))
                batch = _random_batch(rng, L, d, rng.uniform(0.0, 1.0, size=(L, 2)))
                worst["linear"] = max(worst["linear"], float(np.max(np.abs(
                    linear_attention(batch, head.feature_map)
                    - dense_psla_reference(batch, HeadConfig(), BiasMode.NONE)))))
                worst["psla_rank1"] = max(worst["psla_rank1"], float(np.max(np.abs(
                    psla_rank1(batch, head) - dense_psla_reference(batch, head)))))
                worst["causal"] = max(worst["causal"], float(np.max(np.abs(
                    psla_rank1(batch, head, causal=True)
                    - dense_psla_reference(batch, head, causal=True)))))
                row = AttentionBatch(batch.q, batch.k, batch.v, _row_positions(rng, L))
                worst["symmetric_1d"] = max(worst["symmetric_1d"], float(np.max(np.abs(
                    psla_symmetric_1d(row, head)
                    - dense_psla_reference(row, head, BiasMode.SYMMETRIC)))))
                on_grid = AttentionBatch(batch.q, batch.k, batch.v, grid_centers(*grid))
                worst["symmetric_grid"] = max(worst["symmetric_grid"], float(np.max(np.abs(
                    psla_symmetric_grid(on_grid, head, grid)
                    - dense_psla_reference(on_grid, head, BiasMode.SYMMETRIC)))))
    for name, value in worst.items():
        report.add(f"{name}_vs_dense", value, 1e-9)

    excess = 0.0
    for _ in range(50):
        L = int(rng.integers(1, 65))
        head = HeadConfig(decay=DecayParams(float(rng.normal()), float(rng.normal())))
        batch = _random_batch(rng, L, 3, grid_centers(L, 1))
        low, high = batch.v.min(axis=0), batch.v.max(axis=0)
        for out in (linear_attention(batch), psla_rank1(batch, head),
                    psla_rank1(batch, head, causal=True), psla_symmetric_1d(batch, head)):
            excess = max(excess, float(np.max(out - high)), float(np.max(low - out)))
    report.add("convex_hull_of_values", excess, 1e-12)

    collapse = 0.0
    zero_decay = HeadConfig(decay=DecayParams(-1000.0, -1000.0, alpha_min=0.0, alpha_max=0.6))
    for _ in range(50):
        L = int(rng.integers(1, 65))
        batch = _random_batch(rng, L, 4, rng.uniform(0.0, 1.0, size=(L, 2)))
        collapse = max(collapse, float(np.max(np.abs(
            psla_rank1(batch, zero_decay) - linear_attention(batch)))))
    report.add("zero_decay_collapse", collapse, 1e-12)
    return report


# =============================================================================
# Gradients
# =============================================================================

def verify_gradients(seed: int = 0) -> SuiteReport:
    report = SuiteReport("grad")
    for L in (2, 5, 16):
        for d in (2, 8):
            for gated in (False, True):
                for normalized in (False, True):
                    grad = check_psla_head(L, d, gated, normalized, seed=seed + L * 100 + d)
                    tag = f"L{L}_d{d}{'_gate' if gated else ''}{'_norm' if normalized else ''}"
                    report.add(tag, grad.worst_relative_error, grad.tolerance,
                               detail=",".join(grad.failures()))
    return report


# =============================================================================
# Shaping
# =============================================================================

def _small_instance(width: int, height: int, k: int, seed: int) -> DppInstance:
    cfg = GenerationSettings(width=width, height=height, k_caps=k, keep_out_fraction=0.0)
    return generate_instance(cfg, seed, band=FrequencyBand(n_points=5))


def verify_shaping(seed: int = 0, trajectories: int = 1000) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport("pbrs")

    short = _small_instance(4, 4, 3, seed)
    long = _small_instance(6, 6, 25, seed + 1)
    policy_short = PolicyParams.uniform(short.n_cells)
    policy_long = PolicyParams.uniform(long.n_cells)
    long_traj = sample_trajectory(policy_long, long, rng)
    worst = {0.9: 0.0, 0.99: 0.0, 1.0: 0.0}
    collapse = 0.0
    for i in range(trajectories):
        traj = long_traj if i % 10 == 0 else sample_trajectory(policy_short, short, rng)
        phis = rng.uniform(-1.0, 1.0, size=len(traj.states))
        for gamma in worst:
            worst[gamma] = max(worst[gamma], abs(telescoping_residual(traj, phis, gamma)))
        collapse = max(collapse, gamma_one_collapse_gap(traj, phis, float(rng.uniform(0.0, 1.0))))
    for gamma, value in worst.items():
        report.add(f"telescoping_gamma_{gamma}", value, 1e-12)
    report.add("gamma_one_collapse", collapse, 1e-12)

    spec = PotentialSpec(PotentialKind.DPP, alpha=1.5, lam=0.5, terminal_zeroed=True)
    for width, height in ((3, 3), (4, 4)):
        inst = _small_instance(width, height, 2, seed)
        result = shaped_q_check(inst, spec, gamma=0.9, beta=1.0)
        report.add(f"q_identity_{width}x{height}", result.max_deviation, 1e-10)
        report.add(f"greedy_agreement_{width}x{height}", float(result.greedy_agreement), 1.0,
                   at_least=True)

    positions = grid_centers(10, 10)
    worst_excess = -np.inf
    for _ in range(100):
        a, b = (int(c) for c in rng.choice(100, size=2, replace=False))
        d = abs(positions[a] - positions[b]).sum()
        alpha = float(rng.uniform(0.05, 1.0 / d))
        net_spec = PotentialSpec(PotentialKind.CONNECTIVITY, alpha=alpha,
                                 nets=(Net(float(rng.uniform(0.5, 2.0)), (a, b)),))
        gap, bound = conn_hpwl_gap(positions, (a, b), net_spec)
        worst_excess = max(worst_excess, gap - bound)
    report.add("taylor_gap_within_bound", worst_excess, 0.0)
    same = PotentialSpec(PotentialKind.CONNECTIVITY, alpha=0.5, nets=(Net(1.0, (7, 7)),))
    report.add("taylor_gap_zero_distance", conn_hpwl_gap(positions, (7,), same)[0], 0.0)

    sched = BetaSchedule(beta_init=1.0, beta_min=0.0, t_anneal=200)
    betas = [beta_at(sched, t) for t in range(0, 401)]
    endpoint_error = abs(betas[0] - 1.0) + abs(betas[200] - 0.0)
    report.add("beta_endpoints", endpoint_error, 0.0)
    report.add("beta_midpoint", abs(betas[100] - 0.5), 1e-15)
    report.add("beta_monotone", float(max(np.diff(betas))), 0.0)
    return report


# =============================================================================
# PDN
# =============================================================================

def verify_pdn(seed: int = 0) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport("pdn")

    worst = 0.0
    for n in (5, 20, 50, 100):
        for _ in range(5):
            a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
            y = a + a.T + n * np.eye(n)
            ports = sorted(int(p) for p in rng.choice(n, size=int(rng.integers(1, min(n, 6) + 1)),
                                                      replace=False))
            full = np.linalg.inv(y)[np.ix_(ports, ports)]
            worst = max(worst, float(np.max(np.abs(kron_reduce(y, ports) - full)) / np.max(np.abs(full))))
    report.add("kron_vs_full_inverse", worst, 1e-10)

    y0, y1, g = 0.3 + 0.1j, 0.2 - 0.05j, 1.5 + 0.4j
    y = np.array([[y0 + g, -g], [-g, y1 + g]])
    closed = 1.0 / (y0 + g - g * g / (y1 + g))
    report.add("two_node_closed_form", abs(kron_reduce(y, [0])[0, 0] - closed) / abs(closed), 1e-12)

    spec = MeshPdnSpec(width=8, height=8)
    f = FrequencyBand().geometric_mean()
    center = fit_decay(spec, f, probe=3 * 8 + 3)
    report.add("decay_slope_negative", center.slope, 0.0)
    report.add("decay_r_squared", center.r_squared, 0.9, at_least=True)

    mesh = build_admittance(spec, f)
    report.add("reciprocity", float(np.max(np.abs(mesh - mesh.T))), 0.0)
    return report


# =============================================================================
# Dispatch
# =============================================================================

SUITES: Dict[str, Callable[..., SuiteReport]] = {
    "attn": verify_attention,
    "grad": verify_gradients,
    "pbrs": verify_shaping,
    "pdn": verify_pdn,
}


def run_suite(name: str, seed: int = 0) -> List[SuiteReport]:
    """One suite by name, or every suite for "all"."""
    names = list(SUITES) if name == "all" else [name]
    reports = []
    for suite in names:
        logger.info("[Verify] running %s", suite)
        reports.append(SUITES[suite](seed=seed))
    return reports
