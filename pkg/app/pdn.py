"""
Power-Delivery-Network Simulator
================================
Frequency-domain nodal analysis of a W x H lumped RLC mesh.

Model per frequency f (omega = 2 pi f):
- series branch R + j omega L between grid neighbours
- shunt g + j omega C from every node to ground
- placed decoupling capacitors: shunt 1 / (ESR + j omega ESL + 1 / (j omega C))

Port impedances come from Kron reduction (Schur complement onto the probe set).
The DPP reward integrates the probe impedance reduction over a log-spaced band:
    R = sum_f (|Z_init(f)| - |Z_final(f)|) / f * 1e9

Nodes are indexed row-major like the grid cells (index = row * W + col).
"""

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import linregress

from app.errors import InsufficientDataError, InvalidInputError, SingularSystemError
from app.kernel import grid_centers

logger = logging.getLogger(__name__)

# =============================================================================
# Constants
# =============================================================================

# Mesh defaults: resistive, shunt-loss dominated. The per-step attenuation of
# the transfer impedance is then large enough that ln|Z| is close to linear in
# Manhattan distance across an 8x8 mesh.
DEFAULT_R_SEG = 1.0             # ohm
DEFAULT_L_SEG = 10e-12          # H
DEFAULT_C_NODE = 1e-12          # F
DEFAULT_G_NODE = 4.0            # S

DEFAULT_CAP_C = 100e-9          # F
DEFAULT_CAP_ESR = 10e-3         # ohm
DEFAULT_CAP_ESL = 0.1e-9        # H

DEFAULT_F_MIN = 1e8             # Hz
DEFAULT_F_MAX = 2e9             # Hz
DEFAULT_POINTS = 20

REWARD_SCALE = 1e9
PIVOT_RTOL = 1e-13              # smallest |U_ii| / largest |U_ii| accepted from LU


# =============================================================================
# Data Models
# =============================================================================

@dataclass(frozen=True)
class MeshPdnSpec:
    width: int = 8
    height: int = 8
    r_seg: float = DEFAULT_R_SEG
    l_seg: float = DEFAULT_L_SEG
    c_node: float = DEFAULT_C_NODE
    g_node: float = DEFAULT_G_NODE

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.width * self.height < 2:
            raise InvalidInputError(f"mesh {self.width}x{self.height} needs at least two nodes")
        for name in ("r_seg", "l_seg", "c_node", "g_node"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise InvalidInputError(f"{name}={value} must be positive")

    @property
    def n_nodes(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "r_seg": self.r_seg,
            "l_seg": self.l_seg, "c_node": self.c_node, "g_node": self.g_node,
        }


@dataclass(frozen=True)
class CapacitorModel:
    c_val: float = DEFAULT_CAP_C
    esr: float = DEFAULT_CAP_ESR
    esl: float = DEFAULT_CAP_ESL

    def __post_init__(self):
        if not (math.isfinite(self.c_val) and self.c_val > 0.0):
            raise InvalidInputError(f"c_val={self.c_val} must be positive")
        if not (math.isfinite(self.esr) and self.esr >= 0.0):
            raise InvalidInputError(f"esr={self.esr} must be non-negative")
        if not (math.isfinite(self.esl) and self.esl >= 0.0):
            raise InvalidInputError(f"esl={self.esl} must be non-negative")

    def admittance(self, f: float) -> complex:
        omega = 2.0 * math.pi * f
        return 1.0 / complex(self.esr, omega * self.esl - 1.0 / (omega * self.c_val))

    def to_dict(self) -> dict:
        return {"c_val": self.c_val, "esr": self.esr, "esl": self.esl}


@dataclass(frozen=True)
class FrequencyBand:
    f_min: float = DEFAULT_F_MIN
    f_max: float = DEFAULT_F_MAX
    n_points: int = DEFAULT_POINTS
    spacing: str = "log"

    def __post_init__(self):
        if not (0.0 < self.f_min < self.f_max) or not math.isfinite(self.f_max):
            raise InvalidInputError(f"band needs 0 < f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.n_points < 2:
            raise InvalidInputError(f"band needs at least 2 points, got {self.n_points}")
        if self.spacing != "log":
            raise InvalidInputError(f"unsupported spacing {self.spacing!r}")

    def frequencies(self) -> np.ndarray:
        return np.geomspace(self.f_min, self.f_max, self.n_points)

    def geometric_mean(self) -> float:
        return math.sqrt(self.f_min * self.f_max)

    def to_dict(self) -> dict:
        return {"f_min": self.f_min, "f_max": self.f_max,
                "n_points": self.n_points, "spacing": self.spacing}


@dataclass
class DecayFit:
    """ln|Z_tr(i, probe)| = slope * d_M(i, probe) + intercept over all i != probe."""
    frequency: float
    probe: int
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "frequency": self.frequency, "probe": self.probe, "slope": self.slope,
            "intercept": self.intercept, "r_squared": self.r_squared, "n_points": self.n_points,
        }


Placement = Tuple[int, CapacitorModel]


# =============================================================================
# Assembly
# =============================================================================

def _check_node(spec: MeshPdnSpec, node: int, what: str = "node"):
    if not 0 <= node < spec.n_nodes:
        raise InvalidInputError(f"{what} {node} outside a {spec.width}x{spec.height} mesh")


def mesh_edges(spec: MeshPdnSpec) -> np.ndarray:
    """(E, 2) array of neighbour pairs, horizontal edges first."""
    idx = np.arange(spec.n_nodes).reshape(spec.height, spec.width)
    horizontal = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vertical = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.vstack([horizontal, vertical]).astype(int)


def build_admittance(spec: MeshPdnSpec, f: float, placements: Iterable[Placement] = ()) -> np.ndarray:
    """Nodal admittance matrix Y(f); symmetric by construction."""
    if not (math.isfinite(f) and f > 0.0):
        raise InvalidInputError(f"frequency {f} must be positive")
    omega = 2.0 * math.pi * f
    y_series = 1.0 / complex(spec.r_seg, omega * spec.l_seg)
    y_shunt = complex(spec.g_node, omega * spec.c_node)

    n = spec.n_nodes
    y = np.zeros((n, n), dtype=np.complex128)
    edges = mesh_edges(spec)
    if len(edges):
        a, b = edges[:, 0], edges[:, 1]
        y[a, b] = -y_series
        y[b, a] = -y_series
        np.add.at(y, (a, a), y_series)
        np.add.at(y, (b, b), y_series)
    y[np.arange(n), np.arange(n)] += y_shunt

    seen = set()
    for node, cap in placements:
        _check_node(spec, node, "placement node")
        if node in seen:
            raise InvalidInputError(f"duplicate capacitor at node {node}")
        seen.add(node)
        y[node, node] += cap.admittance(f)
    return y


# =============================================================================
# Kron Reduction
# =============================================================================

def _factorize(block: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(block)
    pivots = np.abs(np.diag(lu))
    if pivots.size and (pivots.min() == 0.0 or pivots.min() < PIVOT_RTOL * pivots.max()):
        cond = float(np.linalg.cond(block))
        raise SingularSystemError(
            f"internal block of size {block.shape[0]} is singular (condition number {cond:.3e})",
            condition_number=cond,
        )
    return lu, piv


def _invert(block: np.ndarray) -> np.ndarray:
    lu_piv = _factorize(block)
    return linalg.lu_solve(lu_piv, np.eye(block.shape[0], dtype=block.dtype))


def kron_reduce(y: np.ndarray, probe_nodes: Sequence[int]) -> np.ndarray:
    """Port impedance matrix Z = (Y_pp - Y_pc Y_cc^-1 Y_cp)^-1 on the probe set (in given order)."""
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise InvalidInputError(f"admittance must be square, got {y.shape}")
    ports = [int(p) for p in probe_nodes]
    if not ports:
        raise InvalidInputError("probe set is empty")
    if len(set(ports)) != len(ports) or min(ports) < 0 or max(ports) >= y.shape[0]:
        raise InvalidInputError(f"probe nodes {ports} invalid for {y.shape[0]} nodes")
    internal = np.setdiff1d(np.arange(y.shape[0]), ports)
    y_pp = y[np.ix_(ports, ports)]
    if internal.size == 0:
        return _invert(y_pp)
    lu_piv = _factorize(y[np.ix_(internal, internal)])
    schur = y_pp - y[np.ix_(ports, internal)] @ linalg.lu_solve(lu_piv, y[np.ix_(internal, ports)])
    logger.debug("[Kron] eliminated %d internal nodes onto %d ports", internal.size, len(ports))
    return _invert(schur)


def transfer_impedance(spec: MeshPdnSpec, f: float, source: int, probe: int,
                       placements: Iterable[Placement] = ()) -> complex:
    """Z_tr(probe, source) = (Y^-1)[probe, source]; exactly symmetric in (source, probe)."""
    _check_node(spec, source, "source")
    _check_node(spec, probe, "probe")
    y = build_admittance(spec, f, placements)
    if source == probe:
        return complex(kron_reduce(y, [source])[0, 0])
    ports = sorted((source, probe))
    z = kron_reduce(y, ports)
    return complex((z[0, 1] + z[1, 0]) / 2.0)


def impedance_profile(spec: MeshPdnSpec, f: float, probe: int,
                      placements: Iterable[Placement] = ()) -> np.ndarray:
    """Transfer impedance from every node to the probe: column `probe` of Y^-1, one LU solve."""
    _check_node(spec, probe, "probe")
    y = build_admittance(spec, f, placements)
    rhs = np.zeros(spec.n_nodes, dtype=np.complex128)
    rhs[probe] = 1.0
    return linalg.lu_solve(_factorize(y), rhs)


# =============================================================================
# DPP Reward
# =============================================================================

def probe_impedance(spec: MeshPdnSpec, f: float, probe: int,
                    placements: Iterable[Placement] = ()) -> complex:
    y = build_admittance(spec, f, placements)
    return complex(kron_reduce(y, [probe])[0, 0])


@lru_cache(maxsize=256)
def _bare_probe_magnitudes(spec: MeshPdnSpec, band: FrequencyBand, probe: int) -> Tuple[float, ...]:
    return tuple(abs(probe_impedance(spec, f, probe)) for f in band.frequencies())


def dpp_reward(spec: MeshPdnSpec, placements: Iterable[int], band: FrequencyBand, probe: int,
               cap: CapacitorModel = CapacitorModel()) -> float:
    """Frequency-weighted probe impedance reduction of a capacitor set; 0 for no capacitors."""
    _check_node(spec, probe, "probe")
    cells = sorted(int(c) for c in placements)
    if not cells:
        return 0.0
    if probe in cells:
        raise InvalidInputError(f"capacitor placed on the probe node {probe}")
    bare = _bare_probe_magnitudes(spec, band, probe)
    total = 0.0
    for f, z_init in zip(band.frequencies(), bare):
        z_final = abs(probe_impedance(spec, f, probe, [(c, cap) for c in cells]))
        total += (z_init - z_final) / f * REWARD_SCALE
    return float(total)


# =============================================================================
# Decay Law
# =============================================================================

def manhattan_to(spec: MeshPdnSpec, node: int) -> np.ndarray:
    """Normalized Manhattan distance from every node to `node`."""
    centers = grid_centers(spec.width, spec.height)
    return np.abs(centers[:, 0] - centers[node, 0]) + np.abs(centers[:, 1] - centers[node, 1])


def fit_decay(spec: MeshPdnSpec, f: float, probe: int) -> DecayFit:
    """OLS of ln|Z_tr(i, probe)| on d_M(i, probe); the slope estimates -alpha at f."""
    if spec.width < 4 or spec.height < 4:
        raise InsufficientDataError(
            f"decay fit needs a mesh of at least 4x4, got {spec.width}x{spec.height}"
        )
    z = impedance_profile(spec, f, probe)
    distance = manhattan_to(spec, probe)
    mask = np.arange(spec.n_nodes) != probe
    fit = linregress(distance[mask], np.log(np.abs(z[mask])))
    return DecayFit(
        frequency=float(f), probe=int(probe), slope=float(fit.slope),
        intercept=float(fit.intercept), r_squared=float(fit.rvalue ** 2),
        n_points=int(mask.sum()),
    )


def decay_sweep(spec: MeshPdnSpec, band: FrequencyBand, probe: int) -> List[DecayFit]:
    return [fit_decay(spec, f, probe) for f in band.frequencies()]
