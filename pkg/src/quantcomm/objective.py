"""Quantile standard-error objective and the greedy one-step planner."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .field import HYPOTHETICAL_ROBOT, Cell, MeasurementSet, QuantileSet, SensorModel, \
    QUARTILES, empirical_quantiles, patch_cells
from .gp import GPPosterior

# Fixed order doubles as the tie-break order.
ACTIONS: tuple[tuple[str, tuple[int, int]], ...] = (
    ("+x", (1, 0)),
    ("-x", (-1, 0)),
    ("+y", (0, 1)),
    ("-y", (0, -1)),
)

DENSITY_FLOOR = 1e-6
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    quantiles: QuantileSet = field(default=QUARTILES)
    variance_weight: float = 1e-4
    random_tiebreak: bool = False

    def __post_init__(self):
        if self.variance_weight < 0:
            raise ValueError("variance_weight must be nonnegative")


def legal_actions(position: Cell, shape: tuple[int, int]) -> list[tuple[str, Cell]]:
    h, w = shape
    out = []
    for name, (dx, dy) in ACTIONS:
        x, y = position[0] + dx, position[1] + dy
        if 0 <= x < w and 0 <= y < h:
            out.append((name, (x, y)))
    return out


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule of thumb, ``0.9 * min(std, IQR / 1.34) * n ** -0.2``."""
    n = len(x)
    std = float(np.std(x, ddof=1))
    q75, q25 = np.quantile(x, [0.75, 0.25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    return 0.9 * spread * n ** -0.2


def gaussian_kde_at(samples: np.ndarray, points: np.ndarray, bandwidth: float) -> np.ndarray:
    if bandwidth <= 0:
        # point mass: infinite at the atom, zero elsewhere
        return np.where(np.isin(points, samples), np.inf, 0.0)
    z = (points[:, None] - samples[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(samples) * bandwidth * math.sqrt(2 * math.pi))


def quantile_standard_error(mean_vector, q: QuantileSet) -> np.ndarray:
    """Asymptotic standard error of each empirical quantile of ``mean_vector``.

    ``sqrt(p (1 - p) / n) / f(v_p)`` with ``f`` a Gaussian KDE (Silverman
    bandwidth) evaluated at the empirical quantile ``v_p``. The density is
    floored at ``DENSITY_FLOOR``.
    """
    x = np.asarray(mean_vector, dtype=float).ravel()
    n = len(x)
    if n < 2:
        raise ValueError("quantile_standard_error needs at least two samples")
    p = q.as_array()
    vp = empirical_quantiles(x, p)
    dens = gaussian_kde_at(x, vp, silverman_bandwidth(x))
    dens = np.maximum(dens, DENSITY_FLOOR)
    return np.sqrt(p * (1 - p) / n) / dens


def estimate_quantiles(gp: GPPosterior, q: QuantileSet) -> np.ndarray:
    return empirical_quantiles(gp.mean(), q.as_array())


def _cached_se(gp: GPPosterior, q: QuantileSet) -> np.ndarray:
    key = ("se", q.quantiles)
    se = gp.cache.get(key)
    if se is None:
        se = quantile_standard_error(gp.mean(), q)
        gp.cache[key] = se
    return se


def objective_f(proposal: MeasurementSet, gp: GPPosterior, cfg: ObjectiveConfig) -> float:
    """Reward of conditioning ``gp`` on ``proposal``.

    L1 change in quantile standard errors (averaged over quantiles) plus the
    weighted pre-update variance summed over the proposed cells.
    """
    if len(proposal) == 0:
        raise ValueError("proposal must be nonempty")
    after = gp.extended(proposal)
    d = float(np.abs(_cached_se(gp, cfg.quantiles) - _cached_se(after, cfg.quantiles)).sum())
    var_term = cfg.variance_weight * float(gp.variance(proposal.cells).sum())
    return d / len(cfg.quantiles) + var_term


def hypothetical_patch(gp: GPPosterior, cells: np.ndarray) -> MeasurementSet:
    """Readings at ``cells`` whose values are the current posterior mean."""
    return MeasurementSet(cells, gp.mean()[cells], HYPOTHETICAL_ROBOT, 0)


class Plan(NamedTuple):
    action: str
    destination: Cell
    cells: np.ndarray
    scores: dict


def pick_best(names: list[str], scores: list[float], rng: np.random.Generator | None = None) -> int:
    """Index of the max score; near-ties go to the earliest name unless ``rng`` is given."""
    best = max(scores)
    tol = TIE_RTOL * max(1.0, abs(best))
    tied = [i for i, s in enumerate(scores) if s >= best - tol]
    if rng is not None and len(tied) > 1:
        return tied[int(rng.integers(len(tied)))]
    return tied[0]


def plan_next(position: Cell, gp: GPPosterior, cfg: ObjectiveConfig, sensor: SensorModel,
              rng: np.random.Generator | None = None) -> Plan:
    """Greedy choice among the legal unit moves from ``position``."""
    options = legal_actions(position, gp.shape)
    if not options:
        raise ValueError(f"no legal action from {position} on grid {gp.shape}")
    names, scores, patches = [], [], []
    for name, dest in options:
        cells = patch_cells(gp.shape, dest, sensor.patch_side)
        scores.append(objective_f(hypothetical_patch(gp, cells), gp, cfg))
        names.append(name)
        patches.append(cells)
    i = pick_best(names, scores, rng if cfg.random_tiebreak else None)
    return Plan(names[i], options[i][1], patches[i], dict(zip(names, scores)))
