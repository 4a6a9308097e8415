"""Message utility methods and the send/don't-send decision.

Utilities are plain floats; ``INFINITE`` (``math.inf``) is the "must send"
value used when the sender believes a teammate has no data yet, or when a
message would change the teammate's next move.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .beliefs import TeammateBelief
from .field import Cell, SensorModel, cell_distance, empirical_quantiles
from .gp import GPPosterior
from .network import Message, p_success
from .objective import ObjectiveConfig, objective_f, plan_next

INFINITE = math.inf

# Published threshold defaults; recalibrate with `quantcomm calibrate` for new fields.
T_REWARD = 2.8e-4
T_EGO = 8.3e-5


class UtilityMethod(str, enum.Enum):
    REWARD = "reward"
    ACTION = "action"
    EGO_REWARD = "ego_reward"
    ALWAYS = "always"
    NEVER = "never"

    @property
    def threshold_family(self) -> str | None:
        """Calibration family: Reward and Action share one threshold."""
        return {UtilityMethod.REWARD: "reward", UtilityMethod.ACTION: "reward",
                UtilityMethod.EGO_REWARD: "ego"}.get(self)


DEFAULT_THRESHOLDS = {"reward": T_REWARD, "ego": T_EGO}


@dataclass(frozen=True)
class DecisionPolicy:
    method: UtilityMethod = UtilityMethod.ACTION
    threshold: float = T_REWARD

    def __post_init__(self):
        object.__setattr__(self, "method", UtilityMethod(self.method))
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")
        if self.method is UtilityMethod.NEVER and self.threshold <= 0:
            # U = 0 >= T = 0 would send every message
            raise ValueError("the Never method requires a positive threshold")

    @classmethod
    def for_method(cls, method, thresholds: Mapping[str, float] | None = None) -> "DecisionPolicy":
        method = UtilityMethod(method)
        thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
        family = method.threshold_family
        return cls(method, thresholds[family] if family else T_REWARD)

    def decide(self, U: float) -> bool:
        if self.method is UtilityMethod.NEVER:
            return False
        return decide_transmit(U, self.threshold)


def utility_reward(msg: Message, belief: TeammateBelief, cfg: ObjectiveConfig) -> float:
    if len(belief.data) == 0:
        return INFINITE
    return objective_f(msg.body, belief.gp, cfg)


def utility_action(msg: Message, belief: TeammateBelief, cfg: ObjectiveConfig,
                   sensor: SensorModel) -> float:
    """Infinite when the message would change teammate ``j``'s next move."""
    if len(belief.data) == 0:
        return INFINITE
    gp_j = belief.gp
    without = plan_next(belief.location, gp_j, cfg, sensor)
    with_msg = plan_next(belief.location, gp_j.extended(msg.body), cfg, sensor)
    if without.action != with_msg.action:
        return INFINITE
    return objective_f(msg.body, gp_j, cfg)


def utility_ego(msg: Message, ego_gp_before: GPPosterior, cfg: ObjectiveConfig) -> float:
    return objective_f(msg.body, ego_gp_before, cfg)


def utility_constant(method) -> float:
    method = UtilityMethod(method)
    if method is UtilityMethod.ALWAYS:
        return INFINITE
    if method is UtilityMethod.NEVER:
        return 0.0
    raise ValueError(f"{method.value} is not a constant method")


def p_est(belief: TeammateBelief, self_loc: Cell, dropoff: float, radius: float,
          cell_size=(1.0, 1.0)) -> float:
    """Delivery probability estimate; teammates out of sight are assumed at ``radius``."""
    if belief.in_range(self_loc, radius, cell_size):
        return p_success(cell_distance(self_loc, belief.location, cell_size), dropoff, radius)
    return p_success(radius, dropoff, radius)


def aggregate_expected_utility(utilities: Mapping[int, float], probs: Mapping[int, float],
                               n_robots: int) -> float:
    if len(utilities) != n_robots - 1 or set(utilities) != set(probs):
        raise ValueError(
            f"need utilities and probabilities for all {n_robots - 1} teammates, "
            f"got {sorted(utilities)} / {sorted(probs)}")
    if any(math.isinf(u) for u in utilities.values()):
        return INFINITE
    return sum(probs[j] * utilities[j] for j in sorted(utilities)) / (n_robots - 1)


def decide_transmit(U: float, threshold: float) -> bool:
    return math.isinf(U) or U >= threshold


def calibrate_threshold(samples, percentile: float = 0.25) -> float:
    """Empirical ``percentile`` of the finite utility samples."""
    x = np.asarray(list(samples), dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 20:
        raise ValueError(f"calibration needs at least 20 finite samples, got {len(x)}")
    if not 0.0 <= percentile <= 1.0:
        raise ValueError("percentile must lie in [0, 1]")
    return float(empirical_quantiles(x, percentile))


def evaluate_utilities(method: UtilityMethod, msg: Message, beliefs: Mapping[int, TeammateBelief],
                       ego_gp_before: GPPosterior, cfg: ObjectiveConfig,
                       sensor: SensorModel) -> dict[int, float]:
    """Per-teammate utility of ``msg`` under ``method``."""
    method = UtilityMethod(method)
    if method in (UtilityMethod.ALWAYS, UtilityMethod.NEVER):
        u = utility_constant(method)
        return {j: u for j in beliefs}
    if method is UtilityMethod.EGO_REWARD:
        u = utility_ego(msg, ego_gp_before, cfg)
        return {j: u for j in beliefs}
    if method is UtilityMethod.REWARD:
        return {j: utility_reward(msg, b, cfg) for j, b in beliefs.items()}
    return {j: utility_action(msg, b, cfg, sensor) for j, b in beliefs.items()}
