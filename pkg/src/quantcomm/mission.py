"""Initialization, round-robin exploration, and offline aggregation.

Randomness
----------
Every random draw comes from a generator keyed by ``(seed, purpose, ...)``
via :class:`numpy.random.SeedSequence`, e.g. sensor noise for robot ``i`` at
its step ``t`` or delivery draws for team step ``k``. The draws for a given
key do not depend on what happened earlier in the run, so two policies
run on one seed see common random numbers wherever their states coincide.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from typing import Any

import numpy as np

from .beliefs import TeammateBelief, on_message_received, on_own_broadcast, sense_teammates
from .field import Cell, GridField, MeasurementSet, SensorModel, rmse, sense_patch, true_quantiles
from .gp import GPHyperparams, GPPosterior, fit
from .network import DeliveryReport, Message, NetworkConfig, broadcast, handshake_outcomes, \
    trace_rows, TRACE_FIELDS
from .objective import ObjectiveConfig, estimate_quantiles, plan_next
from .utility import DecisionPolicy, UtilityMethod, aggregate_expected_utility, \
    evaluate_utilities, p_est

_PURPOSE = {"place": 1, "sense": 2, "deliver": 3, "tie": 4}


def stream(seed: int, purpose: str, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_PURPOSE[purpose], *key)))


class PlacementError(ValueError):
    pass


class MissionError(RuntimeError):
    """A run aborted; ``partial_log`` holds the steps completed so far."""

    def __init__(self, message: str, partial_log: "RunLog"):
        super().__init__(message)
        self.partial_log = partial_log


@dataclass(frozen=True)
class TeamConfig:
    n_robots: int = 4
    budget: int = 10
    spread: float = 0.2
    policy: DecisionPolicy = dc_field(default_factory=DecisionPolicy)
    network: NetworkConfig = dc_field(default_factory=NetworkConfig)
    objective: ObjectiveConfig = dc_field(default_factory=ObjectiveConfig)
    sensor: SensorModel = dc_field(default_factory=SensorModel)
    gp: GPHyperparams = dc_field(default_factory=GPHyperparams)
    seed: int = 0
    # methods whose aggregated utility is computed and logged but never acted on
    probe_methods: tuple[UtilityMethod, ...] = ()

    def __post_init__(self):
        if self.n_robots < 2:
            raise ValueError("a team needs at least two robots")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if not 0.0 < self.spread <= 1.0:
            raise ValueError("spread must lie in (0, 1]")
        object.__setattr__(self, "probe_methods", tuple(UtilityMethod(m) for m in self.probe_methods))

    @property
    def quantiles(self):
        return self.objective.quantiles

    def echo(self) -> dict:
        d = asdict(self)
        d["policy"] = {"method": self.policy.method.value, "threshold": self.policy.threshold}
        d["objective"]["quantiles"] = list(self.quantiles.quantiles)
        d["probe_methods"] = [m.value for m in self.probe_methods]
        return d


class RobotState:
    def __init__(self, rid: int, position: Cell, hp: GPHyperparams, shape):
        self.id = rid
        self.position = tuple(position)
        self.own_data = MeasurementSet.empty()
        self.own_gp: GPPosterior = fit(self.own_data, hp, shape)
        self.beliefs: dict[int, TeammateBelief] = {}
        self.steps_taken = 0

    def absorb(self, readings: MeasurementSet) -> None:
        merged = self.own_data.union(readings)
        if merged is not self.own_data:
            self.own_gp = self.own_gp.extended(readings)
            self.own_data = merged

    def firsthand(self) -> MeasurementSet:
        return self.own_data.filter_robot(self.id)


@dataclass
class StepRecord:
    team_step: int
    robot: int
    robot_step: int
    x: int
    y: int
    action: str
    utility: float
    transmit: bool
    attempted: int
    successful: int
    cum_attempted: int
    cum_successful: int
    rmse: tuple[float, ...]
    # method -> (aggregated U, per-teammate u in ascending teammate id)
    probes: dict[str, tuple[float, tuple[float, ...]]] = dc_field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunLog:
    config: TeamConfig
    true_values: list[float]
    starts: list[Cell] = dc_field(default_factory=list)
    records: list[StepRecord] = dc_field(default_factory=list)
    reports: list[tuple[int, DeliveryReport]] = dc_field(default_factory=list)
    final_estimates: list[float] | None = None
    final_rmse: float | None = None
    robot_final_rmse: list[float] | None = None

    @property
    def cum_attempted(self) -> int:
        return sum(r.attempted for _, r in self.reports)

    @property
    def cum_successful(self) -> int:
        return sum(r.successful for _, r in self.reports)

    def csv_header(self) -> list[str]:
        n = self.config.n_robots
        return (["team_step", "robot", "robot_step", "x", "y", "action", "utility", "transmit",
                 "attempted", "successful", "cum_attempted", "cum_successful"]
                + [f"rmse_r{i}" for i in range(n)]
                + [f"probe_{m.value}_{part}" for m in self.config.probe_methods
                   for part in ["U"] + [f"u{k}" for k in range(n - 1)]])

    def csv_rows(self):
        for r in self.records:
            yield ([_fmt(v) for v in (r.team_step, r.robot, r.robot_step, r.x, r.y, r.action,
                                      r.utility, r.transmit, r.attempted, r.successful,
                                      r.cum_attempted, r.cum_successful)]
                   + [_fmt(v) for v in r.rmse]
                   + [_fmt(v) for m in self.config.probe_methods
                      for v in (r.probes[m.value][0], *r.probes[m.value][1])])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.csv_header())
            w.writerows(self.csv_rows())

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            w.writerows(trace_rows(self.reports))

    def summary(self) -> dict[str, Any]:
        return {
            "seed": self.config.seed,
            "config": self.config.echo(),
            "true_values": self.true_values,
            "final_estimates": self.final_estimates,
            "final_rmse": self.final_rmse,
            "robot_final_rmse": self.robot_final_rmse,
            "attempted": self.cum_attempted,
            "successful": self.cum_successful,
            "n_steps": len(self.records),
            "starts": [list(s) for s in self.starts],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def initialize(cfg: TeamConfig, field: GridField) -> list[RobotState]:
    """Place robots in the centered ``spread``-fraction subrectangle and take a first reading.

    Starting cells are distinct, drawn uniformly without replacement.
    """
    h, w = field.shape
    sw = min(w, max(1, round(cfg.spread * w)))
    sh = min(h, max(1, round(cfg.spread * h)))
    if sw * sh < cfg.n_robots:
        raise PlacementError(f"{sw}x{sh} start region cannot hold {cfg.n_robots} robots")
    x0, y0 = (w - sw) // 2, (h - sh) // 2
    picks = stream(cfg.seed, "place").choice(sw * sh, size=cfg.n_robots, replace=False)
    starts = [(x0 + int(p) % sw, y0 + int(p) // sw) for p in picks]
    team = [RobotState(i, s, cfg.gp, field.shape) for i, s in enumerate(starts)]
    for robot in team:
        robot.beliefs = {j: TeammateBelief(j, starts[j], cfg.gp, field.shape)
                         for j in range(cfg.n_robots) if j != robot.id}
        patch = sense_patch(field, robot.position, cfg.sensor, stream(cfg.seed, "sense", robot.id, 0),
                            robot=robot.id, step=0)
        robot.absorb(patch)
    return team


def _team_step(k: int, team: list[RobotState], field: GridField, cfg: TeamConfig, log: RunLog,
               truth: np.ndarray) -> None:
    n = cfg.n_robots
    robot = team[k % n]
    net = cfg.network
    cs = net.cell_size(field.cell_size_m)
    positions = {r.id: r.position for r in team}
    others = {j: p for j, p in positions.items() if j != robot.id}

    sense_teammates(robot.beliefs, robot.position, others, net.radius, cs)
    tie_rng = stream(cfg.seed, "tie", k) if cfg.objective.random_tiebreak else None
    plan = plan_next(robot.position, robot.own_gp, cfg.objective, cfg.sensor, tie_rng)
    robot.position = plan.destination
    robot.steps_taken += 1
    t = robot.steps_taken
    patch = sense_patch(field, robot.position, cfg.sensor, stream(cfg.seed, "sense", robot.id, t),
                        robot=robot.id, step=t)
    gp_before = robot.own_gp
    robot.absorb(patch)
    msg = Message(robot.id, robot.position, patch, t)

    probs = {j: p_est(b, robot.position, net.dropoff, net.radius, cs) for j, b in robot.beliefs.items()}

    def expected_utility(method):
        u = evaluate_utilities(method, msg, robot.beliefs, gp_before, cfg.objective, cfg.sensor)
        return aggregate_expected_utility(u, probs, n), u

    method = cfg.policy.method
    U = math.nan if method is UtilityMethod.NEVER else expected_utility(method)[0]
    probes = {}
    for m in cfg.probe_methods:
        U_m, u_m = expected_utility(m)
        probes[m.value] = (U_m, tuple(u_m[j] for j in sorted(u_m)))
    transmit = cfg.policy.decide(U)

    deliver_rng = stream(cfg.seed, "deliver", k)
    attempted = successful = 0
    if transmit:
        report = broadcast(msg, robot.position, others, net, deliver_rng, cs)
        log.reports.append((k, report))
        attempted, successful = report.attempted, report.successful
        handshake = handshake_outcomes(report, net)
        for j, belief in robot.beliefs.items():
            on_own_broadcast(belief, msg, robot.position, net.radius, cs,
                             delivered=None if handshake is None else handshake[j])
        for d in report.deliveries:
            if d.success:
                recipient = team[d.recipient]
                on_message_received(recipient.beliefs[robot.id], msg)
                recipient.absorb(msg.body)

    prev = log.records[-1] if log.records else None
    errs = tuple(rmse(estimate_quantiles(r.own_gp, cfg.quantiles), truth) for r in team)
    log.records.append(StepRecord(
        team_step=k, robot=robot.id, robot_step=t, x=robot.position[0], y=robot.position[1],
        action=plan.action, utility=float(U), transmit=transmit,
        attempted=attempted, successful=successful,
        cum_attempted=(prev.cum_attempted if prev else 0) + attempted,
        cum_successful=(prev.cum_successful if prev else 0) + successful,
        rmse=errs, probes=probes,
    ))


def run_exploration(team: list[RobotState], field: GridField, cfg: TeamConfig,
                    log: RunLog | None = None) -> RunLog:
    """Run ``n_robots * budget`` team steps in ascending-id round-robin order."""
    truth = true_quantiles(field, cfg.quantiles)
    if log is None:
        log = RunLog(cfg, truth.tolist(), [r.position for r in team])
    for k in range(cfg.n_robots * cfg.budget):
        try:
            _team_step(k, team, field, cfg, log, truth)
        except Exception as exc:
            raise MissionError(f"team step {k} failed: {exc}", log) from exc
    return log


def aggregate_final(team: list[RobotState], cfg: TeamConfig, field: GridField):
    """Pool every robot's firsthand readings into one GP and estimate the quantiles.

    Returns ``(estimates, rmse)``.
    """
    pooled = MeasurementSet.empty()
    for r in team:
        pooled = pooled.union(r.firsthand())
    gp = fit(pooled, cfg.gp, field.shape)
    est = estimate_quantiles(gp, cfg.quantiles)
    return est, rmse(est, true_quantiles(field, cfg.quantiles))


def run_mission(field: GridField, cfg: TeamConfig) -> RunLog:
    team = initialize(cfg, field)
    log = RunLog(cfg, true_quantiles(field, cfg.quantiles).tolist(), [r.position for r in team])
    run_exploration(team, field, cfg, log)
    try:
        est, err = aggregate_final(team, cfg, field)
    except Exception as exc:
        raise MissionError(f"aggregation failed: {exc}", log) from exc
    log.final_estimates = [float(v) for v in est]
    log.final_rmse = err
    truth = np.asarray(log.true_values)
    log.robot_final_rmse = [rmse(estimate_quantiles(r.own_gp, cfg.quantiles), truth) for r in team]
    return log
