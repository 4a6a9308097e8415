"""Lossy broadcast medium with a distance-dependent sigmoid channel."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .field import Cell, MeasurementSet, cell_distance


@dataclass(frozen=True)
class NetworkConfig:
    """Channel parameters.

    ``units="meters"`` scales cell offsets by the field's cell size before
    comparing to ``radius``; ``units="cells"`` uses raw cell offsets.
    """

    dropoff: float = 0.4
    radius: float = 15.0
    oracle_handshake: bool = False
    units: str = "meters"

    def __post_init__(self):
        if self.dropoff <= 0 or self.radius <= 0:
            raise ValueError("dropoff and radius must be positive")
        if self.units not in ("meters", "cells"):
            raise ValueError(f"units must be 'meters' or 'cells', got {self.units!r}")

    def cell_size(self, field_cell_size) -> tuple[float, float]:
        return tuple(field_cell_size) if self.units == "meters" else (1.0, 1.0)


@dataclass(frozen=True, eq=False)
class Message:
    sender: int
    location: Cell
    body: MeasurementSet
    step: int

    def __post_init__(self):
        if len(self.body) and (np.any(self.body.robots != self.sender)
                               or np.any(self.body.steps != self.step)):
            raise ValueError("message body must carry only the sender's readings for this step")


@dataclass(frozen=True)
class Delivery:
    recipient: int
    attempted: bool
    success: bool
    distance: float
    probability: float


@dataclass(frozen=True)
class DeliveryReport:
    sender: int
    step: int
    deliveries: tuple[Delivery, ...]

    @property
    def attempted(self) -> int:
        return sum(d.attempted for d in self.deliveries)

    @property
    def successful(self) -> int:
        return sum(d.success for d in self.deliveries)

    def successes(self) -> dict[int, bool]:
        return {d.recipient: d.success for d in self.deliveries}


def p_success(distance: float, dropoff: float, radius: float) -> float:
    """Sigmoid delivery probability ``1 / (1 + exp(dropoff * (distance - radius)))``."""
    z = dropoff * (distance - radius)
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def broadcast(msg: Message, sender_loc: Cell, recipient_locs: Mapping[int, Cell],
              cfg: NetworkConfig, rng: np.random.Generator,
              cell_size=(1.0, 1.0)) -> DeliveryReport:
    """One independent Bernoulli delivery per recipient, drawn in ascending id order."""
    if msg.sender in recipient_locs:
        raise ValueError("recipients must exclude the sender")
    ids = sorted(recipient_locs)
    draws = rng.random(len(ids))
    out = []
    for j, u in zip(ids, draws):
        dist = cell_distance(sender_loc, recipient_locs[j], cell_size)
        p = p_success(dist, cfg.dropoff, cfg.radius)
        out.append(Delivery(j, True, bool(u < p), dist, p))
    return DeliveryReport(msg.sender, msg.step, tuple(out))


def handshake_outcomes(report: DeliveryReport, cfg: NetworkConfig) -> dict[int, bool] | None:
    """Per-recipient confirmation, available only under the oracle handshake."""
    if not cfg.oracle_handshake:
        return None
    return report.successes()


TRACE_FIELDS = ("step", "sender", "recipient", "distance", "p", "attempted", "success")


def trace_rows(reports: Iterable[tuple[int, DeliveryReport]]):
    for team_step, rep in reports:
        for d in rep.deliveries:
            yield (team_step, rep.sender, d.recipient, repr(d.distance), repr(d.probability),
                   int(d.attempted), int(d.success))


def write_delivery_trace(reports: Iterable[tuple[int, DeliveryReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        w.writerows(trace_rows(reports))
