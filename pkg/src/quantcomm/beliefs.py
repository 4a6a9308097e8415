"""A robot's first-order models of its teammates.

Robot ``i`` keeps, for every teammate ``j``, the last location it knows
for ``j`` and the set of readings it believes ``j`` holds. The only
world-state inputs are ``j``'s true position (when within range) and the
messages ``i`` exchanges; nothing private to ``j`` is ever read.
"""
from __future__ import annotations

from typing import Mapping

from .field import Cell, MeasurementSet, cell_distance
from .gp import GPHyperparams, GPPosterior, fit


class RoutingError(ValueError):
    """A message was applied to the belief of a robot that did not send it."""


class TeammateBelief:
    def __init__(self, teammate: int, location: Cell, hp: GPHyperparams, shape: tuple[int, int]):
        self.teammate = teammate
        self.location = tuple(location)
        self.fresh = False
        self.data = MeasurementSet.empty()
        self._hp = hp
        self._shape = shape
        self._gp: GPPosterior | None = None

    def __repr__(self):
        return (f"TeammateBelief(j={self.teammate}, g={self.location}, "
                f"fresh={self.fresh}, |M|={len(self.data)})")

    @property
    def gp(self) -> GPPosterior:
        """GP fit to the believed data; refit only after the data changes."""
        if self._gp is None:
            self._gp = fit(self.data, self._hp, self._shape)
        return self._gp

    def add_data(self, readings: MeasurementSet) -> bool:
        merged = self.data.union(readings)
        if merged is self.data:
            return False
        if self._gp is not None:
            # extend the cached posterior instead of refitting from scratch
            self._gp = self._gp.extended(readings)
        self.data = merged
        return True

    def in_range(self, self_loc: Cell, radius: float, cell_size=(1.0, 1.0)) -> bool:
        """Sensed this step and within ``radius`` of ``self_loc`` (inclusive)."""
        return self.fresh and cell_distance(self_loc, self.location, cell_size) <= radius


def sense_teammates(beliefs: Mapping[int, TeammateBelief], self_loc: Cell,
                    true_positions: Mapping[int, Cell], radius: float, cell_size=(1.0, 1.0)) -> None:
    for j, belief in beliefs.items():
        pos = true_positions[j]
        if cell_distance(self_loc, pos, cell_size) <= radius:
            belief.location = tuple(pos)
            belief.fresh = True
        else:
            belief.fresh = False


def on_message_received(belief: TeammateBelief, msg) -> TeammateBelief:
    if msg.sender != belief.teammate:
        raise RoutingError(f"message from robot {msg.sender} routed to belief about {belief.teammate}")
    belief.location = tuple(msg.location)
    belief.fresh = True
    belief.add_data(msg.body)
    return belief


def on_own_broadcast(belief: TeammateBelief, msg, self_loc: Cell, radius: float,
                     cell_size=(1.0, 1.0), delivered: bool | None = None) -> TeammateBelief:
    """Update the believed data of ``j`` after ``i`` broadcast ``msg``.

    ``delivered`` is the handshake outcome when an oracle handshake is in use;
    otherwise (``None``) receipt is assumed exactly when ``j`` was sensed
    within ``radius`` this step.
    """
    if delivered is None:
        delivered = belief.in_range(self_loc, radius, cell_size)
    if delivered:
        belief.add_data(msg.body)
    return belief
