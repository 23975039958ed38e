"""Broadcast packets and peer-table bookkeeping.

Wire layout (all fields little-endian ``uint16``)::

    offset 0   waypoint x
    offset 2   waypoint y
    offset 4+6i      observation i: x
    offset 4+6i+2    observation i: y
    offset 4+6i+4    observation i: value

Coordinates are fixed-point over the arena extent, ``q = round((v - lo) /
(hi - lo) * 65535)``; values likewise over the declared value range.  Sender,
send time and observation times are not on the wire: the receiver supplies the
first two and reconstructs sample times from the sampling rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acquisition import PendingPlan
from .geometry import Box
from .gp import Observation

WAYPOINT_BYTES = 4
OBSERVATION_BYTES = 6
_SCALE = 65535
_WIRE = np.dtype("<u2")
# relative tolerance for float round-off at the range edges
_SLACK = 1e-9


class OutOfRange(ValueError):
    """A coordinate or value falls outside its quantisation range."""


class MalformedPacket(ValueError):
    """Byte string length is not ``4 + 6k``."""


@dataclass(frozen=True)
class Packet:
    sender: int
    waypoint: tuple[float, float]
    observations: tuple[Observation, ...] = ()
    send_time: float = 0.0

    @property
    def size(self) -> int:
        return packet_size(len(self.observations))


def packet_size(n_observations: int) -> int:
    return WAYPOINT_BYTES + OBSERVATION_BYTES * n_observations


def _quantise(values, lo: float, hi: float, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    slack = _SLACK * (hi - lo)
    if v.size and (v.min() < lo - slack or v.max() > hi + slack or not np.all(np.isfinite(v))):
        raise OutOfRange(f"{what} outside [{lo}, {hi}]")
    return np.rint(np.clip((v - lo) / (hi - lo), 0.0, 1.0) * _SCALE).astype(_WIRE)


def _dequantise(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + q.astype(float) / _SCALE * (hi - lo)


def encode(packet: Packet, arena: Box, value_range: tuple[float, float]) -> bytes:
    lo_v, hi_v = value_range
    n = len(packet.observations)
    words = np.empty(2 + 3 * n, dtype=_WIRE)
    words[0] = _quantise(packet.waypoint[0], arena.xmin, arena.xmax, "waypoint x")
    words[1] = _quantise(packet.waypoint[1], arena.ymin, arena.ymax, "waypoint y")
    if n:
        pos = np.array([o.position for o in packet.observations], dtype=float)
        val = np.array([o.value for o in packet.observations], dtype=float)
        body = words[2:].reshape(n, 3)
        body[:, 0] = _quantise(pos[:, 0], arena.xmin, arena.xmax, "observation x")
        body[:, 1] = _quantise(pos[:, 1], arena.ymin, arena.ymax, "observation y")
        body[:, 2] = _quantise(val, lo_v, hi_v, "observation value")
    return words.tobytes()


def decode(
    data: bytes,
    arena: Box,
    value_range: tuple[float, float],
    sender: int = -1,
    send_time: float = 0.0,
    sample_rate: float = 1.0,
) -> Packet:
    """Inverse of :func:`encode`.

    Observation ``i`` of ``n`` is stamped ``send_time - (n - 1 - i) / sample_rate``
    and attributed to ``sender``.
    """
    if len(data) < WAYPOINT_BYTES or (len(data) - WAYPOINT_BYTES) % OBSERVATION_BYTES:
        raise MalformedPacket(f"packet length {len(data)} is not 4 + 6k")
    words = np.frombuffer(data, dtype=_WIRE)
    lo_v, hi_v = value_range
    wx = float(_dequantise(words[0], arena.xmin, arena.xmax))
    wy = float(_dequantise(words[1], arena.ymin, arena.ymax))
    body = words[2:].reshape(-1, 3)
    n = len(body)
    xs = _dequantise(body[:, 0], arena.xmin, arena.xmax)
    ys = _dequantise(body[:, 1], arena.ymin, arena.ymax)
    vs = _dequantise(body[:, 2], lo_v, hi_v)
    obs = tuple(
        Observation((float(x), float(y)), float(v), send_time - (n - 1 - i) / sample_rate, sender)
        for i, (x, y, v) in enumerate(zip(xs, ys, vs))
    )
    return Packet(sender, (wx, wy), obs, send_time)


def receive_information(state, packet: Packet):
    """Merge a peer's packet into ``state`` (an :class:`~bayes_swarm.agent.AgentState`).

    Observations are unioned into the dataset.  The peer's pending segment
    shifts: its previous target becomes the segment start and the new waypoint
    the segment end.  A first packet from a peer gives a zero-length segment.
    """
    if packet.sender == state.robot_id:
        raise ValueError("a robot does not receive its own broadcast")
    state.dataset.extend(packet.observations)
    w = (float(packet.waypoint[0]), float(packet.waypoint[1]))
    prev = state.peer_table.get(packet.sender)
    start = w if prev is None else prev.segment_end
    state.peer_table[packet.sender] = PendingPlan(packet.sender, start, w)
    return state


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off:off + width]
        lines.append(f"{off:08x}  {chunk.hex(' ')}")
    return "\n".join(lines)
