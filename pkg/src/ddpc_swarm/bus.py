"""In-process message layer implementing the one-step communication delay.

A packet published in round ``r`` becomes readable in round ``r + 1`` and
only then.  Reads for round ``r`` must find exactly one round ``r - 1``
packet from every peer; anything else is a protocol violation.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ProtocolViolation


@dataclass(frozen=True)
class NeighborPacket:
    agent_id: int
    round_index: int
    u_ini: np.ndarray
    y_ini: np.ndarray
    u_opt: np.ndarray

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.u_ini, self.y_ini, self.u_opt))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def context(self) -> np.ndarray:
        """Contiguous ``[u_ini; y_ini; u_opt]``."""
        return np.concatenate([self.u_ini, self.y_ini, self.u_opt])


class PacketBus:
    """Double-buffered packet store.

    ``publish`` writes into the pending buffer for the current round;
    ``advance`` swaps it into the readable buffer atomically.  ``collect``
    only ever reads the readable buffer, so a packet can never be consumed in
    the round it was published.

    Args:
        agent_dims: ``(m_i, p_i)`` per agent, used to validate packet sizes.
        T_ini, N: Window and horizon lengths.
        bootstrap: Callable ``agent_id -> NeighborPacket`` used for round-0
            reads (round ``-1`` packets do not exist).
        delivery_order: Optional callable permuting the list of pending
            packets before they are stored; lets tests inject arrival
            interleavings.
        timeout: Seconds ``collect`` waits for missing packets before failing
            (only meaningful when publishers run in other threads).
    """

    def __init__(self, agent_dims, T_ini: int, N: int,
                 bootstrap: Callable[[int], NeighborPacket] | None = None,
                 delivery_order: Callable[[list], list] | None = None,
                 timeout: float = 0.0, trace_path: str | Path | None = None):
        self.agent_dims = [tuple(d) for d in agent_dims]
        self.T_ini, self.N = T_ini, N
        self.bootstrap = bootstrap
        self.delivery_order = delivery_order
        self.timeout = timeout
        self.round = 0
        self._pending: list[NeighborPacket] = []
        self._readable: dict[int, NeighborPacket] = {}
        self._readable_round = -1
        self._last_round = {a: -1 for a in range(len(self.agent_dims))}
        self._cond = threading.Condition()
        self.consumed: list[tuple[int, int, int, int]] = []
        self.trace_path = Path(trace_path) if trace_path else None
        if self.trace_path:
            self.trace_path.write_text("")

    @property
    def n_agents(self) -> int:
        return len(self.agent_dims)

    def _check(self, packet: NeighborPacket):
        m, p = self.agent_dims[packet.agent_id]
        if (packet.u_ini.size != m * self.T_ini or packet.y_ini.size != p * self.T_ini
                or packet.u_opt.size != m * self.N):
            raise ProtocolViolation(f"packet from agent {packet.agent_id} has wrong dimensions")

    def publish(self, packet: NeighborPacket) -> bool:
        with self._cond:
            if packet.round_index != self.round:
                raise ProtocolViolation(
                    f"agent {packet.agent_id} published for round {packet.round_index} "
                    f"during round {self.round}")
            if packet.round_index <= self._last_round[packet.agent_id]:
                raise ProtocolViolation(
                    f"duplicate publish by agent {packet.agent_id} for round {packet.round_index}")
            self._check(packet)
            self._last_round[packet.agent_id] = packet.round_index
            self._pending.append(packet)
            if self.trace_path:
                with self.trace_path.open("a") as fh:
                    fh.write(json.dumps({"round": packet.round_index, "agent": packet.agent_id,
                                         "bytes": len(packet.to_bytes()),
                                         "digest": packet.digest()}) + "\n")
            return True

    def advance(self):
        """Close the current round and expose its packets to the next one."""
        with self._cond:
            pending = list(self._pending)
            if self.delivery_order is not None:
                pending = list(self.delivery_order(pending))
            readable = {}
            for pkt in pending:
                readable[pkt.agent_id] = pkt
            self._readable = readable
            self._readable_round = self.round
            self._pending = []
            self.round += 1
            self._cond.notify_all()

    def collect(self, agent_id: int, round_index: int) -> dict[int, NeighborPacket]:
        """Peer packets from ``round_index - 1`` keyed by publisher id."""
        peers = [a for a in range(self.n_agents) if a != agent_id]
        if round_index == 0:
            if self.bootstrap is None:
                raise ProtocolViolation("round 0 read without a bootstrap source")
            out = {a: self.bootstrap(a) for a in peers}
            self._record(agent_id, round_index, out)
            return out
        if round_index < 0:
            raise ProtocolViolation("round index must be non-negative")
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._readable_round >= round_index - 1, timeout=self.timeout)
            if not ok or self._readable_round != round_index - 1:
                raise ProtocolViolation(
                    f"agent {agent_id} asked for round {round_index - 1} packets but the "
                    f"readable buffer holds round {self._readable_round}")
            missing = [a for a in peers if a not in self._readable]
            if missing:
                raise ProtocolViolation(
                    f"missing round {round_index - 1} packets from agents {missing}")
            out = {a: self._readable[a] for a in peers}
        for a, pkt in out.items():
            if pkt.round_index != round_index - 1:
                raise ProtocolViolation(
                    f"packet from agent {a} has round {pkt.round_index}, "
                    f"expected {round_index - 1}")
        self._record(agent_id, round_index, out)
        return out

    def _record(self, agent_id, round_index, packets):
        for a, pkt in packets.items():
            self.consumed.append((round_index, agent_id, a, pkt.round_index))

    def violations(self) -> list[tuple[int, int, int, int]]:
        """Consumption records whose packet round is not ``round - 1``."""
        return [c for c in self.consumed if c[3] != c[0] - 1]
