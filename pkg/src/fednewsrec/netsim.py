"""In-process message bus with exact byte accounting and scripted dropouts."""

from __future__ import annotations

import csv
import json
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError
from .wire import decode_frame, encode_frame

SERVER = 0

# Round script order. A client that drops at phase P is silent from P onward
# for the rest of that round.
PHASES = (
    "union.keys",
    "union.shares",
    "union.masked",
    "union.unmask",
    "distribute",
    "upload.keys",
    "upload.shares",
    "upload.masked",
    "upload.unmask",
)
_PHASE_RANK = {p: i for i, p in enumerate(PHASES)}


def phase_rank(phase: str) -> int:
    try:
        return _PHASE_RANK[phase]
    except KeyError:
        raise ProtocolError(f"unknown phase {phase!r}") from None


@dataclass
class FaultPlan:
    """``drops[round][party] = phase`` at which that party goes silent."""

    drops: dict[int, dict[int, str]] = field(default_factory=dict)

    def add(self, round_index: int, party: int, phase: str) -> "FaultPlan":
        phase_rank(phase)
        self.drops.setdefault(round_index, {})[party] = phase
        return self

    def drop_phase(self, round_index: int, party: int) -> str | None:
        return self.drops.get(round_index, {}).get(party)

    @classmethod
    def random(cls, parties, rounds: int, rate: float, seed: int, phases=PHASES) -> "FaultPlan":
        """Each (round, party) drops with probability ``rate`` at a uniformly chosen phase."""
        rng = np.random.default_rng(seed)
        plan = cls()
        parties = sorted(parties)
        for r in range(1, rounds + 1):
            hit = rng.random(len(parties)) < rate
            where = rng.integers(0, len(phases), len(parties))
            for p, h, w in zip(parties, hit, where):
                if h:
                    plan.add(r, p, phases[w])
        return plan


@dataclass
class Receipt:
    seq: int
    nbytes: int


@dataclass
class Endpoint:
    party: int
    name: str
    inbox: deque = field(default_factory=deque)


class CostLedger:
    """Per-message byte records plus compute timings.

    Each delivered frame adds one ``up`` row for the sender and one ``down``
    row for the receiver with the same byte count.
    """

    def __init__(self):
        self.rows: list[tuple[int, str, str, str, int]] = []
        self.drops: list[tuple[int, str, str, str]] = []
        self.timings: list[tuple[int, str, str, float]] = []

    def record(self, round_index, src_name, dst_name, phase, nbytes):
        self.rows.append((round_index, src_name, "up", phase, nbytes))
        self.rows.append((round_index, dst_name, "down", phase, nbytes))

    def bytes_for(self, party_name: str, round_index: int | None = None, direction=None) -> int:
        return sum(
            b
            for r, p, d, _, b in self.rows
            if p == party_name
            and (round_index is None or r == round_index)
            and (direction is None or d == direction)
        )

    def totals(self, round_index: int | None = None) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(lambda: {"up": 0, "down": 0})
        for r, p, d, _, b in self.rows:
            if round_index is None or r == round_index:
                out[p][d] += b
        return dict(out)

    def aggregated(self):
        """Rows summed over (round, party, direction, phase), first-seen order."""
        acc: dict[tuple, int] = {}
        for r, p, d, ph, b in self.rows:
            key = (r, p, d, ph)
            acc[key] = acc.get(key, 0) + b
        return [(*k, v) for k, v in acc.items()]

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "party", "direction", "phase", "bytes"])
            w.writerows(self.aggregated())

    def export_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    def summary(self) -> dict:
        tot = self.totals()
        return {
            "total_up": sum(v["up"] for v in tot.values()),
            "total_down": sum(v["down"] for v in tot.values()),
            "messages": len(self.rows) // 2,
            "drops": len(self.drops),
            "parties": tot,
        }


class Bus:
    """Single-owner simulated network; FIFO per receiver."""

    def __init__(self, fault_plan: FaultPlan | None = None, ledger: CostLedger | None = None):
        self.fault_plan = fault_plan or FaultPlan()
        self.ledger = ledger or CostLedger()
        self.endpoints: dict[int, Endpoint] = {}
        self.round = 0
        self.phase = PHASES[0]
        self._seq = 0

    def register(self, party: int, name: str | None = None) -> Endpoint:
        if party not in self.endpoints:
            self.endpoints[party] = Endpoint(party, name or ("server" if party == SERVER else f"c{party}"))
        return self.endpoints[party]

    def name(self, party: int) -> str:
        return self.endpoints[party].name

    def start_round(self, round_index: int) -> None:
        self.round = round_index
        for ep in self.endpoints.values():
            ep.inbox.clear()

    def set_phase(self, phase: str) -> None:
        phase_rank(phase)
        self.phase = phase

    def alive(self, party: int) -> bool:
        if party == SERVER:
            return True
        drop = self.fault_plan.drop_phase(self.round, party)
        return drop is None or phase_rank(self.phase) < phase_rank(drop)

    def send(self, src: int, dst: int, msg) -> Receipt | None:
        if src not in self.endpoints or dst not in self.endpoints:
            raise ProtocolError(f"unregistered endpoint in send {src}->{dst}")
        if not self.alive(src):
            self.ledger.drops.append((self.round, self.phase, self.name(src), "sender dropped"))
            return None
        if not self.alive(dst):
            self.ledger.drops.append((self.round, self.phase, self.name(dst), "receiver dropped"))
            return None
        frame = encode_frame(src, dst, msg)
        self._seq += 1
        self.endpoints[dst].inbox.append(frame)
        self.ledger.record(self.round, self.name(src), self.name(dst), self.phase, len(frame))
        return Receipt(self._seq, len(frame))

    def recv(self, party: int) -> list:
        """Drain the inbox, returning ``(sender, message)`` pairs in arrival order."""
        ep = self.endpoints[party]
        out = []
        while ep.inbox:
            sender, _, msg = decode_frame(ep.inbox.popleft())
            out.append((sender, msg))
        return out

    @contextmanager
    def timed(self, party: int, label: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.ledger.timings.append((self.round, self.name(party), label, time.perf_counter() - start))


@dataclass
class RoundCost:
    round: int
    client_bytes: dict[str, int]
    client_up: dict[str, int]
    client_down: dict[str, int]
    server_up: int
    server_down: int
    client_seconds: dict[str, float]
    server_seconds: float

    @property
    def mean_client_bytes(self) -> float:
        return float(np.mean(list(self.client_bytes.values()))) if self.client_bytes else 0.0

    @property
    def total_bytes(self) -> int:
        return self.server_up + self.server_down


def measure_round(ledger: CostLedger, round_index: int) -> RoundCost:
    tot = ledger.totals(round_index)
    server = tot.pop("server", {"up": 0, "down": 0})
    secs: dict[str, float] = defaultdict(float)
    server_secs = 0.0
    for r, p, _, s in ledger.timings:
        if r != round_index:
            continue
        if p == "server":
            server_secs += s
        else:
            secs[p] += s
    return RoundCost(
        round=round_index,
        client_bytes={p: v["up"] + v["down"] for p, v in tot.items()},
        client_up={p: v["up"] for p, v in tot.items()},
        client_down={p: v["down"] for p, v in tot.items()},
        server_up=server["up"],
        server_down=server["down"],
        client_seconds=dict(secs),
        server_seconds=server_secs,
    )
