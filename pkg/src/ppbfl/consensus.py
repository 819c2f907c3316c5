"""Aggregator election (Proof of Training Work, coin-age PoS baseline) and stake accounting."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, replace
from typing import Iterable, Literal, Mapping, Sequence

from .errors import NoEligibleNode
from .tensornet import TrainReport

Role = Literal["trainer", "blockchain-only"]

PACKAGING_REWARD = 2.0
PARTICIPATION_REWARD = 1.0


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    role: Role = "trainer"
    capacity: float = 1.0
    stake: float = 0.0
    coin_age: float = 0.0

    def __post_init__(self):
        if self.role not in ("trainer", "blockchain-only"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.stake < 0 or self.coin_age < 0:
            raise ValueError("stake and coin_age are non-negative")

    @property
    def is_trainer(self) -> bool:
        return self.role == "trainer"


@dataclass(frozen=True)
class RoundOutcome:
    """Result of one round's consensus.

    ``packager`` aggregated and packaged this round's block (it did not
    train); ``winner`` is the node elected from this round to package the
    next one.
    """

    round: int
    winner: str
    reports: tuple[TrainReport, ...]
    reward: float = PACKAGING_REWARD
    packager: str | None = None
    participation_reward: float = PARTICIPATION_REWARD


def potw_elect(reports: Sequence[TrainReport], previous_winner: str | None = None) -> str:
    """Fastest trainer wins; the previous winner sits out; ties go to the smallest id."""
    if not reports:
        raise NoEligibleNode("no training reports")
    eligible = [r for r in reports if r.node_id != previous_winner]
    if not eligible:
        raise NoEligibleNode(f"only the previous winner {previous_winner!r} reported")
    return min(eligible, key=lambda r: (r.duration, r.node_id)).node_id


def pos_elect(
    profiles: Sequence[NodeProfile],
    rng: random.Random,
    accrued: Mapping[str, float] | None = None,
) -> tuple[str, list[NodeProfile]]:
    """Oldest coin age wins and resets to zero; every other trainer ages by ``accrued``.

    When no trainer has positive coin age the winner is drawn uniformly.
    """
    trainers = sorted((p for p in profiles if p.is_trainer), key=lambda p: p.node_id)
    if not trainers:
        raise NoEligibleNode("no trainers hold stake")
    if any(p.coin_age > 0 for p in trainers):
        oldest = max(p.coin_age for p in trainers)
        winner = min(p.node_id for p in trainers if p.coin_age == oldest)
    else:
        winner = rng.choice(trainers).node_id
    accrued = accrued or {}
    out = []
    for p in profiles:
        if p.node_id == winner:
            out.append(replace(p, coin_age=0.0))
        elif p.is_trainer:
            out.append(replace(p, coin_age=p.coin_age + accrued.get(p.node_id, 0.0)))
        else:
            out.append(p)
    return winner, out


def apply_rewards(outcome: RoundOutcome, profiles: Sequence[NodeProfile]) -> list[NodeProfile]:
    """Pay the packager and every trainer that filed a report; blockchain-only nodes earn nothing."""
    reporters = {r.node_id for r in outcome.reports}
    packager = outcome.packager if outcome.packager is not None else outcome.winner
    out = []
    for p in profiles:
        if not p.is_trainer:
            out.append(p)
            continue
        gain = 0.0
        if p.node_id == packager:
            gain += outcome.reward
        if p.node_id in reporters and p.node_id != packager:
            gain += outcome.participation_reward
        out.append(replace(p, stake=p.stake + gain) if gain else p)
    return out


def minted(outcome: RoundOutcome) -> float:
    reporters = {r.node_id for r in outcome.reports}
    packager = outcome.packager if outcome.packager is not None else outcome.winner
    return outcome.reward + outcome.participation_reward * len(reporters - {packager})


STAKE_COLUMNS = ["round", "node_id", "role", "stake", "coin_age", "winner"]


def stake_rows(round_no: int, profiles: Iterable[NodeProfile], winner: str) -> list[dict]:
    return [
        {
            "round": round_no,
            "node_id": p.node_id,
            "role": p.role,
            "stake": p.stake,
            "coin_age": p.coin_age,
            "winner": int(p.node_id == winner),
        }
        for p in sorted(profiles, key=lambda p: p.node_id)
    ]


def stake_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=STAKE_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
