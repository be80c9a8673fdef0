from __future__ import annotations

from dataclasses import dataclass, field
from logging import getLogger
from typing import TYPE_CHECKING, Collection, Mapping, Sequence

import numpy as np

from . import constants, errors
from .data import Triple
from .enums import Direction, Split
from .model import compose, score_all_heads, score_all_tails

if TYPE_CHECKING:
    from .federation import ClientState


__all__ = (
    "EvalReport",
    "RankQuery",
    "aggregate_reports",
    "evaluate_client",
    "format_table",
    "rank_of",
)


logger = getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    num_queries: int
    mrr: float
    hits: dict[int, float]
    """{k: fraction of queries ranked within the top k}"""
    ranks: tuple[float, ...] = field(default=(), repr=False)
    """Per-query ranks, empty for reports produced by ``aggregate_reports`` from rank-less inputs."""

    @classmethod
    def from_ranks(cls, ranks: Sequence[float]) -> EvalReport:
        if not ranks:
            raise errors.EmptySplit("Cannot build a report out of zero queries.")

        ranks_array = np.asarray(ranks, dtype=np.float64)
        hits_ranks = np.ceil(ranks_array)
        return cls(
            num_queries=len(ranks_array),
            mrr=float(np.mean(1.0 / ranks_array)),
            hits={k: float(np.mean(hits_ranks <= k)) for k in constants.HITS_AT},
            ranks=tuple(ranks_array.tolist()),
        )

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "mrr": self.mrr,
            "hits": {str(k): value for k, value in sorted(self.hits.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> EvalReport:
        return cls(
            num_queries=int(data["num_queries"]),
            mrr=float(data["mrr"]),
            hits={int(k): float(value) for k, value in data["hits"].items()},
        )


@dataclass(frozen=True)
class RankQuery:
    direction: Direction
    triple: Triple
    scores: np.ndarray
    """Score of every local entity as the missing head or tail."""
    filter: frozenset[int]
    """Known-true answers other than the target, removed from the competition."""

    def __post_init__(self):
        if self.target in self.filter:
            raise ValueError(f"Filter set of {self.triple} contains its own target {self.target}.")

    @property
    def target(self) -> int:
        return self.triple.tail if self.direction is Direction.tail else self.triple.head

    def rank(self) -> float:
        return rank_of(self.scores, self.target, self.filter)


def rank_of(scores: np.ndarray | Sequence[float], target: int, filter: Collection[int] = frozenset()) -> float:
    """Filtered rank of ``target``, ties counted as the mean rank among them.

    Candidates strictly above the target each push it down one place, equal-scored candidates half a place.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < len(scores):
        raise errors.IndexOutOfRange(f"Target {target} outside of [0, {len(scores)}).")
    if target in filter:
        raise ValueError(f"Filter set contains the target {target}.")

    competing = np.ones(len(scores), dtype=bool)
    competing[list(filter)] = False
    competing[target] = False
    competitors = scores[competing]

    target_score = scores[target]
    greater = int(np.count_nonzero(competitors > target_score))
    ties = int(np.count_nonzero(competitors == target_score))
    return 1.0 + greater + ties / 2.0


def _queries(client: ClientState, triples: Sequence[Triple], filtered: bool):
    composed = compose(client.params)
    for triple in triples:
        head, rel, tail = triple
        tail_filter = client.shard.known_tails(head, rel) - {tail} if filtered else frozenset()
        yield RankQuery(
            direction=Direction.tail,
            triple=triple,
            scores=score_all_tails(client.params, head, rel, composed=composed),
            filter=tail_filter,
        )

        head_filter = client.shard.known_heads(rel, tail) - {head} if filtered else frozenset()
        yield RankQuery(
            direction=Direction.head,
            triple=triple,
            scores=score_all_heads(client.params, rel, tail, composed=composed),
            filter=head_filter,
        )


def evaluate_client(client: ClientState, split: Split, *, filtered: bool = True) -> EvalReport:
    """Tail and head ranking of every triple of ``split`` against the client's local entities.

    Parameters
    ----------
    client: ClientState
        Anything holding ``params`` and ``shard``.
    split: Split
        Which of the shard's splits provides the queries.
    filtered: bool
        Remove the other known-true answers (train, valid and test) from each query's competition.
    """
    triples = client.shard.split(split)
    if not triples:
        raise errors.EmptySplit(f"Client {client.shard.client_id} has no {split.value} triples.")

    ret = EvalReport.from_ranks([query.rank() for query in _queries(client, triples, filtered)])
    logger.debug(
        "Client %s %s: %s queries, MRR %s.", client.shard.client_id, split.value, ret.num_queries, ret.mrr
    )
    return ret


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Query-count weighted mean of every metric."""
    if not reports:
        raise errors.EmptySplit("Cannot aggregate zero reports.")

    total = sum(report.num_queries for report in reports)
    return EvalReport(
        num_queries=total,
        mrr=sum(report.num_queries * report.mrr for report in reports) / total,
        hits={
            k: sum(report.num_queries * report.hits[k] for report in reports) / total for k in constants.HITS_AT
        },
        ranks=tuple(rank for report in reports for rank in report.ranks),
    )


def format_table(reports: Mapping[str, EvalReport]) -> str:
    """Aligned text table, one row per labelled report, metrics to 4 decimals."""
    header = ["", "queries", "MRR"] + [f"Hit@{k}" for k in constants.HITS_AT]
    rows = [header]
    for label, report in reports.items():
        rows.append(
            [label, str(report.num_queries), f"{report.mrr:.4f}"]
            + [f"{report.hits[k]:.4f}" for k in constants.HITS_AT]
        )

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
