"""The federation protocol: local client training, shared-parameter upload, server averaging and redistribution.

Only the dictionaries and fusion weights ever leave a client. Loadings stay inside ``ClientState``, and the server
side (``SharedParams``, ``ServerState``, the round message) has no field that could hold one.
"""

from __future__ import annotations

import asyncio
import dataclasses
import statistics
import struct
from dataclasses import dataclass, field
from logging import getLogger
from typing import Awaitable, Callable, Sequence

import numpy as np

from . import constants, errors
from .data import ClientShard
from .enums import Split, TrainingMode
from .evaluation import EvalReport, aggregate_reports, evaluate_client
from .model import AdamState, Hyper, ModelParams, init_params, train_epoch
from .utils import make_rng


__all__ = (
    "ClientState",
    "RoundRecord",
    "RunConfig",
    "ServerState",
    "SharedParams",
    "TrainingRun",
    "aggregate",
    "client_local_update",
    "decode_message",
    "encode_message",
    "evaluate_clients",
    "init_clients",
    "run_round",
    "run_training",
)


logger = getLogger(__name__)

_MESSAGE_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class SharedParams:
    """The round message. Holds exactly the five shareable matrices, never a loading."""

    e_dic: np.ndarray
    r_dic: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    round: int = 0

    def __post_init__(self):
        rank = self.e_dic.shape[0]
        for name in constants.SHARED_PARAM_NAMES:
            if getattr(self, name).shape != (rank, rank):
                raise errors.ProtocolError(f"Shared {name} has shape {getattr(self, name).shape}, not {(rank, rank)}.")

    @property
    def rank(self) -> int:
        return self.e_dic.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in constants.SHARED_PARAM_NAMES}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {name: array.copy() for name, array in self.as_dict().items()}

    @classmethod
    def from_params(cls, params: ModelParams, round: int) -> SharedParams:
        return cls(**{name: array.copy() for name, array in params.shared_dict().items()}, round=round)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, SharedParams)
            and self.round == other.round
            and all(np.array_equal(getattr(self, name), getattr(other, name)) for name in constants.SHARED_PARAM_NAMES)
        )


@dataclass
class ClientState:
    shard: ClientShard
    params: ModelParams
    opt: AdamState
    seed: int
    """Shuffle seed of ``make_batches``."""
    rng: np.random.Generator
    """Dropout stream, owned by this client."""
    train_loss: float | None = None
    """Mean batch loss of the last local update."""

    @property
    def client_id(self) -> int:
        return self.shard.client_id


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    """Mean over clients of their mean batch loss."""
    client_losses: list[float]
    valid: dict[int, EvalReport] | None = None
    """{client_id: report} on evaluation rounds, clients without validation triples left out."""
    valid_aggregate: EvalReport | None = None
    """All validation queries pooled, for reporting."""
    valid_mrr: float | None = None
    """Unweighted mean of the per-client validation MRRs, which early stopping compares."""

    def to_dict(self) -> dict:
        ret = {"round": self.round, "train_loss": self.train_loss, "client_losses": self.client_losses}
        if self.valid is not None:
            ret["valid"] = {str(client_id): report.to_dict() for client_id, report in self.valid.items()}
        if self.valid_aggregate is not None:
            ret["valid_aggregate"] = self.valid_aggregate.to_dict()
        if self.valid_mrr is not None:
            ret["valid_mrr"] = self.valid_mrr
        return ret


@dataclass
class ServerState:
    shared: SharedParams
    """Global shared parameters, as last broadcast."""
    round: int = 0
    history: list[RoundRecord] = field(default_factory=list)


@dataclass(frozen=True)
class RunConfig:
    num_clients: int
    rounds_max: int
    hyper: Hyper
    rank: int
    sparsity: float
    init_seed: int = 0
    shuffle_seed: int = 0
    mode: TrainingMode = TrainingMode.federated
    patience: int = 15
    """Evaluation rounds are compared by mean validation MRR, 0 disables early stopping."""
    eval_every: int = 5
    max_workers: int = 1
    """Clients trained concurrently within a round."""

    def __post_init__(self):
        if self.num_clients < 1:
            raise errors.ConfigError(f"Need at least one client, got {self.num_clients}.")
        if self.rounds_max < 1:
            raise errors.ConfigError(f"rounds_max must be at least 1, got {self.rounds_max}.")
        if self.rank < 1:
            raise errors.ConfigError(f"Rank must be at least 1, got {self.rank}.")
        if not 0.0 < self.sparsity <= 1.0:
            raise errors.ConfigError(f"Sparsity factor must be in (0, 1], got {self.sparsity}.")
        if self.patience < 0 or self.eval_every < 1 or self.max_workers < 1:
            raise errors.ConfigError("patience must be >= 0, eval_every and max_workers >= 1.")


@dataclass
class TrainingRun:
    server: ServerState
    clients: list[ClientState]
    best_round: int | None = None
    best_mrr: float | None = None

    @property
    def history(self) -> list[RoundRecord]:
        return self.server.history


# ---- Wire format.


def encode_message(shared: SharedParams) -> bytes:
    """``FLESTMSG1``, u32 round, u32 rank, then E_dic, R_dic, W1, W2, W3 as row-major little-endian f64."""
    ret = [constants.MESSAGE_MAGIC, _MESSAGE_HEADER.pack(shared.round, shared.rank)]
    for name in constants.SHARED_PARAM_NAMES:
        ret.append(np.ascontiguousarray(getattr(shared, name), dtype="<f8").tobytes())
    return b"".join(ret)


def decode_message(data: bytes) -> SharedParams:
    magic = constants.MESSAGE_MAGIC
    if data[: len(magic)] != magic:
        raise errors.MessageCorrupt("Round message does not start with the expected magic.")
    if len(data) < len(magic) + _MESSAGE_HEADER.size:
        raise errors.MessageCorrupt(f"Round message of {len(data)} bytes is too short for its header.")

    round, rank = _MESSAGE_HEADER.unpack_from(data, len(magic))
    offset = len(magic) + _MESSAGE_HEADER.size
    block = rank * rank * 8
    if len(data) != offset + 5 * block:
        raise errors.MessageCorrupt(
            f"Round message of rank {rank} should be {offset + 5 * block} bytes, got {len(data)}."
        )

    arrays = {}
    for name in constants.SHARED_PARAM_NAMES:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=rank * rank, offset=offset).reshape(rank, rank).astype(
            np.float64
        )
        offset += block
    return SharedParams(**arrays, round=round)


# ---- Protocol steps.


def client_local_update(
    client: ClientState, incoming: SharedParams, hyper: Hyper
) -> tuple[ClientState, SharedParams]:
    """Adopts ``incoming``, trains every parameter for ``hyper.local_epochs`` epochs and returns the new shared part."""
    if incoming.rank != client.params.rank:
        raise errors.ProtocolError(
            f"Client {client.client_id} has rank {client.params.rank}, incoming parameters have rank {incoming.rank}."
        )

    params = client.params.replace(**incoming.copy_arrays())
    opt = client.opt
    losses = []
    for local_epoch in range(hyper.local_epochs):
        epoch = incoming.round * hyper.local_epochs + local_epoch
        params, opt, loss = train_epoch(params, opt, client.shard, hyper, client.rng, client.seed, epoch)
        losses.append(loss)

    train_loss = float(np.mean(losses)) if losses else None
    ret = dataclasses.replace(client, params=params, opt=opt, train_loss=train_loss)
    return ret, SharedParams.from_params(params, incoming.round)


def aggregate(uploads: Sequence[SharedParams]) -> SharedParams:
    """Unweighted entrywise mean, summed in the given (client id) order, with the round advanced by one."""
    if not uploads:
        raise errors.ProtocolError("Cannot aggregate zero uploads.")

    rank = uploads[0].rank
    round = uploads[0].round
    for upload in uploads:
        if upload.rank != rank:
            raise errors.ProtocolError(f"Uploads disagree on rank, {upload.rank} vs {rank}.")
        if upload.round != round:
            raise errors.ProtocolError(f"Uploads disagree on round, {upload.round} vs {round}.")

    ret = {}
    for name in constants.SHARED_PARAM_NAMES:
        total = np.zeros((rank, rank))
        for upload in uploads:
            total = total + getattr(upload, name)
        ret[name] = total / len(uploads)
    return SharedParams(**ret, round=round + 1)


def init_clients(config: RunConfig, shards: Sequence[ClientShard]) -> tuple[ServerState, list[ClientState]]:
    """The initial broadcast. Every client starts from the same shared part, also in local-only mode."""
    if len(shards) != config.num_clients:
        raise errors.ProtocolError(f"Expected {config.num_clients} shards, got {len(shards)}.")

    shared_init = init_params((config.init_seed,), config.rank, 0, 0, config.sparsity)
    shared = SharedParams.from_params(shared_init, 0)

    clients = []
    for shard in shards:
        params = init_params(
            (config.init_seed, shard.client_id),
            config.rank,
            shard.vocab.num_entities,
            shard.vocab.num_relations,
            config.sparsity,
        ).replace(**shared.copy_arrays())
        clients.append(
            ClientState(
                shard=shard,
                params=params,
                opt=AdamState.zeros_like(params),
                seed=config.shuffle_seed,
                rng=make_rng(config.shuffle_seed, shard.client_id),
            )
        )

    return ServerState(shared=shared), clients


async def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    hyper: Hyper,
    *,
    mode: TrainingMode = TrainingMode.federated,
    max_workers: int = 1,
) -> tuple[ServerState, list[ClientState]]:
    """Broadcast, local updates on every client, then averaging.

    In local-only mode each client keeps training from its own shared part and the global one is left untouched.
    Client updates run in worker threads, at most ``max_workers`` at once. Aggregation order is fixed by client id,
    so results do not depend on scheduling.
    """
    concur_sema = asyncio.Semaphore(max_workers)

    async def concurrent_update(client: ClientState, incoming: SharedParams):
        async with concur_sema:
            return await asyncio.to_thread(client_local_update, client, incoming, hyper)

    async with asyncio.TaskGroup() as tg:
        tasks = []
        for client in clients:
            if mode is TrainingMode.federated:
                incoming = server.shared
            else:
                incoming = SharedParams.from_params(client.params, server.round)
            tasks.append(tg.create_task(concurrent_update(client, incoming)))

    results = [task.result() for task in tasks]
    new_clients = [client for client, _ in results]
    if mode is TrainingMode.federated:
        shared = aggregate([upload for _, upload in results])
    else:
        shared = server.shared

    losses = [client.train_loss if client.train_loss is not None else 0.0 for client in new_clients]
    record = RoundRecord(round=server.round + 1, train_loss=float(np.mean(losses)), client_losses=losses)
    ret = ServerState(shared=shared, round=server.round + 1, history=server.history + [record])
    return ret, new_clients


def evaluate_clients(clients: Sequence[ClientState], split: Split) -> dict[int, EvalReport]:
    """Reports of every client with at least one triple in ``split``."""
    ret = {}
    for client in clients:
        if client.shard.split(split):
            ret[client.client_id] = evaluate_client(client, split)
    return ret


RoundCallback = Callable[[TrainingRun, RoundRecord, bool], Awaitable[None] | None]


async def run_training(
    config: RunConfig,
    shards: Sequence[ClientShard],
    *,
    on_round: RoundCallback | None = None,
) -> TrainingRun:
    """Runs up to ``rounds_max`` rounds with periodic validation and early stopping.

    Validation happens every ``eval_every`` rounds and always on the last round. Training stops once
    ``patience`` rounds have passed since the best mean validation MRR. ``on_round(run, record, is_best)`` is called
    after every round, ``is_best`` set when that round's validation MRR is a new best.
    """
    server, clients = init_clients(config, shards)
    run = TrainingRun(server=server, clients=clients)
    logger.info(
        "Training %s client(s) in %s mode for up to %s rounds.",
        config.num_clients,
        config.mode.value,
        config.rounds_max,
    )

    for _ in range(config.rounds_max):
        server, clients = await run_round(
            server, clients, config.hyper, mode=config.mode, max_workers=config.max_workers
        )
        record = server.history[-1]
        run.server, run.clients = server, clients

        is_best = False
        final_round = record.round == config.rounds_max
        if record.round % config.eval_every == 0 or final_round:
            reports = evaluate_clients(clients, Split.valid)
            if reports:
                record.valid = reports
                record.valid_aggregate = aggregate_reports(list(reports.values()))
                record.valid_mrr = statistics.fmean(report.mrr for report in reports.values())
                if run.best_mrr is None or record.valid_mrr > run.best_mrr:
                    run.best_mrr, run.best_round = record.valid_mrr, record.round
                    is_best = True
            else:
                logger.warning("Round %s: no client holds validation triples, skipping evaluation.", record.round)

        logger.info(
            "Round %s: train loss %s%s.",
            record.round,
            record.train_loss,
            f", valid MRR {record.valid_mrr}" if record.valid_mrr is not None else "",
        )
        if on_round is not None:
            ret = on_round(run, record, is_best)
            if asyncio.iscoroutine(ret):
                await ret

        if (
            config.patience
            and record.valid_mrr is not None
            and record.round - run.best_round >= config.patience
        ):
            logger.info("Stopping early at round %s, best validation MRR at round %s.", record.round, run.best_round)
            break

    return run
