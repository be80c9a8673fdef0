"""Binary checkpoints of a training run.

Layout, all little-endian::

    FLESTCKPT1
    64 bytes   config hash, ASCII hex
    u32        round
    u32        client count
    ...        global shared parameters, as a round message
    per client:
        u32 rank, u32 entities, u32 relations, f64 sparsity
        7 matrices  E_dic, R_dic, W1, W2, W3, E_loading, R_loading
        u64         Adam step
        14 matrices Adam first moments then second moments, same order

Every matrix is ``u32 rows, u32 cols`` followed by row-major f64 data.
"""

from __future__ import annotations

import pathlib
import struct
from dataclasses import dataclass
from logging import getLogger
from typing import Sequence

import numpy as np

from . import constants, errors
from .federation import SharedParams, decode_message, encode_message
from .model import AdamState, ModelParams


__all__ = (
    "Checkpoint",
    "ClientCheckpoint",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
)


logger = getLogger(__name__)

_HASH_LENGTH = 64
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_SHAPE = struct.Struct("<II")
_CLIENT_HEADER = struct.Struct("<IIId")
_MESSAGE_HEADER = struct.Struct("<II")


@dataclass
class ClientCheckpoint:
    params: ModelParams
    opt: AdamState


@dataclass
class Checkpoint:
    config_hash: str
    round: int
    shared: SharedParams
    clients: list[ClientCheckpoint]


def _pack_matrix(array: np.ndarray) -> bytes:
    return _SHAPE.pack(*array.shape) + np.ascontiguousarray(array, dtype="<f8").tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config_hash = checkpoint.config_hash.encode("ascii")
    if len(config_hash) != _HASH_LENGTH:
        raise ValueError(f"Config hash must be {_HASH_LENGTH} hex characters, got {len(config_hash)}.")

    ret = [
        constants.CHECKPOINT_MAGIC,
        config_hash,
        _U32.pack(checkpoint.round),
        _U32.pack(len(checkpoint.clients)),
        encode_message(checkpoint.shared),
    ]
    for client in checkpoint.clients:
        params = client.params
        ret.append(_CLIENT_HEADER.pack(params.rank, params.num_entities, params.num_relations, params.sparsity))
        ret.extend(_pack_matrix(getattr(params, name)) for name in constants.PARAM_NAMES)
        ret.append(_U64.pack(client.opt.step))
        ret.extend(_pack_matrix(client.opt.first[name]) for name in constants.PARAM_NAMES)
        ret.extend(_pack_matrix(client.opt.second[name]) for name in constants.PARAM_NAMES)
    return b"".join(ret)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise errors.CheckpointCorrupt(f"Checkpoint truncated at byte {self.offset}, wanted {size} more.")
        ret = self.data[self.offset : self.offset + size]
        self.offset += size
        return ret

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def matrix(self, shape: tuple[int, int]) -> np.ndarray:
        rows, cols = self.unpack(_SHAPE)
        if (rows, cols) != shape:
            raise errors.CheckpointCorrupt(f"Matrix shape header {(rows, cols)} does not match expected {shape}.")
        return np.frombuffer(self.take(rows * cols * 8), dtype="<f8").reshape(rows, cols).astype(np.float64)


def _expected_shapes(rank: int, num_entities: int, num_relations: int) -> dict[str, tuple[int, int]]:
    ret = {name: (rank, rank) for name in constants.SHARED_PARAM_NAMES}
    ret["e_loading"] = (rank, num_entities)
    ret["r_loading"] = (rank, num_relations)
    return ret


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(len(constants.CHECKPOINT_MAGIC)) != constants.CHECKPOINT_MAGIC:
        raise errors.CheckpointCorrupt("Checkpoint does not start with the expected magic.")

    try:
        config_hash = reader.take(_HASH_LENGTH).decode("ascii")
    except UnicodeDecodeError as e:
        raise errors.CheckpointCorrupt("Checkpoint config hash is not ASCII.") from e
    (round,) = reader.unpack(_U32)
    (num_clients,) = reader.unpack(_U32)

    # The round message is self-describing through its rank field.
    message_start = reader.offset
    reader.take(len(constants.MESSAGE_MAGIC))
    _, shared_rank = reader.unpack(_MESSAGE_HEADER)
    reader.take(5 * shared_rank * shared_rank * 8)
    try:
        shared = decode_message(data[message_start : reader.offset])
    except errors.MessageCorrupt as e:
        raise errors.CheckpointCorrupt(f"Checkpoint shared block is corrupt: {e}") from e

    clients = []
    for _ in range(num_clients):
        rank, num_entities, num_relations, sparsity = reader.unpack(_CLIENT_HEADER)
        if rank != shared.rank:
            raise errors.CheckpointCorrupt(f"Client rank {rank} does not match shared rank {shared.rank}.")
        shapes = _expected_shapes(rank, num_entities, num_relations)

        arrays = {name: reader.matrix(shapes[name]) for name in constants.PARAM_NAMES}
        (step,) = reader.unpack(_U64)
        first = {name: reader.matrix(shapes[name]) for name in constants.PARAM_NAMES}
        second = {name: reader.matrix(shapes[name]) for name in constants.PARAM_NAMES}
        try:
            params = ModelParams(rank=rank, sparsity=sparsity, **arrays)
        except (ValueError, errors.ShapeGeneric) as e:
            raise errors.CheckpointCorrupt(f"Client parameters are invalid: {e}") from e
        clients.append(ClientCheckpoint(params=params, opt=AdamState(first=first, second=second, step=step)))

    if reader.offset != len(data):
        raise errors.CheckpointCorrupt(f"Checkpoint has {len(data) - reader.offset} trailing bytes.")
    return Checkpoint(config_hash=config_hash, round=round, shared=shared, clients=clients)


def save_checkpoint(
    path: str | pathlib.Path,
    config_hash: str,
    round: int,
    shared: SharedParams,
    clients: Sequence[ClientCheckpoint],
) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(Checkpoint(config_hash=config_hash, round=round, shared=shared, clients=list(clients)))

    # Atomic replace.
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as file:
        file.write(data)
    tmp_path.replace(path)

    logger.debug('Saved round %s checkpoint of %s client(s) to "%s".', round, len(clients), path)
    return path


def load_checkpoint(path: str | pathlib.Path, *, expected_hash: str | None = None) -> Checkpoint:
    """Reads a checkpoint, refusing it if it was written under a different config than ``expected_hash``."""
    path = pathlib.Path(path)
    with open(path, "rb") as file:
        ret = decode_checkpoint(file.read())

    if expected_hash is not None and ret.config_hash != expected_hash:
        raise errors.CheckpointCorrupt(
            f'Checkpoint "{path}" was written with config hash {ret.config_hash}, expected {expected_hash}.'
        )
    logger.debug('Loaded round %s checkpoint of %s client(s) from "%s".', ret.round, len(ret.clients), path)
    return ret
