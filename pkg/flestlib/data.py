from __future__ import annotations

import pathlib
from dataclasses import dataclass, field
from functools import cached_property
from logging import getLogger
from typing import BinaryIO, Iterable, NamedTuple, Sequence

import numpy as np
import yaml

from . import constants, errors
from .enums import Split
from .utils import make_rng


__all__ = (
    "Batch",
    "ClientShard",
    "StringTriple",
    "Triple",
    "Vocab",
    "build_vocab",
    "load_dataset",
    "load_triples",
    "make_batches",
    "partition",
    "write_partition_manifests",
)

logger = getLogger(__name__)

try:
    from yaml import CSafeDumper as SafeDumper

    logger.debug("Successfully imported pyyaml CSafeDumper.")
except ImportError:
    from yaml import SafeDumper

    logger.debug("Failed to import pyyaml CSafeDumper, falling back to the pure Python dumper.")


StringTriple = tuple[str, str, str]


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class Vocab:
    """Bidirectional id mapping for entities and relations, in first-appearance order."""

    def __init__(self, entities: Sequence[str] = (), relations: Sequence[str] = ()):
        self._entities: list[str] = []
        self._relations: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}
        for name in entities:
            self.add_entity(name)
        for name in relations:
            self.add_relation(name)

    @property
    def entities(self) -> tuple[str, ...]:
        return tuple(self._entities)

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(self._relations)

    @property
    def num_entities(self) -> int:
        return len(self._entities)

    @property
    def num_relations(self) -> int:
        return len(self._relations)

    def add_entity(self, name: str) -> int:
        if (ret := self._entity_ids.get(name)) is None:
            ret = self._entity_ids[name] = len(self._entities)
            self._entities.append(name)
        return ret

    def add_relation(self, name: str) -> int:
        if (ret := self._relation_ids.get(name)) is None:
            ret = self._relation_ids[name] = len(self._relations)
            self._relations.append(name)
        return ret

    def entity_id(self, name: str) -> int:
        return self._entity_ids[name]

    def relation_id(self, name: str) -> int:
        return self._relation_ids[name]

    def entity_name(self, entity_id: int) -> str:
        return self._entities[entity_id]

    def relation_name(self, relation_id: int) -> str:
        return self._relations[relation_id]

    def encode(self, triple: StringTriple) -> Triple:
        head, rel, tail = triple
        return Triple(self.entity_id(head), self.relation_id(rel), self.entity_id(tail))

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocab)
            and self._entities == other._entities
            and self._relations == other._relations
        )

    def __repr__(self) -> str:
        return f"<Vocab {self.num_entities} entities, {self.num_relations} relations>"


@dataclass
class ClientShard:
    client_id: int
    vocab: Vocab
    """Local vocabulary, the server never sees it."""
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    source_indices: dict[Split, list[int]] = field(default_factory=dict)
    """Line indices of each split's triples in the pooled dataset, in split order."""

    @property
    def triples(self) -> list[Triple]:
        return self.train + self.valid + self.test

    def split(self, split: Split) -> list[Triple]:
        return {Split.train: self.train, Split.valid: self.valid, Split.test: self.test}[split]

    @cached_property
    def _tail_index(self) -> dict[tuple[int, int], frozenset[int]]:
        ret: dict[tuple[int, int], set[int]] = {}
        for head, rel, tail in self.triples:
            ret.setdefault((head, rel), set()).add(tail)
        return {key: frozenset(value) for key, value in ret.items()}

    @cached_property
    def _head_index(self) -> dict[tuple[int, int], frozenset[int]]:
        ret: dict[tuple[int, int], set[int]] = {}
        for head, rel, tail in self.triples:
            ret.setdefault((rel, tail), set()).add(head)
        return {key: frozenset(value) for key, value in ret.items()}

    def known_tails(self, head: int, rel: int) -> frozenset[int]:
        """Every tail t with (head, rel, t) known to this client, over all splits."""
        return self._tail_index.get((head, rel), frozenset())

    def known_heads(self, rel: int, tail: int) -> frozenset[int]:
        return self._head_index.get((rel, tail), frozenset())


@dataclass(frozen=True)
class Batch:
    pairs: np.ndarray
    """(B, 2) int array of (head, relation)."""
    targets: np.ndarray
    """(B, |local entities|) float array of 0/1 labels."""

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @classmethod
    def empty(cls, num_entities: int) -> Batch:
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros((0, num_entities)))


# ---- Loading.


def load_triples(source: BinaryIO | Iterable[bytes]) -> list[StringTriple]:
    ret = []
    for line_number, raw_line in enumerate(source, start=1):
        try:
            line = raw_line.decode("utf-8").rstrip("\r\n")
        except UnicodeDecodeError as e:
            text = raw_line.decode("utf-8", "replace").rstrip("\r\n")
            raise errors.MalformedTriple(line_number, text, "not valid UTF-8") from e
        if line.strip() == "":
            continue

        fields = line.split("\t")
        if len(fields) != 3:
            raise errors.MalformedTriple(line_number, line)
        ret.append((fields[0], fields[1], fields[2]))

    return ret


def load_dataset(path: str | pathlib.Path) -> list[StringTriple]:
    """Loads a triple file, or pools the standard train/valid/test files of a dataset directory."""
    path = pathlib.Path(path)
    if path.is_file():
        files = [path]
    elif path.is_dir():
        files = [path / name for name in constants.DATASET_SPLIT_FILES if (path / name).exists()]
        if not files:
            raise FileNotFoundError(
                f'Dataset directory "{path}" holds none of {", ".join(constants.DATASET_SPLIT_FILES)}.'
            )
    else:
        raise FileNotFoundError(f'Dataset at "{path}" does not exist.')

    ret = []
    for file_path in files:
        logger.debug('Loading triples from "%s".', file_path)
        with open(file_path, "rb") as file:
            try:
                ret.extend(load_triples(file))
            except errors.MalformedTriple as e:
                logger.error('Malformed triple file "%s".', file_path, exc_info=e)
                raise e

    logger.info("Loaded %s triples from %s file(s).", len(ret), len(files))
    return ret


def build_vocab(triples: Iterable[StringTriple]) -> Vocab:
    ret = Vocab()
    for head, rel, tail in triples:
        ret.add_entity(head)
        ret.add_relation(rel)
        ret.add_entity(tail)

    return ret


# ---- Partitioning.


def _split_sizes(count: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    num_valid = int(count * ratios[1])
    num_test = int(count * ratios[2])
    return count - num_valid - num_test, num_valid, num_test


def _make_shard(
    client_id: int,
    triples: Sequence[StringTriple],
    indices: Sequence[int],
    split_of: Sequence[Split],
) -> ClientShard:
    vocab = build_vocab(triples[i] for i in indices)
    splits: dict[Split, list[Triple]] = {split: [] for split in Split}
    source_indices: dict[Split, list[int]] = {split: [] for split in Split}
    for index, split in zip(indices, split_of):
        splits[split].append(vocab.encode(triples[index]))
        source_indices[split].append(int(index))

    return ClientShard(
        client_id=client_id,
        vocab=vocab,
        train=splits[Split.train],
        valid=splits[Split.valid],
        test=splits[Split.test],
        source_indices=source_indices,
    )


def partition(
    triples: Sequence[StringTriple],
    num_clients: int,
    seed: int,
    *,
    split_ratios: tuple[float, float, float] = constants.DEFAULT_SPLIT_RATIOS,
) -> list[ClientShard]:
    """Randomly partitions triples among clients without replacement.

    A seeded shuffle is sliced round-robin, so shard sizes differ by at most one. Each shard is then split into
    train/valid/test by ``split_ratios`` with its own seeded shuffle, and gets a local vocabulary covering exactly
    the entities and relations of its triples.
    """
    if num_clients < 1:
        raise errors.PartitionError(f"Need at least one client, got {num_clients}.")
    if num_clients > len(triples):
        raise errors.PartitionError(f"Cannot split {len(triples)} triples among {num_clients} clients.")

    order = make_rng(seed).permutation(len(triples))
    ret = []
    for client_id in range(num_clients):
        indices = order[client_id::num_clients]
        num_train, num_valid, num_test = _split_sizes(len(indices), split_ratios)
        indices = indices[make_rng(seed, client_id).permutation(len(indices))]
        split_of = [Split.train] * num_train + [Split.valid] * num_valid + [Split.test] * num_test
        shard = _make_shard(client_id, triples, indices.tolist(), split_of)
        logger.debug(
            "Client %s shard: %s train, %s valid, %s test, %s entities, %s relations.",
            client_id,
            len(shard.train),
            len(shard.valid),
            len(shard.test),
            shard.vocab.num_entities,
            shard.vocab.num_relations,
        )
        ret.append(shard)

    return ret


def write_partition_manifests(shards: Sequence[ClientShard], out_dir: str | pathlib.Path) -> list[pathlib.Path]:
    """Writes ``client_<c>.tsv`` (``line_index<TAB>split`` rows) per client and a ``summary.yml``."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ret = []
    summary = {"num_clients": len(shards), "clients": []}
    for shard in shards:
        manifest_path = out_dir / f"client_{shard.client_id}.tsv"
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as file:
            for split in Split:
                for index in shard.source_indices.get(split, []):
                    file.write(f"{index}\t{split.value}\n")
        ret.append(manifest_path)
        summary["clients"].append(
            {
                "client_id": shard.client_id,
                "triples": len(shard.triples),
                "train": len(shard.train),
                "valid": len(shard.valid),
                "test": len(shard.test),
                "entities": shard.vocab.num_entities,
                "relations": shard.vocab.num_relations,
            }
        )

    summary_path = out_dir / constants.MANIFEST_SUMMARY_FILENAME
    with open(summary_path, "w", encoding="utf-8") as file:
        yaml.dump(summary, file, Dumper=SafeDumper, sort_keys=False)
    ret.append(summary_path)

    logger.info('Wrote %s partition manifests to "%s".', len(shards), out_dir)
    return ret


# ---- Batching.


def make_batches(shard: ClientShard, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """1-N batches: every unique (head, relation) of the training split once, labelled with all its known tails."""
    if batch_size < 1:
        raise ValueError(f"Batch size must be at least 1, got {batch_size}.")

    tails: dict[tuple[int, int], list[int]] = {}
    for head, rel, tail in shard.train:
        tails.setdefault((head, rel), []).append(tail)
    if not tails:
        return []

    pairs = np.array(list(tails.keys()), dtype=np.int64)
    order = make_rng(seed, epoch).permutation(len(pairs))
    num_entities = shard.vocab.num_entities

    ret = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        targets = np.zeros((len(chunk), num_entities))
        for row, pair_index in enumerate(chunk):
            targets[row, tails[tuple(pairs[pair_index].tolist())]] = 1.0
        ret.append(Batch(pairs=pairs[chunk], targets=targets))

    return ret
