import pathlib

import numpy as np

from flestlib import constants
from flestlib.config import ExperimentConfig
from flestlib.data import ClientShard, StringTriple, Triple, Vocab, build_vocab
from flestlib.enums import Split
from flestlib.model import ModelParams


def random_params(
    seed: int, rank: int = 4, num_entities: int = 8, num_relations: int = 3, sparsity: float = 0.5
) -> ModelParams:
    """Gaussian parameters, nowhere near orthogonal."""
    rng = np.random.default_rng(seed)
    arrays = {name: rng.standard_normal((rank, rank)) for name in constants.SHARED_PARAM_NAMES}
    arrays["e_loading"] = rng.standard_normal((rank, num_entities))
    arrays["r_loading"] = rng.standard_normal((rank, num_relations))
    return ModelParams(rank=rank, sparsity=sparsity, **arrays)


def identity_params(e_loading, r_loading, sparsity: float = 0.5) -> ModelParams:
    e_loading = np.asarray(e_loading, dtype=np.float64)
    r_loading = np.asarray(r_loading, dtype=np.float64)
    rank = e_loading.shape[0]
    arrays = {name: np.eye(rank) for name in constants.SHARED_PARAM_NAMES}
    return ModelParams(rank=rank, sparsity=sparsity, e_loading=e_loading, r_loading=r_loading, **arrays)


def make_shard(
    train: list[StringTriple],
    valid: list[StringTriple] = (),
    test: list[StringTriple] = (),
    client_id: int = 0,
) -> ClientShard:
    """A shard over exactly the given splits, vocabulary in train, valid, test order."""
    vocab = build_vocab(list(train) + list(valid) + list(test))
    encode = lambda triples: [vocab.encode(triple) for triple in triples]  # noqa: E731
    return ClientShard(
        client_id=client_id,
        vocab=vocab,
        train=encode(train),
        valid=encode(valid),
        test=encode(test),
        source_indices={split: [] for split in Split},
    )


def id_shard(num_entities: int, train: list[Triple], valid: list[Triple] = (), test: list[Triple] = ()) -> ClientShard:
    """A shard whose entity and relation names are their ids, so ``Triple`` ids survive unchanged."""
    num_relations = max([triple[1] for triple in list(train) + list(valid) + list(test)], default=0) + 1
    return ClientShard(
        client_id=0,
        vocab=Vocab([f"e{i}" for i in range(num_entities)], [f"r{k}" for k in range(num_relations)]),
        train=[Triple(*triple) for triple in train],
        valid=[Triple(*triple) for triple in valid],
        test=[Triple(*triple) for triple in test],
        source_indices={split: [] for split in Split},
    )


def numbered_triples(count: int) -> list[StringTriple]:
    return [(f"h{i}", f"r{i % 3}", f"t{i}") for i in range(count)]


def write_triples(path: pathlib.Path, triples: list[StringTriple]) -> pathlib.Path:
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        for triple in triples:
            file.write("\t".join(triple) + "\n")
    return path


def small_config(tmp_path: pathlib.Path, **overrides) -> ExperimentConfig:
    """A few-second run on the synthetic KG."""
    values = dict(
        num_clients=2,
        rank=4,
        sparsity=0.5,
        lr=0.01,
        dropout=0.0,
        batch_size=8,
        local_epochs=1,
        rounds_max=3,
        eval_every=1,
        patience=0,
        synthetic_entities=20,
        synthetic_relations=3,
        synthetic_triples=120,
        synthetic_rank=4,
        output_dir=str(tmp_path / "run"),
    )
    values.update(overrides)
    return ExperimentConfig(**values)
