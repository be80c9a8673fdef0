"""
Tests triple loading, vocabularies, partitioning, manifests, batching and the synthetic KG generator.
"""

import io

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from flestlib import constants, errors
from flestlib.data import (
    Triple,
    build_vocab,
    load_dataset,
    load_triples,
    make_batches,
    partition,
    write_partition_manifests,
)
from flestlib.enums import Split
from flestlib.synthetic import synthetic_kg

from . import utils


class TestLoading:
    def test_single_line(self):
        assert load_triples(io.BytesIO(b"a\tr\tb\n")) == [("a", "r", "b")]

    def test_empty(self):
        assert load_triples(io.BytesIO(b"")) == []

    def test_file_order_and_blank_lines(self):
        data = b"".join(f"e{i}\tr{i % 2}\te{i + 1}\n".encode() for i in range(10))
        data = data.replace(b"e5\tr1", b"\ne5\tr1")
        ret = load_triples(io.BytesIO(data))
        assert ret == [(f"e{i}", f"r{i % 2}", f"e{i + 1}") for i in range(10)]

    def test_malformed_line_number(self):
        with pytest.raises(errors.MalformedTriple) as e:
            load_triples(io.BytesIO(b"a\tr\tb\n\nc\td\n"))
        assert e.value.line_number == 3

    def test_invalid_utf8_line_number(self):
        with pytest.raises(errors.MalformedTriple) as e:
            load_triples(io.BytesIO(b"a\tr\tb\nc\t\xff\td\n"))
        assert e.value.line_number == 2
        assert "UTF-8" in str(e.value)

    def test_dataset_directory_pools_splits(self, tmp_path):
        utils.write_triples(tmp_path / "train.txt", [("a", "r", "b")])
        utils.write_triples(tmp_path / "valid.txt", [("b", "r", "c")])
        utils.write_triples(tmp_path / "test.txt", [("c", "r", "a")])
        assert load_dataset(tmp_path) == [("a", "r", "b"), ("b", "r", "c"), ("c", "r", "a")]
        assert load_dataset(tmp_path / "valid.txt") == [("b", "r", "c")]

    def test_dataset_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


class TestVocab:
    def test_first_appearance(self):
        vocab = build_vocab([("a", "r", "b")])
        assert vocab.entities == ("a", "b")
        assert vocab.relations == ("r",)

    def test_duplicates_collapse(self):
        vocab = build_vocab([("a", "r", "a")])
        assert vocab.entities == ("a",)
        assert vocab.relations == ("r",)

    def test_id_table(self):
        triples = [
            ("x", "likes", "y"),
            ("y", "likes", "z"),
            ("z", "hates", "x"),
            ("w", "likes", "x"),
            ("y", "knows", "w"),
            ("v", "hates", "v"),
        ]
        vocab = build_vocab(triples)
        assert vocab.entities == ("x", "y", "z", "w", "v")
        assert vocab.relations == ("likes", "hates", "knows")
        assert vocab.encode(("w", "knows", "v")) == Triple(3, 2, 4)

    def test_round_trip(self):
        vocab = build_vocab(utils.numbered_triples(30))
        for i in range(vocab.num_entities):
            assert vocab.entity_id(vocab.entity_name(i)) == i
        for i in range(vocab.num_relations):
            assert vocab.relation_id(vocab.relation_name(i)) == i


class TestPartition:
    def test_single_client(self):
        triples = utils.numbered_triples(10)
        (shard,) = partition(triples, 1, seed=0)
        assert len(shard.triples) == 10

    def test_five_clients(self):
        triples = utils.numbered_triples(10)
        shards = partition(triples, 5, seed=0)
        assert [len(shard.triples) for shard in shards] == [2] * 5

        indices = sorted(index for shard in shards for split in Split for index in shard.source_indices[split])
        assert indices == list(range(10))

    def test_thousand_lines(self):
        shards = partition(utils.numbered_triples(1000), 5, seed=3)
        assert [len(shard.triples) for shard in shards] == [200] * 5
        for shard in shards:
            assert (len(shard.train), len(shard.valid), len(shard.test)) == (180, 10, 10)

    def test_deterministic(self):
        triples = utils.numbered_triples(1000)
        first = partition(triples, 4, seed=7)
        second = partition(triples, 4, seed=7)
        other = partition(triples, 4, seed=8)
        assert [s.source_indices for s in first] == [s.source_indices for s in second]
        assert [s.source_indices for s in first] != [s.source_indices for s in other]

    def test_too_many_clients(self):
        with pytest.raises(errors.PartitionError):
            partition(utils.numbered_triples(3), 4, seed=0)
        with pytest.raises(errors.PartitionError):
            partition(utils.numbered_triples(3), 0, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(count=st.integers(1, 80), data=st.data())
    def test_disjoint_cover(self, count, data):
        num_clients = data.draw(st.integers(1, count))
        seed = data.draw(st.integers(0, 2**16))
        triples = utils.numbered_triples(count)
        shards = partition(triples, num_clients, seed=seed)

        sizes = [len(shard.triples) for shard in shards]
        assert max(sizes) - min(sizes) <= 1
        indices = [index for shard in shards for split in Split for index in shard.source_indices[split]]
        assert sorted(indices) == list(range(count))

        for shard in shards:
            strings = [triples[index] for split in Split for index in shard.source_indices[split]]
            assert set(shard.vocab.entities) == {e for h, _, t in strings for e in (h, t)}
            assert set(shard.vocab.relations) == {r for _, r, _ in strings}
            decoded = [
                (shard.vocab.entity_name(h), shard.vocab.relation_name(r), shard.vocab.entity_name(t))
                for h, r, t in shard.triples
            ]
            assert decoded == strings


class TestManifests:
    def test_byte_identical(self, tmp_path):
        triples = utils.numbered_triples(50)
        first = write_partition_manifests(partition(triples, 3, seed=1), tmp_path / "a")
        second = write_partition_manifests(partition(triples, 3, seed=1), tmp_path / "b")
        assert [path.name for path in first] == ["client_0.tsv", "client_1.tsv", "client_2.tsv", "summary.yml"]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_contents(self, tmp_path):
        triples = utils.numbered_triples(40)
        (shard,) = partition(triples, 1, seed=0)
        paths = write_partition_manifests([shard], tmp_path)

        rows = [line.split("\t") for line in paths[0].read_text().splitlines()]
        assert len(rows) == 40
        assert [int(index) for index, split in rows if split == "train"] == shard.source_indices[Split.train]
        assert sorted(int(index) for index, _ in rows) == list(range(40))

        with open(tmp_path / constants.MANIFEST_SUMMARY_FILENAME) as file:
            summary = yaml.safe_load(file)
        assert summary["num_clients"] == 1
        assert summary["clients"][0]["triples"] == 40
        assert summary["clients"][0]["train"] + summary["clients"][0]["valid"] + summary["clients"][0]["test"] == 40
        assert summary["clients"][0]["entities"] == shard.vocab.num_entities


class TestKnown:
    def test_filters_cover_every_split(self):
        shard = utils.id_shard(4, train=[(0, 0, 1)], valid=[(0, 0, 2)], test=[(3, 0, 2)])
        assert shard.known_tails(0, 0) == {1, 2}
        assert shard.known_heads(0, 2) == {0, 3}
        assert shard.known_tails(1, 0) == frozenset()


class TestBatches:
    def test_one_pair(self):
        shard = utils.id_shard(3, train=[(0, 0, 1), (0, 0, 2)])
        (batch,) = make_batches(shard, batch_size=4, seed=0, epoch=0)
        assert batch.pairs.tolist() == [[0, 0]]
        assert batch.targets.tolist() == [[0.0, 1.0, 1.0]]

    def test_batch_size_one(self):
        shard = utils.id_shard(3, train=[(0, 0, 1), (1, 0, 2), (2, 0, 0)])
        batches = make_batches(shard, batch_size=1, seed=0, epoch=0)
        assert len(batches) == 3
        assert sorted(tuple(batch.pairs[0]) for batch in batches) == [(0, 0), (1, 0), (2, 0)]

    def test_label_mass(self):
        shard = partition(utils.numbered_triples(300), 1, seed=0)[0]
        batches = make_batches(shard, batch_size=16, seed=5, epoch=2)
        assert sum(batch.targets.sum() for batch in batches) == len(shard.train)
        pairs = np.concatenate([batch.pairs for batch in batches])
        assert len({tuple(pair) for pair in pairs.tolist()}) == len(pairs)

    def test_seeded_order(self):
        shard = partition(utils.numbered_triples(300), 1, seed=0)[0]
        first = make_batches(shard, batch_size=16, seed=5, epoch=2)
        again = make_batches(shard, batch_size=16, seed=5, epoch=2)
        next_epoch = make_batches(shard, batch_size=16, seed=5, epoch=3)
        assert all(np.array_equal(a.pairs, b.pairs) for a, b in zip(first, again))
        assert not all(np.array_equal(a.pairs, b.pairs) for a, b in zip(first, next_epoch))

    def test_empty_train(self):
        shard = utils.id_shard(2, train=[], test=[(0, 0, 1)])
        assert make_batches(shard, batch_size=4, seed=0, epoch=0) == []

    def test_invalid_batch_size(self):
        shard = utils.id_shard(2, train=[(0, 0, 1)])
        with pytest.raises(ValueError):
            make_batches(shard, batch_size=0, seed=0, epoch=0)


class TestSynthetic:
    def test_shape(self):
        triples = synthetic_kg(20, 3, 120, 8, seed=0)
        assert len(triples) == 120
        assert len(set(triples)) == 120
        assert all(head != tail for head, _, tail in triples)
        assert {rel for _, rel, _ in triples} <= {"r0", "r1", "r2"}

    def test_deterministic(self):
        assert synthetic_kg(15, 2, 50, 4, seed=3) == synthetic_kg(15, 2, 50, 4, seed=3)
        assert synthetic_kg(15, 2, 50, 4, seed=3) != synthetic_kg(15, 2, 50, 4, seed=4)

    def test_too_many(self):
        with pytest.raises(ValueError):
            synthetic_kg(3, 1, 7, 2, seed=0)
