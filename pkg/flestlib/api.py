from __future__ import annotations

import json
import pathlib
import statistics
from logging import getLogger
from typing import Sequence

from . import constants, errors
from .checkpoint import ClientCheckpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import ClientShard, StringTriple, load_dataset, partition, write_partition_manifests
from .enums import Split, TrainingMode
from .evaluation import EvalReport, aggregate_reports, evaluate_client, format_table
from .federation import ClientState, RoundRecord, TrainingRun, evaluate_clients, run_training
from .gradcheck import GradCorruption, GradcheckReport, run_gradcheck
from .synthetic import synthetic_kg
from .utils import make_rng


__all__ = ("FLESTExperiment",)


logger = getLogger(__name__)


def _write_json(path: pathlib.Path, data) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        json.dump(data, file, indent=2, sort_keys=True)
        file.write("\n")
    return path


def _checkpoint_clients(clients: Sequence[ClientState]) -> list[ClientCheckpoint]:
    return [ClientCheckpoint(params=client.params, opt=client.opt) for client in clients]


class FLESTExperiment:
    def __init__(self, config: ExperimentConfig):
        """One configured experiment: its data, its training run and everything written to its output directory.

        Parameters
        ----------
        config: ExperimentConfig
            Validated configuration. Results depend on every field except ``output_dir`` and ``max_workers``.
        """
        self.config = config
        self._triples: list[StringTriple] | None = None

    @property
    def output_dir(self) -> pathlib.Path:
        return pathlib.Path(self.config.output_dir)

    @property
    def final_checkpoint_path(self) -> pathlib.Path:
        return self.output_dir / constants.FINAL_CHECKPOINT_FILENAME

    @property
    def best_checkpoint_path(self) -> pathlib.Path:
        return self.output_dir / constants.BEST_CHECKPOINT_FILENAME

    @property
    def metrics_path(self) -> pathlib.Path:
        return self.output_dir / constants.METRICS_FILENAME

    # --- Data

    def load_triples(self) -> list[StringTriple]:
        """The configured dataset, or the seeded synthetic KG when no dataset is set. Cached."""
        if self._triples is None:
            config = self.config
            if config.dataset is not None:
                self._triples = load_dataset(config.dataset)
            else:
                logger.info("No dataset set, using the built-in synthetic KG.")
                self._triples = synthetic_kg(
                    config.synthetic_entities,
                    config.synthetic_relations,
                    config.synthetic_triples,
                    config.synthetic_rank,
                    config.synthetic_seed,
                )
        return self._triples

    def make_shards(self) -> list[ClientShard]:
        return partition(self.load_triples(), self.config.num_clients, self.config.partition_seed)

    async def partition(self) -> list[pathlib.Path]:
        """Writes the per-client partition manifests and their summary. Returns the written paths."""
        return write_partition_manifests(self.make_shards(), self.output_dir / constants.MANIFEST_DIR_NAME)

    # --- Training

    async def train(self) -> TrainingRun:
        """Runs federated (or local-only) training.

        Writes one JSON line per round to ``metrics.jsonl``, ``best.ckpt`` whenever the mean validation MRR improves
        and ``final.ckpt`` once training ends.
        """
        shards = self.make_shards()
        config_hash = self.config.config_hash()
        self.output_dir.mkdir(parents=True, exist_ok=True)

        with open(self.metrics_path, "w", encoding="utf-8", newline="\n") as metrics_file:

            def on_round(run: TrainingRun, record: RoundRecord, is_best: bool):
                metrics_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                metrics_file.flush()
                if is_best:
                    save_checkpoint(
                        self.best_checkpoint_path,
                        config_hash,
                        run.server.round,
                        run.server.shared,
                        _checkpoint_clients(run.clients),
                    )

            try:
                run = await run_training(self.config.to_run_config(), shards, on_round=on_round)
            except Exception as e:
                logger.error("Training failed.", exc_info=e)
                raise e

        save_checkpoint(
            self.final_checkpoint_path,
            config_hash,
            run.server.round,
            run.server.shared,
            _checkpoint_clients(run.clients),
        )
        logger.info(
            "Training finished after %s rounds, best validation MRR %s at round %s.",
            run.server.round,
            run.best_mrr,
            run.best_round,
        )
        return run

    # --- Evaluation

    def load_clients(self, checkpoint_path: str | pathlib.Path | None = None) -> list[ClientState]:
        """Client states rebuilt from a checkpoint written under this same configuration."""
        checkpoint_path = pathlib.Path(checkpoint_path or self.final_checkpoint_path)
        checkpoint = load_checkpoint(checkpoint_path, expected_hash=self.config.config_hash())
        shards = self.make_shards()
        if len(checkpoint.clients) != len(shards):
            raise errors.CheckpointCorrupt(
                f"Checkpoint holds {len(checkpoint.clients)} clients, the configuration {len(shards)}."
            )

        ret = []
        for shard, client in zip(shards, checkpoint.clients):
            if (client.params.num_entities, client.params.num_relations) != (
                shard.vocab.num_entities,
                shard.vocab.num_relations,
            ):
                raise errors.CheckpointCorrupt(f"Client {shard.client_id} parameters do not fit its vocabulary.")
            ret.append(
                ClientState(
                    shard=shard,
                    params=client.params,
                    opt=client.opt,
                    seed=self.config.shuffle_seed,
                    rng=make_rng(self.config.shuffle_seed, shard.client_id),
                )
            )
        return ret

    async def evaluate(
        self,
        checkpoint_path: str | pathlib.Path | None = None,
        split: Split = Split.test,
        *,
        filtered: bool = True,
    ) -> dict[str, EvalReport]:
        """Per-client and aggregated link prediction reports, also written as ``eval_<split>.json`` and ``.txt``.

        Returns
        -------
        dict:
            ``{"client <id>": EvalReport, ..., "aggregate": EvalReport}``
        """
        clients = self.load_clients(checkpoint_path)
        reports: dict[str, EvalReport] = {}
        for client in clients:
            if not client.shard.split(split):
                logger.warning("Client %s has no %s triples, leaving it out.", client.client_id, split.value)
                continue
            reports[f"client {client.client_id}"] = evaluate_client(client, split, filtered=filtered)
        if not reports:
            raise errors.EmptySplit(f"No client holds {split.value} triples.")
        reports["aggregate"] = aggregate_reports(list(reports.values()))

        _write_json(
            self.output_dir / f"eval_{split.value}.json",
            {
                "split": split.value,
                "filtered": filtered,
                "clients": {
                    label.removeprefix("client "): report.to_dict()
                    for label, report in reports.items()
                    if label != "aggregate"
                },
                "aggregate": reports["aggregate"].to_dict(),
            },
        )
        table = format_table(reports)
        with open(self.output_dir / f"eval_{split.value}.txt", "w", encoding="utf-8", newline="\n") as file:
            file.write(table)
        logger.info("%s evaluation:\n%s", split.value, table)
        return reports

    # --- Studies

    async def compare(self, client_counts: Sequence[int], seeds: Sequence[int]) -> dict:
        """Federated against local-only training at equal compute, for each client count.

        Every (client count, seed) pair is trained for exactly ``rounds_max`` rounds in both modes, then evaluated on
        the test split. The medians over seeds of the aggregated test MRR are reported and written to
        ``compare.json``.
        """
        results = []
        for num_clients in client_counts:
            row = {"num_clients": num_clients}
            for mode in TrainingMode:
                mrrs = []
                for seed in seeds:
                    config = self.config.replace(
                        num_clients=num_clients,
                        partition_seed=seed,
                        init_seed=seed,
                        shuffle_seed=seed,
                        mode=mode,
                        patience=0,
                    )
                    shards = FLESTExperiment(config).make_shards()
                    run = await run_training(config.to_run_config(), shards)
                    test_reports = evaluate_clients(run.clients, Split.test)
                    if not test_reports:
                        raise errors.EmptySplit(f"No client holds test triples with {num_clients} clients.")
                    mrrs.append(aggregate_reports(list(test_reports.values())).mrr)
                    logger.info("%s clients, seed %s, %s: test MRR %s.", num_clients, seed, mode.value, mrrs[-1])
                row[mode.value] = {"mrrs": mrrs, "median_mrr": statistics.median(mrrs)}
            results.append(row)

        ret = {"seeds": list(seeds), "rounds": self.config.rounds_max, "results": results}
        _write_json(self.output_dir / constants.COMPARE_FILENAME, ret)
        return ret

    def gradcheck(self, *, corrupt: GradCorruption | None = None) -> GradcheckReport:
        """Runs the finite-difference gradient suite and writes ``gradcheck.json``."""
        ret = run_gradcheck(corrupt=corrupt)
        _write_json(self.output_dir / constants.GRADCHECK_FILENAME, ret.to_dict())
        return ret

    @staticmethod
    def format_compare(compare: dict) -> str:
        header = ("clients", "federated", "local_only")
        rows = [header]
        for row in compare["results"]:
            rows.append(
                (
                    str(row["num_clients"]),
                    f"{row['federated']['median_mrr']:.4f}",
                    f"{row['local_only']['median_mrr']:.4f}",
                )
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        return "\n".join("  ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in rows) + "\n"
