from __future__ import annotations

from logging import getLogger

import numpy as np

from .data import StringTriple
from .utils import make_rng


__all__ = ("synthetic_kg",)


logger = getLogger(__name__)


def synthetic_kg(
    num_entities: int,
    num_relations: int,
    num_triples: int,
    planted_rank: int,
    seed: int,
    *,
    noise: float = 0.1,
) -> list[StringTriple]:
    """Samples a KG whose adjacency tensor has planted low-rank structure.

    Every cell (h, r, t) with h != t gets the trilinear score <x_h, y_r, x_t> of seeded Gaussian embeddings plus a
    little Gaussian noise; the ``num_triples`` highest scoring cells become the triples. Names are ``e<i>`` and
    ``r<k>``, and triples come out sorted by (relation, head, tail).
    """
    max_triples = num_relations * num_entities * (num_entities - 1)
    if num_triples > max_triples:
        raise ValueError(f"Asked for {num_triples} triples, only {max_triples} non-self-loop cells exist.")

    rng = make_rng(seed)
    entity_factors = rng.standard_normal((num_entities, planted_rank))
    relation_factors = rng.standard_normal((num_relations, planted_rank))

    candidate_scores = []
    candidate_cells = []
    for rel in range(num_relations):
        scores = (entity_factors * relation_factors[rel]) @ entity_factors.T
        scores = scores + noise * rng.standard_normal(scores.shape)
        np.fill_diagonal(scores, -np.inf)

        # No relation can hold more than num_triples of the global top num_triples.
        flat = scores.ravel()
        keep = min(num_triples, flat.size)
        top = np.argpartition(-flat, keep - 1)[:keep]
        candidate_scores.append(flat[top])
        candidate_cells.append(np.stack([np.full(keep, rel), top // num_entities, top % num_entities], axis=1))

    all_scores = np.concatenate(candidate_scores)
    all_cells = np.concatenate(candidate_cells)
    # Stable sort on (-score) then lexicographic cell for a fully deterministic pick.
    order = np.lexsort((all_cells[:, 2], all_cells[:, 1], all_cells[:, 0], -all_scores))[:num_triples]
    chosen = all_cells[order]
    chosen = chosen[np.lexsort((chosen[:, 2], chosen[:, 1], chosen[:, 0]))]

    ret = [(f"e{head}", f"r{rel}", f"e{tail}") for rel, head, tail in chosen.tolist()]
    logger.debug(
        "Generated %s synthetic triples over %s entities and %s relations at planted rank %s.",
        len(ret),
        num_entities,
        num_relations,
        planted_rank,
    )
    return ret
