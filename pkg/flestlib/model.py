"""The FLEST parameterization: scoring, losses, analytic gradients and the local Adam trainer.

Every entity and relation is a column of a client-private loading matrix expressed in a shared dictionary basis, and
the three composite vectors of a triple are fused by a CP-factored core:

    u = W1 E_dic e_h,    v = W2 R_dic r_rel,    w = W3 E_dic e_t,    score = sum_k u_k v_k w_k

Training uses 1-N scoring: a (head, relation) pair is scored against every local entity at once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from logging import getLogger
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import constants, errors
from .data import Batch, make_batches
from .tensor import Matrix, Tensor3, frobenius_norm_sq, matmul, mode_n_product
from .utils import make_rng, sigmoid, softplus

if TYPE_CHECKING:
    from .data import ClientShard


__all__ = (
    "AdamState",
    "ComposedEmbeddings",
    "DropoutMasks",
    "GradSet",
    "Hyper",
    "ModelParams",
    "adam_step",
    "apply_dropout",
    "compose",
    "composite_entity",
    "composite_relation",
    "dictionary_penalty",
    "grad_all",
    "init_params",
    "loading_penalty",
    "loss_and_grad",
    "nll_loss",
    "prob_from_score",
    "reconstruct_dense",
    "sample_dropout_masks",
    "score_all_heads",
    "score_all_tails",
    "score_triple",
    "total_loss",
    "train_epoch",
)

logger = getLogger(__name__)


class _ParamArrays:
    """Shared helpers for dataclasses holding one array per model parameter."""

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in constants.PARAM_NAMES}

    def shared_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in constants.SHARED_PARAM_NAMES}


@dataclass
class ModelParams(_ParamArrays):
    rank: int
    sparsity: float
    """Ceiling ``s`` of the link function p = s * sigmoid(score)."""
    e_dic: np.ndarray
    """(r, r) entity dictionary, shared."""
    r_dic: np.ndarray
    """(r, r) relation dictionary, shared."""
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    e_loading: np.ndarray
    """(r, |E_c|) entity loadings, private."""
    r_loading: np.ndarray
    """(r, |R_c|) relation loadings, private."""

    def __post_init__(self):
        r = self.rank
        for name in constants.SHARED_PARAM_NAMES:
            if getattr(self, name).shape != (r, r):
                raise errors.ShapeMismatch(f"ModelParams.{name}", getattr(self, name).shape, (r, r))
        for name in constants.PRIVATE_PARAM_NAMES:
            if getattr(self, name).ndim != 2 or getattr(self, name).shape[0] != r:
                raise errors.ShapeMismatch(f"ModelParams.{name}", getattr(self, name).shape, (r, -1))
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError(f"Sparsity factor must be in (0, 1], got {self.sparsity}.")

    @property
    def num_entities(self) -> int:
        return self.e_loading.shape[1]

    @property
    def num_relations(self) -> int:
        return self.r_loading.shape[1]

    def replace(self, **arrays: np.ndarray) -> ModelParams:
        return dataclasses.replace(self, **arrays)

    def copy(self) -> ModelParams:
        return self.replace(**{name: array.copy() for name, array in self.as_dict().items()})


@dataclass
class GradSet(_ParamArrays):
    e_dic: np.ndarray
    r_dic: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    e_loading: np.ndarray
    r_loading: np.ndarray

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(array), initial=0.0)) for array in self.as_dict().values())


@dataclass(frozen=True)
class Hyper:
    alpha: float = 0.01
    """Weight of the dictionary orthogonality penalty."""
    beta: float = 1e-5
    """Weight of the loading L1 penalty."""
    lr: float = constants.REFERENCE_DEFAULTS["lr"]
    dropout_rate: float = constants.REFERENCE_DEFAULTS["dropout"]
    local_epochs: int = constants.REFERENCE_DEFAULTS["local_epochs"]
    batch_size: int = constants.REFERENCE_DEFAULTS["batch_size"]

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise errors.ConfigError(f"alpha and beta must be non-negative, got {self.alpha} and {self.beta}.")
        if self.lr <= 0:
            raise errors.ConfigError(f"Learning rate must be positive, got {self.lr}.")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise errors.ConfigError(f"Dropout rate must be in [0, 1), got {self.dropout_rate}.")
        if self.local_epochs < 0:
            raise errors.ConfigError(f"Local epochs must be non-negative, got {self.local_epochs}.")
        if self.batch_size < 1:
            raise errors.ConfigError(f"Batch size must be at least 1, got {self.batch_size}.")


@dataclass
class AdamState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0
    beta1: float = constants.ADAM_BETA1
    beta2: float = constants.ADAM_BETA2
    epsilon: float = constants.ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        return cls(
            first={name: np.zeros_like(array) for name, array in params.as_dict().items()},
            second={name: np.zeros_like(array) for name, array in params.as_dict().items()},
        )


@dataclass(frozen=True)
class ComposedEmbeddings:
    """Composite vectors of every local entity and relation, as columns."""

    head: np.ndarray
    """(r, |E_c|), column i is W1 E_dic e_i."""
    rel: np.ndarray
    """(r, |R_c|), column k is W2 R_dic r_k."""
    tail: np.ndarray
    """(r, |E_c|), column j is W3 E_dic e_j."""


@dataclass(frozen=True)
class DropoutMasks:
    """Inverted dropout masks of one training step, already scaled by 1 / (1 - rate)."""

    head: np.ndarray
    """(B, r)"""
    rel: np.ndarray
    """(B, r)"""
    tail: np.ndarray
    """(r, |E_c|), shared by every pair of the batch."""


# ---- Scoring.


def compose(params: ModelParams) -> ComposedEmbeddings:
    return ComposedEmbeddings(
        head=(params.w1 @ params.e_dic) @ params.e_loading,
        rel=(params.w2 @ params.r_dic) @ params.r_loading,
        tail=(params.w3 @ params.e_dic) @ params.e_loading,
    )


def _check_entity(params: ModelParams, entity_id: int):
    if not 0 <= entity_id < params.num_entities:
        raise errors.IndexOutOfRange(f"Entity id {entity_id} outside of [0, {params.num_entities}).")


def _check_relation(params: ModelParams, relation_id: int):
    if not 0 <= relation_id < params.num_relations:
        raise errors.IndexOutOfRange(f"Relation id {relation_id} outside of [0, {params.num_relations}).")


def composite_entity(
    params: ModelParams,
    entity_id: int,
    *,
    as_tail: bool = False,
    composed: ComposedEmbeddings | None = None,
) -> np.ndarray:
    """W1 E_dic e_id, or W3 E_dic e_id when ``as_tail``."""
    _check_entity(params, entity_id)
    composed = composed or compose(params)
    return (composed.tail if as_tail else composed.head)[:, entity_id].copy()


def composite_relation(
    params: ModelParams, relation_id: int, *, composed: ComposedEmbeddings | None = None
) -> np.ndarray:
    _check_relation(params, relation_id)
    composed = composed or compose(params)
    return composed.rel[:, relation_id].copy()


def _trilinear(left: np.ndarray, columns: np.ndarray) -> np.ndarray:
    # Accumulates rank by rank, so scoring one column or all of them adds in the same order.
    ret = np.zeros(columns.shape[1])
    for k in range(columns.shape[0]):
        ret += left[k] * columns[k]
    return ret


def score_triple(
    params: ModelParams, head: int, rel: int, tail: int, *, composed: ComposedEmbeddings | None = None
) -> float:
    _check_entity(params, head)
    _check_relation(params, rel)
    _check_entity(params, tail)
    composed = composed or compose(params)
    uv = composed.head[:, head] * composed.rel[:, rel]
    return float(_trilinear(uv, composed.tail[:, tail : tail + 1])[0])


def score_all_tails(
    params: ModelParams, head: int, rel: int, *, composed: ComposedEmbeddings | None = None
) -> np.ndarray:
    """Entry j is ``score_triple(params, head, rel, j)``."""
    _check_entity(params, head)
    _check_relation(params, rel)
    composed = composed or compose(params)
    return _trilinear(composed.head[:, head] * composed.rel[:, rel], composed.tail)


def score_all_heads(
    params: ModelParams, rel: int, tail: int, *, composed: ComposedEmbeddings | None = None
) -> np.ndarray:
    """Entry i is ``score_triple(params, i, rel, tail)``."""
    _check_relation(params, rel)
    _check_entity(params, tail)
    composed = composed or compose(params)
    return _trilinear(composed.rel[:, rel] * composed.tail[:, tail], composed.head)


def reconstruct_dense(params: ModelParams) -> Tensor3:
    """The full (|E_c|, |R_c|, |E_c|) score tensor, I x1 H x2 R x3 T. Only sensible for tiny vocabularies."""
    r = params.rank
    core = np.zeros((r, r, r))
    core[np.arange(r), np.arange(r), np.arange(r)] = 1.0

    composed = compose(params)
    ret = Tensor3.from_array(core)
    ret = mode_n_product(ret, Matrix.from_array(composed.head.T), 1)
    ret = mode_n_product(ret, Matrix.from_array(composed.rel.T), 2)
    return mode_n_product(ret, Matrix.from_array(composed.tail.T), 3)


# ---- Likelihood.


def _check_sparsity(sparsity: float):
    if not 0.0 < sparsity <= 1.0:
        raise ValueError(f"Sparsity factor must be in (0, 1], got {sparsity}.")


def _log1m(sparsity: float) -> float:
    return -np.inf if sparsity >= 1.0 else float(np.log1p(-sparsity))


def prob_from_score(theta: float | np.ndarray, sparsity: float) -> float | np.ndarray:
    _check_sparsity(sparsity)
    ret = sparsity * sigmoid(theta)
    return float(ret) if np.ndim(ret) == 0 else ret


def _nll_terms(scores: np.ndarray, labels: np.ndarray, sparsity: float) -> np.ndarray:
    # Log-space throughout: log p = log s - softplus(-x), log(1 - p) = log(1 - s + e^-x) - softplus(-x).
    log_p = np.log(sparsity) - softplus(-scores)
    log_not_p = np.logaddexp(_log1m(sparsity), -scores) - softplus(-scores)
    return -(labels * log_p + (1.0 - labels) * log_not_p)


def _nll_score_grad(scores: np.ndarray, labels: np.ndarray, sparsity: float) -> np.ndarray:
    """d(per-entry nll)/d(score) = (p - a) / (1 + (1 - s) e^x)."""
    p = sparsity * sigmoid(scores)
    return (p - labels) * sigmoid(-scores - _log1m(sparsity))


def nll_loss(scores: np.ndarray, labels: np.ndarray, sparsity: float) -> float:
    """Bernoulli negative log-likelihood under p = s * sigmoid(score).

    A vector is one (head, relation) pair and is summed; a (B, n) matrix is averaged over its B pairs.
    """
    _check_sparsity(sparsity)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise errors.ShapeMismatch("nll_loss", scores.shape, labels.shape)

    terms = _nll_terms(scores, labels, sparsity)
    if scores.ndim == 1:
        return float(np.sum(terms))
    if scores.shape[0] == 0:
        return 0.0
    return float(np.sum(terms) / scores.shape[0])


# ---- Penalties.


def dictionary_penalty(e_dic: np.ndarray | Matrix, r_dic: np.ndarray | Matrix) -> float:
    """||E_dic^T E_dic - I||_F^2 + ||R_dic^T R_dic - I||_F^2."""
    ret = 0.0
    for dic in (e_dic, r_dic):
        dic = dic if isinstance(dic, Matrix) else Matrix.from_array(dic)
        if dic.rows != dic.cols:
            raise errors.ShapeMismatch("dictionary_penalty", dic.shape, (dic.cols, dic.cols))
        ret += frobenius_norm_sq(matmul(dic.transpose(), dic) - Matrix.identity(dic.cols))
    return ret


def loading_penalty(e_loading: np.ndarray, r_loading: np.ndarray) -> float:
    return float(np.sum(np.abs(e_loading)) + np.sum(np.abs(r_loading)))


def _dictionary_grad(dic: np.ndarray) -> np.ndarray:
    return 4.0 * (dic @ dic.T @ dic - dic)


# ---- Loss and gradients.


def _check_batch(params: ModelParams, batch: Batch):
    if batch.targets.shape != (len(batch), params.num_entities):
        raise errors.ShapeMismatch("batch targets", batch.targets.shape, (len(batch), params.num_entities))
    if len(batch):
        heads, rels = batch.pairs[:, 0], batch.pairs[:, 1]
        if heads.min() < 0 or heads.max() >= params.num_entities:
            raise errors.IndexOutOfRange(f"Batch head ids outside of [0, {params.num_entities}).")
        if rels.min() < 0 or rels.max() >= params.num_relations:
            raise errors.IndexOutOfRange(f"Batch relation ids outside of [0, {params.num_relations}).")


def _forward(params: ModelParams, batch: Batch, masks: DropoutMasks | None):
    heads, rels = batch.pairs[:, 0], batch.pairs[:, 1]
    a1 = params.w1 @ params.e_dic
    a2 = params.w2 @ params.r_dic
    a3 = params.w3 @ params.e_dic

    head_raw = (a1 @ params.e_loading[:, heads]).T  # (B, r)
    rel_raw = (a2 @ params.r_loading[:, rels]).T  # (B, r)
    tail_raw = a3 @ params.e_loading  # (r, n)
    if masks is None:
        head_vec, rel_vec, tail_mat = head_raw, rel_raw, tail_raw
    else:
        head_vec, rel_vec, tail_mat = head_raw * masks.head, rel_raw * masks.rel, tail_raw * masks.tail

    scores = (head_vec * rel_vec) @ tail_mat
    return scores, (a1, a2, a3, head_vec, rel_vec, tail_mat)


def total_loss(params: ModelParams, batch: Batch, hyper: Hyper, masks: DropoutMasks | None = None) -> float:
    """Batch nll (mean over pairs) + alpha * dictionary penalty + beta * loading penalty."""
    _check_batch(params, batch)
    if len(batch):
        scores, _ = _forward(params, batch, masks)
        nll = nll_loss(scores, batch.targets, params.sparsity)
    else:
        nll = 0.0

    return (
        nll
        + hyper.alpha * dictionary_penalty(params.e_dic, params.r_dic)
        + hyper.beta * loading_penalty(params.e_loading, params.r_loading)
    )


def loss_and_grad(
    params: ModelParams, batch: Batch, hyper: Hyper, masks: DropoutMasks | None = None
) -> tuple[float, GradSet]:
    """``total_loss`` and its analytic gradient with respect to every parameter, from one forward pass."""
    _check_batch(params, batch)
    grad_e_dic = hyper.alpha * _dictionary_grad(params.e_dic)
    grad_r_dic = hyper.alpha * _dictionary_grad(params.r_dic)
    grad_e_loading = hyper.beta * np.sign(params.e_loading)
    grad_r_loading = hyper.beta * np.sign(params.r_loading)
    grad_w1 = np.zeros_like(params.w1)
    grad_w2 = np.zeros_like(params.w2)
    grad_w3 = np.zeros_like(params.w3)

    nll = 0.0
    if len(batch):
        heads, rels = batch.pairs[:, 0], batch.pairs[:, 1]
        scores, (a1, a2, a3, head_vec, rel_vec, tail_mat) = _forward(params, batch, masks)
        nll = nll_loss(scores, batch.targets, params.sparsity)

        # Likelihood gradient per batch cell, the mean over pairs folded in.
        cell_grad = _nll_score_grad(scores, batch.targets, params.sparsity) / len(batch)  # (B, n)

        mixed = cell_grad @ tail_mat.T  # (B, r)
        grad_head = rel_vec * mixed
        grad_rel = head_vec * mixed
        grad_tail = (head_vec * rel_vec).T @ cell_grad  # (r, n)
        if masks is not None:
            grad_head = grad_head * masks.head
            grad_rel = grad_rel * masks.rel
            grad_tail = grad_tail * masks.tail

        grad_a1 = grad_head.T @ params.e_loading[:, heads].T
        grad_a2 = grad_rel.T @ params.r_loading[:, rels].T
        grad_a3 = grad_tail @ params.e_loading.T

        grad_e_loading = grad_e_loading + a3.T @ grad_tail
        np.add.at(grad_e_loading.T, heads, grad_head @ a1)
        np.add.at(grad_r_loading.T, rels, grad_rel @ a2)

        grad_w1 = grad_a1 @ params.e_dic.T
        grad_w2 = grad_a2 @ params.r_dic.T
        grad_w3 = grad_a3 @ params.e_dic.T
        grad_e_dic = grad_e_dic + params.w1.T @ grad_a1 + params.w3.T @ grad_a3
        grad_r_dic = grad_r_dic + params.w2.T @ grad_a2

    loss = (
        nll
        + hyper.alpha * dictionary_penalty(params.e_dic, params.r_dic)
        + hyper.beta * loading_penalty(params.e_loading, params.r_loading)
    )
    return loss, GradSet(
        e_dic=grad_e_dic,
        r_dic=grad_r_dic,
        w1=grad_w1,
        w2=grad_w2,
        w3=grad_w3,
        e_loading=grad_e_loading,
        r_loading=grad_r_loading,
    )


def grad_all(params: ModelParams, batch: Batch, hyper: Hyper, masks: DropoutMasks | None = None) -> GradSet:
    return loss_and_grad(params, batch, hyper, masks)[1]


# ---- Optimization.


def adam_step(state: AdamState, params: ModelParams, grads: GradSet, lr: float) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every parameter. Inputs are left untouched."""
    step = state.step + 1
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step

    new_params = {}
    new_first = {}
    new_second = {}
    for name, param in params.as_dict().items():
        grad = getattr(grads, name)
        if grad.shape != param.shape or state.first[name].shape != param.shape:
            raise errors.ShapeMismatch(f"adam_step {name}", param.shape, grad.shape)

        first = state.beta1 * state.first[name] + (1.0 - state.beta1) * grad
        second = state.beta2 * state.second[name] + (1.0 - state.beta2) * (grad * grad)
        new_params[name] = param - lr * (first / bias1) / (np.sqrt(second / bias2) + state.epsilon)
        new_first[name] = first
        new_second[name] = second

    return params.replace(**new_params), dataclasses.replace(
        state, first=new_first, second=new_second, step=step
    )


def _random_orthogonal(rng: np.random.Generator, size: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def init_params(
    seed: int | Sequence[int], rank: int, num_entities: int, num_relations: int, sparsity: float
) -> ModelParams:
    """Orthogonal dictionaries, fusion weights near identity, Gaussian loadings of scale 1/sqrt(r).

    Shared parameters are drawn before the loadings, so they depend on the seed only.
    """
    if rank < 1:
        raise ValueError(f"Rank must be at least 1, got {rank}.")
    rng = make_rng(*(seed if isinstance(seed, Sequence) else (seed,)))

    e_dic = _random_orthogonal(rng, rank)
    r_dic = _random_orthogonal(rng, rank)
    w1, w2, w3 = (np.eye(rank) + 0.01 * rng.standard_normal((rank, rank)) for _ in range(3))
    scale = 1.0 / np.sqrt(rank)
    return ModelParams(
        rank=rank,
        sparsity=sparsity,
        e_dic=e_dic,
        r_dic=r_dic,
        w1=w1,
        w2=w2,
        w3=w3,
        e_loading=scale * rng.standard_normal((rank, num_entities)),
        r_loading=scale * rng.standard_normal((rank, num_relations)),
    )


def _dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def apply_dropout(
    vector: np.ndarray, rate: float, rng: np.random.Generator, *, training: bool = True
) -> np.ndarray:
    """Inverted dropout, identity outside of training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}.")
    if not training or rate == 0.0:
        return vector
    return vector * _dropout_mask(np.shape(vector), rate, rng)


def sample_dropout_masks(
    num_pairs: int, rank: int, num_entities: int, rate: float, rng: np.random.Generator
) -> DropoutMasks | None:
    if rate == 0.0:
        return None
    return DropoutMasks(
        head=_dropout_mask((num_pairs, rank), rate, rng),
        rel=_dropout_mask((num_pairs, rank), rate, rng),
        tail=_dropout_mask((rank, num_entities), rate, rng),
    )


def train_epoch(
    params: ModelParams,
    opt: AdamState,
    shard: ClientShard,
    hyper: Hyper,
    rng: np.random.Generator,
    seed: int,
    epoch: int,
) -> tuple[ModelParams, AdamState, float]:
    """One epoch of mini-batch Adam over the shard's training split. Returns the mean batch loss."""
    losses = []
    for batch in make_batches(shard, hyper.batch_size, seed, epoch):
        masks = sample_dropout_masks(len(batch), params.rank, params.num_entities, hyper.dropout_rate, rng)
        loss, grads = loss_and_grad(params, batch, hyper, masks)
        params, opt = adam_step(opt, params, grads, hyper.lr)
        losses.append(loss)

    mean_loss = float(np.mean(losses)) if losses else 0.0
    logger.debug("Client %s epoch %s: %s batches, mean loss %s.", shard.client_id, epoch, len(losses), mean_loss)
    return params, opt, mean_loss
