"""Triplet sampling, cosine similarity and the Siamese-triplet hinge loss."""

import logging
from typing import List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from errors import ConfigError, InsufficientUsersError, ShapeError
from metrics import SAMPLER_FALLBACKS
from aggregator.schemas import AggregatedEmbedding
from datapipe.schemas import UserArchive
from encoder.schemas import DayEmbedding
from numkernel.schemas import Tensor
from siamese.schemas import LossBreakdown, Similarity, TripletBatch, TripletSample

logger = logging.getLogger(__name__)


# ---------- sampling ----------


def _same_user_sets(
    n_days: int, support: int, positive: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Disjoint reference/positive day indices; replacement when days run short."""
    if n_days >= support + positive:
        picked = rng.choice(n_days, support + positive, replace=False)
        return picked[:support], picked[support:], False
    reference = rng.choice(n_days, support, replace=n_days < support)
    rest = np.setdiff1d(np.arange(n_days), reference)
    if rest.size:
        positive_idx = rng.choice(rest, positive, replace=rest.size < positive)
    else:
        positive_idx = rng.choice(n_days, positive, replace=True)
    return reference, positive_idx, True


def sample_triplet_batch(
    archives: Mapping[str, UserArchive],
    anchor_users: Sequence[str],
    support_size: int,
    positive_size: int,
    negative_size: int,
    rng: np.random.Generator,
) -> TripletSample:
    """Reference/positive days of each anchor plus one day from each of N^q other users."""
    users = sorted(u for u, a in archives.items() if a.days)
    if len(users) < 2:
        raise InsufficientUsersError(
            f"Triplet sampling needs at least 2 users with days, got {len(users)}"
        )
    triplets: List[TripletBatch] = []
    fallbacks = 0
    for anchor in anchor_users:
        archive = archives[anchor]
        if not archive.days:
            raise ShapeError(f"anchor user {anchor} has no days")
        reference, positive, fell_back = _same_user_sets(
            len(archive.days), support_size, positive_size, rng
        )
        if fell_back:
            fallbacks += 1
            logger.warning(
                "anchor=%s has %d days, fewer than %d; sampling with replacement",
                anchor,
                len(archive.days),
                support_size + positive_size,
            )

        others = [u for u in users if u != anchor]
        chosen = rng.choice(len(others), negative_size, replace=len(others) < negative_size)
        negatives = []
        for i in chosen:
            other_days = archives[others[i]].days
            negatives.append(other_days[int(rng.integers(len(other_days)))])

        triplets.append(
            TripletBatch(
                anchor_user=anchor,
                reference=[archive.days[i] for i in reference],
                positive=[archive.days[i] for i in positive],
                negative=negatives,
            )
        )
    if fallbacks:
        SAMPLER_FALLBACKS.inc(fallbacks)
    return TripletSample(triplets=triplets, fallbacks=fallbacks)


# ---------- similarity ----------


def cosine_similarity(a: Tensor, b: Tensor) -> Similarity:
    """Dot product of the L2-normalised vectors; 0 and degenerate on a zero vector."""
    if a.shape != b.shape:
        raise ShapeError(f"similarity: shapes {a.shape} and {b.shape} differ")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        return Similarity(0.0, True)
    return Similarity(float(np.dot(a / norm_a, b / norm_b)), False)


def cosine_similarity_backward(
    a: Tensor, b: Tensor, similarity: Similarity, grad: float
) -> Tuple[Tensor, Tensor]:
    if similarity.degenerate:
        return np.zeros_like(a), np.zeros_like(b)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    unit_a, unit_b = a / norm_a, b / norm_b
    s = similarity.value
    return grad * (unit_b - s * unit_a) / norm_a, grad * (unit_a - s * unit_b) / norm_b


def embedding_similarity(reference: AggregatedEmbedding, query: DayEmbedding) -> Similarity:
    return cosine_similarity(reference.vector, query.vector)


# ---------- losses ----------


class TripletCache(NamedTuple):
    reference: Tensor
    positives: Tensor
    negatives: Tensor
    positive_sims: List[Similarity]
    negative_sims: List[Similarity]
    active: np.ndarray  # positives x negatives


def triplet_loss_forward(
    reference: Tensor, positives: Tensor, negatives: Tensor, margin: float
) -> Tuple[float, TripletCache]:
    """Sum over (p, q) of max(0, sim(ref, q) - sim(ref, p) + margin)."""
    if len(positives) == 0 or len(negatives) == 0:
        raise ShapeError("triplet loss needs at least one positive and one negative")
    positive_sims = [cosine_similarity(reference, p) for p in positives]
    negative_sims = [cosine_similarity(reference, q) for q in negatives]
    sp = np.array([s.value for s in positive_sims])
    sq = np.array([s.value for s in negative_sims])
    hinge = sq[None, :] - sp[:, None] + margin
    active = hinge > 0.0
    loss = float(np.sum(np.where(active, hinge, 0.0)))
    cache = TripletCache(
        reference, np.asarray(positives), np.asarray(negatives), positive_sims, negative_sims, active
    )
    return loss, cache


def triplet_loss_backward(grad: float, cache: TripletCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients wrt (reference, positives, negatives); inactive pairs contribute nothing."""
    grad_reference = np.zeros_like(cache.reference)
    grad_positives = np.zeros_like(cache.positives)
    grad_negatives = np.zeros_like(cache.negatives)
    per_positive = -grad * cache.active.sum(axis=1)
    per_negative = grad * cache.active.sum(axis=0)
    for i, (vector, sim) in enumerate(zip(cache.positives, cache.positive_sims)):
        if per_positive[i]:
            g_ref, g_vec = cosine_similarity_backward(cache.reference, vector, sim, per_positive[i])
            grad_reference += g_ref
            grad_positives[i] = g_vec
    for j, (vector, sim) in enumerate(zip(cache.negatives, cache.negative_sims)):
        if per_negative[j]:
            g_ref, g_vec = cosine_similarity_backward(cache.reference, vector, sim, per_negative[j])
            grad_reference += g_ref
            grad_negatives[j] = g_vec
    return grad_reference, grad_positives, grad_negatives


def siamese_triplet_loss(
    reference: AggregatedEmbedding,
    positives: Sequence[DayEmbedding],
    negatives: Sequence[DayEmbedding],
    margin: float,
) -> float:
    loss, _ = triplet_loss_forward(
        reference.vector,
        np.stack([p.vector for p in positives]) if positives else np.empty((0,)),
        np.stack([q.vector for q in negatives]) if negatives else np.empty((0,)),
        margin,
    )
    return loss


def joint_loss(
    l_ae: float,
    l_s: float,
    lambda_weight: float,
    head_loss: float = 0.0,
    head_weight: float = 0.0,
) -> LossBreakdown:
    if lambda_weight < 0 or head_weight < 0:
        raise ConfigError(f"loss weights must be non-negative, got {lambda_weight}, {head_weight}")
    return LossBreakdown(
        l_ae=l_ae,
        l_s=l_s,
        l_joint=l_ae + lambda_weight * l_s + head_weight * head_loss,
        lambda_weight=lambda_weight,
        head_loss=head_loss,
        head_weight=head_weight,
    )
