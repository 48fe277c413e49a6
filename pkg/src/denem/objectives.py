"""Differentiable losses over predicted class probabilities.

Every function here takes probability tensors of shape ``(N, C)`` (rows on
the simplex) rather than logits, so the same code serves training, test-time
adaptation and the brute-force checks in the test suite. All quantities are
in nats.
"""
from typing import Sequence

import torch

EPS = 1e-12
NORM_TOL = 1e-4


def _check_rows(p: torch.Tensor, name: str = "probabilities") -> None:
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ValueError(f"{name} must have a trailing class dimension, got shape {tuple(p.shape)}")
    with torch.no_grad():
        if not torch.isfinite(p).all():
            raise ValueError(f"{name} contain non-finite values")
        if (p < -NORM_TOL).any() or (p > 1 + NORM_TOL).any():
            raise ValueError(f"{name} must lie in [0, 1]")
        dev = (p.sum(-1) - 1).abs().max().item() if p.numel() else 0.0
        if dev > NORM_TOL:
            raise ValueError(f"{name} rows must sum to 1 (max deviation {dev:.3g})")


def _check_members(member_probs: Sequence[torch.Tensor], min_members: int = 1) -> None:
    if len(member_probs) < min_members:
        raise ValueError(f"need at least {min_members} member batch(es), got {len(member_probs)}")
    shape = tuple(member_probs[0].shape)
    if len(shape) != 2 or shape[0] < 1:
        raise ValueError(f"member batches must be (N, C) with N >= 1, got {shape}")
    for i, p in enumerate(member_probs):
        if tuple(p.shape) != shape:
            raise ValueError(f"member {i} has shape {tuple(p.shape)}, expected {shape}")
        _check_rows(p, f"member {i} probabilities")


def xlogy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``p * log(q)`` with ``q`` clamped to ``[EPS, 1]``, so ``0 * log 0 == 0``."""
    return p * torch.log(q.clamp(EPS, 1.0))


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy along the last axis.

    A 1-D input returns a scalar; an ``(N, C)`` batch returns ``N`` values.
    """
    _check_rows(p)
    return -xlogy(p, p).sum(-1)


def mean_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Batch-mean entropy; the TENT objective."""
    return entropy(probs).mean()


def marginal_probability(member_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    _check_members(member_probs)
    return torch.stack(list(member_probs)).mean(0)


def marginal_entropy_loss(member_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Batch-mean entropy of the member-averaged prediction."""
    return entropy(marginal_probability(member_probs)).mean()


def memo_marginal_entropy(augmented_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Entropy of predictions averaged over augmented views (MEMO).

    Arithmetically the same as :func:`marginal_entropy_loss`; the average is
    taken across views of the same inputs instead of across ensemble members.
    """
    if len(augmented_probs) == 0:
        raise ValueError("memo_marginal_entropy needs at least one augmented batch")
    return marginal_entropy_loss(augmented_probs)


def empirical_joint(pa: torch.Tensor, pb: torch.Tensor) -> torch.Tensor:
    """Batch average of per-sample outer products ``pa_i (x) pb_i``."""
    if pa.ndim != 2 or pb.ndim != 2:
        raise ValueError("empirical_joint expects two (N, C) batches")
    if pa.shape[0] != pb.shape[0]:
        raise ValueError(f"batch size mismatch: {pa.shape[0]} vs {pb.shape[0]}")
    if pa.shape[0] < 1:
        raise ValueError("empty batch")
    _check_rows(pa, "pa")
    _check_rows(pb, "pb")
    return pa.transpose(0, 1) @ pb / pa.shape[0]


def pairwise_mi_loss(pa: torch.Tensor, pb: torch.Tensor) -> torch.Tensor:
    """KL(joint || marginal_a (x) marginal_b) of two members' predictions.

    The joint and both marginals are estimated over the batch, so the value
    is zero whenever one member's prediction does not vary across samples.
    """
    joint = empirical_joint(pa, pb)
    product = torch.outer(pa.mean(0), pb.mean(0))
    kl = (xlogy(joint, joint) - xlogy(joint, product)).sum()
    # tiny negative values from rounding only
    return kl.clamp_min(0.0)


def mutual_information_total(member_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of :func:`pairwise_mi_loss` over ordered member pairs ``m != m'``.

    The estimator is symmetric, so each unordered pair is evaluated once and
    counted twice.
    """
    _check_members(member_probs, min_members=2)
    total = member_probs[0].new_zeros(())
    m = len(member_probs)
    for i in range(m):
        for j in range(i + 1, m):
            total = total + 2 * pairwise_mi_loss(member_probs[i], member_probs[j])
    return total


def cross_entropy_sum(member_probs: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Sum over members of the batch-mean negative log-likelihood."""
    _check_members(member_probs)
    n, c = member_probs[0].shape
    labels = torch.as_tensor(labels, dtype=torch.long, device=member_probs[0].device)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c - 1}]")
    total = member_probs[0].new_zeros(())
    for p in member_probs:
        picked = p.gather(1, labels[:, None]).squeeze(1)
        total = total - torch.log(picked.clamp(EPS, 1.0)).mean()
    return total


def _check_lambda(lam: float) -> None:
    if not lam >= 0:
        raise ValueError(f"diversification weight must be >= 0, got {lam}")


def training_loss(member_probs: Sequence[torch.Tensor], labels: torch.Tensor, lam: float = 10.0) -> torch.Tensor:
    """Summed cross-entropy plus ``lam`` times the ordered-pair MI total.

    With a single member the MI term is absent, which is the plain
    single-network baseline.
    """
    _check_lambda(lam)
    loss = cross_entropy_sum(member_probs, labels)
    if len(member_probs) >= 2 and lam > 0:
        loss = loss + lam * mutual_information_total(member_probs)
    return loss


def adaptation_loss(member_probs: Sequence[torch.Tensor], lam: float = 10.0) -> torch.Tensor:
    """Unsupervised DEnEM objective: marginal entropy plus ``lam`` times MI."""
    _check_lambda(lam)
    _check_members(member_probs, min_members=2)
    loss = marginal_entropy_loss(member_probs)
    if lam > 0:
        loss = loss + lam * mutual_information_total(member_probs)
    return loss
