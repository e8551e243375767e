"""Training objectives: NT-Xent, similarity-distribution KD, SimSiam.

All embedding batches are ``(N, m)`` tensors. NT-Xent and SimSiam average
over anchors/rows. The KD term defaults to a mean over all N x N similarity
pairs (``torch.nn.functional.kl_div``'s default reduction on a square
matrix), which keeps it well below the contrastive loss so that a large
distillation weight such as 100 stays in the useful range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import torch
import torch.nn.functional as F

from .errors import (
    InvalidDistribution,
    NonFiniteLoss,
    ShapeMismatch,
    TemperatureNonPositive,
    ZeroNormRow,
)

ZERO_NORM_EPS = 1e-12
ROW_SUM_TOL = 1e-6


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() != 2 or a.shape != b.shape:
        raise ShapeMismatch(f"expected two (N, m) batches of equal shape, got {tuple(a.shape)} and {tuple(b.shape)}")


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise TemperatureNonPositive(f"temperature must be > 0, got {tau}")


def normalize_rows(batch: torch.Tensor) -> torch.Tensor:
    """Scale each row to unit Euclidean norm.

    Raises:
        ZeroNormRow: if any row norm is <= 1e-12 (degenerate projector output).
    """
    if batch.dim() != 2:
        raise ShapeMismatch(f"expected an (N, m) batch, got shape {tuple(batch.shape)}")
    norms = batch.norm(dim=1, keepdim=True)
    if bool((norms <= ZERO_NORM_EPS).any()):
        bad = torch.nonzero(norms.squeeze(1) <= ZERO_NORM_EPS).flatten().tolist()
        raise ZeroNormRow(f"rows {bad} have (near) zero norm")
    return batch / norms


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(i, j) entry is the cosine between ``a[i]`` and ``b[j]``."""
    _check_pair(a, b)
    return normalize_rows(a) @ normalize_rows(b).T


def nt_xent_loss(z1: torch.Tensor, z2: torch.Tensor, tau_c: float = 0.5) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over the 2N concatenated views.

    Every one of the 2N rows is an anchor. Its positive is the other view of the
    same sample; the remaining 2(N-1) views are negatives. Returns the mean
    per-anchor loss. With N=1 there are no negatives and the loss is 0.
    """
    _check_pair(z1, z2)
    _check_temperature(tau_c)
    n = z1.shape[0]
    z = normalize_rows(torch.cat([z1, z2], dim=0))
    logits = (z @ z.T) / tau_c
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    idx = torch.arange(2 * n, device=z.device)
    positives = torch.cat([idx[n:], idx[:n]])
    # cross_entropy applies a max-shifted log-softmax
    return F.cross_entropy(logits, positives, reduction="mean")


@dataclass(frozen=True)
class SimilarityDistribution:
    """Row-stochastic N x N matrix kept in log space.

    ``log_probs`` is the row-wise log-softmax; ``probs`` is derived from it.
    """

    log_probs: torch.Tensor
    temperature: float = float("nan")

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    @property
    def shape(self):
        return self.log_probs.shape

    def detach(self) -> "SimilarityDistribution":
        return SimilarityDistribution(self.log_probs.detach(), self.temperature)

    @classmethod
    def from_probs(cls, probs, temperature: float = float("nan")) -> "SimilarityDistribution":
        """Wrap an explicit probability matrix, validating that it is row-stochastic."""
        probs = torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
        if probs.dim() == 1:
            probs = probs.unsqueeze(0)
        _validate_probs(probs)
        return cls(probs.log(), temperature)


def _validate_probs(probs: torch.Tensor) -> None:
    if probs.dim() != 2:
        raise InvalidDistribution(f"expected a 2-D matrix, got shape {tuple(probs.shape)}")
    if not bool(torch.isfinite(probs).all()) or bool((probs <= 0).any()) or bool((probs > 1).any()):
        raise InvalidDistribution("entries must lie in (0, 1]")
    err = (probs.sum(dim=1) - 1).abs().max().item()
    if err > ROW_SUM_TOL:
        raise InvalidDistribution(f"rows must sum to 1 (max deviation {err:.3g})")


def similarity_distribution(z_a: torch.Tensor, z_b: torch.Tensor, tau: float = 0.1) -> SimilarityDistribution:
    """Row-wise softmax of the temperature-scaled cosine-similarity matrix between two views."""
    _check_temperature(tau)
    logits = cosine_similarity_matrix(z_a, z_b) / tau
    return SimilarityDistribution(F.log_softmax(logits, dim=1), float(tau))


KD_REDUCTIONS = ("pairmean", "batchmean")


def kd_loss(self_dist: SimilarityDistribution, peer_dist: SimilarityDistribution,
            detach_target: bool = True, reduction: str = "pairmean") -> torch.Tensor:
    """KL(peer || self) between row-stochastic similarity matrices.

    Args:
        self_dist: distribution of the peer being updated.
        peer_dist: the other peer's distribution, used as the target.
        detach_target: when True no gradient reaches the target's producer.
        reduction: ``"batchmean"`` averages the per-row KL over the N rows.
            ``"pairmean"`` additionally divides by N, i.e. sums over all
            entries and divides by N^2. A single row gives the same value
            under both.
    """
    if reduction not in KD_REDUCTIONS:
        raise ValueError(f"reduction must be one of {KD_REDUCTIONS}, got {reduction!r}")
    if self_dist.shape != peer_dist.shape or len(self_dist.shape) != 2:
        raise ShapeMismatch(f"distribution shapes differ: {tuple(self_dist.shape)} vs {tuple(peer_dist.shape)}")
    for d in (self_dist, peer_dist):
        row_err = (d.log_probs.detach().exp().sum(dim=1) - 1).abs().max().item()
        if not math.isfinite(row_err) or row_err > ROW_SUM_TOL:
            raise InvalidDistribution(f"rows must sum to 1 (max deviation {row_err:.3g})")
    target_log = peer_dist.log_probs.detach() if detach_target else peer_dist.log_probs
    per_row = (target_log.exp() * (target_log - self_dist.log_probs)).sum(dim=1)
    if reduction == "pairmean":
        return per_row.sum() / per_row.numel() ** 2
    return per_row.mean()


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean over rows of -cos(p_i, z_i), with ``z`` treated as a constant."""
    _check_pair(p, z)
    return -(normalize_rows(p) * normalize_rows(z.detach())).sum(dim=1).mean()


def simsiam_loss(p1: torch.Tensor, z2: torch.Tensor, p2: torch.Tensor | None = None,
                 z1: torch.Tensor | None = None) -> torch.Tensor:
    """SimSiam objective.

    With two arguments this is the one-directional ``D(p1, z2)``. Given both
    directions it returns the symmetrized ``D(p1, z2)/2 + D(p2, z1)/2``. The
    ``z`` targets never receive gradient.
    """
    if (p2 is None) != (z1 is None):
        raise ValueError("p2 and z1 must be given together")
    if p2 is None:
        return negative_cosine(p1, z2)
    return 0.5 * negative_cosine(p1, z2) + 0.5 * negative_cosine(p2, z1)


@dataclass
class LossValue:
    value: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)


def combined_objective(task_loss: torch.Tensor, kd: torch.Tensor, lam: float = 100.0) -> LossValue:
    """``task_loss + lam * kd`` with the pieces recorded in ``components``."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    task_f, kd_f = float(task_loss.detach()), float(kd.detach())
    if not (math.isfinite(task_f) and math.isfinite(kd_f)):
        raise NonFiniteLoss("non-finite loss component", {"task": task_f, "kd": kd_f})
    total = task_loss + lam * kd
    return LossValue(total, {"task": task_f, "kd": kd_f, "total": float(total.detach())})
