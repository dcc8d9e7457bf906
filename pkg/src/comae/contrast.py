"""Per-attribute-dimension pair sets and the contrastive objective over them.

For every attribute dimension d and anchor i, the positive set holds the
other samples whose value in dimension d is within epsilon of the anchor's;
negatives are drawn uniformly without replacement from the complement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ._validation import as_array, check_finite, check_non_negative, check_positive

SIMILARITIES = ("per_dim", "dot")


@dataclass(frozen=True)
class PairSets:
    """Boolean adjacency per dimension: mask[d, i, j] says j is in i's set.

    Anchors are excluded from their own sets, and the positive and negative
    masks are disjoint per (d, i).
    """

    pos_mask: np.ndarray
    neg_mask: np.ndarray
    epsilon: float
    neg_count: int
    seed: int

    def __post_init__(self):
        pos = as_array(self.pos_mask, "pos_mask", dtype=bool, ndim=3)
        neg = as_array(self.neg_mask, "neg_mask", dtype=bool, ndim=3)
        if pos.shape != neg.shape or pos.shape[1] != pos.shape[2]:
            raise ValueError(f"mask shapes must match and be square: {pos.shape} vs {neg.shape}")
        diag = np.arange(pos.shape[1])
        if pos[:, diag, diag].any() or neg[:, diag, diag].any():
            raise ValueError("a sample may not appear in its own pair sets")
        if (pos & neg).any():
            raise ValueError("positive and negative sets must be disjoint")
        object.__setattr__(self, "pos_mask", pos)
        object.__setattr__(self, "neg_mask", neg)

    @property
    def num_dims(self):
        return self.pos_mask.shape[0]

    @property
    def num_samples(self):
        return self.pos_mask.shape[1]

    def positives(self, dim, i):
        """Indices of the positive set for anchor i in dimension dim."""
        return np.flatnonzero(self.pos_mask[dim, i])

    def negatives(self, dim, i):
        return np.flatnonzero(self.neg_mask[dim, i])

    @classmethod
    def from_indices(cls, num_samples, positives, negatives, epsilon, neg_count, seed):
        """Build masks from {(dim, i): indices} mappings (missing keys = empty)."""
        dims = 1 + max((d for d, _ in list(positives) + list(negatives)), default=0)
        pos = np.zeros((dims, num_samples, num_samples), dtype=bool)
        neg = np.zeros_like(pos)
        for (d, i), idx in positives.items():
            pos[d, i, list(idx)] = True
        for (d, i), idx in negatives.items():
            neg[d, i, list(idx)] = True
        return cls(pos, neg, epsilon, neg_count, seed)


def build_pair_sets(attributes, epsilon, neg_count, seed):
    """Construct positive/negative sets from ground-truth attribute values.

    Positives in dimension d are all j != i with |a[i, d] - a[j, d]| < epsilon.
    neg_count negatives are sampled uniformly without replacement from the
    complement (truncated when the complement is smaller). Deterministic for a
    fixed seed; the sampling order is dimension-major, then anchor.
    """
    attrs = as_array(attributes, "attributes", ndim=2).astype(np.float64)
    check_finite(attrs, "attributes")
    check_positive(epsilon, "epsilon")
    check_non_negative(neg_count, "neg_count")

    n, dims = attrs.shape
    rng = np.random.default_rng(seed)
    pos = np.zeros((dims, n, n), dtype=bool)
    neg = np.zeros_like(pos)
    eye = np.eye(n, dtype=bool)
    for d in range(dims):
        col = attrs[:, d]
        close = np.abs(col[:, None] - col[None, :]) < epsilon
        close &= ~eye
        pos[d] = close
        for i in range(n):
            complement = np.flatnonzero(~close[i] & ~eye[i])
            take = min(neg_count, complement.size)
            if take:
                chosen = rng.choice(complement, size=take, replace=False)
                neg[d, i, np.sort(chosen)] = True
    return PairSets(pos, neg, float(epsilon), int(neg_count), int(seed))


def pairwise_loss(predicted_attributes, sets, tau, subset=None, similarity="per_dim"):
    """Contrastive loss over the pair sets, averaged over non-empty anchors.

    Each (dimension, anchor) term is -log of the softmax mass the positives
    take within the anchor's whole set at temperature tau. Similarity between
    anchors is the product of their predicted values in that dimension
    ("per_dim") or the full attribute dot product ("dot"). Anchors with an
    empty positive set contribute nothing and do not count toward the average.
    """
    check_positive(tau, "tau")
    if similarity not in SIMILARITIES:
        raise ValueError(f"similarity must be one of {SIMILARITIES}, got {similarity!r}")
    a = predicted_attributes
    if a.ndim != 2:
        raise ValueError(f"predicted attributes must be (n, k), got shape {tuple(a.shape)}")
    if a.shape[1] != sets.num_dims:
        raise ValueError(
            f"attribute dimension {a.shape[1]} does not match pair sets ({sets.num_dims})"
        )

    pos_np, neg_np = sets.pos_mask, sets.neg_mask
    if subset is not None:
        subset = np.asarray(subset, dtype=np.int64)
        pos_np = pos_np[:, subset[:, None], subset[None, :]]
        neg_np = neg_np[:, subset[:, None], subset[None, :]]
    if a.shape[0] != pos_np.shape[1]:
        raise ValueError(
            f"{a.shape[0]} predictions vs pair sets over {pos_np.shape[1]} samples"
        )
    pos = torch.from_numpy(pos_np).to(a.device)
    both = torch.from_numpy(pos_np | neg_np).to(a.device)

    if similarity == "per_dim":
        cols = a.t()  # (k, n)
        sims = cols.unsqueeze(2) * cols.unsqueeze(1)  # (k, n, n)
    else:
        sims = (a @ a.t()).unsqueeze(0).expand(sets.num_dims, -1, -1)
    scaled = sims / tau

    neg_inf = torch.finfo(a.dtype).min
    pos_lse = scaled.masked_fill(~pos, neg_inf).logsumexp(dim=2)
    all_lse = scaled.masked_fill(~both, neg_inf).logsumexp(dim=2)
    has_pos = pos.any(dim=2)
    if not bool(has_pos.any()):
        return a.new_zeros(())
    terms = (all_lse - pos_lse)[has_pos]
    return terms.mean()
