"""Hamming-space retrieval and evaluation: ranking, mAP, curves, separability.

All gallery scans are exact. Distances are computed on packed code bytes via
XOR + population count; relevance means "identical class label".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import as_array, check_labels
from .hashing import pack_codes, unpack_codes


def _pack_rows(codes):
    """(n, bits) +/-1 -> (n, ceil(bits/8)) uint8, little bit order, zero padding."""
    return np.packbits((codes == 1).astype(np.uint8), axis=1, bitorder="little")


@dataclass(frozen=True, eq=False)
class CodeDatabase:
    """Packed +/-1 codes with one class label per code."""

    packed: np.ndarray
    labels: np.ndarray
    bits: int

    def __post_init__(self):
        packed = as_array(self.packed, "packed", dtype=np.uint8, ndim=2)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != packed.shape[0]:
            raise ValueError(
                f"labels length {labels.shape} does not match {packed.shape[0]} codes"
            )
        if self.bits < 1:
            raise ValueError(f"bits must be at least 1, got {self.bits}")
        row_bytes = (self.bits + 7) // 8
        if packed.shape[0] and packed.shape[1] != row_bytes:
            raise ValueError(
                f"packed rows hold {packed.shape[1]} bytes, expected {row_bytes} for {self.bits} bits"
            )
        if packed.shape[0] == 0:
            packed = packed.reshape(0, row_bytes)
        if self.bits % 8:
            pad_mask = np.uint8((0xFF << (self.bits % 8)) & 0xFF)
            if packed.shape[0] and (packed[:, -1] & pad_mask).any():
                raise ValueError("padding bits beyond the code length must be zero")
        object.__setattr__(self, "packed", packed)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_codes(cls, codes, labels, bits=None):
        """Build from an (n, bits) matrix of +/-1 entries."""
        codes = np.asarray(codes)
        if codes.ndim != 2:
            raise ValueError(f"codes must be (n, bits), got shape {codes.shape}")
        width = codes.shape[1] if bits is None else bits
        if codes.shape[1] != width:
            raise ValueError(f"expected {width}-bit codes, got {codes.shape[1]}")
        if codes.size and not np.isin(codes, (-1, 1)).all():
            raise ValueError("code entries must be exactly -1 or +1")
        if codes.shape[0] == 0:
            packed = np.zeros((0, (width + 7) // 8), dtype=np.uint8)
        else:
            packed = _pack_rows(codes)
        return cls(packed, np.asarray(labels, dtype=np.int64), width)

    @property
    def count(self):
        return self.packed.shape[0]

    def codes(self):
        """Unpack to an (n, bits) int8 matrix of +/-1."""
        if self.count == 0:
            return np.zeros((0, self.bits), dtype=np.int8)
        flat = np.unpackbits(self.packed, axis=1, bitorder="little")[:, : self.bits]
        return (flat.astype(np.int8) * 2) - 1

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return CodeDatabase(self.packed[indices], self.labels[indices], self.bits)

    def save(self, codes_path, labels_path=None):
        codes_path = Path(codes_path)
        labels_path = Path(labels_path) if labels_path else codes_path.with_suffix(".labels.csv")
        codes_path.write_bytes(pack_codes(self.codes(), bits=self.bits))
        labels_path.write_text("".join(f"{int(v)}\n" for v in self.labels))

    @classmethod
    def load(cls, codes_path, labels_path=None):
        codes_path = Path(codes_path)
        labels_path = Path(labels_path) if labels_path else codes_path.with_suffix(".labels.csv")
        codes = unpack_codes(codes_path.read_bytes())
        text = labels_path.read_text().splitlines() if labels_path.exists() else []
        labels = np.asarray([int(t) for t in text if t.strip()], dtype=np.int64)
        if labels.size == 0 and codes.shape[0] > 0:
            raise ValueError(f"missing labels for {codes.shape[0]} codes: {labels_path}")
        return cls.from_codes(codes, labels) if codes.shape[0] else cls(
            np.zeros((0, (codes.shape[1] + 7) // 8), dtype=np.uint8),
            labels,
            codes.shape[1],
        )


# -- distances and ranking ----------------------------------------------------

def hamming(code_a, code_b):
    """Number of differing bits between two +/-1 codes (packed popcount)."""
    a = np.asarray(code_a).ravel()
    b = np.asarray(code_b).ravel()
    if a.size != b.size:
        raise ValueError(f"code length mismatch: {a.size} vs {b.size}")
    pa = _pack_rows(a[None, :])[0]
    pb = _pack_rows(b[None, :])[0]
    return int(np.bitwise_count(pa ^ pb).sum())


def _distances_to(db, packed_query):
    return np.bitwise_count(db.packed ^ packed_query[None, :]).sum(axis=1).astype(np.int64)


def rank(query_code, db):
    """Gallery indices by ascending Hamming distance; ties keep index order."""
    q = np.asarray(query_code).ravel()
    if q.size != db.bits:
        raise ValueError(f"query has {q.size} bits, database stores {db.bits}")
    dist = _distances_to(db, _pack_rows(q[None, :])[0])
    return np.argsort(dist, kind="stable")


# -- mean average precision -----------------------------------------------------

def _average_precision(rel):
    """AP of one ranked 0/1 relevance list: mean precision over its hit ranks."""
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    precisions = (np.arange(hits.size) + 1.0) / (hits + 1.0)
    return sum(precisions.tolist()) / hits.size


def mean_average_precision(queries, db, cutoff=None, exclude_index=None):
    """Mean AP over queries against a gallery, optionally cut off at a rank.

    Relevance is label equality. A query whose top-``cutoff`` list contains no
    relevant item contributes 0. ``exclude_index[q]`` names one gallery
    position to drop from query q's ranking (set it to the query's own gallery
    position for leave-one-out protocols); -1 drops nothing.
    """
    if queries.count == 0:
        raise ValueError("empty query set")
    if queries.bits != db.bits:
        raise ValueError(f"bit-length mismatch: queries {queries.bits}, gallery {db.bits}")
    if cutoff is not None and cutoff < 1:
        raise ValueError(f"cutoff must be at least 1, got {cutoff}")
    if exclude_index is not None:
        exclude_index = np.asarray(exclude_index, dtype=np.int64)
        if exclude_index.shape != (queries.count,):
            raise ValueError("exclude_index must hold one gallery position per query")

    aps = []
    for qi in range(queries.count):
        dist = _distances_to(db, queries.packed[qi])
        order = np.argsort(dist, kind="stable")
        if exclude_index is not None and exclude_index[qi] >= 0:
            order = order[order != exclude_index[qi]]
        if cutoff is not None:
            order = order[:cutoff]
        rel = db.labels[order] == queries.labels[qi]
        aps.append(_average_precision(rel))
    return sum(aps) / len(aps)


# -- curves ---------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalCurves:
    """Radius-swept PR curve, P@N / R@N curves, and the PR trapezoid area.

    Queries without a single relevant gallery item are excluded from every
    average; if no query has one, the curves are all-zero and
    ``has_relevant`` is False.
    """

    radii: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    topn: np.ndarray
    precision_at_n: np.ndarray
    recall_at_n: np.ndarray
    auc: float
    num_queries: int
    num_valid_queries: int

    @property
    def has_relevant(self):
        return self.num_valid_queries > 0


def interpolated_precision(precision):
    """Standard PR interpolation: running maximum from the high-recall end."""
    return np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]


def curves(queries, db, topn_grid=None, exclude_index=None):
    """Sweep the PR curve over Hamming radius 0..bits and P@N / R@N over a grid."""
    if queries.count == 0:
        raise ValueError("empty query set")
    if queries.bits != db.bits:
        raise ValueError(f"bit-length mismatch: queries {queries.bits}, gallery {db.bits}")
    if exclude_index is not None:
        exclude_index = np.asarray(exclude_index, dtype=np.int64)

    bits = db.bits
    gallery_size = db.count if exclude_index is None else db.count - 1
    if topn_grid is None:
        topn_grid = np.arange(1, max(gallery_size, 1) + 1)
    topn_grid = np.asarray(sorted(int(v) for v in topn_grid), dtype=np.int64)
    if topn_grid.size == 0 or topn_grid[0] < 1:
        raise ValueError("topn grid entries must be at least 1")

    radii = np.arange(bits + 1)
    precision_sum = np.zeros(bits + 1)
    recall_sum = np.zeros(bits + 1)
    pn_sum = np.zeros(topn_grid.size)
    rn_sum = np.zeros(topn_grid.size)
    valid = 0

    for qi in range(queries.count):
        dist = _distances_to(db, queries.packed[qi])
        rel = db.labels == queries.labels[qi]
        keep = np.ones(db.count, dtype=bool)
        if exclude_index is not None and exclude_index[qi] >= 0:
            keep[exclude_index[qi]] = False
        dist, rel = dist[keep], rel[keep]
        total_rel = int(rel.sum())
        if total_rel == 0:
            continue
        valid += 1

        hist_all = np.bincount(dist, minlength=bits + 1)
        hist_rel = np.bincount(dist[rel], minlength=bits + 1)
        cum_all = np.cumsum(hist_all)
        cum_rel = np.cumsum(hist_rel)
        precision_sum += np.where(cum_all > 0, cum_rel / np.maximum(cum_all, 1), 1.0)
        recall_sum += cum_rel / total_rel

        order = np.argsort(dist, kind="stable")
        hits = np.cumsum(rel[order])
        grid = np.minimum(topn_grid, dist.size)
        pn_sum += hits[grid - 1] / topn_grid
        rn_sum += hits[grid - 1] / total_rel

    if valid == 0:
        zeros_r = np.zeros(bits + 1)
        zeros_n = np.zeros(topn_grid.size)
        return RetrievalCurves(
            radii, zeros_r, zeros_r.copy(), topn_grid, zeros_n, zeros_n.copy(),
            auc=0.0, num_queries=queries.count, num_valid_queries=0,
        )

    precision = precision_sum / valid
    recall = recall_sum / valid
    # anchor the trapezoid at recall 0 so a perfect curve integrates to 1
    auc_recall = np.concatenate(([0.0], recall))
    auc_precision = np.concatenate(([precision[0]], precision))
    auc = float(np.trapezoid(auc_precision, auc_recall))
    return RetrievalCurves(
        radii, precision, recall, topn_grid, pn_sum / valid, rn_sum / valid,
        auc=auc, num_queries=queries.count, num_valid_queries=valid,
    )


# -- separability diagnostics -----------------------------------------------------

@dataclass(frozen=True)
class SeparabilityReport:
    """Intra/inter-class distance histograms plus the compactness ratio.

    ``separability`` is mean(inter) - mean(intra). ``separation_ratio`` is the
    smallest distance between class centers divided by the largest distance
    from a sample to its own class center (infinity when every class is
    perfectly compact, None when there is a single class).
    """

    intra_distances: np.ndarray
    inter_distances: np.ndarray
    intra_hist: np.ndarray
    inter_hist: np.ndarray
    bin_edges: np.ndarray
    mean_intra: float
    mean_inter: float
    separability: float
    separation_ratio: float
    has_intra: bool
    has_inter: bool


def _pairwise_split(distance_matrix, labels):
    n = labels.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    values = distance_matrix[iu, ju]
    return values[same], values[~same]


def separability(source, labels=None, bins=None):
    """Distance histograms within and across classes plus summary statistics.

    Accepts a :class:`CodeDatabase` (Hamming distances, one bin per integer
    distance) or a real-valued matrix with labels (Euclidean distances,
    ``bins`` equal-width bins). Requires two classes with at least one sample
    each for the inter-class side; single-sample classes leave the intra side
    empty, both conditions flagged on the report.
    """
    if isinstance(source, CodeDatabase):
        labels = source.labels
        codes = source.codes()
        vectors = codes.astype(np.float64)
        diff = codes[:, None, :] != codes[None, :, :]
        distance_matrix = diff.sum(axis=2).astype(np.float64)
        edges = np.arange(source.bits + 2) - 0.5
    else:
        if labels is None:
            raise ValueError("labels are required when passing a raw matrix")
        vectors = as_array(source, "matrix", ndim=2).astype(np.float64)
        labels = check_labels(labels, int(np.max(labels)) + 1 if len(labels) else 1)
        if vectors.shape[0] != labels.shape[0]:
            raise ValueError("matrix rows and labels disagree")
        deltas = vectors[:, None, :] - vectors[None, :, :]
        distance_matrix = np.sqrt((deltas ** 2).sum(axis=2))
        top = float(distance_matrix.max()) or 1.0
        edges = np.linspace(0.0, top, (bins or 20) + 1)

    unique = np.unique(labels)
    if unique.size < 2 and labels.shape[0] < 2:
        raise ValueError("separability needs at least two samples")

    intra, inter = _pairwise_split(distance_matrix, labels)
    has_intra = intra.size > 0
    has_inter = inter.size > 0

    def _hist(values):
        if values.size == 0:
            return np.zeros(edges.size - 1)
        counts, _ = np.histogram(values, bins=edges)
        return counts / values.size

    mean_intra = float(intra.mean()) if has_intra else 0.0
    mean_inter = float(inter.mean()) if has_inter else float("nan")
    sep = mean_inter - mean_intra if has_inter else float("nan")

    if has_inter:
        centers = np.stack([vectors[labels == c].mean(axis=0) for c in unique])
        center_deltas = centers[:, None, :] - centers[None, :, :]
        center_dist = np.sqrt((center_deltas ** 2).sum(axis=2))
        iu, ju = np.triu_indices(unique.size, k=1)
        numerator = float(center_dist[iu, ju].min())
        spread = np.sqrt(
            ((vectors - centers[np.searchsorted(unique, labels)]) ** 2).sum(axis=1)
        )
        denominator = float(spread.max())
        ratio = float("inf") if denominator == 0.0 else numerator / denominator
    else:
        ratio = float("nan")

    return SeparabilityReport(
        intra_distances=intra,
        inter_distances=inter,
        intra_hist=_hist(intra),
        inter_hist=_hist(inter),
        bin_edges=edges,
        mean_intra=mean_intra,
        mean_inter=mean_inter,
        separability=sep,
        separation_ratio=ratio,
        has_intra=has_intra,
        has_inter=has_inter,
    )


# -- zero-shot protocol ------------------------------------------------------------

def zero_shot_protocol(db, unseen_classes, gallery="unseen"):
    """Queries are unseen-class codes; the gallery is the rest of them.

    Returns (queries, gallery_db, exclude_index) for the metric functions.
    With gallery="unseen" each query is ranked against the other unseen codes
    (leave-one-out); "all" ranks against every code except the query itself.
    """
    if gallery not in ("unseen", "all"):
        raise ValueError(f"gallery must be 'unseen' or 'all', got {gallery!r}")
    unseen = sorted(int(c) for c in unseen_classes)
    query_positions = np.flatnonzero(np.isin(db.labels, unseen))
    queries = db.subset(query_positions)
    if gallery == "unseen":
        return queries, queries, np.arange(query_positions.size)
    return queries, db, query_positions


def zero_shot_map(db, unseen_classes, cutoff=None, gallery="unseen"):
    """mAP of the unseen-query protocol at an optional cutoff."""
    queries, gallery_db, exclude = zero_shot_protocol(db, unseen_classes, gallery)
    return mean_average_precision(queries, gallery_db, cutoff=cutoff, exclude_index=exclude)
