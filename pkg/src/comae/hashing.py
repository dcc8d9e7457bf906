"""Hash head, tanh/sign forward, angular-margin loss, joint objective, bit packing.

Packed code buffers use the layout: magic "CMHC", u32 count, u32 bits (both
little-endian), then one row of ceil(bits / 8) bytes per code with bit j of a
row stored least-significant-bit first (+1 -> 1, -1 -> 0).
"""

from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_non_negative, check_positive

CODES_MAGIC = b"CMHC"
_HEADER = struct.Struct("<II")

FORWARD_MODES = ("train", "infer")


class HashHead(nn.Module):
    """Dense linear map from a feature vector to bit pre-activations."""

    def __init__(self, in_features, bits):
        super().__init__()
        if bits < 1:
            raise ValueError(f"bits must be at least 1, got {bits}")
        self.linear = nn.Linear(in_features, bits, bias=False)
        self.bits = bits

    def forward(self, features, mode="train"):
        """train -> tanh relaxation (differentiable); infer -> exact sign codes."""
        if mode not in FORWARD_MODES:
            raise ValueError(f"mode must be one of {FORWARD_MODES}, got {mode!r}")
        z = self.linear(features)
        return torch.tanh(z) if mode == "train" else binarize(z)


def binarize(z):
    """Elementwise sign with the zero case pinned to +1."""
    return torch.where(z >= 0, z.new_ones(()), -z.new_ones(()))


def hypersphere_loss(relaxed_codes, targets, centers, margin=0.35, scale=10.0):
    """Additive-margin angular softmax on length-normalized codes.

    Codes are normalized to the unit sphere; the target class logit is the
    cosine against its center minus the margin, every logit is multiplied by
    the scale, and the result goes through a softmax cross-entropy. The
    caller keeps the center rows unit-norm.
    """
    check_non_negative(margin, "margin")
    check_positive(scale, "scale")
    if relaxed_codes.ndim != 2 or centers.ndim != 2:
        raise ValueError("codes and centers must both be 2-dimensional")
    if relaxed_codes.shape[1] != centers.shape[1]:
        raise ValueError(
            f"code length {relaxed_codes.shape[1]} does not match centers ({centers.shape[1]})"
        )
    if targets.numel() and (targets.min() < 0 or targets.max() >= centers.shape[0]):
        raise ValueError("target outside the seen-class range")
    norms = relaxed_codes.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        bad = int(torch.nonzero(norms.squeeze(1) == 0)[0])
        raise ValueError(f"zero-norm code vector at row {bad}")
    cosine = (relaxed_codes / norms) @ centers.t()
    one_hot = F.one_hot(targets, num_classes=centers.shape[0]).to(cosine.dtype)
    logits = scale * (cosine - margin * one_hot)
    return F.cross_entropy(logits, targets)


def total_loss(components, weights):
    """Weighted sum of objective components (pointwise, pairwise, classwise, hash)."""
    components = list(components)
    weights = [float(w) for w in weights]
    if len(components) != len(weights):
        raise ValueError(f"{len(components)} components vs {len(weights)} weights")
    for w in weights:
        check_non_negative(w, "loss weight")
    total = None
    for value, weight in zip(components, weights):
        term = weight * value
        total = term if total is None else total + term
    return total


# -- bit packing -------------------------------------------------------------

def _codes_matrix(codes, bits=None):
    if isinstance(codes, np.ndarray) and codes.ndim == 2:
        matrix = codes
    else:
        rows = [np.asarray(row).ravel() for row in codes]
        if rows and len({row.size for row in rows}) != 1:
            raise ValueError("ragged code lengths; all codes must share one bit length")
        if not rows:
            if bits is None:
                raise ValueError("bits must be given to pack an empty code list")
            return np.zeros((0, bits), dtype=np.int8)
        matrix = np.stack(rows)
    if matrix.ndim != 2:
        raise ValueError(f"codes must form an (n, bits) matrix, got shape {matrix.shape}")
    if bits is not None and matrix.shape[1] != bits:
        raise ValueError(f"expected {bits}-bit codes, got {matrix.shape[1]}")
    if matrix.size and not np.isin(matrix, (-1, 1)).all():
        raise ValueError("code entries must be exactly -1 or +1")
    return matrix.astype(np.int8)


def pack_codes(codes, bits=None):
    """Pack +/-1 codes into the CMHC byte buffer (header included)."""
    matrix = _codes_matrix(codes, bits)
    n, width = matrix.shape
    header = CODES_MAGIC + _HEADER.pack(n, width)
    if n == 0:
        return header
    payload = np.packbits((matrix == 1).astype(np.uint8), axis=1, bitorder="little")
    return header + payload.tobytes()


def unpack_codes(buffer):
    """Inverse of :func:`pack_codes`; returns an (n, bits) int8 matrix of +/-1."""
    buffer = bytes(buffer)
    if len(buffer) < 12 or buffer[:4] != CODES_MAGIC:
        raise ValueError("malformed code buffer (bad magic)")
    n, bits = _HEADER.unpack(buffer[4:12])
    row_bytes = (bits + 7) // 8
    expected = 12 + n * row_bytes
    if len(buffer) != expected:
        raise ValueError(f"code buffer size mismatch: expected {expected} bytes, got {len(buffer)}")
    if n == 0:
        return np.zeros((0, bits), dtype=np.int8)
    packed = np.frombuffer(buffer, dtype=np.uint8, offset=12).reshape(n, row_bytes)
    flat = np.unpackbits(packed, axis=1, bitorder="little")[:, :bits]
    return (flat.astype(np.int8) * 2) - 1
