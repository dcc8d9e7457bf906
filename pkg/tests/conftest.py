"""Shared fixtures and numerical oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

import comae


def finite_difference_gradients(fn, tensors, h=1e-6):
    """Central finite differences of a scalar-valued fn() w.r.t. tensors.

    fn must read the current tensor contents on every call; the tensors are
    perturbed in place one element at a time and restored afterwards.
    """
    grads = []
    for tensor in tensors:
        grad = torch.zeros_like(tensor, dtype=torch.float64)
        flat = tensor.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                high = float(fn())
                flat[i] = original - h
                low = float(fn())
                flat[i] = original
            flat_grad[i] = (high - low) / (2.0 * h)
        grads.append(grad)
    return grads


def max_relative_error(analytic, numeric):
    """Worst per-element relative error between two gradient lists.

    Elements below 0.1% of the dominant gradient magnitude are compared
    against that floor instead of their own (numerically negligible) size.
    """
    analytic = [np.asarray(a.detach() if torch.is_tensor(a) else a, dtype=np.float64) for a in analytic]
    numeric = [np.asarray(n.detach() if torch.is_tensor(n) else n, dtype=np.float64) for n in numeric]
    scale = max(float(np.abs(n).max()) for n in numeric)
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def autograd_gradients(loss, tensors):
    grads = torch.autograd.grad(loss, tensors)
    return [g.detach().clone() for g in grads]


@pytest.fixture
def tiny_dataset():
    """8-class synthetic dataset with a 6/2 split, used across trainer tests."""
    ds = comae.make_synthetic(8, 8, 20, 0.05, seed=3)
    return ds.with_split(comae.make_split(ds, 0.25, seed=3))
