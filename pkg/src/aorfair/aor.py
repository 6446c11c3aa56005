"""Attribute-orthogonal regularization between two classifier heads.

For the first-layer weights ``W1`` (d x h1, task head) and ``W2`` (d x h2,
attribute head) reading the same d-dimensional feature layer::

    M = W1.T @ W2
    l_ortho = sum(|M|) / (||W1||_F * ||W2||_F)

The penalty is zero exactly when every task-head input direction is
orthogonal to every attribute-head input direction, and it is invariant to
rescaling either matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import DimensionError, as_matrix


@dataclass
class AorValue:
    l_ortho: float
    cross: np.ndarray


def _check(W1, W2):
    W1, W2 = as_matrix(W1), as_matrix(W2)
    if W1.shape[0] != W2.shape[0]:
        raise DimensionError(
            f"head weights must share the feature dimension: {W1.shape[0]} vs {W2.shape[0]}")
    return W1, W2


def l_ortho(W1, W2) -> AorValue:
    W1, W2 = _check(W1, W2)
    M = W1.T @ W2
    n1, n2 = np.linalg.norm(W1), np.linalg.norm(W2)
    if n1 == 0.0 or n2 == 0.0:
        return AorValue(0.0, M)
    return AorValue(float(np.abs(M).sum() / (n1 * n2)), M)


def l_ortho_grad(W1, W2):
    """Subgradient of :func:`l_ortho` w.r.t. both matrices, with sign(0) = 0."""
    W1, W2 = _check(W1, W2)
    n1, n2 = np.linalg.norm(W1), np.linalg.norm(W2)
    if n1 == 0.0 or n2 == 0.0:
        return np.zeros_like(W1), np.zeros_like(W2)
    M = W1.T @ W2
    S = np.sign(M)
    A = np.abs(M).sum()
    G1 = (W2 @ S.T) / (n1 * n2) - (A / (n1 ** 3 * n2)) * W1
    G2 = (W1 @ S) / (n1 * n2) - (A / (n1 * n2 ** 3)) * W2
    return G1, G2
