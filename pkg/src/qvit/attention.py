"""Exact forms of the four attention computations, plus the gate-level
circuit of the direct quantum attention mechanism.

Loaders only take unit vectors, so a PatchSet keeps each token's norm on
the side and every forward multiplies it back in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, Gate
from .layers import OrthoLayer, apply_unary
from .loaders import DegenerateInputError, _row_loading_gates, _top_topology, matrix_state, plan_vector_loader

NORM_MODES = ("softmax", "l1", "none")


@dataclass(frozen=True)
class PatchSet:
    unit_vectors: np.ndarray  # (n, d)
    norms: np.ndarray  # (n,)

    @classmethod
    def from_vectors(cls, X) -> "PatchSet":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected (n, d) patches, got {X.shape}")
        norms = np.linalg.norm(X, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        return cls(X / safe[:, None], norms)

    @property
    def count(self) -> int:
        return self.unit_vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.unit_vectors.shape[1]

    def vectors(self) -> np.ndarray:
        return self.unit_vectors * self.norms[:, None]


@dataclass(frozen=True)
class AttentionMatrix:
    entries: np.ndarray
    normalized: str = "none"


def _check(layer: OrthoLayer, patches: PatchSet):
    if layer.n != patches.dim:
        raise ValueError(f"layer acts on {layer.n} dimensions, patches have {patches.dim}")


def patchwise_forward(V: OrthoLayer, patches: PatchSet) -> np.ndarray:
    _check(V, patches)
    return patches.norms[:, None] * apply_unary(V, patches.unit_vectors.T).T


def attention_coeffs(W: OrthoLayer, patches: PatchSet) -> AttentionMatrix:
    """A_ij = (|x_i| |x_j| <x^_i, W x^_j>)^2, the rescaled first-qubit probability."""
    _check(W, patches)
    wx = apply_unary(W, patches.unit_vectors.T)  # columns W x^_j
    overlaps = patches.unit_vectors @ wx
    scale = np.outer(patches.norms, patches.norms)
    return AttentionMatrix((scale * overlaps) ** 2, "none")


def normalize_attention(A: AttentionMatrix, mode: str = "softmax", axis: int = -1) -> AttentionMatrix:
    E = np.asarray(A.entries, dtype=np.float64)
    if mode == "softmax":
        z = np.exp(E - E.max(axis=axis, keepdims=True))
        return AttentionMatrix(z / z.sum(axis=axis, keepdims=True), "softmax")
    if mode == "l1":
        sums = E.sum(axis=axis, keepdims=True)
        if np.any(sums == 0):
            raise ValueError("l1 normalisation of an all-zero row")
        return AttentionMatrix(E / sums, "l1")
    if mode == "none":
        return AttentionMatrix(E.copy(), A.normalized)
    raise ValueError(f"unknown normalisation {mode!r}; expected one of {NORM_MODES}")


def ortho_attention_forward(V: OrthoLayer, W: OrthoLayer, patches: PatchSet, mode: str = "softmax") -> np.ndarray:
    """y_i = sum_j A'_ij V x_j with A' the normalised squared-overlap matrix."""
    A = normalize_attention(attention_coeffs(W, patches), mode)
    return A.entries @ patchwise_forward(V, patches)


def quantum_attention_forward(A_row, patches: PatchSet, V: OrthoLayer) -> np.ndarray:
    """y = sum_j A_j |x_j| V x^_j."""
    A_row = np.asarray(A_row, dtype=np.float64)
    if A_row.shape != (patches.count,):
        raise ValueError(f"attention row must have {patches.count} entries")
    if np.linalg.norm(A_row) == 0:
        raise DegenerateInputError("attention row is zero")
    return A_row @ patchwise_forward(V, patches)


def build_quantum_attention_circuit(A_row, patches: PatchSet, V: OrthoLayer, topology: str = "parallel") -> Circuit:
    """Top register: load A_row / |A_row|. Bottom: unit rows loaded under
    CNOT control, then V. The output state is sum_j A^_j |e_j>|V x^_j>."""
    A_row = np.asarray(A_row, dtype=np.float64)
    n, d = patches.count, patches.dim
    _check(V, patches)
    if np.linalg.norm(A_row) == 0:
        raise DegenerateInputError("attention row is zero")
    gates: list[Gate] = [Gate("X", (0,))]
    if n > 1:
        gates += plan_vector_loader(A_row, _top_topology(n, topology)).rbs_gates()
    gates += _row_loading_gates(patches.unit_vectors, n, topology)
    gates += list(V.to_circuit().shifted(n, n + d).gates)
    return Circuit(n + d, gates)


def quantum_attention_marginal(A_row, patches: PatchSet, V: OrthoLayer) -> np.ndarray:
    """Distribution of the bottom-register outcome k for the circuit above.

    This is sum_j A^_j^2 (V x^_j)_k^2, which is not y_k^2 in general; the
    exact forward uses the target y directly.
    """
    A_row = np.asarray(A_row, dtype=np.float64)
    a = A_row / np.linalg.norm(A_row)
    vx = apply_unary(V, patches.unit_vectors.T).T
    return (a[:, None] ** 2 * vx ** 2).sum(axis=0)


def compound_forward(V: OrthoLayer, X) -> tuple[np.ndarray, float]:
    """Apply V on n + d qubits to the loaded matrix state and post-select
    one excitation per register. Returns (Y, leakage); Y is rescaled by |X|_F."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if V.n != n + d:
        raise ValueError(f"compound layer must act on {n + d} qubits, got {V.n}")
    ms = matrix_state(X)
    U = V.matrix()
    Z = U @ _embed_cross(ms.amplitudes, n, d) @ U.T
    Y = Z[:n, n:] * np.linalg.norm(X)
    leakage = 0.5 * (np.sum(Z[:n, :n] ** 2) + np.sum(Z[n:, n:] ** 2))
    return Y, float(leakage)


def _embed_cross(X: np.ndarray, n: int, d: int) -> np.ndarray:
    M = np.zeros(X.shape[:-2] + (n + d, n + d))
    M[..., :n, n:] = X
    M[..., n:, :n] = -np.swapaxes(X, -1, -2)
    return M
