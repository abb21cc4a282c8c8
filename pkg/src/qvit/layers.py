"""Quantum orthogonal layers: RBS layouts, their unary matrices, their
2nd-order compound action on hamming-weight-2 states, and reverse-mode
gradients through the rotation sequence.

A hamming-weight-2 state sum_{a<b} c_ab |{a,b}> is handled as the
antisymmetric matrix M with M[a, b] = c_ab. A layer with unary matrix U
maps it to U M U^T, which is the compound-matrix product in matrix form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .circuit import Circuit, Gate, SubspaceVector, hw_basis, rbs

LAYOUTS = ("pyramid", "butterfly", "x", "backslash")


class TopologyError(ValueError):
    """Layout not defined for the requested size."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def n_angles(kind: str, n: int) -> int:
    return len(layout_pairs(kind, n))


@lru_cache(maxsize=None)
def layout_pairs(kind: str, n: int) -> tuple[tuple[int, int], ...]:
    """Qubit pairs of every RBS slot, in application order."""
    if n < 2:
        raise TopologyError("orthogonal layers need n >= 2")
    if kind == "pyramid":
        pairs = [(i, i + 1)
                 for t in range(2 * n - 3)
                 for i in range(t % 2, n - 1, 2)
                 if i <= t and i <= 2 * n - 4 - t]
    elif kind == "butterfly":
        if not _is_pow2(n):
            raise TopologyError(f"butterfly layout needs a power-of-two size, got {n}")
        pairs = [(i, i | (1 << s))
                 for s in range(n.bit_length() - 1)
                 for i in range(n) if not i & (1 << s)]
    elif kind == "x":
        pairs = []
        for t in range(n - 1):
            down, up = t, n - 2 - t
            pairs.append((down, down + 1))
            # the two diagonals share their crossing gate; for odd n the
            # crossing falls between two gates and the upper one is dropped
            if up != down and not (n % 2 and up == down + 1):
                pairs.append((up, up + 1))
    elif kind == "backslash":
        pairs = [(i, i + 1) for i in range(n - 1)]
    else:
        raise TopologyError(f"unknown layout {kind!r}; expected one of {LAYOUTS}")
    return tuple(pairs)


def build_layout(kind: str, n: int, angles=None) -> Circuit:
    pairs = layout_pairs(kind, n)
    if angles is None:
        angles = np.zeros(len(pairs))
    return Circuit(n, [rbs(a, b, t) for (a, b), t in zip(pairs, angles)])


def init_angles(rng, count: int) -> np.ndarray:
    """Uniform on [-pi/4, pi/4] from a PCG32 stream."""
    return rng.uniform(-np.pi / 4, np.pi / 4, count)


@dataclass
class OrthoLayer:
    n: int
    layout: str
    angles: np.ndarray = field(default=None)
    det_flip: bool = False

    def __post_init__(self):
        pairs = layout_pairs(self.layout, self.n)
        if self.angles is None:
            self.angles = np.zeros(len(pairs))
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.shape != (len(pairs),):
            raise ValueError(f"{self.layout} on {self.n} qubits has {len(pairs)} angles, got {self.angles.shape}")

    @property
    def pairs(self):
        return layout_pairs(self.layout, self.n)

    def to_circuit(self, dressed: bool = True) -> Circuit:
        """Gate-level circuit of the layer.

        With ``dressed`` every RBS between non-adjacent qubits is wrapped in
        CZ gates against the qubits in between, so that the circuit acts on
        every hamming-weight block as the compound matrix of the unary one.
        The dressing is invisible on the unary block.
        """
        gates = []
        for (a, b), t in zip(self.pairs, self.angles):
            lo, hi = min(a, b), max(a, b)
            between = [Gate("CZ", (a, c)) for c in range(lo + 1, hi)] if dressed else []
            gates += between + [rbs(a, b, t)] + between
        if self.det_flip:
            gates.append(Gate("Z", (self.n - 1,)))
        return Circuit(self.n, gates)

    def matrix(self) -> np.ndarray:
        return apply_unary(self, np.eye(self.n))


def _rotate(arr: np.ndarray, pairs, angles) -> np.ndarray:
    for (a, b), t in zip(pairs, angles):
        c, s = np.cos(t), np.sin(t)
        va = arr[a].copy()
        vb = arr[b]
        arr[a] = c * va - s * vb
        arr[b] = s * va + c * vb
    return arr


def apply_unary(layer: OrthoLayer, v: np.ndarray) -> np.ndarray:
    """Apply the layer to a vector (n,) or to the columns of an (n, m) array."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != layer.n:
        raise ValueError(f"expected leading dimension {layer.n}, got {v.shape}")
    out = _rotate(v.copy(), layer.pairs, layer.angles)
    if layer.det_flip:
        out[-1] *= -1.0
    return out


def layer_grad(layer: OrthoLayer, v_in: np.ndarray, cotangent: np.ndarray):
    """Gradients of <cotangent, apply_unary(layer, v_in)>.

    Returns ``(d_angles, d_v_in)``. One reverse sweep: each gate's input is
    recovered by inverting the rotation, so no intermediate states are kept.
    """
    v_in = np.asarray(v_in, dtype=np.float64)
    g = np.array(cotangent, dtype=np.float64)
    if g.shape != v_in.shape or v_in.shape[0] != layer.n:
        raise ValueError(f"shape mismatch: input {v_in.shape}, cotangent {g.shape}, layer size {layer.n}")
    out = apply_unary(layer, v_in)
    if layer.det_flip:
        out[-1] *= -1.0
        g[-1] *= -1.0
    d_angles = np.zeros_like(layer.angles)
    for k in range(len(layer.angles) - 1, -1, -1):
        a, b = layer.pairs[k]
        c, s = np.cos(layer.angles[k]), np.sin(layer.angles[k])
        oa, ob = out[a].copy(), out[b].copy()
        ga, gb = g[a].copy(), g[b].copy()
        d_angles[k] = np.sum(gb * oa - ga * ob)
        out[a], out[b] = c * oa + s * ob, -s * oa + c * ob
        g[a], g[b] = c * ga + s * gb, -s * ga + c * gb
    return d_angles, g


def matrix_grad(layer: OrthoLayer, d_matrix: np.ndarray) -> np.ndarray:
    """Angle gradients given the gradient with respect to ``layer.matrix()``."""
    return layer_grad(layer, np.eye(layer.n), d_matrix)[0]


# ---------------------------------------------------------------------------
# hamming-weight-2 action


def compound2_matrix(V: np.ndarray) -> np.ndarray:
    """Matrix of 2x2 minors of V, rows/columns indexed by 2-subsets in HWBasis order."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError(f"compound matrix needs a square input, got {V.shape}")
    idx = np.array(hw_basis(V.shape[0], 2).elements).reshape(-1, 2)
    r0, r1 = idx[:, 0][:, None], idx[:, 1][:, None]
    c0, c1 = idx[:, 0][None, :], idx[:, 1][None, :]
    return V[r0, c0] * V[r1, c1] - V[r0, c1] * V[r1, c0]


def pairs_to_antisym(amps: np.ndarray, n: int) -> np.ndarray:
    iu = np.triu_indices(n, 1)
    M = np.zeros(amps.shape[:-1] + (n, n))
    M[..., iu[0], iu[1]] = amps
    return M - np.swapaxes(M, -1, -2)


def antisym_to_pairs(M: np.ndarray) -> np.ndarray:
    n = M.shape[-1]
    iu = np.triu_indices(n, 1)
    return M[..., iu[0], iu[1]]


def _check_hw2(layer: OrthoLayer, state: SubspaceVector):
    if state.basis.k != 2 or state.basis.n != layer.n:
        raise ValueError(f"expected a weight-2 state on {layer.n} qubits, got n={state.basis.n}, k={state.basis.k}")


def apply_hw2(layer: OrthoLayer, state: SubspaceVector) -> SubspaceVector:
    _check_hw2(layer, state)
    M = pairs_to_antisym(state.amplitudes, layer.n)
    U = layer.matrix()
    return SubspaceVector(state.basis, antisym_to_pairs(U @ M @ U.T))


def hw2_grad(layer: OrthoLayer, state: SubspaceVector, cotangent: np.ndarray):
    """Gradients of <cotangent, apply_hw2(layer, state)> -> (d_angles, d_amplitudes)."""
    _check_hw2(layer, state)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != state.amplitudes.shape:
        raise ValueError("cotangent shape does not match the state")
    n = layer.n
    M = pairs_to_antisym(state.amplitudes, n)
    U = layer.matrix()
    G = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    G[iu] = cot
    dU = G @ U @ M.T + G.T @ U @ M
    dM = U.T @ G @ U
    return matrix_grad(layer, dU), antisym_to_pairs(dM - dM.T)
