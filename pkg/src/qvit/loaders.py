"""Unary vector loaders, the row-superposition matrix loader and the
inner-product circuit.

Every vector loader starts with an X gate on qubit 0 (state e_0) and fans
the amplitude out with d - 1 RBS gates. Angles reproduce x / |x| exactly,
signs included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, Gate, SubspaceVector, hw_basis, rbs
from .layers import OrthoLayer, apply_unary

TOPOLOGIES = ("parallel", "diagonal", "semidiagonal")
NORM_FLOOR = 1e-9


class DegenerateInputError(ValueError):
    """Vector or matrix too close to zero to be amplitude-encoded."""


class LoaderTopologyError(ValueError):
    pass


@dataclass(frozen=True)
class VectorLoader:
    d: int
    topology: str
    angles: np.ndarray
    pairs: tuple[tuple[int, int], ...]

    @property
    def circuit(self) -> Circuit:
        return Circuit(self.d, [Gate("X", (0,))] + self.rbs_gates())

    def rbs_gates(self, offset: int = 0) -> list[Gate]:
        return [rbs(a + offset, b + offset, t) for (a, b), t in zip(self.pairs, self.angles)]

    def adjoint_gates(self, offset: int = 0) -> list[Gate]:
        """Inverse of the RBS fan (no X): maps the loaded state back to e_0."""
        return [rbs(a + offset, b + offset, -t) for (a, b), t in reversed(list(zip(self.pairs, self.angles)))]

    @property
    def rbs_depth(self) -> int:
        return Circuit(self.d, self.rbs_gates()).depth


def _unit(x: np.ndarray, what: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"{what} norm {norm:.3g} below {NORM_FLOOR}")
    return x / norm


def _diagonal_angles(x: np.ndarray) -> list[float]:
    # hyperspherical coordinates: x_k = cos(t_k) prod_{m<k} sin(t_m)
    d = len(x)
    suffix = np.sqrt(np.cumsum((x ** 2)[::-1])[::-1])
    angles = [float(np.arctan2(suffix[k + 1], x[k])) for k in range(d - 2)]
    angles.append(float(np.arctan2(x[d - 1], x[d - 2])))
    return angles


def _tree(x: np.ndarray, lo: int, hi: int, level: int, levels: list):
    if hi - lo < 2:
        return
    mid = (lo + hi) // 2
    if hi - lo == 2:
        theta = np.arctan2(x[lo + 1], x[lo])
    else:
        theta = np.arctan2(np.linalg.norm(x[mid:hi]), np.linalg.norm(x[lo:mid]))
    levels.append((level, (lo, mid), float(theta)))
    _tree(x, lo, mid, level + 1, levels)
    _tree(x, mid, hi, level + 1, levels)


def plan_vector_loader(x, topology: str = "parallel") -> VectorLoader:
    x = _unit(x)
    d = len(x)
    if d < 2:
        raise ValueError("loaders need d >= 2")
    if topology == "diagonal":
        pairs = [(k, k + 1) for k in range(d - 1)]
        angles = _diagonal_angles(x)
    elif topology == "parallel":
        if d & (d - 1):
            raise LoaderTopologyError(f"parallel loader needs a power-of-two dimension, got {d}")
        levels = []
        _tree(x, 0, d, 0, levels)
        levels.sort(key=lambda item: item[0])
        pairs = [p for _, p, _ in levels]
        angles = [t for _, _, t in levels]
    elif topology == "semidiagonal":
        # split e_0 across the two halves, then run two diagonal chains in parallel
        h = (d + 1) // 2
        left, right = x[:h], x[h:]
        # a one-entry half has no chain to fix its sign, so the split carries it
        nl = left[0] if len(left) == 1 else np.linalg.norm(left)
        nr = right[0] if len(right) == 1 else np.linalg.norm(right)
        pairs, angles = [(0, h)], [float(np.arctan2(nr, nl))]
        chain_l = _chain(left, 0)
        chain_r = _chain(right, h)
        # interleave so the greedy schedule runs both chains side by side
        for k in range(max(len(chain_l), len(chain_r))):
            for chain in (chain_l, chain_r):
                if k < len(chain):
                    pairs.append(chain[k][0])
                    angles.append(chain[k][1])
    else:
        raise LoaderTopologyError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    return VectorLoader(d, topology, np.array(angles), tuple(pairs))


def _chain(seg: np.ndarray, offset: int) -> list:
    if len(seg) < 2:
        return []
    if np.linalg.norm(seg) <= 0.0:
        return [((offset + k, offset + k + 1), 0.0) for k in range(len(seg) - 1)]
    angles = _diagonal_angles(seg / np.linalg.norm(seg))
    return [((offset + k, offset + k + 1), t) for k, t in enumerate(angles)]


# ---------------------------------------------------------------------------
# matrices


@dataclass(frozen=True)
class MatrixState:
    n: int
    d: int
    amplitudes: np.ndarray  # (n, d), Frobenius norm 1

    def to_subspace(self) -> SubspaceVector:
        """Weight-2 state over n + d qubits: top qubit i and bottom qubit n + j."""
        basis = hw_basis(self.n + self.d, 2)
        amps = np.zeros(len(basis))
        for i in range(self.n):
            for j in range(self.d):
                amps[basis.index((i, self.n + j))] = self.amplitudes[i, j]
        return SubspaceVector(basis, amps)


def matrix_state(X) -> MatrixState:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {X.shape}")
    return MatrixState(X.shape[0], X.shape[1], _unit(X, "matrix"))


def _row_loading_gates(rows: np.ndarray, n: int, topology: str) -> list[Gate]:
    # branch i of the top register: adjoint(L_i) leaves |0..0> and every
    # already-loaded row untouched up to L_i, the CNOT writes e_0 into the
    # bottom register only for branch i, and L_i then loads row i there
    gates = []
    for i in range(n):
        if np.linalg.norm(rows[i]) <= NORM_FLOOR:
            continue
        loader = plan_vector_loader(rows[i], topology)
        gates += loader.adjoint_gates(offset=n)
        gates.append(Gate("CNOT", (i, n)))
        gates += loader.rbs_gates(offset=n)
    return gates


def build_matrix_loader(X, topology: str = "parallel") -> Circuit:
    """Circuit on n + d qubits whose output (from all zeros) is matrix_state(X)."""
    X = np.asarray(X, dtype=np.float64)
    matrix_state(X)
    n, d = X.shape
    gates: list[Gate] = [Gate("X", (0,))]
    if n > 1:
        gates += plan_vector_loader(np.linalg.norm(X, axis=1), _top_topology(n, topology)).rbs_gates()
    gates += _row_loading_gates(X, n, topology)
    return Circuit(n + d, gates)


def _top_topology(n: int, topology: str) -> str:
    return topology if topology != "parallel" or not n & (n - 1) else "diagonal"


def build_inner_product_circuit(x_i, x_j, layer: OrthoLayer | None = None, topology: str = "parallel") -> Circuit:
    """load(x_j) -> W -> load(x_i)^dagger; P(first qubit = 1) = <x_i, W x_j>^2."""
    li = plan_vector_loader(x_i, topology)
    lj = plan_vector_loader(x_j, topology)
    if li.d != lj.d:
        raise ValueError("vectors must have the same dimension")
    gates = [Gate("X", (0,))] + lj.rbs_gates()
    if layer is not None:
        if layer.n != li.d:
            raise ValueError("layer size does not match the vectors")
        gates += list(layer.to_circuit().gates)
    gates += li.adjoint_gates()
    return Circuit(li.d, gates)


def exact_overlap(x_i, layer: OrthoLayer | None, x_j) -> float:
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.ndim != 1:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    wx = x_j if layer is None else apply_unary(layer, x_j)
    return float(x_i @ wx)
