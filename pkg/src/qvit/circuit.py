"""Gates, circuits and exact simulation on fixed hamming-weight subspaces.

Conventions used everywhere in the package:

* qubit 0 is the top wire; a unary state ``e_i`` has qubit ``i`` set;
* bitstrings are written qubit 0 first (big-endian), so index ``b`` of a
  dense state has qubit ``q`` equal to bit ``n - 1 - q`` of ``b``;
* ``RBS(theta)`` on qubits ``(i, j)`` is the Eq.-style matrix in the basis
  ``|q_i q_j>``: ``|10> -> cos|10> + sin|01>`` and ``|01> -> cos|01> - sin|10>``.
  Restricted to the pair of amplitudes ``(a_i, a_j)`` this is the plane
  rotation ``a_i' = c a_i - s a_j``, ``a_j' = s a_i + c a_j``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

GATE_KINDS = ("RBS", "X", "Z", "CZ", "CNOT")
_ARITY = {"RBS": 2, "X": 1, "Z": 1, "CZ": 2, "CNOT": 2}
# gates that keep every basis state inside its hamming-weight block
HW_PRESERVING = frozenset({"RBS", "Z", "CZ"})
DENSE_MAX_QUBITS = 14


class CircuitError(ValueError):
    """Malformed gate or circuit."""


class UnsupportedGateError(CircuitError):
    """Gate that cannot be simulated inside a fixed hamming-weight subspace."""


class OracleSizeError(ValueError):
    """Dense simulation requested beyond the qubit cap."""


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple[int, ...]
    theta: float | None = None
    timestep: int = 0

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        if len(self.qubits) != _ARITY[self.kind]:
            raise CircuitError(f"{self.kind} takes {_ARITY[self.kind]} qubit(s), got {self.qubits}")
        if len(set(self.qubits)) != len(self.qubits):
            raise CircuitError(f"{self.kind} qubits must be distinct, got {self.qubits}")
        if (self.kind == "RBS") != (self.theta is not None):
            raise CircuitError("theta is required for RBS and only for RBS")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "qubits": list(self.qubits)}
        if self.theta is not None:
            d["theta"] = float(self.theta)
        return d


def rbs(i: int, j: int, theta: float) -> Gate:
    return Gate("RBS", (i, j), float(theta))


def _schedule(n_qubits: int, gates) -> tuple[tuple[Gate, ...], int]:
    free = [0] * n_qubits
    out = []
    for g in gates:
        if any(q < 0 or q >= n_qubits for q in g.qubits):
            raise CircuitError(f"gate {g.kind}{g.qubits} outside {n_qubits} qubits")
        t = max(free[q] for q in g.qubits)
        for q in g.qubits:
            free[q] = t + 1
        out.append(Gate(g.kind, g.qubits, g.theta, t))
    return tuple(out), max(free, default=0)


@dataclass(frozen=True)
class Circuit:
    """Ordered gate list with an as-soon-as-possible timestep schedule."""

    n_qubits: int
    gates: tuple[Gate, ...] = ()
    depth: int = field(default=0)

    def __init__(self, n_qubits: int, gates=()):
        if n_qubits < 1:
            raise CircuitError("a circuit needs at least one qubit")
        scheduled, depth = _schedule(n_qubits, gates)
        object.__setattr__(self, "n_qubits", n_qubits)
        object.__setattr__(self, "gates", scheduled)
        object.__setattr__(self, "depth", depth)

    def __add__(self, other: "Circuit") -> "Circuit":
        if other.n_qubits != self.n_qubits:
            raise CircuitError("cannot concatenate circuits of different width")
        return Circuit(self.n_qubits, self.gates + other.gates)

    def count(self, kind: str) -> int:
        return sum(g.kind == kind for g in self.gates)

    @property
    def hw_preserving(self) -> bool:
        return all(g.kind in HW_PRESERVING for g in self.gates)

    def shifted(self, offset: int, n_qubits: int) -> "Circuit":
        """Same gates relabelled onto qubits ``offset..`` of a wider register."""
        gates = [Gate(g.kind, tuple(q + offset for q in g.qubits), g.theta) for g in self.gates]
        return Circuit(n_qubits, gates)

    def to_json(self) -> str:
        return json.dumps({"n_qubits": self.n_qubits, "gates": [g.to_dict() for g in self.gates]})

    @classmethod
    def from_json(cls, text: str) -> "Circuit":
        doc = json.loads(text)
        try:
            gates = [Gate(g["kind"], tuple(int(q) for q in g["qubits"]), g.get("theta")) for g in doc["gates"]]
            return cls(int(doc["n_qubits"]), gates)
        except (KeyError, TypeError) as exc:
            raise CircuitError(f"malformed circuit document: {exc}") from exc


# ---------------------------------------------------------------------------
# fixed hamming-weight basis


@dataclass(frozen=True)
class HWBasis:
    n: int
    k: int
    elements: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.elements)

    def index(self, subset) -> int:
        return _basis_lookup(self.n, self.k)[tuple(sorted(subset))]

    def bitstring(self, i: int) -> str:
        bits = ["0"] * self.n
        for q in self.elements[i]:
            bits[q] = "1"
        return "".join(bits)

    def dense_indices(self) -> np.ndarray:
        """Positions of the basis elements inside a 2^n dense state."""
        return np.array([sum(1 << (self.n - 1 - q) for q in s) for s in self.elements], dtype=np.int64)


@lru_cache(maxsize=None)
def hw_basis(n: int, k: int) -> HWBasis:
    if n < 1 or k < 0 or k > n:
        raise ValueError(f"invalid dimension: n={n}, k={k}")
    return HWBasis(n, k, tuple(itertools.combinations(range(n), k)))


@lru_cache(maxsize=None)
def _basis_lookup(n: int, k: int) -> dict:
    return {s: i for i, s in enumerate(hw_basis(n, k).elements)}


@lru_cache(maxsize=None)
def _pair_indices(n: int, k: int, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of S+{i} and the matching S+{j} for every S avoiding i and j."""
    lookup = _basis_lookup(n, k)
    src, dst = [], []
    for s in hw_basis(n, k).elements:
        if i in s and j not in s:
            partner = tuple(sorted((set(s) - {i}) | {j}))
            src.append(lookup[s])
            dst.append(lookup[partner])
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


@lru_cache(maxsize=None)
def _containing(n: int, k: int, qubits: tuple[int, ...]) -> np.ndarray:
    return np.array([idx for idx, s in enumerate(hw_basis(n, k).elements) if all(q in s for q in qubits)],
                    dtype=np.int64)


@dataclass(frozen=True)
class SubspaceVector:
    basis: HWBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        if amps.shape[0] != len(self.basis):
            raise ValueError(f"expected {len(self.basis)} amplitudes, got {amps.shape[0]}")
        if not np.all(np.isfinite(amps)):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def basis_state(cls, n: int, subset) -> "SubspaceVector":
        basis = hw_basis(n, len(subset))
        amps = np.zeros(len(basis))
        amps[basis.index(subset)] = 1.0
        return cls(basis, amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(2**self.basis.n)
        out[self.basis.dense_indices()] = self.amplitudes
        return out


# ---------------------------------------------------------------------------
# subspace simulation


def _rbs_rows(amps: np.ndarray, n: int, k: int, i: int, j: int, theta: float) -> None:
    src, dst = _pair_indices(n, k, i, j)
    if src.size == 0:
        return
    c, s = np.cos(theta), np.sin(theta)
    a = amps[src].copy()
    b = amps[dst]
    amps[src] = c * a - s * b
    amps[dst] = s * a + c * b


def _apply_gates(amps: np.ndarray, n: int, k: int, gates) -> np.ndarray:
    for g in gates:
        if g.kind == "RBS":
            _rbs_rows(amps, n, k, g.qubits[0], g.qubits[1], g.theta)
        elif g.kind in ("Z", "CZ"):
            amps[_containing(n, k, g.qubits)] *= -1.0
        else:
            raise UnsupportedGateError(f"{g.kind} does not preserve hamming weight; use dense_statevector")
    return amps


def apply_rbs_subspace(state: SubspaceVector, i: int, j: int, theta: float) -> SubspaceVector:
    if i == j:
        raise CircuitError("RBS needs two distinct qubits")
    n = state.basis.n
    if not (0 <= i < n and 0 <= j < n):
        raise CircuitError(f"qubits ({i}, {j}) outside {n}-qubit register")
    amps = state.amplitudes.copy()
    _rbs_rows(amps, n, state.basis.k, i, j, theta)
    return SubspaceVector(state.basis, amps)


def apply_circuit_subspace(circuit: Circuit, state: SubspaceVector) -> SubspaceVector:
    if circuit.n_qubits != state.basis.n:
        raise CircuitError("circuit and state widths differ")
    amps = _apply_gates(state.amplitudes.copy(), state.basis.n, state.basis.k, circuit.gates)
    return SubspaceVector(state.basis, amps)


def reduced_matrix(circuit: Circuit, k: int) -> np.ndarray:
    """The circuit's unitary restricted to the weight-k block, in HWBasis order."""
    basis = hw_basis(circuit.n_qubits, k)
    # columns are images of basis vectors; gates act on rows
    return _apply_gates(np.eye(len(basis)), circuit.n_qubits, k, circuit.gates)


# ---------------------------------------------------------------------------
# brute-force dense oracle


def _bits_to_tensor(n: int, input_bits: str) -> np.ndarray:
    if len(input_bits) != n or set(input_bits) - {"0", "1"}:
        raise ValueError(f"input must be a {n}-character bitstring, got {input_bits!r}")
    psi = np.zeros((2,) * n)
    psi[tuple(int(b) for b in input_bits)] = 1.0
    return psi


def _sl(n: int, fixed: dict) -> tuple:
    return tuple(fixed.get(q, slice(None)) for q in range(n))


def dense_statevector(circuit: Circuit, input_bits: str | None = None) -> np.ndarray:
    """Full 2^n real amplitude vector after running ``circuit`` on a basis input."""
    n = circuit.n_qubits
    if n > DENSE_MAX_QUBITS:
        raise OracleSizeError(f"dense oracle capped at {DENSE_MAX_QUBITS} qubits, got {n}")
    psi = _bits_to_tensor(n, input_bits if input_bits is not None else "0" * n)
    for g in circuit.gates:
        if g.kind == "RBS":
            i, j = g.qubits
            c, s = np.cos(g.theta), np.sin(g.theta)
            a10 = psi[_sl(n, {i: 1, j: 0})].copy()
            a01 = psi[_sl(n, {i: 0, j: 1})].copy()
            psi[_sl(n, {i: 1, j: 0})] = c * a10 - s * a01
            psi[_sl(n, {i: 0, j: 1})] = s * a10 + c * a01
        elif g.kind == "X":
            psi = np.flip(psi, axis=g.qubits[0]).copy()
        elif g.kind == "Z":
            psi[_sl(n, {g.qubits[0]: 1})] *= -1.0
        elif g.kind == "CZ":
            psi[_sl(n, {g.qubits[0]: 1, g.qubits[1]: 1})] *= -1.0
        elif g.kind == "CNOT":
            ctrl, tgt = g.qubits
            sub = psi[_sl(n, {ctrl: 1})]
            # target axis index shifts down by one if it sits after the control
            axis = tgt - (1 if tgt > ctrl else 0)
            psi[_sl(n, {ctrl: 1})] = np.flip(sub, axis=axis).copy()
    return psi.reshape(-1)


def restrict_dense(psi: np.ndarray, n: int, k: int) -> np.ndarray:
    """Amplitudes of a dense state on the weight-k basis, in HWBasis order."""
    return psi[hw_basis(n, k).dense_indices()]


def hamming_weights(n: int) -> np.ndarray:
    idx = np.arange(2**n)
    return np.array([bin(i).count("1") for i in idx])
