"""Shot sampling of circuits, bit-flip noise, hamming-weight post-selection
and amplitude estimation from counts.

Bitstrings are written qubit 0 first. Circuits made only of leading X gates
followed by weight-preserving gates are sampled from their subspace
distribution, so they are not limited by the dense oracle size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .circuit import (Circuit, Gate, HWBasis, HW_PRESERVING, SubspaceVector, apply_circuit_subspace,
                      dense_statevector, rbs)


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class ShotResult:
    counts: dict
    shots: int
    seed: int | None = None

    def __post_init__(self):
        if sum(self.counts.values()) != self.shots:
            raise ValueError(f"counts sum to {sum(self.counts.values())}, expected {self.shots}")

    def frequency(self, predicate) -> float:
        if self.shots == 0:
            raise EstimationError("no shots")
        return sum(c for b, c in self.counts.items() if predicate(b)) / self.shots

    def to_json(self) -> str:
        return json.dumps({"shots": self.shots, "seed": self.seed, "counts": dict(sorted(self.counts.items()))})

    @classmethod
    def from_json(cls, text: str) -> "ShotResult":
        doc = json.loads(text)
        return cls({str(k): int(v) for k, v in doc["counts"].items()}, int(doc["shots"]), doc.get("seed"))


def _split_prep(circuit: Circuit, input_bits: str) -> tuple[str, list]:
    """Fold the leading X gates into the input bits."""
    bits = list(input_bits)
    gates = list(circuit.gates)
    while gates and gates[0].kind == "X":
        q = gates.pop(0).qubits[0]
        bits[q] = "1" if bits[q] == "0" else "0"
    return "".join(bits), gates


def outcome_distribution(circuit: Circuit, input_bits: str | None = None) -> dict:
    """Exact outcome probabilities {bitstring: p} (zero entries dropped)."""
    n = circuit.n_qubits
    input_bits = input_bits if input_bits is not None else "0" * n
    if len(input_bits) != n or set(input_bits) - {"0", "1"}:
        raise ValueError(f"input must be a {n}-character bitstring, got {input_bits!r}")
    bits, rest = _split_prep(circuit, input_bits)
    if all(g.kind in HW_PRESERVING for g in rest):
        subset = tuple(q for q, b in enumerate(bits) if b == "1")
        state = apply_circuit_subspace(Circuit(n, rest), SubspaceVector.basis_state(n, subset))
        probs = state.amplitudes ** 2
        labels = [state.basis.bitstring(i) for i in range(len(probs))]
    else:
        probs = dense_statevector(circuit, input_bits) ** 2
        labels = [format(i, f"0{n}b") for i in range(len(probs))]
    return {b: float(p) for b, p in zip(labels, probs) if p > 0}


def sample(circuit: Circuit, shots: int, seed: int, input_bits: str | None = None) -> ShotResult:
    if int(shots) != shots or shots < 1:
        raise ValueError(f"shots must be a positive integer, got {shots}")
    dist = outcome_distribution(circuit, input_bits)
    labels = sorted(dist)
    p = np.array([dist[b] for b in labels])
    counts = np.random.default_rng(seed).multinomial(int(shots), p / p.sum())
    return ShotResult({b: int(c) for b, c in zip(labels, counts) if c}, int(shots), seed)


def shot_list(result: ShotResult) -> list[str]:
    """Expand counts into one bitstring per shot, in sorted outcome order."""
    return [b for b in sorted(result.counts) for _ in range(result.counts[b])]


def _recount(bits: list[str], seed) -> ShotResult:
    counts: dict[str, int] = {}
    for b in bits:
        counts[b] = counts.get(b, 0) + 1
    return ShotResult(counts, len(bits), seed)


def _flip(b: str, q: int) -> str:
    return b[:q] + ("1" if b[q] == "0" else "0") + b[q + 1:]


def bit_flip_channel(result: ShotResult, p: float, seed: int) -> ShotResult:
    """Flip every bit of every shot independently with probability p."""
    if not 0 <= p <= 1:
        raise ValueError("flip probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for b in shot_list(result):
        mask = rng.random(len(b)) < p
        out.append("".join(("1" if c == "0" else "0") if m else c for c, m in zip(b, mask)))
    return _recount(out, result.seed)


def single_flip_corruption(result: ShotResult, fraction: float, seed: int) -> tuple[ShotResult, int]:
    """Flip exactly one uniformly chosen bit on a random ``fraction`` of the shots.
    Returns the corrupted result and the number of corrupted shots."""
    rng = np.random.default_rng(seed)
    shots = shot_list(result)
    hit = rng.random(len(shots)) < fraction
    out = [_flip(b, int(rng.integers(len(b)))) if h else b for b, h in zip(shots, hit)]
    return _recount(out, result.seed), int(hit.sum())


def hw_postselect(result: ShotResult, k: int, registers: tuple[int, ...] | None = None) -> ShotResult:
    """Keep shots of hamming weight k; with ``registers`` sizes, additionally
    keep only shots with exactly one excitation in each register."""
    def keep(b: str) -> bool:
        if b.count("1") != k:
            return False
        if registers is None:
            return True
        start = 0
        for size in registers:
            if b[start:start + size].count("1") != 1:
                return False
            start += size
        return True

    counts = {b: c for b, c in result.counts.items() if keep(b)}
    return ShotResult(counts, sum(counts.values()), result.seed)


def estimate_amplitudes(result: ShotResult, basis: HWBasis, exact: SubspaceVector) -> SubspaceVector:
    """Magnitudes from counts over ``basis``; signs copied from ``exact``."""
    if exact.basis != basis:
        raise ValueError("sign source lives on a different basis")
    labels = [basis.bitstring(i) for i in range(len(basis))]
    counts = np.array([result.counts.get(b, 0) for b in labels], dtype=np.float64)
    retained = counts.sum()
    if retained == 0:
        raise EstimationError("no retained shots on this basis")
    signs = np.where(exact.amplitudes < 0, -1.0, 1.0)
    return SubspaceVector(basis, signs * np.sqrt(counts / retained))


def first_qubit_probability(result: ShotResult) -> float:
    return result.frequency(lambda b: b[0] == "1")


def rbs_demo_circuit(theta: float = np.pi / 4) -> Circuit:
    """X on qubit 0 then RBS(theta) on (0, 1): outcomes 10 / 01 with cos^2 / sin^2."""
    return Circuit(2, [Gate("X", (0,)), rbs(0, 1, theta)])

