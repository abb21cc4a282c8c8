"""Oracle-equivalence and invariant checks behind ``qvit verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import chisquare

from .circuit import dense_statevector, hw_basis, reduced_matrix, restrict_dense
from .layers import LAYOUTS, OrthoLayer, TopologyError, apply_unary, compound2_matrix, layer_grad, layout_pairs
from .loaders import TOPOLOGIES, LoaderTopologyError, build_matrix_loader, plan_vector_loader
from .attention import compound_forward
from .model import ARCHS, NetworkConfig, init_params, loss_and_grads
from .rng import PCG32
from .sampling import hw_postselect, outcome_distribution, sample, single_flip_corruption

SCOPES = ("loaders", "layers", "gradients", "compound", "sampling")


@dataclass
class CheckResult:
    name: str
    tolerance: float
    worst: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3e} (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


def _layouts_for(n):
    for kind in LAYOUTS:
        try:
            layout_pairs(kind, n)
        except TopologyError:
            continue
        yield kind


def check_loaders(rng, cases=40) -> list[CheckResult]:
    worst = 0.0
    done = 0
    while done < cases:
        d = int(rng.integers(2, 11))
        topo = TOPOLOGIES[done % 3]
        x = rng.standard_normal(d)
        try:
            loader = plan_vector_loader(x, topo)
        except LoaderTopologyError:
            topo = "diagonal"
            loader = plan_vector_loader(x, topo)
        psi = dense_statevector(loader.circuit)
        expect = np.zeros_like(psi)
        expect[hw_basis(d, 1).dense_indices()] = x / np.linalg.norm(x)
        worst = max(worst, np.max(np.abs(psi - expect)))
        done += 1
    return [CheckResult("loaders vs dense oracle", 1e-10, worst)]


def check_layers(rng, cases=40) -> list[CheckResult]:
    w_oracle = w_compound = 0.0
    for c in range(cases):
        n = int(rng.integers(2, 11))
        kind = list(_layouts_for(n))[c % len(list(_layouts_for(n)))]
        layer = OrthoLayer(n, kind, rng.uniform(-np.pi, np.pi, len(layout_pairs(kind, n))), bool(c % 2))
        circ = layer.to_circuit()
        U = layer.matrix()
        for k in (1, 2):
            red = reduced_matrix(circ, k)
            basis = hw_basis(n, k)
            cols = []
            for i in range(len(basis)):
                cols.append(restrict_dense(dense_statevector(circ, basis.bitstring(i)), n, k))
            w_oracle = max(w_oracle, np.max(np.abs(red - np.array(cols).T)))
            target = U if k == 1 else compound2_matrix(U)
            w_compound = max(w_compound, np.max(np.abs(red - target)))
    return [CheckResult("layers vs dense oracle (k=1,2)", 1e-10, w_oracle),
            CheckResult("layers vs unary / det(2x2) compound matrix", 1e-10, w_compound)]


def check_compound(rng, cases=20) -> list[CheckResult]:
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(2, 11 - n))
        kind = list(_layouts_for(n + d))[int(rng.integers(len(list(_layouts_for(n + d)))))]
        V = OrthoLayer(n + d, kind, rng.uniform(-np.pi, np.pi, len(layout_pairs(kind, n + d))))
        X = rng.standard_normal((n, d))
        Y, leak = compound_forward(V, X)
        psi = dense_statevector(build_matrix_loader(X, "diagonal") + V.to_circuit())
        M = np.zeros((n + d, n + d))
        basis = hw_basis(n + d, 2)
        for (a, b), amp in zip(basis.elements, restrict_dense(psi, n + d, 2)):
            M[a, b] = amp
        Y_dense = M[:n, n:] * np.linalg.norm(X)
        cross = np.sum(M[:n, n:] ** 2)
        worst = max(worst, np.max(np.abs(Y - Y_dense)), abs(leak - (1.0 - cross)))
    return [CheckResult("compound forward vs dense oracle", 1e-10, worst)]


def _fd_rel(f, g, x, h=1e-5):
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        a = f()
        flat[i] = old - h
        b = f()
        flat[i] = old
        num.reshape(-1)[i] = (a - b) / (2 * h)
    return np.max(np.abs(num - g)) / max(np.max(np.abs(num)), 1e-8)


def check_gradients(rng, grad_fn=layer_grad, include_model=True) -> list[CheckResult]:
    worst = 0.0
    for kind, n in (("pyramid", 5), ("butterfly", 8), ("x", 6), ("backslash", 4)):
        layer = OrthoLayer(n, kind, rng.uniform(-np.pi, np.pi, len(layout_pairs(kind, n))))
        v = rng.standard_normal(n)
        cot = rng.standard_normal(n)
        d_angles, d_v = grad_fn(layer, v, cot)
        worst = max(worst, _fd_rel(lambda: cot @ apply_unary(layer, v), d_angles, layer.angles))
        worst = max(worst, _fd_rel(lambda: cot @ apply_unary(layer, v), d_v, v))
    out = [CheckResult("layer angle/input gradients vs finite differences (relative)", 1e-4, worst)]
    if include_model:
        worst = 0.0
        for arch in ARCHS:
            cfg = NetworkConfig(arch=arch, d=4, layers=1, grid=(1, 2), image_shape=(4, 4, 1), num_classes=3,
                                layout="backslash")
            params = init_params(cfg, PCG32(3, 0))
            images = rng.random((2, 4, 4, 1))
            labels = np.array([0, 2])
            _, grads = loss_and_grads(params, cfg, images, labels)
            for k in params:
                worst = max(worst, _fd_rel(lambda: loss_and_grads(params, cfg, images, labels)[0], grads[k], params[k]))
        out.append(CheckResult("whole-model gradients vs finite differences (relative)", 1e-4, worst))
    return out


def check_sampling(rng) -> list[CheckResult]:
    layer = OrthoLayer(6, "pyramid", rng.uniform(-np.pi, np.pi, 15))
    circ = plan_vector_loader(rng.standard_normal(6), "diagonal").circuit + layer.to_circuit()
    dist = outcome_distribution(circ)
    res = sample(circ, 100_000, seed=11)
    labels = sorted(dist)
    obs = np.array([res.counts.get(b, 0) for b in labels])
    exp = np.array([dist[b] for b in labels]) * res.shots
    p_value = chisquare(obs, exp).pvalue
    corrupted, hits = single_flip_corruption(res, 0.1, seed=12)
    kept = hw_postselect(corrupted, 1)
    leaked = kept.shots - (res.shots - hits)
    return [CheckResult("sampler chi-square, -log10 p-value", 6.0, -np.log10(p_value)),
            CheckResult("post-selection leftover corrupted shots", 0, abs(leaked))]


def run(scope: str = "all", seed: int = 0, grad_fn=layer_grad) -> list[CheckResult]:
    scopes = SCOPES if scope == "all" else (scope,)
    if any(s not in SCOPES for s in scopes):
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES + ('all',)}")
    rng = np.random.default_rng(seed)
    results = []
    for s in scopes:
        t0 = time.perf_counter()
        if s == "loaders":
            batch = check_loaders(rng)
        elif s == "layers":
            batch = check_layers(rng)
        elif s == "compound":
            batch = check_compound(rng)
        elif s == "gradients":
            batch = check_gradients(rng, grad_fn)
        else:
            batch = check_sampling(rng)
        dt = time.perf_counter() - t0
        for r in batch:
            r.seconds = dt / len(batch)
        results += batch
    return results
