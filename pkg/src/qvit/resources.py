"""Gate and parameter accounting for the layouts and the attention circuits.

Loader counts are taken from circuits actually built on a generic input, so
the report cannot drift from the constructions it describes.
"""

from __future__ import annotations

import numpy as np

from .layers import LAYOUTS, TopologyError, build_layout, layout_pairs
from .loaders import _top_topology, build_inner_product_circuit, build_matrix_loader, plan_vector_loader

CENSUS_SIZES = (4, 8, 16)
RESOURCE_ARCHS = ("ortho_patchwise", "ortho_transformer", "compound_transformer", "classical_vit", "quantum_attention")


def layout_census(sizes=CENSUS_SIZES) -> list[dict]:
    rows = []
    for kind in LAYOUTS:
        for n in sizes:
            try:
                circ = build_layout(kind, n)
            except TopologyError:
                continue
            rows.append({"layout": kind, "n": n, "gates": circ.count("RBS"), "depth": circ.depth})
    return rows


def _generic(shape, seed=7):
    # strictly nonzero entries so no loader gate degenerates
    rng = np.random.default_rng(seed)
    return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def arch_resources(arch: str, layout: str = "butterfly", n_patches: int = 16, d: int = 16, layers: int = 4) -> dict:
    """Qubits, loader gates, trainable gates and distinct circuits per layer."""
    if arch not in RESOURCE_ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {RESOURCE_ARCHS}")
    if n_patches < 1 or d < 2:
        raise ValueError("need at least one patch and d >= 2")
    topo = "parallel" if d & (d - 1) == 0 else "diagonal"
    if arch == "classical_vit":
        per_layer = 2 * d * d
        return {"arch": arch, "qubits": 0, "loader_gates": 0, "loader_breakdown": {}, "trainable": per_layer,
                "circuits_per_layer": 0, "layers": layers, "attention_params_total": per_layer * layers}
    x = _generic(d)
    vector = plan_vector_loader(x, topo).circuit.count("RBS")
    if arch == "ortho_patchwise":
        n_angles = len(layout_pairs(layout, d))
        out = {"qubits": d, "loader_gates": vector, "loader_breakdown": {"vector_rbs": vector, "x": 1},
               "trainable": n_angles, "circuits_per_layer": n_patches}
    elif arch == "ortho_transformer":
        n_angles = len(layout_pairs(layout, d))
        overlap = build_inner_product_circuit(x, _generic(d, 8), None, topo).count("RBS")
        tokens = n_patches + 1
        out = {"qubits": d, "loader_gates": overlap + vector,
               "loader_breakdown": {"overlap_rbs": overlap, "value_rbs": vector, "x_per_circuit": 1},
               "trainable": 2 * n_angles,
               "circuits_per_layer": tokens + tokens ** 2,
               "circuit_split": {"value": tokens, "attention": tokens ** 2}}
    else:
        X = _generic((n_patches, d))
        circ = build_matrix_loader(X, topo)
        top = 0
        if n_patches > 1:
            norms = np.linalg.norm(X, axis=1)
            top = plan_vector_loader(norms, _top_topology(n_patches, topo)).circuit.count("RBS")
        rows = circ.count("RBS") - top
        breakdown = {"row_rbs": rows, "top_rbs": top, "cnot": circ.count("CNOT"), "x": circ.count("X")}
        if arch == "compound_transformer":
            n_angles = len(layout_pairs(layout, n_patches + d))
            out = {"qubits": n_patches + d, "loader_gates": rows, "loader_gates_full": rows + top,
                   "loader_breakdown": breakdown, "trainable": n_angles, "circuits_per_layer": 1}
        else:
            n_angles = len(layout_pairs(layout, d))
            out = {"qubits": n_patches + d, "loader_gates": rows + top, "loader_breakdown": breakdown,
                   "trainable": n_angles, "circuits_per_layer": n_patches}
    out.update({"arch": arch, "layers": layers, "attention_params_total": out["trainable"] * layers})
    if arch == "quantum_attention":
        # shares the attention coefficients with ortho_transformer; only V is new here
        out["attention_params_total"] = None
    return out


def resource_table(layout="butterfly", n_patches=16, d=16, layers=4) -> list[dict]:
    return [arch_resources(a, layout, n_patches, d, layers) for a in RESOURCE_ARCHS]
