"""Vision-transformer networks built on the exact orthogonal-layer backend.

Forward and backward passes are batched numpy with hand-written reverse
mode. Orthogonal attention maps are materialised once per step as their
unary matrix U (one rotation sweep), and angle gradients are pulled back
from dL/dU by the reverse sweep in :func:`qvit.layers.matrix_grad`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import erf

from .layers import LAYOUTS, OrthoLayer, init_angles, layout_pairs, matrix_grad
from .rng import PCG32

ARCHS = ("ortho_patchwise", "ortho_transformer", "compound_transformer", "classical_vit", "ortho_fnn")
USES_CLS = {"ortho_transformer", "classical_vit"}
LN_EPS = 1e-5
CKPT_MAGIC = b"QVITCKPT"


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    arch: str = "ortho_patchwise"
    layout: str = "butterfly"
    d: int = 16
    layers: int = 4
    hidden: int | None = None
    grid: tuple[int, int] = (4, 4)
    image_shape: tuple[int, int, int] = (28, 28, 1)
    num_classes: int = 2
    attn_norm: str = "softmax"
    positional: str = "shared"
    det_flip: bool = False
    # run settings
    dataset: str = "retinamnist"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (50, 75)
    lr_gamma: float = 0.1
    max_train: int | None = None

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.image_shape = tuple(self.image_shape)
        self.lr_milestones = tuple(self.lr_milestones)
        if self.hidden is None:
            self.hidden = 2 * self.d
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.attn_norm not in ("softmax", "l1", "none"):
            raise ConfigError(f"unknown attention normalisation {self.attn_norm!r}")
        if self.positional not in ("shared", "per_token"):
            raise ConfigError(f"unknown positional mode {self.positional!r}")
        H, W, _ = self.image_shape
        gh, gw = self.grid
        if H % gh or W % gw:
            raise ConfigError(f"{H}x{W} image does not split into a {gh}x{gw} grid")
        if self.arch != "classical_vit":
            try:
                layout_pairs(self.layout, self.attention_qubits)
            except ValueError as exc:
                raise ConfigError(f"invalid layout for this network: {exc}") from exc

    @property
    def n_patches(self) -> int:
        return 1 if self.arch == "ortho_fnn" else self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (self.arch in USES_CLS)

    @property
    def patch_len(self) -> int:
        H, W, C = self.image_shape
        if self.arch == "ortho_fnn":
            return H * W * C
        return (H // self.grid[0]) * (W // self.grid[1]) * C

    @property
    def attention_qubits(self) -> int:
        return self.n_patches + self.d if self.arch == "compound_transformer" else self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("grid", "image_shape", "lr_milestones"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.hidden
    shapes = {"embed.W": (cfg.patch_len, d), "embed.b": (d,)}
    if cfg.arch in USES_CLS:
        shapes["cls"] = (d,)
    shapes["pos"] = (d,) if cfg.positional == "shared" else (cfg.n_tokens, d)
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        if cfg.arch == "classical_vit":
            shapes[p + "V"] = (d, d)
            shapes[p + "W"] = (d, d)
        else:
            na = len(layout_pairs(cfg.layout, cfg.attention_qubits))
            shapes[p + "V.theta"] = (na,)
            if cfg.arch == "ortho_transformer":
                shapes[p + "W.theta"] = (na,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.W1"] = (d, h)
        shapes[p + "mlp.b1"] = (h,)
        shapes[p + "mlp.W2"] = (h, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["head.W"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


_FAN_IN = {"embed.b": "embed.W", "mlp.b1": "mlp.W1", "mlp.b2": "mlp.W2", "head.b": "head.W"}


def init_params(cfg: NetworkConfig, rng: PCG32) -> dict[str, np.ndarray]:
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        leaf = name.split(".", 1)[1] if name.startswith("layer") else name
        if name.endswith(".theta"):
            params[name] = init_angles(rng, shape[0])
        elif name in ("cls", "pos") or leaf.endswith("ln1.b") or leaf.endswith("ln2.b"):
            params[name] = np.zeros(shape)
        elif leaf.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            weight = name[: -len(leaf)] + _FAN_IN[leaf] if leaf in _FAN_IN else name
            fan_in = shapes[weight][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def attention_census(cfg: NetworkConfig) -> dict:
    """Trainable attention parameters per layer and over all layers."""
    shapes = param_shapes(cfg)
    keys = ("V", "W", "V.theta", "W.theta")
    per_layer = sum(int(np.prod(shapes[f"layer0.{k}"])) for k in keys if f"layer0.{k}" in shapes)
    return {"per_layer": per_layer, "layers": cfg.layers, "total": per_layer * cfg.layers}


def count_params(params: dict) -> int:
    return sum(int(v.size) for v in params.values())


# ---------------------------------------------------------------------------
# building blocks


def patchify(image: np.ndarray, grid=(4, 4)) -> np.ndarray:
    """(H, W, C) or (B, H, W, C) -> (..., gh*gw, ph*pw*C), row-major over the grid."""
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"expected an (H, W, C) image, got shape {np.shape(image)}")
    B, H, W, C = img.shape
    gh, gw = grid
    if H % gh or W % gw:
        raise ValueError(f"{H}x{W} image does not split into a {gh}x{gw} grid")
    ph, pw = H // gh, W // gw
    out = img.reshape(B, gh, ph, gw, pw, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, ph * pw * C)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, grid, image_shape) -> np.ndarray:
    H, W, C = image_shape
    gh, gw = grid
    ph, pw = H // gh, W // gw
    return patches.reshape(gh, gw, ph, pw, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)


def layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def layernorm_back(dy, cache):
    xhat, inv, g = cache
    D = xhat.shape[-1]
    red = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=red)
    db = np.sum(dy, axis=red)
    dxhat = dy * g
    dx = inv / D * (D * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _normalize(A, mode):
    if mode == "softmax":
        z = np.exp(A - A.max(-1, keepdims=True))
        return z / z.sum(-1, keepdims=True)
    if mode == "l1":
        s = A.sum(-1, keepdims=True)
        if np.any(s == 0):
            raise ValueError("l1 normalisation of an all-zero attention row")
        return A / s
    return A


def _normalize_back(dAn, An, A, mode):
    if mode == "softmax":
        return An * (dAn - (dAn * An).sum(-1, keepdims=True))
    if mode == "l1":
        s = A.sum(-1, keepdims=True)
        return (dAn - (dAn * An).sum(-1, keepdims=True)) / s
    return dAn


def _layer(params, cfg, prefix, key) -> OrthoLayer:
    return OrthoLayer(cfg.attention_qubits, cfg.layout, params[prefix + key], cfg.det_flip)


def _eT(M):
    return np.swapaxes(M, -1, -2)


def attention_forward(params, cfg, prefix, t):
    """Token-mixing block of one transformer layer. t: (B, N, d)."""
    arch = cfg.arch
    if arch in ("ortho_patchwise", "ortho_fnn"):
        U = _layer(params, cfg, prefix, "V.theta").matrix()
        return t @ U.T, {"U": U, "t": t}
    if arch in ("ortho_transformer", "classical_vit"):
        if arch == "classical_vit":
            Uv, Uw = params[prefix + "V"], params[prefix + "W"]
        else:
            Uv = _layer(params, cfg, prefix, "V.theta").matrix()
            Uw = _layer(params, cfg, prefix, "W.theta").matrix()
        Q = t @ Uw.T  # rows W x_j
        S = t @ _eT(Q)  # S_ij = x_i . W x_j
        A = S * S if arch == "ortho_transformer" else S
        An = _normalize(A, cfg.attn_norm)
        P = t @ Uv.T
        return An @ P, {"t": t, "Uv": Uv, "Uw": Uw, "Q": Q, "S": S, "A": A, "An": An, "P": P}
    if arch == "compound_transformer":
        U = _layer(params, cfg, prefix, "V.theta").matrix()
        n = t.shape[1]
        M = np.zeros(t.shape[:1] + (U.shape[0], U.shape[0]))
        M[:, :n, n:] = t
        M[:, n:, :n] = -_eT(t)
        Z = U @ M @ U.T
        return Z[:, :n, n:], {"U": U, "M": M, "n": n}
    raise ConfigError(arch)


def attention_backward(params, cfg, prefix, g, cache, grads):
    arch = cfg.arch
    if arch in ("ortho_patchwise", "ortho_fnn"):
        U, t = cache["U"], cache["t"]
        dU = np.einsum("bnk,bnq->kq", g, t)
        grads[prefix + "V.theta"] = matrix_grad(_layer(params, cfg, prefix, "V.theta"), dU)
        return g @ U
    if arch in ("ortho_transformer", "classical_vit"):
        c = cache
        t = c["t"]
        dAn = g @ _eT(c["P"])
        dP = _eT(c["An"]) @ g
        dA = _normalize_back(dAn, c["An"], c["A"], cfg.attn_norm)
        dS = 2.0 * c["S"] * dA if arch == "ortho_transformer" else dA
        dt = dS @ c["Q"] + dP @ c["Uv"]
        dQ = _eT(dS) @ t
        dt += dQ @ c["Uw"]
        dUw = np.einsum("bjk,bjq->kq", dQ, t)
        dUv = np.einsum("bjk,bjq->kq", dP, t)
        if arch == "classical_vit":
            grads[prefix + "V"] = dUv
            grads[prefix + "W"] = dUw
        else:
            grads[prefix + "V.theta"] = matrix_grad(_layer(params, cfg, prefix, "V.theta"), dUv)
            grads[prefix + "W.theta"] = matrix_grad(_layer(params, cfg, prefix, "W.theta"), dUw)
        return dt
    if arch == "compound_transformer":
        U, M, n = cache["U"], cache["M"], cache["n"]
        G = np.zeros_like(M)
        G[:, :n, n:] = g
        dU = (G @ U @ _eT(M)).sum(0) + (_eT(G) @ U @ M).sum(0)
        dM = U.T @ G @ U
        grads[prefix + "V.theta"] = matrix_grad(_layer(params, cfg, prefix, "V.theta"), dU)
        return dM[:, :n, n:] - _eT(dM[:, n:, :n])
    raise ConfigError(arch)


# ---------------------------------------------------------------------------
# whole network


def embed_tokens(params, cfg, images):
    B = images.shape[0]
    if cfg.arch == "ortho_fnn":
        x = images.reshape(B, 1, -1)
    else:
        x = patchify(images, cfg.grid)
    tok = x @ params["embed.W"] + params["embed.b"]
    if cfg.arch in USES_CLS:
        cls = np.broadcast_to(params["cls"], (B, 1, cfg.d))
        tok = np.concatenate([cls, tok], axis=1)
    return tok + params["pos"], x


def forward(params, cfg: NetworkConfig, images):
    """Logits for a batch of images (B, H, W, C) plus the cache for backward."""
    images = np.asarray(images, dtype=np.float64)
    tok, x = embed_tokens(params, cfg, images)
    caches = []
    for l in range(cfg.layers):
        p = f"layer{l}."
        t1, ln1 = layernorm(tok, params[p + "ln1.g"], params[p + "ln1.b"])
        a, att = attention_forward(params, cfg, p, t1)
        t2 = tok + a
        t3, ln2 = layernorm(t2, params[p + "ln2.g"], params[p + "ln2.b"])
        h1 = t3 @ params[p + "mlp.W1"] + params[p + "mlp.b1"]
        h2 = gelu(h1)
        m = h2 @ params[p + "mlp.W2"] + params[p + "mlp.b2"]
        tok = t2 + m
        caches.append((ln1, att, ln2, t3, h1, h2))
    r = tok[:, 0] if cfg.arch in USES_CLS else tok.mean(axis=1)
    logits = r @ params["head.W"] + params["head.b"]
    return logits, {"x": x, "tok": tok, "r": r, "layers": caches}


def backward(params, cfg: NetworkConfig, cache, dlogits):
    grads = {}
    grads["head.W"] = cache["r"].T @ dlogits
    grads["head.b"] = dlogits.sum(0)
    dr = dlogits @ params["head.W"].T
    B, N = cache["tok"].shape[:2]
    dtok = np.zeros((B, N, cfg.d))
    if cfg.arch in USES_CLS:
        dtok[:, 0] = dr
    else:
        dtok += dr[:, None, :] / N
    for l in reversed(range(cfg.layers)):
        p = f"layer{l}."
        ln1, att, ln2, t3, h1, h2 = cache["layers"][l]
        # tok_out = t2 + mlp(ln2(t2))
        grads[p + "mlp.W2"] = np.einsum("bnh,bnd->hd", h2, dtok)
        grads[p + "mlp.b2"] = dtok.sum((0, 1))
        dh1 = (dtok @ params[p + "mlp.W2"].T) * gelu_grad(h1)
        grads[p + "mlp.W1"] = np.einsum("bnd,bnh->dh", t3, dh1)
        grads[p + "mlp.b1"] = dh1.sum((0, 1))
        dt3 = dh1 @ params[p + "mlp.W1"].T
        dt2, grads[p + "ln2.g"], grads[p + "ln2.b"] = layernorm_back(dt3, ln2)
        dt2 = dt2 + dtok
        # t2 = tok_in + attention(ln1(tok_in))
        dt1 = attention_backward(params, cfg, p, dt2, att, grads)
        dtin, grads[p + "ln1.g"], grads[p + "ln1.b"] = layernorm_back(dt1, ln1)
        dtok = dtin + dt2
    grads["pos"] = dtok.sum(0) if cfg.positional == "per_token" else dtok.sum((0, 1))
    if cfg.arch in USES_CLS:
        grads["cls"] = dtok[:, 0].sum(0)
        dtok = dtok[:, 1:]
    grads["embed.W"] = np.einsum("bnl,bnd->ld", cache["x"], dtok)
    grads["embed.b"] = dtok.sum((0, 1))
    return {k: grads[k] for k in params}


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def loss_and_grads(params, cfg, images, labels):
    logits, cache = forward(params, cfg, images)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backward(params, cfg, cache, dlogits)


def model_forward(image, params, cfg) -> np.ndarray:
    return forward(params, cfg, np.asarray(image)[None])[0][0]


def model_backward(image, label, params, cfg) -> dict:
    return loss_and_grads(params, cfg, np.asarray(image)[None], [label])[1]


def softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def predict_proba(params, cfg, images, batch_size: int = 256) -> np.ndarray:
    out = [softmax(forward(params, cfg, images[i:i + batch_size])[0]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, float64 LE payload


def save_checkpoint(path, cfg: NetworkConfig, arrays: dict, meta: dict | None = None):
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps({"config": cfg.to_dict(), "manifest": manifest, "meta": meta or {}}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header + payload)


def load_checkpoint(path):
    """Returns (config, arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += 8 * count
    if offset != len(blob):
        raise ValueError("checkpoint payload does not match its manifest")
    return NetworkConfig.from_dict(header["config"]), arrays, header["meta"]
