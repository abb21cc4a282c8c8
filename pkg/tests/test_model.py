import math

import numpy as np
import pytest

from qvit.attention import PatchSet, compound_forward, ortho_attention_forward, patchwise_forward
from qvit.layers import OrthoLayer
from qvit.model import (ARCHS, ConfigError, NetworkConfig, attention_census, attention_forward, backward,
                        cross_entropy, embed_tokens, forward, init_params, layernorm, load_checkpoint,
                        loss_and_grads, model_backward, model_forward, param_shapes, patchify, save_checkpoint,
                        unpatchify)
from qvit.rng import PCG32


def jitter(params, rng, scale=0.3):
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


def test_patchify_examples(rng):
    img = rng.random((28, 28, 1))
    p = patchify(img)
    assert p.shape == (16, 49)
    np.testing.assert_array_equal(p[1], img[0:7, 7:14, 0].reshape(-1))
    np.testing.assert_array_equal(p[4], img[7:14, 0:7, 0].reshape(-1))
    assert patchify(rng.random((28, 28, 3))).shape == (16, 147)
    const = patchify(np.full((28, 28, 3), 0.25))
    assert np.all(const == const[0])
    np.testing.assert_array_equal(unpatchify(p, (4, 4), (28, 28, 1)), img)
    with pytest.raises(ValueError):
        patchify(rng.random((28, 27, 1)))
    with pytest.raises(ValueError):
        patchify(rng.random((28, 28)))


def test_token_counts():
    assert NetworkConfig(arch="ortho_transformer").n_tokens == 17
    assert NetworkConfig(arch="classical_vit").n_tokens == 17
    assert NetworkConfig(arch="ortho_patchwise").n_tokens == 16
    assert NetworkConfig(arch="compound_transformer").n_tokens == 16
    assert NetworkConfig(arch="compound_transformer").attention_qubits == 32
    assert NetworkConfig(arch="ortho_fnn").patch_len == 784


def test_embed_zero_pos_cls(rng):
    cfg = NetworkConfig(arch="ortho_transformer")
    params = init_params(cfg, PCG32(0))
    assert not params["pos"].any() and not params["cls"].any()
    imgs = rng.random((2, 28, 28, 1))
    tok, x = embed_tokens(params, cfg, imgs)
    assert tok.shape == (2, 17, 16)
    np.testing.assert_array_equal(tok[:, 1:], x @ params["embed.W"] + params["embed.b"])
    np.testing.assert_array_equal(tok[:, 0], 0.0)


def test_config_errors():
    with pytest.raises(ConfigError):
        NetworkConfig(arch="transformer")
    with pytest.raises(ConfigError):
        NetworkConfig(d=12, layout="butterfly")
    with pytest.raises(ConfigError):
        NetworkConfig(grid=(5, 5))
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"arch": "ortho_patchwise", "colour": 1})
    cfg = NetworkConfig(arch="compound_transformer", layout="pyramid")
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_layernorm_statistics(rng):
    x = rng.standard_normal((3, 5, 16)) * 4 + 2
    y, _ = layernorm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-8)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)  # eps inside the root
    np.testing.assert_allclose(y.var(-1) * (x.var(-1) + 1e-5) / x.var(-1), 1.0, atol=1e-8)


def test_residual_identity(rng):
    cfg = NetworkConfig(arch="classical_vit", layers=2)
    params = init_params(cfg, PCG32(1))
    for l in range(2):
        for k in ("V", "W", "mlp.W2", "mlp.b2"):
            params[f"layer{l}.{k}"][...] = 0.0
    imgs = rng.random((2, 28, 28, 1))
    tok, _ = embed_tokens(params, cfg, imgs)
    _, cache = forward(params, cfg, imgs)
    np.testing.assert_array_equal(cache["tok"], tok)


def test_classical_attention_oracle(rng):
    cfg = NetworkConfig(arch="classical_vit", d=6, grid=(2, 2), image_shape=(8, 8, 1))
    params = jitter(init_params(cfg, PCG32(2)), rng)
    t = rng.standard_normal((1, 5, 6))
    out, _ = attention_forward(params, cfg, "layer0.", t)
    X, V, W = t[0], params["layer0.V"], params["layer0.W"]
    S = np.array([[X[i] @ W @ X[j] for j in range(5)] for i in range(5)])
    A = np.exp(S) / np.exp(S).sum(1, keepdims=True)
    np.testing.assert_allclose(out[0], A @ X @ V.T, atol=1e-12)


# ---------------------------------------------------------------------------
# independent straight-line evaluator


def _ln(v, g, b):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return g * (v - mu) / math.sqrt(var + 1e-5) + b


def _gelu(v):
    return np.array([0.5 * a * (1 + math.erf(a / math.sqrt(2))) for a in v])


def _layer(params, cfg, key):
    return OrthoLayer(cfg.attention_qubits, cfg.layout, params[key], cfg.det_flip)


def oracle_logits(params, cfg, image):
    H, W, C = cfg.image_shape
    gh, gw = cfg.grid
    if cfg.arch == "ortho_fnn":
        patches = [image.reshape(-1)]
    else:
        ph, pw = H // gh, W // gw
        patches = [image[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw, :].reshape(-1)
                   for r in range(gh) for c in range(gw)]
    tokens = [p @ params["embed.W"] + params["embed.b"] for p in patches]
    if cfg.arch in ("ortho_transformer", "classical_vit"):
        tokens = [params["cls"].copy()] + tokens
    pos = params["pos"]
    tokens = np.array([t + (pos if pos.ndim == 1 else pos[i]) for i, t in enumerate(tokens)])
    for l in range(cfg.layers):
        p = f"layer{l}."
        t1 = np.array([_ln(t, params[p + "ln1.g"], params[p + "ln1.b"]) for t in tokens])
        if cfg.arch in ("ortho_patchwise", "ortho_fnn"):
            a = patchwise_forward(_layer(params, cfg, p + "V.theta"), PatchSet.from_vectors(t1))
        elif cfg.arch == "ortho_transformer":
            a = ortho_attention_forward(_layer(params, cfg, p + "V.theta"), _layer(params, cfg, p + "W.theta"),
                                        PatchSet.from_vectors(t1), cfg.attn_norm)
        elif cfg.arch == "compound_transformer":
            a = compound_forward(_layer(params, cfg, p + "V.theta"), t1)[0]
        else:
            V, Wm = params[p + "V"], params[p + "W"]
            a = []
            for i in range(len(t1)):
                s = np.array([t1[i] @ Wm @ t1[j] for j in range(len(t1))])
                w = np.exp(s - s.max())
                w /= w.sum()
                a.append(sum(w[j] * (V @ t1[j]) for j in range(len(t1))))
            a = np.array(a)
        t2 = tokens + a
        out = []
        for t in t2:
            h = _gelu(_ln(t, params[p + "ln2.g"], params[p + "ln2.b"]) @ params[p + "mlp.W1"] + params[p + "mlp.b1"])
            out.append(t + h @ params[p + "mlp.W2"] + params[p + "mlp.b2"])
        tokens = np.array(out)
    r = tokens[0] if cfg.arch in ("ortho_transformer", "classical_vit") else tokens.mean(0)
    return r @ params["head.W"] + params["head.b"]


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("positional", ["shared", "per_token"])
def test_forward_matches_straight_line_oracle(arch, positional, rng):
    layout = "butterfly" if arch != "compound_transformer" else "pyramid"
    cfg = NetworkConfig(arch=arch, layout=layout, d=4, layers=2, grid=(2, 2), image_shape=(8, 8, 2),
                        num_classes=5, positional=positional, det_flip=arch == "ortho_patchwise")
    params = jitter(init_params(cfg, PCG32(4)), rng)
    imgs = rng.random((3, 8, 8, 2))
    logits, _ = forward(params, cfg, imgs)
    assert logits.shape == (3, 5)
    for b in range(3):
        np.testing.assert_allclose(logits[b], oracle_logits(params, cfg, imgs[b]), atol=1e-10)


def test_full_size_forward_and_determinism(rng):
    cfg = NetworkConfig(arch="ortho_transformer", num_classes=5, image_shape=(28, 28, 3))
    params = init_params(cfg, PCG32(8))
    img = rng.random((28, 28, 3))
    a = model_forward(img, params, cfg)
    b = model_forward(img, params, cfg)
    assert a.shape == (5,)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a, oracle_logits(params, cfg, img), atol=1e-10)


def test_zero_upstream_gives_zero_grads(rng):
    cfg = NetworkConfig(arch="compound_transformer", d=4, layers=1, grid=(1, 2), image_shape=(4, 4, 1),
                        layout="pyramid")
    params = init_params(cfg, PCG32(1))
    _, cache = forward(params, cfg, rng.random((2, 4, 4, 1)))
    grads = backward(params, cfg, cache, np.zeros((2, 2)))
    assert set(grads) == set(params)
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("layout", ["pyramid", "butterfly", "x", "backslash"])
def test_gradcheck_toy(arch, layout, rng):
    # d = 4, one layer, two patches
    n_qubits = 6 if arch == "compound_transformer" else 4
    if layout == "butterfly" and n_qubits & (n_qubits - 1):
        pytest.skip("butterfly needs a power-of-two register")
    cfg = NetworkConfig(arch=arch, layout=layout, d=4, layers=1, grid=(1, 2), image_shape=(4, 4, 1),
                        num_classes=3, positional="per_token")
    params = jitter(init_params(cfg, PCG32(6)), rng)
    image, label = rng.random((4, 4, 1)), 2
    grads = model_backward(image, label, params, cfg)
    h = 1e-5
    # relative to the largest gradient entry: some entries sit near 1e-9 where FD is pure roundoff
    scale = max(np.abs(g).max() for g in grads.values())
    for k, p in params.items():
        num = np.zeros_like(p)
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + h
            a = loss_and_grads(params, cfg, image[None], [label])[0]
            p.flat[i] = old - h
            b = loss_and_grads(params, cfg, image[None], [label])[0]
            p.flat[i] = old
            num.flat[i] = (a - b) / (2 * h)
        err = np.abs(num - grads[k]) / scale
        assert err.max() < 1e-4, (k, err.max())


def test_angle_gradient_counts():
    expect = {"ortho_patchwise": 32, "ortho_transformer": 64, "compound_transformer": 80}
    for arch, count in expect.items():
        cfg = NetworkConfig(arch=arch, layout="butterfly", d=16)
        shapes = param_shapes(cfg)
        assert sum(np.prod(s) for k, s in shapes.items() if k.startswith("layer0.") and k.endswith("theta")) == count


def test_census():
    totals = {"ortho_patchwise": 128, "ortho_transformer": 256, "compound_transformer": 320, "classical_vit": 2048}
    for arch, total in totals.items():
        c = attention_census(NetworkConfig(arch=arch, layout="butterfly"))
        assert c["total"] == total and c["layers"] == 4
    assert attention_census(NetworkConfig(arch="classical_vit"))["per_layer"] == 512


def test_patchwise_permutation_covariance(rng):
    cfg = NetworkConfig(arch="ortho_patchwise", d=8, grid=(2, 2), image_shape=(8, 8, 1))
    params = jitter(init_params(cfg, PCG32(3)), rng)
    img = rng.random((8, 8, 1))
    patches = patchify(img, cfg.grid)
    perm = np.array([2, 0, 3, 1])
    img_p = unpatchify(patches[perm], cfg.grid, cfg.image_shape)
    _, c1 = forward(params, cfg, img[None])
    _, c2 = forward(params, cfg, img_p[None])
    np.testing.assert_allclose(c2["tok"][0], c1["tok"][0][perm], atol=1e-12)


def test_cross_entropy():
    loss, g = cross_entropy(np.zeros((1, 5)), [3])
    assert loss == pytest.approx(np.log(5))
    assert g.sum() == pytest.approx(0.0, abs=1e-15)
    loss, _ = cross_entropy(np.array([[0.0, 60.0]]), [1])
    assert loss < 1e-20
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [3])


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = NetworkConfig(arch="ortho_transformer", d=8, layers=2, num_classes=5, image_shape=(28, 28, 3))
    params = jitter(init_params(cfg, PCG32(9)), rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params, {"epoch": 3})
    cfg2, arrays, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"epoch": 3}
    assert list(arrays) == list(params)
    for k in params:
        assert arrays[k].tobytes() == params[k].tobytes()
    blob = path.read_bytes()
    assert blob[:8] == b"QVITCKPT"
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.ckpt")
