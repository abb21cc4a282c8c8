"""Loss, Adam, the step schedule, AUC/ACC metrics and the seeded training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, DataError, load_dataset, minibatches, normalize
from .model import (NetworkConfig, cross_entropy, forward, backward, init_params, load_checkpoint,
                    predict_proba, save_checkpoint)
from .rng import PCG32

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "lr", "val_auc", "val_acc")

__all__ = ["cross_entropy", "OptimState", "adam_step", "lr_schedule", "auc_ovr", "evaluate",
           "RunHistory", "config_hash", "train", "train_seeds"]


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: OptimState, lr: float):
    """Bias-corrected Adam. Returns new (params, state); inputs are not mutated."""
    if params.keys() != grads.keys():
        raise ValueError("gradient keys do not match parameter keys")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(new_m, new_v, t, b1, b2, state.eps)


def lr_schedule(epoch: int, base: float = 1e-3, milestones=(50, 75), gamma: float = 0.1) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * gamma ** sum(epoch >= m for m in milestones)


# ---------------------------------------------------------------------------
# metrics


def binary_auc(scores, positives) -> float:
    """Mann-Whitney AUC; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    n_neg = len(positives) - n_pos
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_ovr(labels, probs) -> float:
    """Macro one-vs-rest AUC; classes absent from (or filling) the split are skipped."""
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=np.float64)
    aucs = []
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no positive/negative pair in this split; skipped in macro AUC")
            continue
        aucs.append(binary_auc(probs[:, c], pos))
    if not aucs:
        raise ValueError("AUC undefined: no class has both positives and negatives")
    return float(np.mean(aucs))


def accuracy(labels, probs) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def evaluate(params, cfg: NetworkConfig, split) -> dict:
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    probs = predict_proba(params, cfg, normalize(split.images))
    return {"auc": auc_ovr(split.labels, probs), "acc": accuracy(split.labels, probs)}


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunHistory:
    seed: int
    rows: list = field(default_factory=list)
    test_auc: float | None = None
    test_acc: float | None = None
    best_epoch: int | None = None
    best_val_auc: float = -np.inf
    config_hash: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "test_auc": self.test_auc,
                "test_acc": self.test_acc, "best_epoch": self.best_epoch, "best_val_auc": self.best_val_auc,
                "epochs": len(self.rows)}


def config_hash(cfg: NetworkConfig) -> str:
    doc = cfg.to_dict()
    doc.pop("seed")
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def run_dir(out_root, cfg: NetworkConfig) -> Path:
    return Path(out_root) / f"{config_hash(cfg)}-seed{cfg.seed}"


def _subset(split, limit):
    if limit is None or limit >= len(split):
        return split
    return type(split)(split.images[:limit], split.labels[:limit])


def _save_state(path, cfg, params, opt, hist, epoch):
    arrays = dict(params)
    arrays.update({f"adam.m.{k}": v for k, v in opt.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    meta = {"epoch": epoch, "step": opt.step, "rows": hist.rows, "best_epoch": hist.best_epoch,
            "best_val_auc": hist.best_val_auc}
    tmp = Path(path).with_suffix(".tmp")
    save_checkpoint(tmp, cfg, arrays, meta)
    tmp.replace(path)


def _load_state(path):
    cfg, arrays, meta = load_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    return cfg, params, OptimState(m, v, meta["step"]), meta


def train(cfg: NetworkConfig, dataset: Dataset | None = None, out_dir=None, resume: bool = False,
          stop_after: int | None = None) -> RunHistory:
    """Train one seed. ``out_dir`` receives history.csv, summary.json,
    best.ckpt (best validation AUC) and last.ckpt (full optimiser state)."""
    if dataset is None:
        dataset = load_dataset(cfg.dataset)
    if dataset.num_classes != cfg.num_classes or dataset.channels != cfg.image_shape[-1]:
        raise ValueError(f"config expects {cfg.num_classes} classes / {cfg.image_shape[-1]} channels, "
                         f"dataset has {dataset.num_classes} / {dataset.channels}")
    train_split = _subset(dataset["train"], cfg.max_train)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    hist = RunHistory(cfg.seed, config_hash=config_hash(cfg))

    start = 0
    if resume and out and (out / "last.ckpt").exists():
        saved_cfg, params, opt, meta = _load_state(out / "last.ckpt")
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ValueError("checkpoint was written by a different config")
        hist.rows = meta["rows"]
        hist.best_epoch, hist.best_val_auc = meta["best_epoch"], meta["best_val_auc"]
        start = meta["epoch"] + 1
    else:
        params = init_params(cfg, PCG32(cfg.seed, 0))
        opt = OptimState.zeros_like(params)
    best_params = None
    if out and (out / "best.ckpt").exists() and start > 0:
        best_params = load_checkpoint(out / "best.ckpt")[1]

    for epoch in range(start, cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_milestones, cfg.lr_gamma)
        total, count = 0.0, 0
        for images, labels in minibatches(train_split, cfg.batch_size, cfg.seed, epoch):
            logits, cache = forward(params, cfg, images)
            loss, dlogits = cross_entropy(logits, labels)
            params, opt = adam_step(params, backward(params, cfg, cache, dlogits), opt, lr)
            total += loss * len(labels)
            count += len(labels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            val = evaluate(params, cfg, dataset["val"])
        hist.rows.append({"epoch": epoch, "loss": total / count, "lr": lr, "val_auc": val["auc"], "val_acc": val["acc"]})
        if val["auc"] > hist.best_val_auc:
            hist.best_val_auc, hist.best_epoch = val["auc"], epoch
            best_params = {k: v.copy() for k, v in params.items()}
            if out:
                save_checkpoint(out / "best.ckpt", cfg, best_params, {"epoch": epoch, "val_auc": val["auc"]})
        if out:
            _save_state(out / "last.ckpt", cfg, params, opt, hist, epoch)
        log.info("seed %d epoch %d loss %.4f val_auc %.4f", cfg.seed, epoch, total / count, val["auc"])
        if stop_after is not None and epoch + 1 - start >= stop_after:
            return hist

    test = evaluate(best_params if best_params is not None else params, cfg, dataset["test"])
    hist.test_auc, hist.test_acc = test["auc"], test["acc"]
    if out:
        (out / "history.csv").write_text(hist.to_csv())
        (out / "summary.json").write_text(json.dumps(hist.summary(), indent=2, sort_keys=True))
    return hist


def _train_job(args):
    cfg_doc, out_root, resume, data_root = args
    cfg = NetworkConfig.from_dict(cfg_doc)
    return train(cfg, load_dataset(cfg.dataset, data_root), run_dir(out_root, cfg), resume=resume)


def train_seeds(cfg: NetworkConfig, seeds, out_root, jobs: int = 1, dataset: Dataset | None = None,
                resume: bool = False, data_root=None) -> dict:
    """Train every seed and keep the run with the best test AUC."""
    out_root = Path(out_root)
    docs = [dict(cfg.to_dict(), seed=int(s)) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            hists = list(pool.map(_train_job, [(d, out_root, resume, data_root) for d in docs]))
    else:
        dataset = dataset if dataset is not None else load_dataset(cfg.dataset, data_root)
        hists = []
        for d in docs:
            c = NetworkConfig.from_dict(d)
            hists.append(train(c, dataset, run_dir(out_root, c), resume=resume))
    best = max(hists, key=lambda h: h.test_auc)
    summary = {"config_hash": config_hash(cfg), "dataset": cfg.dataset, "arch": cfg.arch,
               "runs": [h.summary() for h in hists], "best": best.summary()}
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / f"{config_hash(cfg)}-best.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
