"""Composite masked loss, SGD with momentum and L2 regularization, the
epoch loop and checkpointing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import formats
from .clutterfilt import normalized_envelope
from .fieldsim import LabelMap
from .network import NetConfig, NetOutput, SrusConvNeXt, init_params, save_checkpoint


@dataclass(frozen=True)
class LossWeights:
    w_detect: float = 0.9
    w_x: float = 0.1
    w_z: float = 0.1
    pos_weight: float = 1.0  # optional reweighting of the sparse positives

    def __post_init__(self):
        if min(self.w_detect, self.w_x, self.w_z) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def _labels_to_tensors(labels):
    if isinstance(labels, LabelMap):
        labels = [labels]
    det = torch.from_numpy(np.stack([l.detect for l in labels])).float()
    xb = torch.from_numpy(np.stack([l.xbin for l in labels])).long()
    zb = torch.from_numpy(np.stack([l.zbin for l in labels])).long()
    return det, xb, zb


def loss_terms(out: NetOutput, labels, w: LossWeights) -> dict:
    """Per-component losses: BCE over all pixels for detection, cross-entropy
    over MB pixels only for each offset axis (0 when the batch has none)."""
    det, xb, zb = _labels_to_tensors(labels)
    logit = out.detect_logit
    if logit.ndim == 2:
        logit = logit.unsqueeze(0)
    pw = None
    if w.pos_weight != 1.0:
        pw = torch.full((), w.pos_weight, dtype=logit.dtype)
    l_det = F.binary_cross_entropy_with_logits(logit, det.to(logit.dtype), pos_weight=pw)
    mask = det.bool()
    zero = torch.zeros((), dtype=logit.dtype)
    if mask.any():
        xl = out.xoff_logits
        zl = out.zoff_logits
        if xl.ndim == 3:
            xl, zl = xl.unsqueeze(0), zl.unsqueeze(0)
        xl = xl.permute(0, 2, 3, 1)[mask]
        zl = zl.permute(0, 2, 3, 1)[mask]
        l_x = F.cross_entropy(xl, xb[mask])
        l_z = F.cross_entropy(zl, zb[mask])
    else:
        l_x = zero
        l_z = zero
    return {"detect": l_det, "x": l_x, "z": l_z}


def composite_loss(out: NetOutput, labels, w: LossWeights) -> torch.Tensor:
    t = loss_terms(out, labels, w)
    return w.w_detect * t["detect"] + w.w_x * t["x"] + w.w_z * t["z"]


class SgdMomentum:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    One-dimensional tensors (batch-norm scale/shift and biases) are exempt
    from weight decay."""

    def __init__(self, model: torch.nn.Module, cfg: OptimConfig):
        self.cfg = cfg
        self.params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.velocity = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self):
        c = self.cfg
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            wd = 0.0 if p.ndim <= 1 else c.weight_decay
            v = self.velocity[name]
            v.mul_(c.momentum).add_(g).add_(p, alpha=wd)
            p.add_(v, alpha=-c.lr)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def sgd_step(params: dict, grads: dict, state: dict, cfg: OptimConfig,
             decay_exempt=()):
    """Functional single update on a dict of tensors; returns (params, state)."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = state.get(name, torch.zeros_like(p))
        wd = 0.0 if name in decay_exempt else cfg.weight_decay
        v = cfg.momentum * v + g + wd * p
        new_p[name] = p - cfg.lr * v
        new_v[name] = v
    return new_p, new_v


class StackDataset:
    """Labeled stacks from a dataset directory written by fieldsim."""

    def __init__(self, path: str):
        self.dir = path
        self.manifest = formats.read_manifest(path)
        self.grid = self.manifest_grid()
        self.m = int(self.manifest["m"])
        self.records = self.manifest["stacks"]

    def manifest_grid(self):
        from .grid import GridSpec
        return GridSpec.from_dict(self.manifest["grid"])

    def __len__(self):
        return len(self.records)

    def load(self, idx: int):
        import os
        rec = self.records[idx]
        frames = formats.read_iqf(os.path.join(self.dir, rec["file"] + ".iqf"))
        labels, _k = formats.read_lbl(os.path.join(self.dir, rec["file"] + ".lbl"))
        return normalized_envelope(frames), labels

    def gt_positions(self, idx: int):
        return [tuple(p) for p in self.records[idx]["gt"]]


def train(dataset, net_cfg: NetConfig, optim_cfg: OptimConfig,
          weights: LossWeights = LossWeights(), checkpoint_path: str | None = None,
          log_path: str | None = None, log_every: int = 1):
    """Full training loop. Returns (model, list of per-epoch log records)."""
    if isinstance(dataset, str):
        dataset = StackDataset(dataset)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.m != net_cfg.m:
        raise ValueError(f"dataset m={dataset.m} does not match network m={net_cfg.m}")
    sample_x, _ = dataset.load(0)
    if sample_x.shape[0] != net_cfg.m:
        raise ValueError("stack depth does not match network m")

    torch.manual_seed(optim_cfg.seed)
    model = init_params(net_cfg, optim_cfg.seed)
    opt = SgdMomentum(model, optim_cfg)

    header = {
        "type": "header",
        "epochs": optim_cfg.epochs,
        "weights": [weights.w_detect, weights.w_x, weights.w_z],
        "pos_weight": weights.pos_weight,
        "net": net_cfg.to_dict(),
        "optim": {"lr": optim_cfg.lr, "momentum": optim_cfg.momentum,
                  "weight_decay": optim_cfg.weight_decay,
                  "batch_size": optim_cfg.batch_size, "seed": optim_cfg.seed},
        "n_samples": len(dataset),
    }
    records = []
    log_f = open(log_path, "w") if log_path else None
    try:
        if log_f:
            log_f.write(json.dumps(header) + "\n")
        n = len(dataset)
        for epoch in range(optim_cfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([optim_cfg.seed, epoch])).permutation(n)
            t0 = time.monotonic()
            sums = {"loss": 0.0, "detect": 0.0, "x": 0.0, "z": 0.0}
            n_batches = 0
            model.train(True)
            for b0 in range(0, n, optim_cfg.batch_size):
                idxs = order[b0:b0 + optim_cfg.batch_size]
                xs, labs = [], []
                for i in idxs:
                    x, lab = dataset.load(int(i))
                    xs.append(x)
                    labs.append(lab)
                batch = torch.from_numpy(np.stack(xs))
                out = model(batch)
                terms = loss_terms(out, labs, weights)
                loss = (weights.w_detect * terms["detect"]
                        + weights.w_x * terms["x"] + weights.w_z * terms["z"])
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["loss"] += float(loss.detach())
                sums["detect"] += float(terms["detect"].detach())
                sums["x"] += float(terms["x"].detach())
                sums["z"] += float(terms["z"].detach())
                n_batches += 1
            rec = {
                "epoch": epoch,
                "loss": sums["loss"] / n_batches,
                "loss_detect": sums["detect"] / n_batches,
                "loss_x": sums["x"] / n_batches,
                "loss_z": sums["z"] / n_batches,
                "wall_ms": (time.monotonic() - t0) * 1000.0,
            }
            records.append(rec)
            if log_f and (epoch % log_every == 0 or epoch == optim_cfg.epochs - 1):
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
    finally:
        if log_f:
            log_f.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, records
