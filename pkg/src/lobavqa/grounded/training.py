"""Batching, the training loop, finite-difference gradient checks and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..corpus import DatasetShard, QAItem
from .losses import downsample_majority, loss_seg, loss_text, loss_total
from .model import DTYPE, GroundedModel, ModelConfig
from .tokenizer import grounded_response

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOBAVQA\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T) inputs
    targets: torch.Tensor  # (B, T) next-token targets
    loss_mask: torch.Tensor  # (B, T) 1 on answer positions
    images: torch.Tensor  # (B, H, W)
    seg_pos: torch.Tensor  # (B,) text index of the <SEG> input token
    gold_patches: torch.Tensor  # (B, n_patches)

    def __len__(self):
        return self.tokens.shape[0]


def encode_items(model: GroundedModel, items: Sequence[QAItem], shard: DatasetShard) -> Batch:
    tok = model.tokenizer
    cfg = model.config
    seqs, starts, segs, images, golds = [], [], [], [], []
    for item in items:
        scene = shard.scene(item.scene_id)
        prompt = model.prompt_ids(item.question)
        response = tok.encode(grounded_response(item.anatomy, item.gold_answer)) + [tok.eos_id]
        seq = prompt + response
        if len(seq) - 1 > cfg.max_seq:
            raise ValueError(f"{item.qa_id}: training sequence longer than max_seq")
        seqs.append(seq)
        starts.append(len(prompt) - 1)
        segs.append(seq.index(tok.seg_id))
        images.append(scene.image)
        golds.append(downsample_majority(scene.anatomies[item.anatomy], cfg.patch_size).reshape(-1))
    T = max(len(s) for s in seqs) - 1
    tokens = torch.full((len(seqs), T), tok.pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), T), tok.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=DTYPE)
    for b, (seq, start) in enumerate(zip(seqs, starts)):
        n = len(seq) - 1
        tokens[b, :n] = torch.tensor(seq[:-1])
        targets[b, :n] = torch.tensor(seq[1:])
        mask[b, start:n] = 1.0
    return Batch(tokens, targets, mask, torch.as_tensor(np.stack(images), dtype=DTYPE),
                 torch.tensor(segs), torch.as_tensor(np.stack(golds), dtype=DTYPE))


def compute_losses(model: GroundedModel, batch: Batch, params: dict | None = None):
    """(text, seg, total) losses for ``batch`` under ``params``."""
    cfg = model.config
    trace = model.forward(batch.tokens, batch.images, params=params)
    text = loss_text(trace.logits, batch.targets, batch.loss_mask)
    h_seg = trace.hidden[torch.arange(len(batch)), cfg.n_patches + batch.seg_pos]
    seg_logits = model.seg_logits(h_seg, trace.patch_features, params=params)
    seg = loss_seg(seg_logits, batch.gold_patches, cfg.lambda_bce, cfg.lambda_dice)
    return text, seg, loss_total(text, seg, cfg.lambda_text, cfg.lambda_seg)


@dataclass
class TrainResult:
    model: GroundedModel
    curve: list[tuple[int, float, float, float]]  # (step, text, seg, total)


def train(model: GroundedModel, shard: DatasetShard, epochs: int = 10, lr: float = 3e-3, seed: int = 0,
          batch_size: int = 32, items: Sequence[QAItem] | None = None, max_steps: int | None = None,
          progress: Callable[[int, float], None] | None = None,
          dtype: torch.dtype = DTYPE) -> TrainResult:
    """Adam over shuffled minibatches; returns a new model and the per-step loss curve.

    ``dtype=torch.float32`` optimizes in single precision (about twice as fast on CPU);
    the returned parameters are always float64.
    """
    trained = model.copy()
    trained.params = params = {k: v.to(dtype) for k, v in trained.params.items()}
    for v in params.values():
        v.requires_grad_(True)
    items = list(shard.qa if items is None else items)
    if not items:
        raise ValueError("nothing to train on")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(list(params.values()), lr=lr)
    curve = []
    step = 0
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(items))
            for i in range(0, len(order), batch_size):
                batch = encode_items(trained, [items[j] for j in order[i:i + batch_size]], shard)
                opt.zero_grad()
                text, seg, total = compute_losses(trained, batch)
                if not torch.isfinite(total):
                    raise TrainingDiverged(f"loss became {total.item()} at step {step}")
                total.backward()
                opt.step()
                curve.append((step, text.item(), seg.item(), total.item()))
                if progress is not None:
                    progress(step, total.item())
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
            log.info("epoch %d: total loss %.4f", epoch, curve[-1][3])
    finally:
        torch.set_num_threads(threads)
    trained.params = {k: v.detach().to(DTYPE) for k, v in params.items()}
    return TrainResult(trained, curve)


# -- gradient verification ------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int] | None = None


def finite_difference_check(loss_fn: Callable[[dict], torch.Tensor], params: dict[str, torch.Tensor],
                            epsilon: float = 1e-4, fraction: float = 0.01, seed: int = 0,
                            min_per_tensor: int = 1) -> GradCheckResult:
    """Compare autograd gradients with central differences on a random parameter subsample.

    Relative error is ``|a - n| / max(|a|, |n|)``; entries where both are below 1e-10
    are compared absolutely.
    """
    work = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(work)
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(work[k])) for k, g in zip(work, grads)}
    rng = np.random.default_rng(seed)
    worst, worst_at, n = 0.0, None, 0
    with torch.no_grad():
        probe = {k: v.detach().clone() for k, v in params.items()}
        for name, tensor in probe.items():
            flat = tensor.view(-1)
            k = max(min_per_tensor, int(round(fraction * flat.numel())))
            k = min(k, flat.numel())
            for idx in rng.choice(flat.numel(), size=k, replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + epsilon
                plus = loss_fn(probe).item()
                flat[idx] = orig - epsilon
                minus = loss_fn(probe).item()
                flat[idx] = orig
                numeric = (plus - minus) / (2 * epsilon)
                a = analytic[name].view(-1)[idx].item()
                scale = max(abs(a), abs(numeric))
                err = abs(a - numeric) / scale if scale > 1e-10 else abs(a - numeric)
                n += 1
                if err > worst:
                    worst, worst_at = err, (name, int(idx))
    return GradCheckResult(worst, n, worst_at)


def grad_check(model: GroundedModel, batch: Batch, epsilon: float = 1e-4, fraction: float = 0.01,
               seed: int = 0) -> GradCheckResult:
    """Check d(loss_total)/d(params) of the full model against central differences."""
    return finite_difference_check(lambda p: compute_losses(model, batch, p)[2], model.params,
                                   epsilon, fraction, seed)


# -- persistence ------------------------------------------------------------

def save_checkpoint(path: str | Path, model: GroundedModel) -> None:
    names = list(model.params)
    header = json.dumps({
        "config": model.config.to_dict(),
        "tensors": [[n, list(model.params[n].shape)] for n in names],
    }, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(model.params[n].detach().numpy().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> GroundedModel:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        params = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {name}")
            params[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f8").copy().reshape(shape))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return GroundedModel(ModelConfig.from_dict(header["config"]), params)


def write_loss_curve(path: str | Path, curve: Sequence[tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "text_loss", "seg_loss", "total"])
        for step, text, seg, total in curve:
            w.writerow([step, repr(text), repr(seg), repr(total)])
