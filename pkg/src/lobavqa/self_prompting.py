"""Attention highlighting driven by the model's own mask, plus contrastive decoding.

Pass 1 decodes the grounded response and segments the queried region from the
``<SEG>`` state. Pass 2 re-decodes the answer sentence: at every step the plain
next-token distribution and the one obtained with highlighted attention are
combined as ``softmax((1 + alpha) log p_hl - alpha log p_bh)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .geometry import PixelMask, rle_decode, rle_encode
from .grounded.model import ForwardTrace, GroundedModel, Highlight, SegPrediction

LOG_FLOOR = math.log(1e-30)


@dataclass(frozen=True)
class HighlightPlan:
    highlighted_patches: frozenset[int] = frozenset()
    beta: float = 2.0
    coverage_threshold: float = 0.5
    language_layers: bool = False  # also reweight image keys inside the language layers

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0 < self.coverage_threshold <= 1:
            raise ValueError(f"coverage_threshold must lie in (0, 1], got {self.coverage_threshold}")
        object.__setattr__(self, "highlighted_patches", frozenset(int(i) for i in self.highlighted_patches))

    def with_patches(self, patches: Iterable[int]) -> "HighlightPlan":
        return HighlightPlan(frozenset(patches), self.beta, self.coverage_threshold, self.language_layers)

    def to_highlight(self, n_patches: int) -> Highlight | None:
        if not self.highlighted_patches:
            return None
        if max(self.highlighted_patches) >= n_patches or min(self.highlighted_patches) < 0:
            raise ValueError("highlighted patch index outside the patch grid")
        mask = torch.zeros(n_patches, dtype=torch.bool)
        mask[sorted(self.highlighted_patches)] = True
        return Highlight(mask, math.log(self.beta), vision=True, language=self.language_layers)


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 0.3

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")


def mask_to_patches(mask: SegPrediction | PixelMask | np.ndarray, patch_grid: int,
                    coverage_threshold: float = 0.5) -> set[int]:
    """Row-major indices of patches whose pixel coverage is at least ``coverage_threshold``."""
    if isinstance(mask, SegPrediction):
        bits = mask.pixel_mask
    elif isinstance(mask, PixelMask):
        bits = rle_decode(mask)
    else:
        bits = np.asarray(mask, dtype=bool)
    h, w = bits.shape
    if h % patch_grid or w % patch_grid:
        raise ValueError(f"{h}x{w} mask does not tile into a {patch_grid}x{patch_grid} patch grid")
    ph, pw = h // patch_grid, w // patch_grid
    cover = bits.reshape(patch_grid, ph, patch_grid, pw).mean(axis=(1, 3))
    return set(np.flatnonzero(cover.reshape(-1) >= coverage_threshold).tolist())


def reweight_attention(logits_row: Sequence[float], plan: HighlightPlan) -> np.ndarray:
    """Softmax of one attention-logit row after adding ``log(beta)`` at highlighted keys."""
    h = np.asarray(logits_row, dtype=np.float64).copy()
    idx = [i for i in plan.highlighted_patches if i < len(h)]
    h[idx] += math.log(plan.beta)
    h -= h.max()
    e = np.exp(h)
    return e / e.sum()


def highlighted_forward(model: GroundedModel, tokens, image, plan: HighlightPlan) -> ForwardTrace:
    """Forward pass with reweighted attention on the highlighted patches."""
    return model.forward(tokens, model.as_tensor_images(image), highlight=plan.to_highlight(model.config.n_patches))


def contrastive_decode(logp_hl, logp_bh, alpha: float) -> np.ndarray | torch.Tensor:
    """``softmax((1 + alpha) * logp_hl - alpha * logp_bh)`` with logs floored at log(1e-30)."""
    scores = contrastive_scores(logp_hl, logp_bh, alpha)
    if isinstance(scores, torch.Tensor):
        return torch.softmax(scores, dim=-1)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def contrastive_scores(logp_hl, logp_bh, alpha: float):
    if len(logp_hl) != len(logp_bh):
        raise ValueError(f"log-probability rows differ in length: {len(logp_hl)} vs {len(logp_bh)}")
    if isinstance(logp_hl, torch.Tensor):
        hl = logp_hl.clamp_min(LOG_FLOOR)
        bh = torch.as_tensor(logp_bh, dtype=hl.dtype).clamp_min(LOG_FLOOR)
    else:
        hl = np.maximum(np.asarray(logp_hl, dtype=np.float64), LOG_FLOOR)
        bh = np.maximum(np.asarray(logp_bh, dtype=np.float64), LOG_FLOOR)
    return (1.0 + alpha) * hl - alpha * bh


@dataclass
class PerPassRecord:
    question: str
    pass1_text: str
    mask_runs: list[list[int]] = field(default_factory=list)
    highlight_indices: list[int] = field(default_factory=list)
    pass2_text: str = ""
    argmax_switches: int = 0
    grounded: bool = True

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "pass1_text": self.pass1_text,
            "mask_runs": self.mask_runs,
            "highlight_indices": self.highlight_indices,
            "pass2_text": self.pass2_text,
            "argmax_switches": self.argmax_switches,
            "grounded": self.grounded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


@dataclass
class LobaAnswer:
    text: str
    segmentation: SegPrediction | None
    record: PerPassRecord


def plain_answer(model: GroundedModel, question: str, image) -> str:
    return model.generate(question, image).text


@torch.no_grad()
def answer_with_loba(model: GroundedModel, question: str, image, plan: HighlightPlan | None = None,
                     decode: DecodeConfig | None = None, first_pass=None) -> LobaAnswer:
    """Localize, build a highlight from the predicted mask, then contrastively re-decode the answer.

    ``first_pass`` may carry a precomputed ``model.generate`` result for this question and image.
    """
    plan = plan or HighlightPlan()
    decode = decode or DecodeConfig()
    tok = model.tokenizer
    gen = first_pass if first_pass is not None else model.generate(question, image)
    if not gen.grounded:
        return LobaAnswer(gen.text, None, PerPassRecord(question, gen.text, pass2_text=gen.text, grounded=False))

    seg = model.seg_decode(gen.h_seg, gen.patch_features)
    patches = mask_to_patches(seg, model.config.patch_grid, plan.coverage_threshold)
    active = plan.with_patches(patches)
    highlight = active.to_highlight(model.config.n_patches)

    seg_at = gen.response_ids.index(tok.seg_id)
    ids = gen.prompt_ids + gen.response_ids[: seg_at + 1]
    hl_feats = None
    if highlight is not None and highlight.vision:
        hl_feats, _ = model.encode_image(model.as_tensor_images(image), highlight)
    switches = 0
    while len(ids) < model.config.max_seq:
        lp_bh, _ = model.next_log_probs(ids, gen.patch_features)
        if highlight is None:
            lp_hl = lp_bh
        else:
            trace = model.forward(torch.tensor([ids]), None, highlight=highlight,
                                  patch_features=hl_feats if hl_feats is not None else gen.patch_features)
            lp_hl = torch.log_softmax(trace.logits[0, -1], dim=-1).clamp_min(LOG_FLOOR)
        scores = contrastive_scores(lp_hl, lp_bh, decode.alpha)
        nxt = int(torch.argmax(scores))
        switches += int(nxt != int(torch.argmax(lp_bh)))
        if nxt == tok.eos_id:
            break
        ids.append(nxt)
    text = tok.decode(ids[len(gen.prompt_ids):])
    record = PerPassRecord(
        question=question,
        pass1_text=gen.text,
        mask_runs=[list(r) for r in rle_encode(seg.pixel_mask).runs],
        highlight_indices=sorted(patches),
        pass2_text=text,
        argmax_switches=switches,
    )
    return LobaAnswer(text, seg, record)
