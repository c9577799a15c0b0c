"""Toy grounded multimodal transformer.

A patch encoder (bidirectional self-attention over image patches) feeds a causal
language model over ``[image tokens ; text tokens]``. The final hidden state at the
``<SEG>`` token queries a dot-product segmentation head over the patch features.
Everything runs in float64 so that finite-difference checks are meaningful.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tokenizer import Tokenizer

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple[str, ...]
    grid_size: int = 32
    patch_size: int = 4
    d_model: int = 48
    n_heads: int = 4
    n_layers: int = 2
    n_vision_layers: int = 1
    d_ff: int = 96
    seg_dim: int = 32
    max_seq: int = 48
    temperature: float = 0.1
    lambda_text: float = 1.0
    lambda_seg: float = 1.0
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    init_std: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.grid_size % self.patch_size:
            raise ValueError(f"grid_size {self.grid_size} not divisible by patch_size {self.patch_size}")

    @property
    def patch_grid(self) -> int:
        return self.grid_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.patch_grid ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Highlight:
    """Additive ``log(beta)`` on attention logits whose key is a highlighted patch."""

    patch_mask: torch.Tensor  # (n_patches,) bool
    log_beta: float
    vision: bool = True
    language: bool = False

    def key_bias(self, dtype: torch.dtype = DTYPE) -> torch.Tensor:
        return self.patch_mask.to(dtype) * self.log_beta


@dataclass
class ForwardTrace:
    vision_attention: list[torch.Tensor]  # per layer (B, heads, P2, P2)
    language_attention: list[torch.Tensor]  # per layer (B, heads, N, N)
    hidden: torch.Tensor  # (B, N, d) final-layer hidden states over [image ; text]
    logits: torch.Tensor  # (B, T, V) next-token logits at text positions
    patch_features: torch.Tensor  # (B, P2, d)


@dataclass
class SegPrediction:
    logits: np.ndarray  # (P, P)
    pixel_mask: np.ndarray  # (H, W) bool

    @property
    def patch_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits))


@dataclass
class Generation:
    text: str
    response_ids: list[int]
    prompt_ids: list[int]
    grounded: bool
    h_seg: torch.Tensor | None = None
    patch_features: torch.Tensor | None = None
    step_log_probs: list[torch.Tensor] = field(default_factory=list)


def _block_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b",
                                      "w1", "b1", "w2", "b2")]


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    d, ff, std = config.d_model, config.d_ff, config.init_std
    pp = config.patch_size ** 2

    def normal(*shape):
        return torch.randn(*shape, generator=gen, dtype=DTYPE) * std

    params: dict[str, torch.Tensor] = {
        "patch_w": normal(pp, d),
        "patch_b": torch.zeros(d, dtype=DTYPE),
        "vis_pos": normal(config.n_patches, d),
    }

    def block(prefix: str):
        params.update({
            f"{prefix}.ln1_g": torch.ones(d, dtype=DTYPE), f"{prefix}.ln1_b": torch.zeros(d, dtype=DTYPE),
            f"{prefix}.wq": normal(d, d), f"{prefix}.wk": normal(d, d),
            f"{prefix}.wv": normal(d, d), f"{prefix}.wo": normal(d, d),
            f"{prefix}.ln2_g": torch.ones(d, dtype=DTYPE), f"{prefix}.ln2_b": torch.zeros(d, dtype=DTYPE),
            f"{prefix}.w1": normal(d, ff), f"{prefix}.b1": torch.zeros(ff, dtype=DTYPE),
            f"{prefix}.w2": normal(ff, d), f"{prefix}.b2": torch.zeros(d, dtype=DTYPE),
        })

    for i in range(config.n_vision_layers):
        block(f"vis{i}")
    params.update({
        "vis_ln_g": torch.ones(d, dtype=DTYPE), "vis_ln_b": torch.zeros(d, dtype=DTYPE),
        "img_proj_w": normal(d, d), "img_proj_b": torch.zeros(d, dtype=DTYPE),
        "tok_emb": normal(len(config.vocab), d),
        "pos_emb": normal(config.n_patches + config.max_seq, d),
    })
    for i in range(config.n_layers):
        block(f"llm{i}")
    params.update({
        "ln_f_g": torch.ones(d, dtype=DTYPE), "ln_f_b": torch.zeros(d, dtype=DTYPE),
        "out_w": normal(d, len(config.vocab)), "out_b": torch.zeros(len(config.vocab), dtype=DTYPE),
        "seg_wq": normal(d, config.seg_dim), "seg_wk": normal(d, config.seg_dim),
    })
    return params


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W) -> (B, n_patches, patch*patch), patches in row-major order."""
    b, h, w = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch)
    return x.permute(0, 1, 3, 2, 4).reshape(b, (h // patch) * (w // patch), patch * patch)


def _layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


_CAUSAL_CACHE: dict[tuple[int, torch.dtype], torch.Tensor] = {}


def _causal_bias(n: int, dtype: torch.dtype) -> torch.Tensor:
    if (n, dtype) not in _CAUSAL_CACHE:
        _CAUSAL_CACHE[n, dtype] = torch.full((n, n), float("-inf"), dtype=dtype).triu(1)
    return _CAUSAL_CACHE[n, dtype]


def _attention(x, p, prefix, n_heads, bias=None, causal=False):
    B, N, d = x.shape
    dh = d // n_heads

    def heads(t):
        return t.view(B, N, n_heads, dh).transpose(1, 2)

    q = heads(x @ p[f"{prefix}.wq"]) * (1.0 / math.sqrt(dh))
    k, v = heads(x @ p[f"{prefix}.wk"]), heads(x @ p[f"{prefix}.wv"])
    scores = q @ k.transpose(-1, -2)
    if bias is not None:
        scores = scores + bias
    if causal:
        scores = scores + _causal_bias(N, scores.dtype)
    probs = torch.softmax(scores, dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(B, N, d) @ p[f"{prefix}.wo"]
    return out, probs


def _block(x, p, prefix, n_heads, bias=None, causal=False):
    a, probs = _attention(_layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"]),
                          p, prefix, n_heads, bias, causal)
    x = x + a
    h = _layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    x = x + F.gelu(h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    return x, probs


class GroundedModel:
    """Holds a config, its tokenizer and a flat dict of float64 parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, torch.Tensor] | None = None, seed: int = 0):
        self.config = config
        self.tokenizer = Tokenizer(config.vocab)
        self.params = params if params is not None else init_params(config, seed)

    # -- forward -----------------------------------------------------------

    def as_tensor_images(self, images) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(images), dtype=DTYPE)
        if t.ndim == 2:
            t = t.unsqueeze(0)
        g = self.config.grid_size
        if t.shape[1:] != (g, g):
            raise ShapeError(f"image shape {tuple(t.shape[1:])} does not match grid {g}x{g}")
        return t

    def encode_image(self, images: torch.Tensor, highlight: Highlight | None = None,
                     params: dict | None = None):
        p = params if params is not None else self.params
        cfg = self.config
        dtype = p["patch_w"].dtype
        x = patchify(images.to(dtype), cfg.patch_size) @ p["patch_w"] + p["patch_b"] + p["vis_pos"]
        bias = highlight.key_bias(dtype) if highlight is not None and highlight.vision else None
        attn = []
        for i in range(cfg.n_vision_layers):
            x, probs = _block(x, p, f"vis{i}", cfg.n_heads, bias=bias)
            attn.append(probs)
        return _layer_norm(x, p["vis_ln_g"], p["vis_ln_b"]), attn

    def forward(self, tokens, images, highlight: Highlight | None = None,
                params: dict | None = None, patch_features: torch.Tensor | None = None,
                vision_attention: list | None = None) -> ForwardTrace:
        """Run the model on a batch of token ids (B, T) and images (B, H, W)."""
        p = params if params is not None else self.params
        cfg = self.config
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.ndim == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[1] > cfg.max_seq:
            raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
        if patch_features is None:
            images = images if isinstance(images, torch.Tensor) else self.as_tensor_images(images)
            if images.shape[0] != tokens.shape[0]:
                raise ShapeError("token and image batch sizes differ")
            patch_features, vision_attention = self.encode_image(images, highlight, p)
        B, T = tokens.shape
        P2 = cfg.n_patches
        img = patch_features @ p["img_proj_w"] + p["img_proj_b"]
        x = torch.cat([img, p["tok_emb"][tokens]], dim=1) + p["pos_emb"][: P2 + T]
        bias = None
        if highlight is not None and highlight.language:
            bias = torch.cat([highlight.key_bias(x.dtype), torch.zeros(T, dtype=x.dtype)])
        attn = []
        for i in range(cfg.n_layers):
            x, probs = _block(x, p, f"llm{i}", cfg.n_heads, bias=bias, causal=True)
            attn.append(probs)
        hidden = _layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        logits = hidden[:, P2:] @ p["out_w"] + p["out_b"]
        return ForwardTrace(list(vision_attention or []), attn, hidden, logits, patch_features)

    # -- segmentation ------------------------------------------------------

    def seg_logits(self, h_seg: torch.Tensor, patch_features: torch.Tensor, params: dict | None = None):
        """Scaled dot product of the projected SEG state with each projected patch feature."""
        p = params if params is not None else self.params
        q = h_seg @ p["seg_wq"]  # (..., s)
        k = patch_features @ p["seg_wk"]  # (..., P2, s)
        return (k @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.config.seg_dim)

    def seg_decode(self, h_seg: torch.Tensor, patch_features: torch.Tensor) -> SegPrediction:
        with torch.no_grad():
            logits = self.seg_logits(h_seg.reshape(-1), patch_features.reshape(self.config.n_patches, -1))
        P, s = self.config.patch_grid, self.config.patch_size
        grid = logits.numpy().reshape(P, P)
        pixel = np.kron((grid > 0.0).astype(np.uint8), np.ones((s, s), dtype=np.uint8)).astype(bool)
        return SegPrediction(grid, pixel)

    # -- decoding ----------------------------------------------------------

    def prompt_ids(self, question: str) -> list[int]:
        return [self.tokenizer.bos_id] + self.tokenizer.encode(question)

    def next_log_probs(self, ids: Sequence[int], patch_features: torch.Tensor,
                       highlight: Highlight | None = None, image=None) -> tuple[torch.Tensor, ForwardTrace]:
        """Log-probabilities (float64, floored at log 1e-30) for the token after ``ids``."""
        if highlight is not None and highlight.vision:
            feats, vattn = self.encode_image(self.as_tensor_images(image), highlight)
        else:
            feats, vattn = patch_features, None
        trace = self.forward(torch.tensor([list(ids)]), None, highlight=highlight,
                             patch_features=feats, vision_attention=vattn)
        lp = torch.log_softmax(trace.logits[0, -1], dim=-1)
        return lp.clamp_min(math.log(1e-30)), trace

    @torch.no_grad()
    def generate(self, question: str, image, temperature: float | None = None, sample: bool = False,
                 rng: np.random.Generator | None = None, max_new: int | None = None) -> Generation:
        """Greedy (or, if ``sample``, temperature) decoding of a grounded response."""
        tok = self.tokenizer
        prompt = self.prompt_ids(question)
        feats, _ = self.encode_image(self.as_tensor_images(image))
        ids = list(prompt)
        limit = self.config.max_seq if max_new is None else min(self.config.max_seq, len(prompt) + max_new)
        h_seg = None
        steps = []
        temp = self.config.temperature if temperature is None else temperature
        while len(ids) < limit:
            lp, trace = self.next_log_probs(ids, feats)
            if ids[-1] == tok.seg_id and h_seg is None:
                h_seg = trace.hidden[0, -1].clone()
            steps.append(lp)
            if sample:
                rng = rng if rng is not None else np.random.default_rng(0)
                probs = torch.softmax(lp / temp, dim=-1).numpy()
                nxt = int(rng.choice(len(probs), p=probs / probs.sum()))
            else:
                nxt = int(torch.argmax(lp))
            if nxt == tok.eos_id:
                break
            ids.append(nxt)
        if h_seg is None and tok.seg_id in ids[len(prompt):]:
            # SEG emitted as the very last token before the length limit
            trace = self.forward(torch.tensor([ids[: ids.index(tok.seg_id, len(prompt)) + 1]]), None,
                                 patch_features=feats)
            h_seg = trace.hidden[0, -1].clone()
        response = ids[len(prompt):]
        return Generation(tok.decode(response), response, prompt, h_seg is not None, h_seg, feats, steps)

    def copy(self) -> "GroundedModel":
        return GroundedModel(self.config, {k: v.detach().clone() for k, v in self.params.items()})
