"""Textual and visual perturbation instances built from true-positive answers."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .corpus import DatasetShard, QAItem, closed_template_index, render_question
from .geometry import ANATOMIES, bounding_rect, rle_decode
from .metrics import MetricsError, normalize_yesno


class PerturbationError(ValueError):
    pass


class NoValidPerturbation(PerturbationError):
    """Raised when an item has no feasible swap or donor; callers skip it."""


@dataclass
class PerturbationRecord:
    base_qa_id: str
    mode: str  # "textual" | "visual"
    swapped_field: str  # "anatomy" | "disease" | "none"
    new_entity: str | None = None
    donor_scene_id: str | None = None
    perturbed_question: str | None = None
    perturbed_image: np.ndarray | None = None
    expected_flip: bool = True

    def __post_init__(self):
        if self.mode == "textual":
            if self.swapped_field == "none" or self.perturbed_question is None:
                raise PerturbationError("textual record needs a swapped field and a question")
        elif self.mode == "visual":
            if self.donor_scene_id is None or self.perturbed_image is None:
                raise PerturbationError("visual record needs a donor scene and an image")
        else:
            raise PerturbationError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "base_qa_id": self.base_qa_id,
            "mode": self.mode,
            "swapped_field": self.swapped_field,
            "new_entity": self.new_entity,
            "donor_scene_id": self.donor_scene_id,
            "perturbed_question": self.perturbed_question,
            "perturbed_image": None if self.perturbed_image is None else [
                round(float(x), 3) for x in self.perturbed_image.reshape(-1)
            ],
            "image_shape": None if self.perturbed_image is None else list(self.perturbed_image.shape),
            "expected_flip": self.expected_flip,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PerturbationRecord":
        image = None
        if d.get("perturbed_image") is not None:
            image = np.asarray(d["perturbed_image"], dtype=np.float64).reshape(d["image_shape"])
        return cls(d["base_qa_id"], d["mode"], d["swapped_field"], d.get("new_entity"),
                   d.get("donor_scene_id"), d.get("perturbed_question"), image,
                   bool(d.get("expected_flip", True)))


def select_true_positives(predictions: Mapping[str, str], shard: DatasetShard) -> list[QAItem]:
    """Positive closed items whose gold is "Yes" and whose prediction normalizes to yes."""
    out = []
    for item in shard.qa:
        if item.kind != "positive_closed":
            continue
        if item.qa_id not in predictions:
            raise MetricsError(f"no prediction for {item.qa_id}")
        if item.gold_labels == ["yes"] and normalize_yesno(predictions[item.qa_id]) == "yes":
            out.append(item)
    return out


def _item_rng(item: QAItem, seed: int, salt: int) -> np.random.Generator:
    # seeded per item from its qa_id so results do not depend on iteration order
    key = [seed, salt] + list(item.qa_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(key))


def tpt_swap(item: QAItem, shard: DatasetShard, seed: int) -> PerturbationRecord:
    if item.kind != "positive_closed":
        raise PerturbationError(f"{item.qa_id}: textual perturbation needs a positive closed item")
    rng = _item_rng(item, seed, 0)
    relations = shard.relations(item.scene_id)
    vocab = shard.disease_vocab or sorted({d for _, d in relations.pairs})
    candidates = {
        "anatomy": [a for a in ANATOMIES if a != item.anatomy and (a, item.disease) not in relations],
        "disease": [d for d in vocab if d != item.disease and (item.anatomy, d) not in relations],
    }
    order = ["anatomy", "disease"] if rng.random() < 0.5 else ["disease", "anatomy"]
    fieldname = next((f for f in order if candidates[f]), None)
    if fieldname is None:
        raise NoValidPerturbation(f"{item.qa_id}: scene saturated, no absent pair reachable")
    new = candidates[fieldname][int(rng.integers(len(candidates[fieldname])))]
    anatomy, disease = (new, item.disease) if fieldname == "anatomy" else (item.anatomy, new)
    question = render_question("positive_closed", anatomy, disease, closed_template_index(item.question))
    return PerturbationRecord(item.qa_id, "textual", fieldname, new, perturbed_question=question)


def nearest_resample(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of ``src`` to ``(height, width)``."""
    sh, sw = src.shape
    rows = (np.arange(height) * sh) // height
    cols = (np.arange(width) * sw) // width
    return src[rows[:, None], cols[None, :]]


def paste_region(target_image: np.ndarray, target_mask: np.ndarray,
                 donor_image: np.ndarray, donor_mask: np.ndarray) -> np.ndarray:
    """Resize the donor's masked rectangle onto the target's and write it inside the target mask."""
    out = target_image.copy()
    ty, tx = np.nonzero(target_mask)
    dy, dx = np.nonzero(donor_mask)
    if len(ty) == 0 or len(dy) == 0:
        raise NoValidPerturbation("empty anatomy mask")
    t0, t1, l0, l1 = ty.min(), ty.max() + 1, tx.min(), tx.max() + 1
    donor_patch = donor_image[dy.min():dy.max() + 1, dx.min():dx.max() + 1]
    resized = nearest_resample(donor_patch, t1 - t0, l1 - l0)
    window = target_mask[t0:t1, l0:l1]
    out[t0:t1, l0:l1][window] = resized[window]
    return out


def vpt_blend(item: QAItem, shard: DatasetShard, seed: int) -> PerturbationRecord:
    if item.kind != "positive_closed":
        raise PerturbationError(f"{item.qa_id}: visual perturbation needs a positive closed item")
    rng = _item_rng(item, seed, 1)
    rel_index = {r.scene_id: r for r in shard.relation_maps}
    donors = [s for s in shard.scenes
              if s.scene_id != item.scene_id
              and (item.anatomy, item.disease) not in rel_index[s.scene_id]
              and bounding_rect(s.anatomies[item.anatomy]) is not None]
    if not donors:
        raise NoValidPerturbation(f"{item.qa_id}: no donor scene lacks ({item.anatomy}, {item.disease})")
    donor = donors[int(rng.integers(len(donors)))]
    target = shard.scene(item.scene_id)
    image = paste_region(target.image, rle_decode(target.anatomies[item.anatomy]),
                         donor.image, rle_decode(donor.anatomies[item.anatomy]))
    return PerturbationRecord(item.qa_id, "visual", "none", donor_scene_id=donor.scene_id,
                              perturbed_question=item.question, perturbed_image=image)


def build_perturbations(items: Iterable[QAItem], shard: DatasetShard, mode: str,
                        seed: int) -> tuple[list[PerturbationRecord], list[str]]:
    """Perturb every item; returns emitted records and the qa_ids that were skipped."""
    make = {"tpt": tpt_swap, "textual": tpt_swap, "vpt": vpt_blend, "visual": vpt_blend}[mode]
    records, skipped = [], []
    for item in items:
        try:
            records.append(make(item, shard, seed))
        except NoValidPerturbation:
            skipped.append(item.qa_id)
    return records, skipped


def write_perturbations(path: str | Path, records: Iterable[PerturbationRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")


def read_perturbations(path: str | Path) -> list[PerturbationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PerturbationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise PerturbationError(f"{path}:{lineno}: malformed perturbation record ({exc})") from exc
    return out
