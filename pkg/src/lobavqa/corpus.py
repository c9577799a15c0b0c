"""Synthetic annotated scenes, template question generation and JSONL shards."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import (
    ANATOMIES,
    BoundingBox,
    PixelMask,
    RelationMap,
    SceneAnnotation,
    box_mask,
    map_relations,
    relations_from_dict,
    relations_to_dict,
)

KINDS = ("positive_closed", "hallucinated_closed", "open_normal", "open_abnormal")
CLOSED_KINDS = ("positive_closed", "hallucinated_closed")
OPEN_KINDS = ("open_normal", "open_abnormal")

CLOSED_TEMPLATES = (
    "Does {anatomy} have {disease}?",
    "Is there {disease} present in {anatomy}?",
)
OPEN_TEMPLATE = "Are there any abnormalities at the {anatomy}?"
NORMAL_ANSWER = "No abnormalities are present in the {anatomy}."
ABNORMAL_ANSWER = "The {anatomy} suffers from {findings}."

# pattern id -> predicate over absolute pixel coordinates (x = column, y = row);
# periods divide 4 so a pattern looks the same in every aligned 4x4 patch
PATTERNS = {
    "hstripes": lambda x, y: y % 2 == 0,
    "vstripes": lambda x, y: x % 2 == 0,
    "checker": lambda x, y: (x + y) % 2 == 0,
    "dots": lambda x, y: (x % 2 == 0) & (y % 2 == 0),
    "coarse": lambda x, y: ((x // 2) + (y // 2)) % 2 == 0,
    "solid": lambda x, y: np.ones_like(x, dtype=bool),
    "hbands": lambda x, y: y % 4 < 2,
    "vbands": lambda x, y: x % 4 < 2,
}

# disease -> (pattern, amplitude, anatomies it preferentially occurs in)
DEFAULT_DISEASES: dict[str, tuple[str, float, tuple[str, ...]]] = {
    "pneumonia": ("hstripes", 0.4, ("right lower lung", "left lower lung", "right middle lung")),
    "pulmonary fibrosis": ("vstripes", 0.4, ("right lower lung", "left lower lung")),
    "nodule/mass": ("solid", 0.4, ("right upper lung", "left upper lung")),
    "pleural effusion": ("checker", 0.4, ("right lower lung", "left lower lung")),
    "cardiomegaly": ("coarse", 0.4, ("heart",)),
    "atelectasis": ("dots", 0.4, ("left middle lung", "right middle lung")),
    "consolidation": ("hbands", 0.4, ("right middle lung", "left middle lung", "left lower lung")),
    "pneumothorax": ("vbands", 0.4, ("right upper lung", "left upper lung", "mediastinum")),
}

BASE_INTENSITY = {"background": 0.05, "lung": 0.2, "mediastinum": 0.35, "heart": 0.45}


class CorpusError(ValueError):
    pass


class ShardError(ValueError):
    pass


@dataclass(frozen=True)
class DiseaseSpec:
    label: str
    pattern: str
    amplitude: float
    preferred: tuple[str, ...] = ()


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 24
    diseases: tuple[DiseaseSpec, ...] = tuple(
        DiseaseSpec(k, p, a, pref) for k, (p, a, pref) in DEFAULT_DISEASES.items()
    )
    diseases_per_scene: tuple[int, int] = (0, 3)
    prior_strength: float = 0.75  # chance a disease lands in one of its preferred anatomies
    noise: float = 0.04
    rng_seed: int = 0

    def __post_init__(self):
        sigs = [(d.pattern, d.amplitude) for d in self.diseases]
        if len(set(sigs)) != len(sigs):
            raise CorpusError("texture signatures must be pairwise distinct")
        if len({d.label for d in self.diseases}) != len(self.diseases):
            raise CorpusError("duplicate disease label")
        for d in self.diseases:
            if d.pattern not in PATTERNS:
                raise CorpusError(f"unknown texture pattern {d.pattern!r}")
        lo, hi = self.diseases_per_scene
        if not 0 <= lo <= hi:
            raise CorpusError(f"bad diseases_per_scene range {self.diseases_per_scene}")

    @property
    def disease_vocab(self) -> list[str]:
        return [d.label for d in self.diseases]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diseases"] = [asdict(x) for x in self.diseases]
        d["diseases_per_scene"] = list(self.diseases_per_scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["diseases"] = tuple(
            DiseaseSpec(x["label"], x["pattern"], float(x["amplitude"]), tuple(x["preferred"]))
            for x in d["diseases"]
        )
        d["diseases_per_scene"] = tuple(d["diseases_per_scene"])
        return cls(**d)


@dataclass
class QAItem:
    qa_id: str
    scene_id: str
    kind: str
    anatomy: str
    disease: str | None
    question: str
    gold_answer: str
    gold_labels: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetShard:
    scenes: list[SceneAnnotation] = field(default_factory=list)
    qa: list[QAItem] = field(default_factory=list)
    relation_maps: list[RelationMap] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def scene(self, scene_id: str) -> SceneAnnotation:
        return self._scene_index()[scene_id]

    def relations(self, scene_id: str) -> RelationMap:
        return {r.scene_id: r for r in self.relation_maps}[scene_id]

    def _scene_index(self) -> dict[str, SceneAnnotation]:
        return {s.scene_id: s for s in self.scenes}

    @property
    def disease_vocab(self) -> list[str]:
        return [d["label"] for d in self.manifest.get("config", {}).get("diseases", [])]


def scene_seed(master: int, index: int) -> int:
    """Per-scene seed derived from the master seed, independent of generation order."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, dtype=np.uint64)[0])


def anatomy_layout(grid_size: int, rng: np.random.Generator | None = None) -> dict[str, BoundingBox]:
    """Eight tiled rectangles inside a background margin; cut lines jitter per scene."""
    if grid_size < 16:
        raise CorpusError(f"grid_size {grid_size} too small for the anatomy layout (need >= 16)")
    g = grid_size
    m = max(1, round(0.06 * g))
    j = max(1, round(0.03 * g))

    def cut(frac: float) -> int:
        c = round(frac * g)
        if rng is not None:
            c += int(rng.integers(-j, j + 1))
        return c

    c1, c2 = cut(0.38), cut(0.62)
    r1, r2 = cut(0.36), cut(0.64)
    mid = cut(0.5)
    lo, hi = m, g - m
    return {
        "right upper lung": BoundingBox(lo, lo, c1, r1),
        "right middle lung": BoundingBox(lo, r1, c1, r2),
        "right lower lung": BoundingBox(lo, r2, c1, hi),
        "left upper lung": BoundingBox(c2, lo, hi, r1),
        "left middle lung": BoundingBox(c2, r1, hi, r2),
        "left lower lung": BoundingBox(c2, r2, hi, hi),
        "mediastinum": BoundingBox(c1, lo, c2, mid),
        "heart": BoundingBox(c1, mid, c2, hi),
    }


def _region_kind(anatomy: str) -> str:
    return "lung" if anatomy.endswith("lung") else anatomy


def render_texture(image: np.ndarray, box: BoundingBox, spec: DiseaseSpec) -> None:
    y, x = np.mgrid[box.y0:box.y1, box.x0:box.x1]
    on = PATTERNS[spec.pattern](x, y)
    image[box.y0:box.y1, box.x0:box.x1] += spec.amplitude * on


def quantize(image: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round to three decimals (the shard's fixed-point format)."""
    return np.round(np.clip(image, 0.0, 1.0) * 1000.0) / 1000.0


def _disease_box(region: BoundingBox, g: int, rng: np.random.Generator, spill: int) -> BoundingBox:
    """A box covering 60-100% of each side of ``region``, allowed to spill ``spill`` pixels past it."""
    rw, rh = region.x1 - region.x0, region.y1 - region.y0
    bw = int(rng.integers(max(3, math.ceil(0.6 * rw)), max(3, rw) + 1))
    bh = int(rng.integers(max(3, math.ceil(0.6 * rh)), max(3, rh) + 1))
    x0 = int(rng.integers(region.x0 - spill, region.x1 - bw + spill + 1))
    y0 = int(rng.integers(region.y0 - spill, region.y1 - bh + spill + 1))
    x0, y0 = int(np.clip(x0, 0, g - bw)), int(np.clip(y0, 0, g - bh))
    return BoundingBox(x0, y0, x0 + bw, y0 + bh)


def synth_scene(config: SceneConfig, seed: int, scene_id: str | None = None) -> SceneAnnotation:
    rng = np.random.default_rng(seed)
    g = config.grid_size
    layout = anatomy_layout(g, rng)
    image = np.full((g, g), BASE_INTENSITY["background"])
    anatomies: dict[str, PixelMask] = {}
    for label in ANATOMIES:
        box = layout[label]
        image[box.y0:box.y1, box.x0:box.x1] = BASE_INTENSITY[_region_kind(label)]
        anatomies[label] = box_mask(box, g, g)
    image += rng.normal(0.0, config.noise, size=image.shape)

    lo, hi = config.diseases_per_scene
    n = int(rng.integers(lo, hi + 1))
    picks = rng.choice(len(config.diseases), size=min(n, len(config.diseases)), replace=False) if n else []
    diseases: list[tuple[str, BoundingBox]] = []
    for idx in sorted(int(i) for i in picks):
        spec = config.diseases[idx]
        if spec.preferred and rng.random() < config.prior_strength:
            home = spec.preferred[int(rng.integers(len(spec.preferred)))]
        else:
            home = ANATOMIES[int(rng.integers(len(ANATOMIES)))]
        box = _disease_box(layout[home], g, rng, spill=max(1, round(0.03 * g)))
        render_texture(image, box, spec)
        diseases.append((spec.label, box))

    scene = SceneAnnotation(scene_id or f"scene-{seed}", quantize(image), anatomies, diseases)
    scene.validate()
    return scene


def render_question(kind: str, anatomy: str, disease: str | None, template: int = 0) -> str:
    if kind in CLOSED_KINDS:
        return CLOSED_TEMPLATES[template].format(anatomy=anatomy, disease=disease)
    return OPEN_TEMPLATE.format(anatomy=anatomy)


def closed_template_index(question: str) -> int:
    for i, t in enumerate(CLOSED_TEMPLATES):
        if question.startswith(t.split("{")[0]):
            return i
    raise CorpusError(f"not a closed-template question: {question!r}")


def gold_answer(item: QAItem, relations: RelationMap) -> tuple[str, list[str]]:
    """Canonical gold answer text and label set for ``item``."""
    related = relations.diseases_at(item.anatomy)
    if item.kind in CLOSED_KINDS:
        present = (item.anatomy, item.disease) in relations
        if present != (item.kind == "positive_closed"):
            raise CorpusError(f"{item.qa_id}: kind {item.kind} inconsistent with relations")
        return ("Yes", ["yes"]) if present else ("No", ["no"])
    if item.kind == "open_normal":
        if related:
            raise CorpusError(f"{item.qa_id}: open_normal but {item.anatomy} has findings")
        return NORMAL_ANSWER.format(anatomy=item.anatomy), []
    if item.kind == "open_abnormal":
        if not related:
            raise CorpusError(f"{item.qa_id}: open_abnormal but {item.anatomy} has no findings")
        return ABNORMAL_ANSWER.format(anatomy=item.anatomy, findings=enumerate_findings(related)), related
    raise CorpusError(f"unknown kind {item.kind!r}")


def enumerate_findings(labels: Sequence[str]) -> str:
    labels = list(labels)
    if len(labels) == 1:
        return labels[0]
    return ", ".join(labels[:-1]) + " and " + labels[-1]


def generate_qa(scene: SceneAnnotation, relations: RelationMap, seed: int,
                disease_vocab: Sequence[str]) -> list[QAItem]:
    """Two to five template questions about ``scene`` with gold answers."""
    if not scene.anatomies:
        raise CorpusError(f"scene {scene.scene_id} has no anatomies")
    rng = np.random.default_rng(seed)
    anatomies = [a for a in ANATOMIES if a in scene.anatomies]
    present = sorted(relations.pairs)
    absent = [(a, d) for a in anatomies for d in disease_vocab if (a, d) not in relations]
    # hallucinated pairs whose disease is visible elsewhere in the scene
    elsewhere = [(a, d) for a, d in absent if any(d == pd for _, pd in present)]
    sick = [a for a in anatomies if relations.diseases_at(a)]
    healthy = [a for a in anatomies if not relations.diseases_at(a)]

    options = {
        "positive_closed": present,
        "hallucinated_closed": absent,
        "open_normal": healthy,
        "open_abnormal": sick,
    }
    feasible = [k for k in KINDS if options[k]]
    n_items = int(rng.integers(2, 6))
    items: list[QAItem] = []
    seen: set = set()
    attempts = 0
    while len(items) < n_items and attempts < 50:
        attempts += 1
        kind = feasible[int(rng.integers(len(feasible)))]
        pool = options[kind]
        if kind == "hallucinated_closed" and elsewhere and rng.random() < 0.5:
            pool = elsewhere
        target = pool[int(rng.integers(len(pool)))]
        anatomy, disease = target if kind in CLOSED_KINDS else (target, None)
        if (anatomy, disease) in seen:
            continue
        seen.add((anatomy, disease))
        template = int(rng.integers(len(CLOSED_TEMPLATES))) if kind in CLOSED_KINDS else 0
        item = QAItem(
            qa_id=f"{scene.scene_id}-q{len(items)}",
            scene_id=scene.scene_id,
            kind=kind,
            anatomy=anatomy,
            disease=disease,
            question=render_question(kind, anatomy, disease, template),
            gold_answer="",
            gold_labels=[],
        )
        item.gold_answer, item.gold_labels = gold_answer(item, relations)
        items.append(item)
    return items


def check_item(item: QAItem, relations: RelationMap) -> bool:
    """True when ``item`` satisfies its kind invariant against ``relations``."""
    related = relations.diseases_at(item.anatomy)
    if item.kind == "positive_closed":
        return (item.anatomy, item.disease) in relations and item.gold_labels == ["yes"]
    if item.kind == "hallucinated_closed":
        return (item.anatomy, item.disease) not in relations and item.gold_labels == ["no"]
    if item.kind == "open_abnormal":
        return bool(related) and item.gold_labels == related
    if item.kind == "open_normal":
        return not related and item.gold_labels == []
    return False


def generate_corpus(config: SceneConfig, n_scenes: int, master_seed: int | None = None,
                    delta: float = 0.5, prefix: str = "s") -> DatasetShard:
    master = config.rng_seed if master_seed is None else master_seed
    shard = DatasetShard()
    for i in range(n_scenes):
        seed = scene_seed(master, i)
        scene = synth_scene(config, seed, scene_id=f"{prefix}{i:05d}")
        rel = map_relations(scene, delta)
        shard.scenes.append(scene)
        shard.relation_maps.append(rel)
        shard.qa.extend(generate_qa(scene, rel, scene_seed(master + 1, i), config.disease_vocab))
    shard.manifest = build_manifest(shard, master, config, delta)
    return shard


def build_manifest(shard: DatasetShard, seed: int, config: SceneConfig | None = None,
                   delta: float = 0.5) -> dict:
    counts = {k: 0 for k in KINDS}
    for item in shard.qa:
        counts[item.kind] += 1
    manifest = {
        "seed": seed,
        "delta": delta,
        "n_scenes": len(shard.scenes),
        "n_relations": len(shard.relation_maps),
        "n_qa": len(shard.qa),
        "counts": counts,
    }
    if config is not None:
        manifest["config"] = config.to_dict()
    elif "config" in shard.manifest:
        manifest["config"] = shard.manifest["config"]
    return manifest


def shard_config(shard: DatasetShard) -> SceneConfig:
    return SceneConfig.from_dict(shard.manifest["config"])


# --- JSONL shard I/O -------------------------------------------------------

def scene_to_record(scene: SceneAnnotation) -> dict:
    return {
        "record": "scene",
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "image": [round(float(x), 3) for x in scene.image.reshape(-1)],
        "anatomies": {k: [list(r) for r in m.runs] for k, m in scene.anatomies.items()},
        "diseases": [{"label": lbl, "box": box.to_list()} for lbl, box in scene.diseases],
    }


def scene_from_record(rec: dict) -> SceneAnnotation:
    w, h = int(rec["width"]), int(rec["height"])
    image = np.asarray(rec["image"], dtype=np.float64)
    if image.size != w * h:
        raise ShardError(f"scene {rec.get('scene_id')}: image has {image.size} values, expected {w * h}")
    anatomies = {k: PixelMask(w, h, tuple(tuple(r) for r in runs)) for k, runs in rec["anatomies"].items()}
    diseases = [(d["label"], BoundingBox(*d["box"])) for d in rec["diseases"]]
    scene = SceneAnnotation(rec["scene_id"], image.reshape(h, w), anatomies, diseases)
    scene.validate()
    return scene


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=False)


def iter_shard_lines(shard: DatasetShard) -> Iterator[str]:
    manifest = dict(shard.manifest) or build_manifest(shard, 0)
    manifest.update({k: v for k, v in build_manifest(shard, manifest.get("seed", 0)).items()
                     if k in ("n_scenes", "n_relations", "n_qa", "counts")})
    yield _dumps({"record": "manifest", **manifest})
    qa_by_scene: dict[str, list[QAItem]] = {}
    for item in shard.qa:
        qa_by_scene.setdefault(item.scene_id, []).append(item)
    rel_by_scene = {r.scene_id: r for r in shard.relation_maps}
    for scene in shard.scenes:
        yield _dumps(scene_to_record(scene))
        if scene.scene_id in rel_by_scene:
            yield _dumps({"record": "relations", **relations_to_dict(rel_by_scene[scene.scene_id])})
        for item in qa_by_scene.pop(scene.scene_id, []):
            yield _dumps({"record": "qa", **item.to_dict()})
    for items in qa_by_scene.values():
        raise ShardError(f"qa {items[0].qa_id} references missing scene {items[0].scene_id}")


def write_shard(path: str | Path, shard: DatasetShard) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in iter_shard_lines(shard):
            fh.write(line + "\n")


def read_shard(path: str | Path) -> DatasetShard:
    shard = DatasetShard()
    manifest = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec.pop("record")
            except (json.JSONDecodeError, KeyError, AttributeError) as exc:
                raise ShardError(f"{path}:{lineno}: malformed record ({exc})") from exc
            try:
                if kind == "manifest":
                    manifest = rec
                elif kind == "scene":
                    shard.scenes.append(scene_from_record(rec))
                elif kind == "relations":
                    shard.relation_maps.append(relations_from_dict(rec))
                elif kind == "qa":
                    shard.qa.append(QAItem(**rec))
                else:
                    raise ShardError(f"unknown record kind {kind!r}")
            except (TypeError, KeyError, ValueError) as exc:
                raise ShardError(f"{path}:{lineno}: bad {kind} record ({exc})") from exc
    if manifest is None:
        raise ShardError(f"{path}: missing manifest record")
    shard.manifest = manifest
    _check_manifest(shard, path)
    return shard


def _check_manifest(shard: DatasetShard, path) -> None:
    m = shard.manifest
    actual = build_manifest(shard, m.get("seed", 0))
    for key in ("n_scenes", "n_relations", "n_qa", "counts"):
        if m.get(key) != actual[key]:
            raise ShardError(f"{path}: manifest mismatch on {key}: declared {m.get(key)}, found {actual[key]}")
    ids = {s.scene_id for s in shard.scenes}
    for item in shard.qa:
        if item.scene_id not in ids:
            raise ShardError(f"{path}: qa {item.qa_id} references missing scene {item.scene_id}")


def shard_to_bytes(shard: DatasetShard) -> bytes:
    return "".join(line + "\n" for line in iter_shard_lines(shard)).encode("utf-8")
