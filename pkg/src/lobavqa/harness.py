"""End-to-end workflows shared by the CLI and the experiment tests."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch

from .corpus import DatasetShard, QAItem, SceneConfig
from .grounded.model import GroundedModel, ModelConfig
from .grounded.tokenizer import build_vocab
from .grounded.training import TrainResult, train
from .metrics import EvalReport, LabelLexicon, evaluate
from .perturbation import PerturbationRecord, build_perturbations, select_true_positives
from .self_prompting import DecodeConfig, HighlightPlan, answer_with_loba

log = logging.getLogger(__name__)

BETA_GRID = (0.5, 1.0, 2.0, 3.0, 4.0)
ALPHA_GRID = (0.0, 0.1, 0.3, 0.5, 1.0, 1.5)


@dataclass
class AnswerSet:
    answers: dict[str, str]  # qa_id -> full response text
    records: dict[str, dict] = field(default_factory=dict)  # qa_id -> PerPassRecord dict


class Answerer:
    """Answers questions with plain greedy decoding or with self-prompting.

    Pass-1 generations are cached per (question, image bytes) so that settings sharing
    a checkpoint reuse them.
    """

    def __init__(self, model: GroundedModel):
        self.model = model
        self._first_pass: dict = {}

    def _generate(self, question: str, image):
        key = (question, image.tobytes())
        if key not in self._first_pass:
            self._first_pass[key] = self.model.generate(question, image)
        return self._first_pass[key]

    def answer(self, question: str, image, loba: bool, plan: HighlightPlan | None = None,
               decode: DecodeConfig | None = None) -> tuple[str, dict | None]:
        gen = self._generate(question, image)
        if not loba:
            return gen.text, None
        out = answer_with_loba(self.model, question, image, plan, decode, first_pass=gen)
        return out.text, out.record.to_dict()


def answer_shard(answerer: Answerer, shard: DatasetShard, loba: bool, plan: HighlightPlan | None = None,
                 decode: DecodeConfig | None = None, items: Iterable[QAItem] | None = None) -> AnswerSet:
    out = AnswerSet({})
    for item in (shard.qa if items is None else items):
        text, rec = answerer.answer(item.question, shard.scene(item.scene_id).image, loba, plan, decode)
        out.answers[item.qa_id] = text
        if rec is not None:
            out.records[item.qa_id] = rec
    return out


def answer_perturbations(answerer: Answerer, shard: DatasetShard, records: Sequence[PerturbationRecord],
                         loba: bool, plan: HighlightPlan | None = None,
                         decode: DecodeConfig | None = None) -> list[str]:
    qa = {q.qa_id: q for q in shard.qa}
    out = []
    for rec in records:
        base = qa[rec.base_qa_id]
        image = rec.perturbed_image if rec.perturbed_image is not None else shard.scene(base.scene_id).image
        question = rec.perturbed_question or base.question
        out.append(answerer.answer(question, image, loba, plan, decode)[0])
    return out


@dataclass
class MethodResult:
    report: EvalReport
    answers: AnswerSet
    n_true_positives: int
    skipped: dict[str, int]


def run_method(answerer: Answerer, shard: DatasetShard, loba: bool, plan: HighlightPlan | None = None,
               decode: DecodeConfig | None = None, seed: int = 0, perturb: bool = True,
               lexicon: LabelLexicon | None = None) -> MethodResult:
    """Answer the shard, perturb this method's own true positives, and score everything."""
    answers = answer_shard(answerer, shard, loba, plan, decode)
    tpt_after = vpt_after = None
    tps: list = []
    skipped = {"tpt": 0, "vpt": 0}
    if perturb:
        tps = select_true_positives(answers.answers, shard)
        tpt_recs, tpt_skip = build_perturbations(tps, shard, "tpt", seed)
        vpt_recs, vpt_skip = build_perturbations(tps, shard, "vpt", seed)
        skipped = {"tpt": len(tpt_skip), "vpt": len(vpt_skip)}
        tpt_after = answer_perturbations(answerer, shard, tpt_recs, loba, plan, decode)
        vpt_after = answer_perturbations(answerer, shard, vpt_recs, loba, plan, decode)
    report = evaluate(answers.answers, shard, lexicon, tpt_after, vpt_after)
    return MethodResult(report, answers, len(tps), skipped)


def default_model_config(scene_config: SceneConfig | None = None, **overrides) -> ModelConfig:
    scene_config = scene_config or SceneConfig()
    kw = {"vocab": tuple(build_vocab(scene_config.disease_vocab)), "grid_size": scene_config.grid_size}
    kw.update(overrides)
    return ModelConfig(**kw)


def train_default(shard: DatasetShard, config: ModelConfig, epochs: int, lr: float, seed: int,
                  batch_size: int = 32, dtype=torch.float64) -> TrainResult:
    return train(GroundedModel(config, seed=seed), shard, epochs=epochs, lr=lr, seed=seed,
                 batch_size=batch_size, dtype=dtype)


def ablation_grid(answerer: Answerer, shard: DatasetShard, betas: Sequence[float] = BETA_GRID,
                  alphas: Sequence[float] = ALPHA_GRID, language_layers: bool = False,
                  seed: int = 0) -> list[dict]:
    """Closed/open micro scores for plain decoding and every (beta, alpha) setting."""
    rows = []
    plain = run_method(answerer, shard, loba=False, seed=seed, perturb=False)
    rows.append(_ablation_row("plain", None, None, plain.report))
    for beta in betas:
        for alpha in alphas:
            plan = HighlightPlan(beta=beta, language_layers=language_layers)
            res = run_method(answerer, shard, True, plan, DecodeConfig(alpha), seed=seed, perturb=False)
            row = _ablation_row("loba", beta, alpha, res.report)
            row["matches_plain"] = res.answers.answers == plain.answers.answers
            rows.append(row)
    return rows


def _ablation_row(setting: str, beta, alpha, report: EvalReport) -> dict:
    c, o = report.per_kind["closed"], report.per_kind["open"]
    return {
        "setting": setting, "beta": beta, "alpha": alpha,
        "closed_precision": c.precision, "closed_recall": c.recall, "closed_f1": c.f1,
        "open_precision": o.precision, "open_recall": o.recall, "open_f1": o.f1,
        "matches_plain": setting == "plain",
    }


ABLATION_FIELDS = ["setting", "beta", "alpha", "closed_precision", "closed_recall", "closed_f1",
                   "open_precision", "open_recall", "open_f1", "matches_plain"]


def write_ablation_csv(path: str | Path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in ABLATION_FIELDS})


def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
