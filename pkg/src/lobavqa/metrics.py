"""Answer normalization, label extraction, micro P/R/F1 and flip-rate scores."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import CLOSED_KINDS, KINDS, OPEN_KINDS, DatasetShard

NEGATIONS = frozenset({"no", "not", "without", "absent", "negative"})
NEGATION_WINDOW = 3

_WORD = re.compile(r"[a-z0-9]+(?:/[a-z0-9]+)*")
_LOCALIZATION = re.compile(r"^\s*The location of .+? is at <SEG>\.\s*")

DEFAULT_SYNONYMS = {
    "pneumonia": ["pneumonia"],
    "pulmonary fibrosis": ["pulmonary fibrosis", "fibrosis"],
    "nodule/mass": ["nodule/mass", "nodule", "mass"],
    "pleural effusion": ["pleural effusion", "effusion"],
    "cardiomegaly": ["cardiomegaly", "enlarged heart"],
    "atelectasis": ["atelectasis"],
    "consolidation": ["consolidation"],
    "pneumothorax": ["pneumothorax"],
}


class MetricsError(ValueError):
    pass


def _words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class LabelLexicon:
    """Surface forms per label, matched longest-first over word tokens."""

    def __init__(self, synonyms: Mapping[str, Sequence[str]]):
        self.synonyms = {label: [s.lower() for s in forms] for label, forms in synonyms.items()}
        owner: dict[tuple[str, ...], str] = {}
        for label, forms in self.synonyms.items():
            for form in forms:
                key = tuple(_words(form))
                if not key:
                    raise MetricsError(f"empty surface form for {label!r}")
                if key in owner and owner[key] != label:
                    raise MetricsError(f"surface form {form!r} shared by {owner[key]!r} and {label!r}")
                owner[key] = label
        self._forms = owner
        self._max_len = max((len(k) for k in owner), default=0)

    @classmethod
    def default(cls, labels: Iterable[str] | None = None) -> "LabelLexicon":
        if labels is None:
            return cls(DEFAULT_SYNONYMS)
        return cls({lbl: DEFAULT_SYNONYMS.get(lbl, [lbl]) for lbl in labels})

    @property
    def labels(self) -> list[str]:
        return sorted(self.synonyms)

    def match_at(self, words: Sequence[str], i: int) -> tuple[str, int] | None:
        for n in range(min(self._max_len, len(words) - i), 0, -1):
            label = self._forms.get(tuple(words[i:i + n]))
            if label is not None:
                return label, n
        return None


def extract_labels(answer: str, lexicon: LabelLexicon) -> set[str]:
    """Labels mentioned in ``answer``, skipping mentions negated within three words."""
    words = _words(answer)
    found: set[str] = set()
    i = 0
    while i < len(words):
        hit = lexicon.match_at(words, i)
        if hit is None:
            i += 1
            continue
        label, n = hit
        if not NEGATIONS.intersection(words[max(0, i - NEGATION_WINDOW):i]):
            found.add(label)
        i += n
    return found


def strip_localization(text: str) -> str:
    """Drop the leading ``The location of ... is at <SEG>.`` sentence, if present."""
    return _LOCALIZATION.sub("", text, count=1)


def normalize_yesno(answer: str) -> str:
    words = _words(strip_localization(answer))
    if words and words[0] in ("yes", "no"):
        return words[0]
    return "unparseable"


def micro_prf(predicted: Sequence[Iterable[str]], gold: Sequence[Iterable[str]]) -> tuple[float, float, float]:
    if len(predicted) != len(gold):
        raise MetricsError(f"length mismatch: {len(predicted)} predictions vs {len(gold)} gold")
    tp = fp = fn = 0
    for p, g in zip(predicted, gold):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def flip_rate(before: Sequence[str], after: Sequence[str]) -> float:
    """Fraction of ``yes`` answers that became ``no``; unparseable answers do not count as flips."""
    if not before:
        raise MetricsError("flip rate of an empty set is undefined")
    if len(before) != len(after):
        raise MetricsError(f"length mismatch: {len(before)} vs {len(after)}")
    if any(b != "yes" for b in before):
        raise MetricsError("flip rate expects only 'yes' answers before perturbation")
    return sum(a == "no" for a in after) / len(before)


def closed_label_set(answer: str, gold_yes: bool) -> set[str]:
    """Positive-class label set for a yes/no answer; unparseable counts as the wrong class."""
    verdict = normalize_yesno(answer)
    if verdict == "unparseable":
        return set() if gold_yes else {"yes"}
    return {"yes"} if verdict == "yes" else set()


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    n: int
    accuracy: float | None = None

    def to_dict(self) -> dict:
        d = {"precision": self.precision, "recall": self.recall, "f1": self.f1, "n": self.n}
        if self.accuracy is not None:
            d["accuracy"] = self.accuracy
        return d


@dataclass
class EvalReport:
    per_kind: dict[str, PRF] = field(default_factory=dict)
    tpt_score: float | None = None
    vpt_score: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_kind": {k: v.to_dict() for k, v in self.per_kind.items()},
            "tpt_score": self.tpt_score,
            "vpt_score": self.vpt_score,
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'kind':<20} {'n':>5} {'P':>7} {'R':>7} {'F1':>7}"]
        for kind, m in self.per_kind.items():
            lines.append(f"{kind:<20} {m.n:>5} {m.precision:>7.3f} {m.recall:>7.3f} {m.f1:>7.3f}")
        for name, score in (("TPT", self.tpt_score), ("VPT", self.vpt_score)):
            if score is not None:
                lines.append(f"{name + ' flip rate':<20} {self.counts[name.lower()]:>5} {score:>7.3f}")
        return "\n".join(lines)


def evaluate(predictions: Mapping[str, str], shard: DatasetShard, lexicon: LabelLexicon | None = None,
             tpt_after: Sequence[str] | None = None, vpt_after: Sequence[str] | None = None) -> EvalReport:
    """Score ``predictions`` (qa_id -> answer text) against the shard's gold answers.

    ``tpt_after`` / ``vpt_after`` are the answers to perturbed true positives; each
    perturbation was built from a "yes" answer, so the before-list is implicit.
    """
    lexicon = lexicon or LabelLexicon.default(shard.disease_vocab or None)
    pred_sets: dict[str, list[set]] = {k: [] for k in KINDS}
    gold_sets: dict[str, list[set]] = {k: [] for k in KINDS}
    for item in shard.qa:
        if item.qa_id not in predictions:
            raise MetricsError(f"no prediction for {item.qa_id}")
        answer = predictions[item.qa_id]
        if item.kind in CLOSED_KINDS:
            gold_yes = item.gold_labels == ["yes"]
            pred_sets[item.kind].append(closed_label_set(answer, gold_yes))
            gold_sets[item.kind].append({"yes"} if gold_yes else set())
        else:
            pred_sets[item.kind].append(extract_labels(strip_localization(answer), lexicon))
            gold_sets[item.kind].append(set(item.gold_labels))

    report = EvalReport()
    groups = {k: (k,) for k in KINDS}
    groups["closed"] = CLOSED_KINDS
    groups["open"] = OPEN_KINDS
    for name, kinds in groups.items():
        p = [s for k in kinds for s in pred_sets[k]]
        g = [s for k in kinds for s in gold_sets[k]]
        prec, rec, f1 = micro_prf(p, g)
        acc = sum(a == b for a, b in zip(p, g)) / len(p) if p else 0.0
        report.per_kind[name] = PRF(prec, rec, f1, len(p), acc)
        report.counts[name] = len(p)
    if tpt_after is not None and len(tpt_after):
        report.tpt_score = flip_rate(["yes"] * len(tpt_after), [normalize_yesno(a) for a in tpt_after])
        report.counts["tpt"] = len(tpt_after)
    if vpt_after is not None and len(vpt_after):
        report.vpt_score = flip_rate(["yes"] * len(vpt_after), [normalize_yesno(a) for a in vpt_after])
        report.counts["vpt"] = len(vpt_after)
    return report
