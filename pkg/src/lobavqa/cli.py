"""``lobavqa`` command line: gen, perturb, train, answer, eval, ablate.

Every command takes its randomness from ``--seed`` and writes its outputs in input
order, so reruns with identical arguments produce identical bytes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .corpus import CorpusError, SceneConfig, ShardError, generate_corpus, read_shard, shard_config, write_shard
from .geometry import GeometryError
from .grounded.model import GroundedModel, ShapeError
from .grounded.training import (encode_items, grad_check, load_checkpoint, save_checkpoint, train,
                                write_loss_curve)
from .harness import (Answerer, ablation_grid, answer_perturbations, answer_shard, default_model_config,
                      read_jsonl, write_ablation_csv, write_jsonl)
from .metrics import MetricsError, evaluate
from .perturbation import PerturbationError, build_perturbations, read_perturbations, select_true_positives, \
    write_perturbations
from .self_prompting import DecodeConfig, HighlightPlan

log = logging.getLogger("lobavqa")


class CLIError(Exception):
    pass


# -- argument validation ----------------------------------------------------

def _open_unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _pos_float(text: str) -> float:
    v = float(text)
    if not v > 0.0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return p


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    config = SceneConfig(grid_size=args.grid, rng_seed=args.seed)
    shard = generate_corpus(config, args.scenes, args.seed, delta=args.delta)
    write_shard(args.out, shard)
    print(json.dumps(shard.manifest["counts"] | {"n_scenes": args.scenes, "n_qa": len(shard.qa)},
                     sort_keys=True))
    return 0


def _predictions(path: Path) -> dict[str, str]:
    out = {}
    for lineno, rec in enumerate(read_jsonl(path), 1):
        if "qa_id" not in rec or "answer" not in rec:
            raise CLIError(f"{path}:{lineno}: prediction record needs 'qa_id' and 'answer'")
        out[rec["qa_id"]] = rec["answer"]
    return out


def cmd_perturb(args) -> int:
    shard = read_shard(args.shard)
    tps = select_true_positives(_predictions(args.predictions), shard)
    records, skipped = build_perturbations(tps, shard, args.mode, args.seed)
    write_perturbations(args.out, records)
    print(json.dumps({"mode": args.mode, "true_positives": len(tps), "records": len(records),
                      "skipped": len(skipped), "skipped_ids": skipped}))
    return 0


def cmd_train(args) -> int:
    shard = read_shard(args.shard)
    config = default_model_config(shard_config(shard), d_model=args.d_model, d_ff=2 * args.d_model,
                                  n_layers=args.layers, lambda_text=args.lambda_text,
                                  lambda_seg=args.lambda_seg, lambda_bce=args.lambda_bce,
                                  lambda_dice=args.lambda_dice)
    model = GroundedModel(config, seed=args.seed)
    if args.verify:
        batch = encode_items(model, shard.qa[:2], shard)
        res = grad_check(model, batch, epsilon=1e-5, fraction=0.002, seed=args.seed)
        print(json.dumps({"grad_check_max_rel_error": res.max_rel_error, "checked": res.n_checked,
                          "worst": res.worst, "passed": res.max_rel_error < 1e-4}))
        if res.max_rel_error >= 1e-4:
            raise CLIError(f"gradient check failed at {res.worst}: relative error {res.max_rel_error:.3g}")
    dtype = torch.float32 if args.dtype == "float32" else torch.float64
    result = train(model, shard, epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size,
                   dtype=dtype)
    save_checkpoint(args.out, result.model)
    curve_path = args.loss_csv or Path(str(args.out) + ".loss.csv")
    write_loss_curve(curve_path, result.curve)
    print(json.dumps({"steps": len(result.curve), "final_total_loss": result.curve[-1][3] if result.curve else None,
                      "checkpoint": str(args.out), "loss_csv": str(curve_path)}))
    return 0


def _plan(args) -> tuple[HighlightPlan, DecodeConfig]:
    return HighlightPlan(beta=args.beta, language_layers=args.language_layers), DecodeConfig(args.alpha)


def cmd_answer(args) -> int:
    shard = read_shard(args.shard)
    model = load_checkpoint(args.checkpoint)
    answerer = Answerer(model)
    plan, decode = _plan(args)
    if args.perturbations is not None:
        records = read_perturbations(args.perturbations)
        texts = answer_perturbations(answerer, shard, records, args.loba, plan, decode)
        rows = [{"base_qa_id": r.base_qa_id, "mode": r.mode, "answer": t} for r, t in zip(records, texts)]
    else:
        answers = answer_shard(answerer, shard, args.loba, plan, decode)
        rows = []
        for item in shard.qa:
            row = {"qa_id": item.qa_id, "answer": answers.answers[item.qa_id]}
            if args.loba:
                row["record"] = answers.records.get(item.qa_id)
            rows.append(row)
    write_jsonl(args.out, rows)
    print(json.dumps({"answered": len(rows), "method": "loba" if args.loba else "plain"}))
    return 0


def _perturbed_answers(path: Path | None) -> list[str] | None:
    if path is None:
        return None
    rows = read_jsonl(path)
    for lineno, rec in enumerate(rows, 1):
        if "answer" not in rec:
            raise CLIError(f"{path}:{lineno}: perturbed prediction for {rec.get('base_qa_id')} has no 'answer'")
    return [r["answer"] for r in rows]


def cmd_eval(args) -> int:
    shard = read_shard(args.shard)
    report = evaluate(_predictions(args.predictions), shard,
                      tpt_after=_perturbed_answers(args.tpt), vpt_after=_perturbed_answers(args.vpt))
    if args.out is not None:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    shard = read_shard(args.shard)
    model = load_checkpoint(args.checkpoint)
    rows = ablation_grid(Answerer(model), shard, language_layers=args.language_layers, seed=args.seed)
    write_ablation_csv(args.out, rows)
    plain = rows[0]
    identity = next(r for r in rows if r["beta"] == 1.0 and r["alpha"] == 0.0)
    print(json.dumps({"rows": len(rows), "plain_closed_f1": plain["closed_f1"],
                      "identity_matches_plain": identity["matches_plain"]}))
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lobavqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=_nonneg_int, default=0, help="single source of randomness (default 0)")
        p.add_argument("--out", type=Path, required=True, help="output path")

    p = sub.add_parser("gen", help="generate a synthetic dataset shard")
    common(p)
    p.add_argument("--scenes", type=_nonneg_int, default=500, help="number of scenes (default 500)")
    p.add_argument("--grid", type=_pos_int, default=24, help="pixels per image side (default 24)")
    p.add_argument("--delta", type=_open_unit, default=0.5, help="IoU_dis threshold (default 0.5)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("perturb", help="build TPT or VPT records from true-positive predictions")
    common(p)
    p.add_argument("--shard", type=_existing, required=True)
    p.add_argument("--predictions", type=_existing, required=True, help="JSONL from `answer`")
    p.add_argument("--mode", choices=("tpt", "vpt"), required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("train", help="train the grounded toy model")
    common(p)
    p.add_argument("--shard", type=_existing, required=True)
    p.add_argument("--epochs", type=_nonneg_int, default=40, help="default 40")
    p.add_argument("--lr", type=_nonneg_float, default=3e-3, help="Adam learning rate (default 3e-3)")
    p.add_argument("--batch-size", type=_pos_int, default=32)
    p.add_argument("--d-model", type=_pos_int, default=48)
    p.add_argument("--layers", type=_pos_int, default=2, help="language layers (default 2)")
    for name in ("text", "seg", "bce", "dice"):
        p.add_argument(f"--lambda-{name}", type=_nonneg_float, default=1.0, help="loss weight (default 1)")
    p.add_argument("--loss-csv", type=Path, default=None, help="default: <out>.loss.csv")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64",
                   help="arithmetic used while optimizing; checkpoints are always float64 (default float64)")
    p.add_argument("--verify", action="store_true", help="run a finite-difference gradient check first")
    p.set_defaults(func=cmd_train)

    def decoding(p):
        p.add_argument("--alpha", type=_nonneg_float, default=0.3, help="contrastive weight (default 0.3)")
        p.add_argument("--beta", type=_pos_float, default=2.0, help="highlight factor (default 2)")
        p.add_argument("--language-layers", action="store_true",
                       help="also highlight image keys inside the language layers")

    p = sub.add_parser("answer", help="answer a shard (or perturbation records) with a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", type=_existing, required=True)
    p.add_argument("--shard", type=_existing, required=True)
    p.add_argument("--perturbations", type=_existing, default=None, help="answer these records instead")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--loba", dest="loba", action="store_true", help="self-prompted decoding")
    mode.add_argument("--plain", dest="loba", action="store_false", help="plain greedy decoding (default)")
    decoding(p)
    p.set_defaults(func=cmd_answer, loba=False)

    p = sub.add_parser("eval", help="score predictions against a shard")
    p.add_argument("--shard", type=_existing, required=True)
    p.add_argument("--predictions", type=_existing, required=True)
    p.add_argument("--tpt", type=_existing, default=None, help="answers to TPT records")
    p.add_argument("--vpt", type=_existing, default=None, help="answers to VPT records")
    p.add_argument("--out", type=Path, default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="beta x alpha grid of closed/open scores as CSV")
    common(p)
    p.add_argument("--checkpoint", type=_existing, required=True)
    p.add_argument("--shard", type=_existing, required=True)
    p.add_argument("--language-layers", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


ERRORS = (CLIError, CorpusError, ShardError, GeometryError, MetricsError, PerturbationError, ShapeError,
          ValueError, KeyError, OSError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"lobavqa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
