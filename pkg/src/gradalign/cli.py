"""Command-line front end: score one pair, run protocols, sweep ablations.

stdout carries only the JSON/CSV payload; diagnostics go to stderr.
Exit codes: 0 success, 1 input error, 2 configuration error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

from .attribution import VARIANT_MODES, AttributionVariant
from .errors import ConfigError, GradAlignError, InputError
from .evalkit import PROTOCOLS, evaluate_records, load_dataset
from .model import ModelConfig, load_checkpoint, load_image_input
from .pipeline import MisalignmentScorer
from .tokenizer import Tokenizer, Vocabulary

VARIANT_FLAGS = {
    "signed": "signed",
    "relu-head": "relu_before_head_mean",
    "relu-layer": "relu_before_layer_mean",
    "grad-only": "grad_only",
}
_FLAG_FOR_MODE = {v: k for k, v in VARIANT_FLAGS.items()}

_ABLATE_COLUMNS = (
    "la",
    "ap",
    "precision",
    "recall",
    "f1",
    "pearson",
    "spearman",
    "pairwise_accuracy",
    "n_samples",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradalign",
        description="Detect misaligned caption words from CLIP attention gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="model config JSON")
    common.add_argument("--weights", required=True, help="named-tensor checkpoint")
    common.add_argument("--epsilon", type=float, default=None, help="misalignment threshold (< 0)")
    common.add_argument("--l-start", type=int, default=None, help="first layer of the layer mean (1-based)")
    common.add_argument(
        "--variant",
        choices=sorted(VARIANT_FLAGS),
        default="signed",
        help="attribution variant",
    )
    common.add_argument("--template", default=None, help="prompt template prepended to captions")
    common.add_argument("--output", default=None, help="write the payload to a file instead of stdout")

    p_score = sub.add_parser("score", parents=[common], help="score one image/caption pair")
    p_score.add_argument("image", help="image file (PNG/JPEG) or .safetensors CHW sidecar")
    p_score.add_argument("caption")
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("eval", parents=[common], help="run an evaluation protocol")
    p_eval.add_argument("dataset", help="line-delimited JSON dataset")
    p_eval.add_argument("--protocol", choices=PROTOCOLS, default="single-word")
    p_eval.add_argument("--baseline", choices=("gradient", "occlusion"), default="gradient")
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--fps", action="store_true", help="report samples/second")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", parents=[common], help="sweep a hyperparameter, CSV out")
    p_ablate.add_argument("dataset")
    p_ablate.add_argument("--sweep", choices=("layers", "epsilon", "variant"), required=True)
    p_ablate.add_argument("--protocol", choices=PROTOCOLS, default="single-word")
    p_ablate.add_argument("--baseline", choices=("gradient", "occlusion"), default="gradient")
    p_ablate.add_argument(
        "--epsilon-values",
        default="-0.00001,-0.00005",
        help="comma-separated thresholds for the epsilon sweep",
    )
    p_ablate.add_argument("--workers", type=int, default=1)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def _load_scorer(args) -> MisalignmentScorer:
    config = ModelConfig.from_json_file(args.config)
    if config.merges_path is None:
        raise ConfigError("config must set merges_path to the BPE merges file")
    merges = Path(config.merges_path)
    if not merges.is_absolute():
        merges = Path(args.config).parent / merges
    vocab = Vocabulary.from_file(merges, vocab_size=config.vocab_size)
    model = load_checkpoint(config, args.weights)
    return MisalignmentScorer(
        model=model,
        tokenizer=Tokenizer(vocab),
        epsilon=args.epsilon,
        l_start=args.l_start,
        variant=AttributionVariant(VARIANT_FLAGS[args.variant]),
        template=args.template,
    )


def _emit(payload: str, output: str | None) -> None:
    if output:
        Path(output).write_text(payload)
    else:
        sys.stdout.write(payload)


def cmd_score(args) -> int:
    scorer = _load_scorer(args)
    image = load_image_input(args.image, scorer.model.config)
    report = scorer.analyze(image, args.caption)
    _emit(report.to_json() + "\n", args.output)
    return 0


def cmd_eval(args) -> int:
    scorer = _load_scorer(args)
    records = load_dataset(args.dataset)
    metrics = evaluate_records(
        scorer,
        records,
        base_dir=Path(args.dataset).parent,
        protocol=args.protocol,
        baseline=args.baseline,
        workers=args.workers,
        measure_fps=args.fps,
    )
    _emit(metrics.to_json() + "\n", args.output)
    return 0


def cmd_ablate(args) -> int:
    scorer = _load_scorer(args)
    records = load_dataset(args.dataset)
    base_dir = Path(args.dataset).parent

    if args.sweep == "layers":
        points = [
            ("layers", l, replace(scorer, l_start=l))
            for l in range(scorer.model.config.text_layers, 0, -1)
        ]
    elif args.sweep == "epsilon":
        try:
            values = [float(v) for v in args.epsilon_values.split(",") if v.strip()]
        except ValueError as exc:
            raise InputError(f"bad --epsilon-values: {exc}") from exc
        if not values:
            raise InputError("--epsilon-values is empty")
        points = [("epsilon", eps, replace(scorer, epsilon=eps)) for eps in values]
    else:
        points = [
            ("variant", _FLAG_FOR_MODE[mode], replace(scorer, variant=AttributionVariant(mode)))
            for mode in VARIANT_MODES
        ]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sweep", "value") + _ABLATE_COLUMNS)
    for name, value, point_scorer in points:
        metrics = evaluate_records(
            point_scorer,
            records,
            base_dir=base_dir,
            protocol=args.protocol,
            baseline=args.baseline,
            workers=args.workers,
        )
        row = metrics.to_json_dict()
        writer.writerow(
            [name, value] + ["" if row[c] is None else row[c] for c in _ABLATE_COLUMNS]
        )
    _emit(buf.getvalue(), args.output)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GradAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
