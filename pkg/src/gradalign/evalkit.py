"""Dataset ingestion, the occlusion baseline, and the benchmark metrics."""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .misalignment import predict_phrase
from .model import Embedding, load_image_input
from .pipeline import MisalignmentScorer
from .tokenizer import word_spans

PROTOCOLS = ("single-word", "phrase", "word-set", "pairwise")


@dataclass(frozen=True)
class EvalRecord:
    """One dataset sample; ``gold_words`` index into the caption's word spans."""

    image_ref: str
    caption: str
    gold_words: frozenset[int]
    label: int
    human_score: float | None = None


_RECORD_KEYS = {"image", "caption", "gold_words", "label", "human_score"}


def load_dataset(path: str | Path) -> list[EvalRecord]:
    """Parse a line-delimited JSON dataset, validating every record."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise InputError(f"{path}:{lineno}: record must be a JSON object")
        unknown = set(obj) - _RECORD_KEYS
        if unknown:
            raise InputError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
        missing = {"image", "caption", "gold_words", "label"} - set(obj)
        if missing:
            raise InputError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        label = obj["label"]
        if isinstance(label, bool) or label not in (0, 1):
            raise InputError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        gold = obj["gold_words"]
        if not isinstance(gold, list) or not all(
            isinstance(g, int) and not isinstance(g, bool) for g in gold
        ):
            raise InputError(f"{path}:{lineno}: gold_words must be a list of ints")
        if label == 0 and gold:
            raise InputError(f"{path}:{lineno}: aligned record must have empty gold_words")
        if not isinstance(obj["caption"], str) or not isinstance(obj["image"], str):
            raise InputError(f"{path}:{lineno}: image and caption must be strings")
        n_words = len(word_spans(obj["caption"]))
        bad = [g for g in gold if not 0 <= g < n_words]
        if bad:
            raise InputError(
                f"{path}:{lineno}: gold word indices {bad} out of range "
                f"for a {n_words}-word caption"
            )
        human = obj.get("human_score")
        if human is not None:
            human = float(human)
            if not 0.0 <= human <= 1.0:
                raise InputError(f"{path}:{lineno}: human_score must lie in [0, 1]")
        records.append(
            EvalRecord(
                image_ref=str(obj["image"]),
                caption=str(obj["caption"]),
                gold_words=frozenset(gold),
                label=label,
                human_score=human,
            )
        )
    return records


class EvalCounter:
    """Thread-safe counter for similarity evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def increment(self) -> None:
        with self._lock:
            self.count += 1


# ---------------------------------------------------------------------------
# occlusion baseline


def occlusion_deltas(score_fn, caption: str, counter: EvalCounter | None = None) -> list[float]:
    """Score change from dropping each word: exactly 1 + #words evaluations.

    ``score_fn`` maps a caption string to the similarity score.  Positive
    delta means removing the word raises the score, i.e. the word hurts.
    """
    spans = word_spans(caption)
    if not spans:
        raise InputError("occlusion needs a caption with at least one word")

    def scored(text: str) -> float:
        if counter is not None:
            counter.increment()
        return score_fn(text)

    base = scored(caption)
    deltas = []
    for drop in range(len(spans)):
        reduced = " ".join(s.text for i, s in enumerate(spans) if i != drop)
        deltas.append(scored(reduced) - base)
    return deltas


def occlusion_attribution(
    scorer: MisalignmentScorer,
    image,
    caption: str,
    counter: EvalCounter | None = None,
) -> list[float]:
    """Per-word occlusion deltas for one image/caption pair.

    ``image`` may be an ImageInput or a precomputed Embedding; the image is
    encoded once and only text re-encoding is repeated.
    """
    e_v = image if isinstance(image, Embedding) else scorer.image_embedding(image)
    return occlusion_deltas(
        lambda text: scorer.clip_score(e_v, text), caption, counter=counter
    )


def occlusion_predict(deltas: list[float]) -> int:
    """Index of the word whose removal raises the score the most (earliest tie)."""
    if not deltas:
        raise InputError("no occlusion deltas")
    return max(range(len(deltas)), key=lambda i: (deltas[i], -i))


# ---------------------------------------------------------------------------
# metrics


def localization_accuracy(preds, records: list[EvalRecord]) -> float:
    """Fraction of misaligned records whose prediction hits any gold word.

    ``preds`` runs parallel to ``records``; each entry is a word index, a
    collection of word indices (phrase protocol), or None for no prediction.
    Only records with label == 1 count.
    """
    if len(preds) != len(records):
        raise InputError(f"{len(preds)} predictions for {len(records)} records")
    pairs = [(p, r) for p, r in zip(preds, records) if r.label == 1]
    if not pairs:
        raise InputError("localization accuracy undefined without misaligned records")
    correct = 0
    for pred, rec in pairs:
        if pred is None:
            continue
        hits = {int(pred)} if isinstance(pred, (int, np.integer)) else set(pred)
        if hits & rec.gold_words:
            correct += 1
    return correct / len(pairs)


def average_precision(misalign_scores, labels) -> float:
    """Mean precision at the rank of each positive, descending score order.

    Ties keep input order (stable sort).  Higher score must mean "more
    misaligned"; callers pass -f_clipscore or -clipscore accordingly.
    """
    if len(misalign_scores) != len(labels):
        raise InputError("scores and labels must have the same length")
    if any(l not in (0, 1) for l in labels):
        raise InputError("labels must be binary")
    if not any(labels):
        raise InputError("average precision undefined without positive labels")
    if not all(np.isfinite(s) for s in misalign_scores):
        raise InputError("scores must be finite")
    order = sorted(range(len(labels)), key=lambda i: -misalign_scores[i])
    tp = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            tp += 1
            precisions.append(tp / rank)
    return sum(precisions) / len(precisions)


@dataclass(frozen=True)
class PRFResult:
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()  # metrics whose denominator was zero


def word_prf(pred_sets, gold_sets, macro: bool = False) -> PRFResult:
    """Word-level precision/recall/F1, micro-averaged across the dataset.

    ``macro=True`` averages per-sample scores instead (samples where both
    sides are empty count as perfect, one-sided empties as zero).
    """
    if len(pred_sets) != len(gold_sets):
        raise InputError("pred and gold lists must have the same length")
    preds = [set(p) for p in pred_sets]
    golds = [set(g) for g in gold_sets]
    if macro:
        ps, rs, fs = [], [], []
        for p, g in zip(preds, golds):
            tp = len(p & g)
            prec = tp / len(p) if p else (1.0 if not g else 0.0)
            rec = tp / len(g) if g else (1.0 if not p else 0.0)
            ps.append(prec)
            rs.append(rec)
            fs.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        n = len(preds) or 1
        return PRFResult(sum(ps) / n, sum(rs) / n, sum(fs) / n)
    tp = sum(len(p & g) for p, g in zip(preds, golds))
    fp = sum(len(p - g) for p, g in zip(preds, golds))
    fn = sum(len(g - p) for p, g in zip(preds, golds))
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRFResult(precision, recall, f1, tuple(undefined))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.arange(1, len(x) + 1, dtype=np.float64)
    _, inverse = np.unique(x, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise NumericalError("correlation undefined for constant input")
    return float((xc * yc).sum() / denom)


def correlations(x, y) -> tuple[float, float]:
    """(Pearson on raw values, Pearson on mean-tied ranks) for equal-length lists."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("correlation inputs must be equal-length vectors")
    if len(x) < 2:
        raise InputError("correlation needs at least two samples")
    pearson = _pearson(x, y)
    spearman = _pearson(_average_ranks(x), _average_ranks(y))
    return pearson, spearman


def pairwise_accuracy(scores_pos, scores_neg) -> float:
    """Fraction of pairs where the positive caption strictly outscores the negative."""
    if len(scores_pos) != len(scores_neg):
        raise InputError("pairwise lists must have the same length")
    if not scores_pos:
        raise InputError("pairwise accuracy undefined for zero pairs")
    wins = sum(1 for p, n in zip(scores_pos, scores_neg) if p > n)
    return wins / len(scores_pos)


# ---------------------------------------------------------------------------
# protocol driver


@dataclass
class MetricReport:
    """Aggregate metrics; fields not applicable to the protocol stay None."""

    la: float | None = None
    ap: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    pearson: float | None = None
    spearman: float | None = None
    pairwise_accuracy: float | None = None
    n_samples: int = 0
    fps: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "la": self.la,
            "ap": self.ap,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "pairwise_accuracy": self.pairwise_accuracy,
            "n_samples": self.n_samples,
            "fps": self.fps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


@dataclass
class _SampleResult:
    pred: int | None
    flagged: frozenset[int]
    phrase: frozenset[int] | None
    clipscore: float
    f_clipscore: float
    human_score: float | None
    label: int
    image_ref: str


def _evaluate_one(
    scorer: MisalignmentScorer,
    record: EvalRecord,
    base_dir: Path,
    baseline: str,
    counter: EvalCounter | None,
) -> _SampleResult:
    ref = Path(record.image_ref)
    path = ref if ref.is_absolute() else base_dir / ref
    image = load_image_input(path, scorer.model.config)
    e_v = scorer.image_embedding(image)
    report = scorer.analyze(e_v, record.caption)
    if baseline == "occlusion":
        deltas = occlusion_attribution(scorer, e_v, record.caption, counter=counter)
        pred = occlusion_predict(deltas)
    else:
        pred = None if report.predicted_word is None else report.predicted_word.word_index
    best_phrase = predict_phrase(report.phrases)
    return _SampleResult(
        pred=pred,
        flagged=frozenset(report.misaligned_word_indices()),
        phrase=None if best_phrase is None else frozenset(best_phrase.word_indices),
        clipscore=report.clipscore,
        f_clipscore=report.f_clipscore,
        human_score=record.human_score,
        label=record.label,
        image_ref=record.image_ref,
    )


def evaluate_records(
    scorer: MisalignmentScorer,
    records: list[EvalRecord],
    base_dir: str | Path,
    protocol: str,
    baseline: str = "gradient",
    workers: int = 1,
    counter: EvalCounter | None = None,
    measure_fps: bool = False,
) -> MetricReport:
    """Run one evaluation protocol over a dataset and aggregate the metrics.

    Records are processed independently (optionally across worker threads);
    aggregation preserves dataset order, so results do not depend on the
    worker count.
    """
    if protocol not in PROTOCOLS:
        raise InputError(f"unknown protocol {protocol!r}")
    if baseline not in ("gradient", "occlusion"):
        raise InputError(f"unknown baseline {baseline!r}")
    if baseline == "occlusion" and protocol != "single-word":
        raise InputError("the occlusion baseline only supports the single-word protocol")
    if not records:
        raise InputError("empty dataset")
    base_dir = Path(base_dir)

    started = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda r: _evaluate_one(scorer, r, base_dir, baseline, counter),
                    records,
                )
            )
    else:
        results = [_evaluate_one(scorer, r, base_dir, baseline, counter) for r in records]
    elapsed = time.perf_counter() - started

    report = MetricReport(n_samples=len(records))
    if measure_fps:
        report.fps = len(records) / elapsed if elapsed > 0 else None

    labels = [r.label for r in records]
    if protocol in ("single-word", "phrase"):
        if protocol == "single-word":
            preds = [s.pred for s in results]
        else:
            preds = [s.phrase for s in results]
        if any(labels):
            report.la = localization_accuracy(preds, records)
            report.ap = average_precision([-s.f_clipscore for s in results], labels)
    elif protocol == "word-set":
        prf = word_prf([s.flagged for s in results], [r.gold_words for r in records])
        report.precision, report.recall, report.f1 = prf.precision, prf.recall, prf.f1
        scored = [(s.f_clipscore, s.human_score) for s in results if s.human_score is not None]
        if len(scored) >= 2:
            report.pearson, report.spearman = correlations(
                [f for f, _ in scored], [h for _, h in scored]
            )
    else:  # pairwise
        groups: dict[str, tuple[list[float], list[float]]] = {}
        for s in results:
            pos, neg = groups.setdefault(s.image_ref, ([], []))
            (neg if s.label else pos).append(s.f_clipscore)
        pos_scores, neg_scores = [], []
        for ref, (pos, neg) in groups.items():
            if len(pos) != len(neg):
                raise InputError(
                    f"image {ref!r} has {len(pos)} aligned and {len(neg)} misaligned "
                    "captions; the pairwise protocol needs matched pairs"
                )
            pos_scores.extend(pos)
            neg_scores.extend(neg)
        report.pairwise_accuracy = pairwise_accuracy(pos_scores, neg_scores)
    return report
