"""Word-level aggregation, threshold detection, phrases, and F-CLIPScore."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, InputError
from .tokenizer import TokenSequence, word_spans


@dataclass(frozen=True)
class WordAttribution:
    """Per-word attribution: mean of the word's token attributions.

    ``w`` is None for unscored words, i.e. words whose tokens all fell past
    the context window; those are never flagged misaligned.
    """

    word_index: int
    text: str
    w: float | None
    misaligned: bool = False
    unscored: bool = False
    is_punctuation: bool = False


@dataclass(frozen=True)
class Phrase:
    """Maximal run of consecutive misaligned words; start/end are inclusive."""

    start: int
    end: int
    score: float

    @property
    def word_indices(self) -> range:
        return range(self.start, self.end + 1)


def word_attributions(tokens: TokenSequence, token_attr) -> list[WordAttribution]:
    """Pool token attributions into one value per caption word.

    Template and special positions are excluded; a word with zero in-window
    tokens comes back unscored.
    """
    attr = np.asarray(token_attr, dtype=np.float64)
    if attr.shape != (len(tokens.ids),):
        raise InputError(
            f"token attribution length {attr.shape} != sequence length {len(tokens.ids)}"
        )
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for pos, w in enumerate(tokens.word_map):
        if w >= 0:
            sums[w] = sums.get(w, 0.0) + float(attr[pos])
            counts[w] = counts.get(w, 0) + 1
    out = []
    for idx, span in enumerate(word_spans(tokens.raw_text)):
        c = counts.get(idx, 0)
        if c:
            out.append(
                WordAttribution(
                    word_index=idx,
                    text=span.text,
                    w=sums[idx] / c,
                    is_punctuation=span.is_punctuation,
                )
            )
        else:
            out.append(
                WordAttribution(
                    word_index=idx,
                    text=span.text,
                    w=None,
                    unscored=True,
                    is_punctuation=span.is_punctuation,
                )
            )
    return out


def detect(words: list[WordAttribution], epsilon: float) -> list[WordAttribution]:
    """Flag words whose attribution falls strictly below the negative threshold."""
    if not epsilon < 0:
        raise ConfigError(f"epsilon must be negative, got {epsilon}")
    return [
        replace(word, misaligned=(not word.unscored and word.w < epsilon))
        for word in words
    ]


def predict_single_word(words: list[WordAttribution]) -> WordAttribution:
    """Forced single prediction: the scored word with the lowest attribution."""
    scored = [w for w in words if not w.unscored]
    if not scored:
        raise InputError("no scored words to predict from")
    return min(scored, key=lambda w: (w.w, w.word_index))


def merge_phrases(words: list[WordAttribution]) -> list[Phrase]:
    """Concatenate neighboring misaligned words; punctuation never joins a phrase."""
    phrases: list[Phrase] = []
    run: list[WordAttribution] = []

    def flush():
        if run:
            phrases.append(
                Phrase(
                    start=run[0].word_index,
                    end=run[-1].word_index,
                    score=sum(w.w for w in run) / len(run),
                )
            )
            run.clear()

    for word in words:
        if word.misaligned and not word.is_punctuation:
            if run and word.word_index != run[-1].word_index + 1:
                flush()
            run.append(word)
        else:
            flush()
    flush()
    return phrases


def predict_phrase(phrases: list[Phrase]) -> Phrase | None:
    """The phrase protocol's prediction: lowest mean score, earliest on ties."""
    if not phrases:
        return None
    return min(phrases, key=lambda p: (p.score, p.start))


def f_clipscore(score: float, words: list[WordAttribution]) -> float:
    """(1 - score) times the summed attributions of flagged words; 0 if none."""
    if not -1.0 <= score <= 1.0:
        raise InputError(f"alignment score {score} outside [-1, 1]")
    if score < 0.0:
        warnings.warn(
            "F-CLIPScore is hard to interpret when the global score is negative",
            RuntimeWarning,
            stacklevel=2,
        )
    flagged = [w.w for w in words if w.misaligned]
    if not flagged:
        return 0.0
    return (1.0 - score) * sum(flagged)


@dataclass
class AlignmentReport:
    """Full per-caption result, serializable to the stable JSON schema."""

    clipscore: float
    f_clipscore: float
    epsilon: float
    l_start: int
    words: list[WordAttribution]
    phrases: list[Phrase]
    predicted_word: WordAttribution | None

    def misaligned_word_indices(self) -> set[int]:
        return {w.word_index for w in self.words if w.misaligned}

    def to_json_dict(self) -> dict:
        return {
            "clipscore": self.clipscore,
            "f_clipscore": self.f_clipscore,
            "epsilon": self.epsilon,
            "l_start": self.l_start,
            "words": [
                {
                    "text": w.text,
                    "w": w.w,
                    "misaligned": w.misaligned,
                    "unscored": w.unscored,
                }
                for w in self.words
            ],
            "phrases": [
                {"start": p.start, "end": p.end, "score": p.score} for p in self.phrases
            ],
            "predicted_word": (
                None
                if self.predicted_word is None
                else {
                    "index": self.predicted_word.word_index,
                    "text": self.predicted_word.text,
                    "w": self.predicted_word.w,
                }
            ),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)
