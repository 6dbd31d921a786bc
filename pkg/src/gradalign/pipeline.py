"""End-to-end scoring: image + caption -> AlignmentReport."""

from __future__ import annotations

from dataclasses import dataclass

from .attribution import (
    AttributionVariant,
    SIGNED,
    attention_gradients,
    relevance,
    token_attributions,
)
from .misalignment import (
    AlignmentReport,
    detect,
    f_clipscore,
    merge_phrases,
    predict_single_word,
    word_attributions,
)
from .model import Embedding, Model, encode_image, encode_text, similarity
from .tokenizer import Tokenizer


@dataclass
class MisalignmentScorer:
    """Composes tokenizer, encoders, attribution and detection.

    Defaults for epsilon / l_start / template come from the model config;
    pass overrides to reproduce ablation settings.  Instances are stateless
    apart from immutable members and safe to share across worker threads.
    """

    model: Model
    tokenizer: Tokenizer
    epsilon: float | None = None
    l_start: int | None = None
    variant: AttributionVariant = SIGNED
    template: str | None = None

    @property
    def resolved_epsilon(self) -> float:
        return self.model.config.epsilon if self.epsilon is None else self.epsilon

    @property
    def resolved_l_start(self) -> int:
        return self.model.config.resolved_l_start if self.l_start is None else self.l_start

    @property
    def resolved_template(self) -> str:
        return self.model.config.template if self.template is None else self.template

    def image_embedding(self, image: ImageInput) -> Embedding:
        return encode_image(self.model, image)

    def clip_score(self, e_v: Embedding, caption: str) -> float:
        """Plain cosine score for a caption, without attribution work."""
        tokens = self.tokenizer.encode(
            caption, self.resolved_template, self.model.config.context_length
        )
        e_t, _ = encode_text(self.model, tokens)
        return similarity(e_v, e_t)

    def analyze(self, image, caption: str) -> AlignmentReport:
        """Full report for one (image, caption) pair.

        ``image`` may be an ImageInput (encoded here) or a precomputed
        image Embedding, which avoids re-running the vision tower when one
        image is scored against several captions.
        """
        e_v = image if isinstance(image, Embedding) else self.image_embedding(image)
        cfg = self.model.config
        tokens = self.tokenizer.encode(
            caption, self.resolved_template, cfg.context_length
        )
        e_t, trace = encode_text(self.model, tokens)
        clip = similarity(e_v, e_t)

        grads = attention_gradients(self.model, tokens, e_v)
        rel = relevance(trace, grads, self.resolved_l_start, self.variant)
        tok_attr = token_attributions(rel, tokens.z)
        words = detect(word_attributions(tokens, tok_attr), self.resolved_epsilon)

        scored = [w for w in words if not w.unscored]
        predicted = predict_single_word(words) if scored else None
        return AlignmentReport(
            clipscore=clip,
            f_clipscore=f_clipscore(clip, words),
            epsilon=self.resolved_epsilon,
            l_start=self.resolved_l_start,
            words=words,
            phrases=merge_phrases(words),
            predicted_word=predicted,
        )
