"""Dense image-text misalignment detection from CLIP attention gradients.

Signed gradient-times-attention attributions over the text encoder flag
caption words that fight the image; F-CLIPScore folds them into a single
fine-grained alignment score.
"""

from .attribution import (
    AttributionVariant,
    GradientTrace,
    RelevanceMap,
    SIGNED,
    attention_gradients,
    relevance,
    token_attributions,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    GradAlignError,
    InputError,
    LoadError,
    NumericalError,
)
from .evalkit import (
    EvalCounter,
    EvalRecord,
    MetricReport,
    average_precision,
    correlations,
    evaluate_records,
    load_dataset,
    localization_accuracy,
    occlusion_attribution,
    occlusion_deltas,
    occlusion_predict,
    pairwise_accuracy,
    word_prf,
)
from .misalignment import (
    AlignmentReport,
    Phrase,
    WordAttribution,
    detect,
    f_clipscore,
    merge_phrases,
    predict_phrase,
    predict_single_word,
    word_attributions,
)
from .model import (
    AttentionTrace,
    Embedding,
    ImageInput,
    Model,
    ModelConfig,
    encode_image,
    encode_text,
    load_checkpoint,
    load_image_input,
    load_model,
    preprocess_image,
    read_named_tensors,
    similarity,
    write_named_tensors,
)
from .pipeline import MisalignmentScorer
from .tokenizer import (
    SPECIAL,
    TEMPLATE,
    TokenSequence,
    Tokenizer,
    Vocabulary,
    WordSpan,
    word_spans,
)

__version__ = "0.1.0"
