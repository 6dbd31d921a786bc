import json

import numpy as np
import pytest

from gradalign import testing
from gradalign.tokenizer import SPECIAL, TokenSequence, Tokenizer, Vocabulary


@pytest.fixture(scope="session")
def demo_vocab(tmp_path_factory) -> Vocabulary:
    path = testing.write_merges_file(tmp_path_factory.mktemp("vocab") / "merges.txt")
    return Vocabulary.from_file(path)


@pytest.fixture(scope="session")
def tokenizer(demo_vocab) -> Tokenizer:
    return Tokenizer(demo_vocab)


@pytest.fixture(scope="session")
def tiny_model_f64():
    return testing.build_model(testing.tiny_config(), seed=0, dtype=np.float64)


@pytest.fixture(scope="session")
def tiny_model_f32():
    return testing.build_model(testing.tiny_config(), seed=0, dtype=np.float32)


def toy_tokens(n: int, z: int, vocab_size: int, seed: int = 0) -> TokenSequence:
    """A raw token sequence for model-level tests that bypass the tokenizer."""
    rng = np.random.default_rng(seed)
    ids = (
        [vocab_size - 2]
        + [int(v) for v in rng.integers(0, 512, size=z - 1)]
        + [vocab_size - 1]
        + [0] * (n - 1 - z)
    )
    word_map = [SPECIAL] + [0] * (z - 1) + [SPECIAL] * (n - z)
    return TokenSequence(
        ids=ids, z=z, word_map=word_map, raw_text="toy", template_prefix_len=0
    )


def write_synthetic_dataset(dir_path, config, rows, seed_base=100):
    """Write image sidecars plus a JSONL dataset; returns the dataset path.

    Each row: {caption, gold, label, human_score?, image?}.  Rows may share
    an image by naming the same ``image`` file.
    """
    lines = []
    for i, row in enumerate(rows):
        name = row.get("image", f"img_{i}.safetensors")
        path = dir_path / name
        if not path.exists():
            testing.write_image_sidecar(
                path, testing.random_image_pixels(config, seed=seed_base + i)
            )
        lines.append(
            json.dumps(
                {
                    "image": name,
                    "caption": row["caption"],
                    "gold_words": sorted(row.get("gold", [])),
                    "label": row["label"],
                    "human_score": row.get("human_score"),
                }
            )
        )
    dataset = dir_path / "data.jsonl"
    dataset.write_text("\n".join(lines) + "\n")
    return dataset
