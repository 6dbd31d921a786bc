"""Byte-level BPE tokenization compatible with CLIP's vocabulary.

Provides fixed-length encoding with an optional prompt template, plus a
character-span alignment between tokens and caption words so that per-token
attributions can be pooled into per-word scores.
"""

from __future__ import annotations

import gzip
import unicodedata
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import regex

from .errors import ConfigError, ConsistencyError, InputError

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"

# word_map sentinels for token positions that carry no caption word
SPECIAL = -1
TEMPLATE = -2

# CLIP's pre-tokenization pattern: contractions, letter runs, single digits,
# and runs of everything else (never crosses whitespace).
_CHUNK_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    regex.IGNORECASE,
)


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map used by the byte-level BPE."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _ensure_text(value, what: str) -> str:
    if isinstance(value, bytes):
        try:
            return value.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"{what} is not valid UTF-8: {exc}") from exc
    if not isinstance(value, str):
        raise InputError(f"{what} must be str or UTF-8 bytes, got {type(value).__name__}")
    try:
        value.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InputError(f"{what} contains unencodable characters: {exc}") from exc
    return value


def _clean(text: str) -> str:
    # lowercasing + whitespace collapse; no further unicode normalization
    return " ".join(text.split()).lower()


def _is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


@dataclass(frozen=True)
class WordSpan:
    """One caption word unit with its character offsets into the raw caption."""

    text: str
    char_start: int
    char_end: int
    is_punctuation: bool = False


def word_spans(caption: str) -> list[WordSpan]:
    """Split a caption into word units.

    Units are whitespace-delimited; a trailing punctuation run inside a unit
    becomes its own span flagged ``is_punctuation`` so that e.g. a final '.'
    is addressable as a prediction target.
    """
    caption = _ensure_text(caption, "caption")
    spans: list[WordSpan] = []
    i, n = 0, len(caption)
    while i < n:
        if caption[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not caption[j].isspace():
            j += 1
        unit = caption[i:j]
        k = len(unit)
        while k > 0 and _is_punct_char(unit[k - 1]):
            k -= 1
        if 0 < k < len(unit):
            spans.append(WordSpan(unit[:k], i, i + k, False))
            spans.append(WordSpan(unit[k:], i + k, j, True))
        else:
            spans.append(WordSpan(unit, i, j, is_punctuation=(k == 0)))
        i = j
    return spans


@dataclass
class TokenSequence:
    """Fixed-length token ids plus the token -> word alignment.

    ``ids[0]`` is start-of-text, ``ids[z]`` end-of-text, everything past ``z``
    the pad id.  ``word_map[i]`` is the caption word index for position ``i``,
    or SPECIAL / TEMPLATE for scaffolding tokens.
    """

    ids: list[int]
    z: int
    word_map: list[int]
    raw_text: str
    template_prefix_len: int

    def caption_token_ids(self) -> list[int]:
        return [tid for tid, w in zip(self.ids, self.word_map) if w >= 0]


class Vocabulary:
    """CLIP-style BPE vocabulary derived from an ordered merge list.

    Token ids: 256 base byte symbols, the same 256 with the '</w>' end-of-word
    marker, one token per merge, then the two specials.
    """

    def __init__(self, merges: list[tuple[str, str]]):
        byte_enc = bytes_to_unicode()
        base = list(byte_enc.values())
        tokens = base + [ch + "</w>" for ch in base]
        for pair in merges:
            tokens.append("".join(pair))
        tokens.extend([SOT_TOKEN, EOT_TOKEN])
        self.merges = list(merges)
        self.id_to_token = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ConfigError("duplicate tokens in merge list")
        self.ranks = {pair: i for i, pair in enumerate(merges)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def sot_id(self) -> int:
        return self.token_to_id[SOT_TOKEN]

    @property
    def eot_id(self) -> int:
        return self.token_to_id[EOT_TOKEN]

    @property
    def pad_id(self) -> int:
        # CLIP pads with id 0; the id-0 token is never produced at pad positions
        # since word_map marks them SPECIAL.
        return 0

    @classmethod
    def from_file(cls, path: str | Path, vocab_size: int | None = None) -> "Vocabulary":
        """Load the standard merges artifact (plain text or gzip, header line first).

        ``vocab_size`` limits how many merge lines are used (the canonical CLIP
        vocabulary keeps ``vocab_size - 512 - 2`` merges of a longer file).
        """
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read merges file {path}: {exc}") from exc
        if blob[:2] == b"\x1f\x8b":
            blob = gzip.decompress(blob)
        lines = blob.decode("utf-8").splitlines()
        if not lines:
            raise ConfigError(f"merges file {path} is empty")
        merge_lines = [ln for ln in lines[1:] if ln.strip()]
        if vocab_size is not None:
            keep = vocab_size - 512 - 2
            if keep < 0:
                raise ConfigError(f"vocab_size {vocab_size} below the 514 base tokens")
            if len(merge_lines) < keep:
                raise ConfigError(
                    f"merges file has {len(merge_lines)} rules, need {keep} for vocab_size {vocab_size}"
                )
            merge_lines = merge_lines[:keep]
        merges = []
        for ln in merge_lines:
            parts = ln.split()
            if len(parts) != 2:
                raise ConfigError(f"malformed merge line in {path}: {ln!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


class Tokenizer:
    """Pure-function tokenizer over an immutable :class:`Vocabulary`."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._byte_encoder = bytes_to_unicode()
        self._byte_decoder = {v: k for k, v in self._byte_encoder.items()}
        self._bpe = lru_cache(maxsize=32768)(self._bpe_uncached)

    def _bpe_uncached(self, chunk: str) -> tuple[str, ...]:
        word = tuple(self._byte_encoder[b] for b in chunk.encode("utf-8"))
        word = word[:-1] + (word[-1] + "</w>",)
        ranks = self.vocab.ranks
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: ranks.get(p, float("inf")))
            if best not in ranks:
                break
            first, second = best
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
        return word

    def _bpe_ids(self, text: str) -> list[int]:
        ids: list[int] = []
        lookup = self.vocab.token_to_id
        for chunk in _CHUNK_PATTERN.findall(text):
            for tok in self._bpe(chunk):
                try:
                    ids.append(lookup[tok])
                except KeyError as exc:
                    raise ConfigError(f"token {tok!r} missing from vocabulary") from exc
        return ids

    def encode(self, text, template: str = "", context_length: int = 77) -> TokenSequence:
        """Encode ``template + text`` to exactly ``context_length`` ids.

        The word_map is populated: template tokens map to TEMPLATE, SOT/EOS/pad
        to SPECIAL, caption tokens to their word index per :func:`word_spans`.
        Overflow truncates body tokens but keeps EOS as the final id.
        """
        if context_length < 3:
            raise ConfigError(f"context_length must be >= 3, got {context_length}")
        text = _ensure_text(text, "caption")
        template = _ensure_text(template, "template")

        template_ids = self._bpe_ids(_clean(template))
        ids = [self.vocab.sot_id] + template_ids
        word_map = [SPECIAL] + [TEMPLATE] * len(template_ids)
        for w, span in enumerate(word_spans(text)):
            for tid in self._bpe_ids(_clean(span.text)):
                ids.append(tid)
                word_map.append(w)
        ids.append(self.vocab.eot_id)
        word_map.append(SPECIAL)

        if len(ids) > context_length:
            ids = ids[:context_length]
            word_map = word_map[:context_length]
            ids[-1] = self.vocab.eot_id
            word_map[-1] = SPECIAL
        z = len(ids) - 1
        pad = context_length - len(ids)
        ids.extend([self.vocab.pad_id] * pad)
        word_map.extend([SPECIAL] * pad)
        template_kept = min(len(template_ids), max(z - 1, 0))
        return TokenSequence(
            ids=ids,
            z=z,
            word_map=word_map,
            raw_text=text,
            template_prefix_len=template_kept,
        )

    def align(self, tokens: TokenSequence, spans: list[WordSpan]) -> TokenSequence:
        """Re-derive the token -> word assignment and validate it against ``tokens``.

        Walks the spans in order, re-encoding each one and matching the ids;
        any divergence means tokens and spans came from different captions.
        """
        n = len(tokens.ids)
        word_map = [SPECIAL] * n
        pos = 1
        for _ in range(tokens.template_prefix_len):
            word_map[pos] = TEMPLATE
            pos += 1
        truncated = False
        for w, span in enumerate(spans):
            for tid in self._bpe_ids(_clean(span.text)):
                if pos >= tokens.z:
                    truncated = True
                    break
                if tokens.ids[pos] != tid:
                    raise ConsistencyError(
                        f"token {tokens.ids[pos]} at position {pos} does not match "
                        f"id {tid} re-derived from span {span.text!r}"
                    )
                word_map[pos] = w
                pos += 1
            if truncated:
                break
        if not truncated and pos != tokens.z:
            raise ConsistencyError(
                f"{tokens.z - pos} caption tokens not covered by the provided spans"
            )
        return replace(tokens, word_map=word_map)

    def decode(self, ids) -> str:
        """Inverse of the BPE: ids -> text, with '</w>' markers as spaces."""
        tokens = []
        for i in ids:
            if not 0 <= i < len(self.vocab.id_to_token):
                raise InputError(f"token id {i} out of range")
            tokens.append(self.vocab.id_to_token[i])
        raw = bytearray(self._byte_decoder[c] for c in "".join(tokens))
        return raw.decode("utf-8", errors="replace").replace("</w>", " ")
