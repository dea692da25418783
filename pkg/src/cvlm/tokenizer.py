"""Byte-level BPE tokenizer with ordered merge rules and special tokens.

Text is pre-split by a configurable GPT-2-style regex, each piece is
mapped to printable stand-in characters byte by byte, and merge rules are
applied highest-priority-first. Round-tripping is total as long as the
vocabulary carries all 256 byte tokens. Special tokens sit above the base
vocabulary; only the image placeholder literal is matched inside raw text.
"""

from __future__ import annotations

import codecs
import json
import re
from dataclasses import dataclass, field

IMAGE_PLACEHOLDER = "image_placeholder"
END_OF_TEXT = "end_of_text"
PAD = "pad"

# stdlib-re rendition of the GPT-2 pre-tokenizer ([^\W\d_] = unicode letters)
DEFAULT_PRETOKEN_PATTERN = (
    r"'s|'t|'re|'ve|'m|'ll|'d"
    r"| ?[^\W\d_]+| ?\d+| ?(?:[^\w\s]|_)+|\s+(?!\S)|\s+"
)


class VocabError(ValueError):
    pass


def _byte_to_unicode() -> dict[int, str]:
    """GPT-2's reversible byte -> printable-char table."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(ord("¡"), ord("¬") + 1))
          + list(range(ord("®"), ord("ÿ") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(bs, cs)}


BYTE_TO_CHAR = _byte_to_unicode()
CHAR_TO_BYTE = {c: b for b, c in BYTE_TO_CHAR.items()}


@dataclass
class Vocab:
    """Immutable token table: dense ids, ordered merges, special tokens."""

    token_to_id: dict[str, int]
    id_to_token: list[str]
    merge_ranks: dict[tuple[str, str], int]
    specials: dict[str, int]
    special_literals: dict[str, str]
    pretoken_pattern: str = DEFAULT_PRETOKEN_PATTERN
    _regex: re.Pattern = field(init=False, repr=False)
    _bpe_cache: dict[str, tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_regex", re.compile(self.pretoken_pattern))
        object.__setattr__(self, "_bpe_cache", {})

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def special_id(self, role: str) -> int | None:
        return self.specials.get(role)


def load_vocab(vocab_path, merges_path, specials: dict[str, str],
               pretoken_pattern: str = DEFAULT_PRETOKEN_PATTERN) -> Vocab:
    """Load a token->id JSON table plus an ordered merges file.

    ``specials`` maps role names (image_placeholder, end_of_text, pad) to
    their literal strings; each literal receives a fresh id above the base
    vocabulary and must not collide with an existing token.
    """
    with open(vocab_path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise VocabError(f"{vocab_path}: vocab parse error at line {e.lineno}: {e.msg}")
    if not isinstance(raw, dict):
        raise VocabError(f"{vocab_path}: vocab file must be a JSON object")

    token_to_id: dict[str, int] = {}
    seen_ids: dict[int, str] = {}
    for token, tid in raw.items():
        if not isinstance(tid, int):
            raise VocabError(f"{vocab_path}: id for token {token!r} is not an integer")
        if tid in seen_ids:
            raise VocabError(
                f"{vocab_path}: duplicate id {tid} for tokens {seen_ids[tid]!r} and {token!r}")
        seen_ids[tid] = token
        token_to_id[token] = tid
    n = len(token_to_id)
    if sorted(seen_ids) != list(range(n)):
        raise VocabError(f"{vocab_path}: token ids are not dense in [0, {n})")
    id_to_token = [seen_ids[i] for i in range(n)]

    merge_ranks: dict[tuple[str, str], int] = {}
    with open(merges_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise VocabError(f"{merges_path}: line {lineno}: expected 'LEFT RIGHT'")
            pair = (parts[0], parts[1])
            if pair in merge_ranks:
                raise VocabError(f"{merges_path}: line {lineno}: duplicate merge {line!r}")
            if parts[0] + parts[1] not in token_to_id:
                raise VocabError(
                    f"{merges_path}: line {lineno}: merged token {parts[0] + parts[1]!r} "
                    "missing from vocab")
            merge_ranks[pair] = len(merge_ranks)

    special_ids: dict[str, int] = {}
    for role, literal in specials.items():
        if literal in token_to_id:
            raise VocabError(
                f"special {role!r} literal {literal!r} collides with vocab id "
                f"{token_to_id[literal]}")
        special_ids[role] = len(id_to_token)
        token_to_id[literal] = special_ids[role]
        id_to_token.append(literal)

    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token,
                 merge_ranks=merge_ranks, specials=special_ids,
                 special_literals=dict(specials), pretoken_pattern=pretoken_pattern)


def _bpe(vocab: Vocab, piece: str) -> tuple[str, ...]:
    """Apply merges to one pre-token piece (already in byte-char space)."""
    cached = vocab._bpe_cache.get(piece)
    if cached is not None:
        return cached
    word = tuple(piece)
    while len(word) >= 2:
        ranks = vocab.merge_ranks
        best = None
        best_rank = None
        for pair in zip(word, word[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = pair, r
        if best is None:
            break
        merged = []
        i = 0
        while i < len(word):
            if i < len(word) - 1 and (word[i], word[i + 1]) == best:
                merged.append(word[i] + word[i + 1])
                i += 2
            else:
                merged.append(word[i])
                i += 1
        word = tuple(merged)
    vocab._bpe_cache[piece] = word
    return word


def _encode_segment(vocab: Vocab, text: str, byte_base: int,
                    ids: list[int], spans: list[tuple[int, int]]) -> int:
    """Encode plain text (no special literals); returns the next byte offset."""
    byte_pos = byte_base
    char_pos = 0
    for m in vocab._regex.finditer(text):
        if m.start() > char_pos:
            byte_pos += len(text[char_pos:m.start()].encode("utf-8"))
        piece = m.group()
        char_pos = m.end()
        chars = "".join(BYTE_TO_CHAR[b] for b in piece.encode("utf-8"))
        for token in _bpe(vocab, chars):
            tid = vocab.token_to_id.get(token)
            if tid is None:
                raise VocabError(
                    f"token {token!r} not in vocab (incomplete byte coverage)")
            ids.append(tid)
            spans.append((byte_pos, byte_pos + len(token)))
            byte_pos += len(token)
    if char_pos < len(text):
        byte_pos += len(text[char_pos:].encode("utf-8"))
    return byte_pos


def encode_with_offsets(vocab: Vocab, text: str) -> tuple[list[int], list[tuple[int, int]]]:
    """Encode and report each token's byte span in the UTF-8 input."""
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    placeholder = vocab.special_literals.get(IMAGE_PLACEHOLDER)
    if placeholder and placeholder in text:
        pid = vocab.specials[IMAGE_PLACEHOLDER]
        plen = len(placeholder.encode("utf-8"))
        byte_pos = 0
        segments = text.split(placeholder)
        for i, seg in enumerate(segments):
            byte_pos = _encode_segment(vocab, seg, byte_pos, ids, spans)
            if i < len(segments) - 1:
                ids.append(pid)
                spans.append((byte_pos, byte_pos + plen))
                byte_pos += plen
    else:
        _encode_segment(vocab, text, 0, ids, spans)
    return ids, spans


def encode(vocab: Vocab, text: str) -> list[int]:
    return encode_with_offsets(vocab, text)[0]


def decode(vocab: Vocab, ids: list[int], strip_specials: bool = False) -> str:
    """Ids back to text; with strip_specials, truncate at END_OF_TEXT and drop pads."""
    special_by_id = {tid: role for role, tid in vocab.specials.items()}
    out = bytearray()
    for tid in ids:
        tid = int(tid)
        if not 0 <= tid < vocab.size:
            raise VocabError(f"invalid token id {tid} (vocab size {vocab.size})")
        role = special_by_id.get(tid)
        if role is not None:
            if strip_specials:
                if role == END_OF_TEXT:
                    break
                continue
            out.extend(vocab.special_literals[role].encode("utf-8"))
            continue
        token = vocab.id_to_token[tid]
        out.extend(CHAR_TO_BYTE[c] for c in token)
    return out.decode("utf-8", errors="replace")


class IncrementalDecoder:
    """Streams ids to text, holding back incomplete UTF-8 sequences."""

    def __init__(self, vocab: Vocab):
        self._vocab = vocab
        self._special_by_id = {tid: role for role, tid in vocab.specials.items()}
        self._utf8 = codecs.getincrementaldecoder("utf-8")("replace")

    def push(self, token_id: int) -> str:
        role = self._special_by_id.get(int(token_id))
        if role is not None:
            flushed = self._utf8.decode(b"", final=True)
            return flushed + self._vocab.special_literals[role]
        token = self._vocab.id_to_token[int(token_id)]
        raw = bytes(CHAR_TO_BYTE[c] for c in token)
        return self._utf8.decode(raw, final=False)

    def flush(self) -> str:
        return self._utf8.decode(b"", final=True)
