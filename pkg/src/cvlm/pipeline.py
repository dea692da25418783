"""Conversation rendering, embedding splice, and token generation.

Prompts follow the Vicuna v1.1 layout: an optional system line, then
``USER: {content} ASSISTANT: {reply}</s>`` per exchange, with a trailing
open ``ASSISTANT:`` cue when the model is expected to answer. Image
content renders as the literal placeholder plus a newline ahead of the
turn text; at embedding level each placeholder id is replaced by that
image's projected feature rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from . import tokenizer as tok
from .decoder import DecoderConfig, KVCache, decoder_forward, lm_logits
from .tensor import Tensor

HUMAN = "human"
ASSISTANT = "assistant"
STOP_SEQUENCE = "</s>"

# Standard system sentence for visual-instruction assistants.
DEFAULT_SYSTEM = (
    "A chat between a curious human and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the human's questions."
)


class TemplateError(ValueError):
    pass


class SpliceError(ValueError):
    pass


class ContextOverflowError(RuntimeError):
    pass


@dataclass
class Turn:
    role: str
    content: list[dict] = field(default_factory=list)

    def text(self) -> str:
        parts = []
        for item in self.content:
            if "image" in item:
                parts.append("<image>\n")
            else:
                parts.append(item["text"])
        return "".join(parts)

    def images(self) -> list:
        return [item["image"] for item in self.content if "image" in item]


@dataclass
class Conversation:
    system: str = ""
    turns: list[Turn] = field(default_factory=list)

    def validate(self) -> None:
        for i, turn in enumerate(self.turns):
            expected = HUMAN if i % 2 == 0 else ASSISTANT
            if turn.role != expected:
                raise TemplateError(
                    f"turn {i} has role {turn.role!r}, expected {expected!r} "
                    "(roles must alternate starting with human)")

    def images(self) -> list:
        return [img for turn in self.turns for img in turn.images()]


def render_template(conv: Conversation) -> str:
    return render_with_reply_spans(conv)[0]


def render_with_reply_spans(conv: Conversation) -> tuple[str, list[tuple[int, int]]]:
    """Render the prompt; also report each assistant reply's byte span.

    A reply span covers the leading space, the reply text, and the closing
    stop sequence, which is exactly the region the trainer's loss mask selects.
    """
    conv.validate()
    pieces: list[str] = []
    spans: list[tuple[int, int]] = []
    nbytes = 0

    def push(s: str) -> None:
        nonlocal nbytes
        pieces.append(s)
        nbytes += len(s.encode("utf-8"))

    if conv.system:
        push(conv.system + "\n")
    for turn in conv.turns:
        if turn.role == HUMAN:
            push("USER: " + turn.text() + " ASSISTANT:")
        else:
            start = nbytes
            push(" " + turn.text() + STOP_SEQUENCE)
            spans.append((start, nbytes))
    return "".join(pieces), spans


def expanded_token_stream(prompt_ids: Sequence[int], placeholder_id: int,
                          image_token_counts: Sequence[int]) -> list[int]:
    """Token stream after the splice, with -1 at image-feature positions."""
    counts = list(image_token_counts)
    n_ph = sum(1 for t in prompt_ids if t == placeholder_id)
    if n_ph != len(counts):
        raise SpliceError(
            f"prompt has {n_ph} image placeholders but {len(counts)} images supplied")
    out: list[int] = []
    k = 0
    for t in prompt_ids:
        if t == placeholder_id:
            out.extend([-1] * counts[k])
            k += 1
        else:
            out.append(int(t))
    return out


def assemble_embeddings(prompt_ids: Sequence[int], image_feats: Sequence[Tensor],
                        embed_table: Tensor, placeholder_id: int) -> Tensor:
    """Embed text ids and replace each placeholder with its projected rows."""
    n_ph = sum(1 for t in prompt_ids if t == placeholder_id)
    if n_ph != len(image_feats):
        raise SpliceError(
            f"prompt has {n_ph} image placeholders but {len(image_feats)} images supplied")
    segments: list[Tensor] = []
    run: list[int] = []
    k = 0
    for t in prompt_ids:
        if t == placeholder_id:
            if run:
                segments.append(T.embedding_lookup(embed_table, run))
                run = []
            segments.append(image_feats[k])
            k += 1
        else:
            run.append(int(t))
    if run:
        segments.append(T.embedding_lookup(embed_table, run))
    if not segments:
        raise SpliceError("cannot assemble an empty prompt")
    return segments[0] if len(segments) == 1 else T.concat(segments, axis=0)


@dataclass
class SamplingParams:
    max_new_tokens: int = 64
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass
class GenerationSession:
    input_ids: list[int]
    image_feats: list[Tensor]
    image_spans: list[tuple[int, int]]  # (placeholder index in input_ids, P)
    spliced_len: int
    params: SamplingParams
    cache: KVCache
    emitted: list[int] = field(default_factory=list)
    stopped: bool = False
    stop_reason: str = ""


def new_session(input_ids: Sequence[int], image_feats: Sequence[Tensor],
                params: SamplingParams, placeholder_id: int,
                cfg: DecoderConfig) -> GenerationSession:
    params.validate()
    spans = []
    k = 0
    for i, t in enumerate(input_ids):
        if t == placeholder_id:
            if k >= len(image_feats):
                raise SpliceError(
                    f"prompt has more image placeholders than images ({len(image_feats)})")
            spans.append((i, image_feats[k].shape[0]))
            k += 1
    if k != len(image_feats):
        raise SpliceError(
            f"prompt has {k} image placeholders but {len(image_feats)} images supplied")
    spliced_len = len(input_ids) - k + sum(p for _, p in spans)
    if spliced_len + params.max_new_tokens > cfg.max_seq:
        raise ContextOverflowError(
            f"spliced prompt of {spliced_len} tokens plus {params.max_new_tokens} "
            f"new tokens exceeds max_seq {cfg.max_seq}")
    return GenerationSession(input_ids=list(int(t) for t in input_ids),
                             image_feats=list(image_feats), image_spans=spans,
                             spliced_len=spliced_len, params=params,
                             cache=KVCache(cfg.layers))


def sample_token(logits: np.ndarray, params: SamplingParams,
                 rng: np.random.Generator) -> int:
    """Greedy at temperature 0, else temperature-scaled top-p sampling.

    The nucleus is the shortest prefix of the probability-sorted vocabulary
    reaching top_p; ties at the cutoff keep the lower token id.
    """
    if params.temperature == 0.0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / params.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(p.size), -p))  # descending p, ascending id
    sorted_p = p[order]
    cum = np.cumsum(sorted_p)
    cut = int(np.searchsorted(cum, params.top_p, side="left"))
    keep = order[:cut + 1]
    kp = p[keep]
    kp /= kp.sum()
    return int(rng.choice(keep, p=kp))


class _StopFilter:
    """Holds back any text that might become the stop sequence."""

    def __init__(self, stop: str):
        self.stop = stop
        self.pending = ""
        self.hit = False

    def push(self, fragment: str) -> str:
        if self.hit:
            return ""
        self.pending += fragment
        idx = self.pending.find(self.stop)
        if idx >= 0:
            self.hit = True
            out = self.pending[:idx]
            self.pending = ""
            return out
        keep = 0
        for k in range(min(len(self.stop) - 1, len(self.pending)), 0, -1):
            if self.stop.startswith(self.pending[-k:]):
                keep = k
                break
        if keep:
            out = self.pending[:-keep]
            self.pending = self.pending[-keep:]
        else:
            out = self.pending
            self.pending = ""
        return out

    def flush(self) -> str:
        out = self.pending
        self.pending = ""
        return out


def generate(session: GenerationSession, weights, cfg: DecoderConfig,
             vocab: tok.Vocab) -> Iterator[tuple[int, str]]:
    """Prefill once, then stream (token id, visible text fragment) pairs.

    Stops on the end-of-text id, on the stop sequence, or at
    max_new_tokens; text belonging to a matched stop sequence is never
    emitted. The final fragment may arrive with the last token or be empty.
    """
    if session.stopped or session.emitted:
        raise RuntimeError("session already consumed; build a fresh one")
    embed_table = weights["decoder.embed"]
    placeholder_id = vocab.specials.get(tok.IMAGE_PLACEHOLDER, -1)
    eot_id = vocab.specials.get(tok.END_OF_TEXT)
    embeds = assemble_embeddings(session.input_ids, session.image_feats,
                                 embed_table, placeholder_id)
    positions = list(range(session.spliced_len))
    hidden, _ = decoder_forward(embeds, positions, weights, cfg, session.cache)
    last = T.narrow(hidden, 0, hidden.shape[0] - 1, 1)
    rng = np.random.default_rng(session.params.seed)
    decoder_text = tok.IncrementalDecoder(vocab)
    stop_filter = _StopFilter(STOP_SEQUENCE)

    def finish(reason: str) -> None:
        session.stopped = True
        session.stop_reason = reason

    # Each token's event is released once the next decision is known, so a
    # terminal event can carry any text the stop filter was holding back.
    held: tuple[int, str] | None = None
    for step in range(session.params.max_new_tokens):
        logits = lm_logits(last, weights, cfg).data[0]
        tid = sample_token(logits, session.params, rng)
        if eot_id is not None and tid == eot_id:
            if held is not None:
                held_id, held_text = held
                yield held_id, held_text + stop_filter.flush() + decoder_text.flush()
            finish("eos")
            return
        pos = session.spliced_len + len(session.emitted)
        if pos + 1 > cfg.max_seq:
            raise ContextOverflowError(
                f"decoding past position {pos} exceeds max_seq {cfg.max_seq}")
        session.emitted.append(tid)
        visible = stop_filter.push(decoder_text.push(tid))
        if held is not None:
            yield held
            held = None
        if stop_filter.hit:
            yield tid, visible
            finish("stop_sequence")
            return
        if step == session.params.max_new_tokens - 1:
            yield tid, visible + stop_filter.flush() + decoder_text.flush()
            finish("length")
            return
        held = (tid, visible)
        row = T.embedding_lookup(embed_table, [tid])
        hidden, _ = decoder_forward(row, [pos], weights, cfg, session.cache)
        last = hidden
    finish("length")
