"""Loaded-model facade: manifest + weights + tokenizer behind one handle.

Wraps the full text+image path (preprocess, encode, project, splice,
decode) so the CLI, the HTTP service, and the eval harness share exactly
one generation code path. Weights are immutable after load; one runtime
serves many concurrent sessions, each owning its KV cache.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import modelio, pipeline, projector, tokenizer as tok, vision
from .pipeline import Conversation, GenerationSession, SamplingParams
from .tensor import Tensor


@dataclass
class GenerationResult:
    text: str
    finish_reason: str
    prompt_tokens: int
    spliced_tokens: int
    new_tokens: int
    prefill_s: float
    decode_s: float


class ModelRuntime:
    def __init__(self, manifest: modelio.ModelManifest, weights: dict[str, Tensor],
                 vocab: tok.Vocab):
        manifest.validate()
        self.manifest = manifest
        self.weights = weights
        self.vocab = vocab
        self.manifest_hash = modelio.manifest_hash(manifest)
        self.projector_weights = projector.ProjectorWeights.from_weight_map(weights)
        self.projector_weights.validate(manifest.vision.hidden, manifest.decoder.hidden)

    @classmethod
    def load(cls, manifest_path, weights_path) -> "ModelRuntime":
        manifest = modelio.load_manifest(manifest_path)
        weights = modelio.load_archive(weights_path, manifest)
        t = manifest.tokenizer
        vocab = tok.load_vocab(t.vocab_path, t.merges_path, t.specials)
        if vocab.size != manifest.decoder.vocab:
            raise modelio.ManifestError(
                f"tokenizer size {vocab.size} != decoder vocab {manifest.decoder.vocab}")
        return cls(manifest, weights, vocab)

    @property
    def image_token_count(self) -> int:
        return self.manifest.vision.patch_tokens

    def image_features(self, rgb: np.ndarray) -> Tensor:
        """(H, W, 3) pixels to (P, lm_hidden) spliceable rows."""
        pre = self.manifest.preprocessing
        img = vision.preprocess(rgb, self.manifest.vision, pre.means, pre.stds, pre.resize)
        feats = vision.encode_image(img, self.weights, self.manifest.vision)
        return projector.project(feats, self.projector_weights)

    def prepare(self, conv: Conversation, params: SamplingParams) -> GenerationSession:
        prompt = pipeline.render_template(conv)
        ids = tok.encode(self.vocab, prompt)
        feats = [self.image_features(img) for img in conv.images()]
        return pipeline.new_session(ids, feats, params,
                                    self.vocab.specials.get(tok.IMAGE_PLACEHOLDER, -1),
                                    self.manifest.decoder)

    def stream(self, session: GenerationSession) -> Iterator[tuple[int, str]]:
        return pipeline.generate(session, self.weights, self.manifest.decoder, self.vocab)

    def generate_text(self, conv: Conversation, params: SamplingParams) -> GenerationResult:
        t0 = time.perf_counter()
        session = self.prepare(conv, params)
        parts: list[str] = []
        first_token_time = None
        for _, fragment in self.stream(session):
            if first_token_time is None:
                first_token_time = time.perf_counter()
            parts.append(fragment)
        t1 = time.perf_counter()
        if first_token_time is None:
            first_token_time = t1
        return GenerationResult(
            text="".join(parts),
            finish_reason=session.stop_reason,
            prompt_tokens=len(session.input_ids),
            spliced_tokens=session.spliced_len,
            new_tokens=len(session.emitted),
            prefill_s=first_token_time - t0,
            decode_s=t1 - first_token_time,
        )
