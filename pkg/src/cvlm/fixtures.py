"""Desk-scale fixture builders: toy tokenizer files, manifests, datasets.

Everything here exists so the full stack can run without pretrained
weights: tests, the quickstart in the README, and the web UI's
end-to-end check all start from one of these bundles.
"""

from __future__ import annotations

import io as _stdio
import json
import os

import numpy as np
from PIL import Image

from .decoder import DecoderConfig
from .modelio import (ModelManifest, Preprocessing, ProjectorConfig,
                      TokenizerConfig, init_random, save_archive, save_manifest)
from .tokenizer import BYTE_TO_CHAR
from .vision import VisionConfig

TOY_SPECIALS = {"image_placeholder": "<image>",
                "end_of_text": "<|endoftext|>",
                "pad": "<|pad|>"}

# 256 byte tokens + these merged tokens; merges build them left to right
TOY_MERGES = [("h", "i"), ("t", "h"), ("th", "e")]


def write_byte_vocab(vocab_path, merges_path) -> int:
    """Byte-complete toy vocabulary; returns base size (before specials)."""
    vocab: dict[str, int] = {}
    for b in range(256):
        vocab[BYTE_TO_CHAR[b]] = b
    for left, right in TOY_MERGES:
        vocab[left + right] = len(vocab)
    with open(vocab_path, "w", encoding="utf-8") as fh:
        json.dump(vocab, fh, ensure_ascii=False)
    with open(merges_path, "w", encoding="utf-8") as fh:
        for left, right in TOY_MERGES:
            fh.write(f"{left} {right}\n")
    return len(vocab)


def toy_manifest(vocab_path: str = "vocab.json", merges_path: str = "merges.txt",
                 vocab_size: int = 262) -> ModelManifest:
    return ModelManifest(
        vision=VisionConfig(image_size=16, patch_size=8, hidden=16, layers=2,
                            heads=2, feature_layer=-2),
        projector=ProjectorConfig(input=16, inner=32, output=32),
        decoder=DecoderConfig(layers=2, hidden=32, heads=2, rotary_dim=8,
                              vocab=vocab_size, max_seq=512),
        tokenizer=TokenizerConfig(vocab_path=vocab_path, merges_path=merges_path,
                                  specials=dict(TOY_SPECIALS)),
        preprocessing=Preprocessing(),
        provenance="desk-scale toy bundle",
    )


def write_toy_bundle(directory, seed: int = 0) -> dict[str, str]:
    """Write manifest + tokenizer + random weights; returns the file paths."""
    os.makedirs(directory, exist_ok=True)
    vocab_path = os.path.join(directory, "vocab.json")
    merges_path = os.path.join(directory, "merges.txt")
    base = write_byte_vocab(vocab_path, merges_path)
    manifest = toy_manifest("vocab.json", "merges.txt",
                            vocab_size=base + len(TOY_SPECIALS))
    manifest_path = os.path.join(directory, "manifest.json")
    save_manifest(manifest, manifest_path)
    weights_path = os.path.join(directory, "weights.cvlm")
    save_archive(init_random(manifest, seed), weights_path)
    return {"manifest": manifest_path, "weights": weights_path,
            "vocab": vocab_path, "merges": merges_path}


def make_test_image(color: tuple[int, int, int], size: int = 24) -> bytes:
    """Solid-color PNG bytes."""
    img = Image.new("RGB", (size, size), color)
    buf = _stdio.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_test_image(path, color: tuple[int, int, int], size: int = 24) -> None:
    with open(path, "wb") as fh:
        fh.write(make_test_image(color, size))


def write_toy_dataset(directory, n: int = 16, with_images: bool = True,
                      seed: int = 0) -> str:
    """ShareGPT-layout JSON-lines dataset of n memorizable samples."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    words = ["red", "blue", "green", "gold", "pink", "teal", "gray", "cyan",
             "lime", "navy", "plum", "rust", "sand", "jade", "ruby", "opal"]
    path = os.path.join(directory, "train.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            word = words[i % len(words)]
            sample: dict = {
                "conversations": [
                    {"from": "human", "value": "<image>" if with_images else f"say {word}"},
                    {"from": "gpt", "value": word},
                ]
            }
            if with_images:
                color = tuple(int(c) for c in rng.integers(0, 256, size=3))
                img_name = f"img_{i:03d}.png"
                write_test_image(os.path.join(directory, img_name), color)
                sample["image"] = img_name
            fh.write(json.dumps(sample) + "\n")
    return path
