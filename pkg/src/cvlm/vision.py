"""ViT-style image encoder: patch grid in, per-patch feature rows out.

The encoder runs pre-norm transformer blocks over patch embeddings plus a
class token, and exports the output of a configurable block with the
class-token row dropped. It is forward-only: both training stages keep
the image tower frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VisionConfig:
    image_size: int
    patch_size: int
    hidden: int
    layers: int
    heads: int
    feature_layer: int = -2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        idx = self.feature_layer if self.feature_layer >= 0 else self.layers + self.feature_layer
        if not 0 <= idx < self.layers:
            raise ConfigError(
                f"feature_layer {self.feature_layer} outside {self.layers} blocks")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def export_block(self) -> int:
        return self.feature_layer if self.feature_layer >= 0 else self.layers + self.feature_layer


def _resize_bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    """Plain bilinear resample of an (H, W, 3) float array to (nh, nw, 3)."""
    h, w, _ = img.shape
    if h == nh and w == nw:
        return img

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst, dtype=np.float64) + 0.5) * n_src / n_dst - 0.5
        src = np.clip(src, 0.0, n_src - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = (src - lo).astype(img.dtype)
        return lo, hi, frac

    ylo, yhi, yf = axis_coords(h, nh)
    xlo, xhi, xf = axis_coords(w, nw)
    yf = yf[:, None, None]
    xf = xf[None, :, None]
    top = img[ylo][:, xlo] * (1 - xf) + img[ylo][:, xhi] * xf
    bot = img[yhi][:, xlo] * (1 - xf) + img[yhi][:, xhi] * xf
    return top * (1 - yf) + bot * yf


def preprocess(raw: np.ndarray, cfg: VisionConfig, means: Sequence[float],
               stds: Sequence[float], resize: str = "square") -> np.ndarray:
    """Decoded RGB pixels (H, W, 3) to a normalized (3, S, S) image tensor.

    ``resize="square"`` stretches the full frame; ``"pad"`` keeps the aspect
    ratio and letterboxes with the channel means (zeros after normalization).
    """
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ConfigError(f"expected (H, W, 3) RGB input, got shape {raw.shape}")
    img = raw.astype(np.float32)
    if raw.dtype == np.uint8:
        img /= 255.0
    s = cfg.image_size
    if resize == "square":
        img = _resize_bilinear(img, s, s)
    elif resize == "pad":
        h, w, _ = img.shape
        scale = s / max(h, w)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        inner = _resize_bilinear(img, nh, nw)
        canvas = np.tile(np.asarray(means, dtype=np.float32), (s, s, 1))
        y0, x0 = (s - nh) // 2, (s - nw) // 2
        canvas[y0:y0 + nh, x0:x0 + nw] = inner
        img = canvas
    else:
        raise ConfigError(f"unknown resize policy {resize!r}")
    img = (img - np.asarray(means, dtype=np.float32)) / np.asarray(stds, dtype=np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def patchify(img: np.ndarray, cfg: VisionConfig) -> np.ndarray:
    """(3, S, S) image to (P, 3*patch^2) rows in row-major grid order.

    Each row is one patch flattened channel-major: (c, y, x).
    """
    s, p = cfg.image_size, cfg.patch_size
    if img.shape != (3, s, s):
        raise ConfigError(f"image tensor shape {img.shape} does not match config ({3}, {s}, {s})")
    g = cfg.grid
    x = img.reshape(3, g, p, g, p)
    x = x.transpose(1, 3, 0, 2, 4)  # (gy, gx, c, py, px)
    return np.ascontiguousarray(x.reshape(g * g, 3 * p * p))


def _vision_attention(x: Tensor, wqkv: Tensor, bqkv: Tensor, wout: Tensor,
                      bout: Tensor, cfg: VisionConfig) -> Tensor:
    n = x.shape[0]
    hd = cfg.head_dim
    qkv = T.add(T.matmul(x, wqkv), bqkv)
    q = T.narrow(qkv, 1, 0, cfg.hidden)
    k = T.narrow(qkv, 1, cfg.hidden, cfg.hidden)
    v = T.narrow(qkv, 1, 2 * cfg.hidden, cfg.hidden)
    heads = []
    for h in range(cfg.heads):
        qh = T.narrow(q, 1, h * hd, hd)
        kh = T.narrow(k, 1, h * hd, hd)
        vh = T.narrow(v, 1, h * hd, hd)
        scores = T.scale(T.matmul(qh, T.transpose2d(kh)), 1.0 / np.sqrt(hd))
        heads.append(T.matmul(T.softmax_rows(scores), vh))
    ctx = T.concat(heads, axis=1)
    return T.add(T.matmul(ctx, wout), bout)


def encode_image(img: np.ndarray, weights: Mapping[str, Tensor],
                 cfg: VisionConfig) -> Tensor:
    """Run the encoder and export (P, hidden) patch features."""
    pe_w = weights["vision.patch_embed.w"]
    expected = (3 * cfg.patch_size ** 2, cfg.hidden)
    if pe_w.shape != expected:
        raise ConfigError(
            f"vision.patch_embed.w shape {pe_w.shape} does not match config {expected}")
    pos = weights["vision.pos"]
    if pos.shape != (cfg.patch_tokens + 1, cfg.hidden):
        raise ConfigError(
            f"vision.pos shape {pos.shape} does not match config "
            f"{(cfg.patch_tokens + 1, cfg.hidden)}")

    patches = Tensor(patchify(img, cfg).astype(pe_w.data.dtype))
    x = T.add(T.matmul(patches, pe_w), weights["vision.patch_embed.b"])
    x = T.concat([weights["vision.cls"], x], axis=0)
    x = T.add(x, pos)
    x = T.layer_norm(x, weights["vision.ln_pre.w"], weights["vision.ln_pre.b"])

    feat = None
    for i in range(cfg.export_block + 1):
        pre = f"vision.block{i}."
        h = T.layer_norm(x, weights[pre + "ln1.w"], weights[pre + "ln1.b"])
        attn = _vision_attention(h, weights[pre + "attn.qkv.w"], weights[pre + "attn.qkv.b"],
                                 weights[pre + "attn.out.w"], weights[pre + "attn.out.b"], cfg)
        x = T.add(x, attn)
        m = T.layer_norm(x, weights[pre + "ln2.w"], weights[pre + "ln2.b"])
        m = T.add(T.matmul(m, weights[pre + "mlp.fc1.w"]), weights[pre + "mlp.fc1.b"])
        m = T.gelu(m)
        m = T.add(T.matmul(m, weights[pre + "mlp.fc2.w"]), weights[pre + "mlp.fc2.b"])
        x = T.add(x, m)
        feat = x
    return T.narrow(feat, 0, 1, cfg.patch_tokens)
