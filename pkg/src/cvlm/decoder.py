"""Decoder-only language model with parallel blocks and a KV cache.

Block layout follows the small-LM convention the runtime targets: one
shared pre-norm feeds both the attention and MLP branches, whose outputs
are summed into the residual stream. Rotary rotation covers only the
first ``rotary_dim`` channels of each head. Incremental decoding appends
to a per-session KV cache; cached prefixes are never rewritten.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    layers: int
    hidden: int
    heads: int
    rotary_dim: int
    vocab: int
    max_seq: int = 2048
    eps: float = 1e-5
    rotary_base: float = 10000.0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.rotary_dim % 2 != 0:
            raise ConfigError(f"rotary_dim {self.rotary_dim} must be even")
        if self.rotary_dim > self.head_dim:
            raise ConfigError(
                f"rotary_dim {self.rotary_dim} exceeds head_dim {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


class KVCache:
    """Per-layer key/value history for one decode stream. Append-only."""

    def __init__(self, layers: int):
        self.keys: list[np.ndarray | None] = [None] * layers
        self.values: list[np.ndarray | None] = [None] * layers

    @property
    def length(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.keys[layer] is None:
            self.keys[layer] = k
            self.values[layer] = v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=0)


def _rotary_tables(positions: Sequence[int], heads: int, rotary_dim: int,
                   base: float, np_dtype) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(list(positions), dtype=np.float64)
    pair = np.arange(rotary_dim // 2, dtype=np.float64)
    freqs = base ** (-2.0 * pair / rotary_dim)
    angles = np.outer(pos, freqs)  # (T, rotary_dim/2)
    cos = np.repeat(np.cos(angles), 2, axis=1).astype(np_dtype)
    sin = np.repeat(np.sin(angles), 2, axis=1).astype(np_dtype)
    cos = np.ascontiguousarray(np.broadcast_to(cos[:, None, :], (len(pos), heads, rotary_dim)))
    sin = np.ascontiguousarray(np.broadcast_to(sin[:, None, :], (len(pos), heads, rotary_dim)))
    return cos, sin


def rotary_apply(x: Tensor, positions: Sequence[int], rotary_dim: int,
                 base: float = 10000.0) -> Tensor:
    """Rotate the first rotary_dim channels of each head by position angles.

    Adjacent channel pairs (2i, 2i+1) rotate by pos * base^(-2i/rotary_dim);
    the remaining channels pass through untouched.
    """
    if rotary_dim % 2 != 0:
        raise ConfigError(f"rotary_dim {rotary_dim} must be even")
    if rotary_dim == 0:
        return x
    t_len, heads, head_dim = x.shape
    if rotary_dim > head_dim:
        raise ConfigError(f"rotary_dim {rotary_dim} exceeds head_dim {head_dim}")
    if len(positions) != t_len:
        raise ConfigError(f"{len(positions)} positions for {t_len} rows")
    cos, sin = _rotary_tables(positions, heads, rotary_dim, base, x.data.dtype)
    xr = T.narrow(x, 2, 0, rotary_dim)
    rotated = T.add(T.mul(xr, Tensor(cos)), T.mul(T.rotate_pairs(xr), Tensor(sin)))
    if rotary_dim == head_dim:
        return rotated
    return T.concat([rotated, T.narrow(x, 2, rotary_dim, head_dim - rotary_dim)], axis=2)


def _causal_mask(t_new: int, t_cached: int, np_dtype) -> np.ndarray:
    """Additive mask (t_new, t_cached + t_new): -inf strictly above the diagonal."""
    total = t_cached + t_new
    mask = np.zeros((t_new, total), dtype=np_dtype)
    cols = np.arange(total)[None, :]
    rows = np.arange(t_new)[:, None]
    mask[cols > t_cached + rows] = -np.inf
    return mask


def _attention(q3: Tensor, k_heads: list[Tensor], v_heads: list[Tensor],
               mask: Tensor, cfg: DecoderConfig) -> Tensor:
    t_len = q3.shape[0]
    hd = cfg.head_dim
    q2 = T.reshape(q3, (t_len, cfg.hidden))
    outs = []
    for h in range(cfg.heads):
        qh = T.narrow(q2, 1, h * hd, hd)
        scores = T.scale(T.matmul(qh, T.transpose2d(k_heads[h])), 1.0 / np.sqrt(hd))
        scores = T.add(scores, mask)
        outs.append(T.matmul(T.softmax_rows(scores), v_heads[h]))
    return T.concat(outs, axis=1)


def decoder_forward(embeds: Tensor, positions: Sequence[int],
                    weights: Mapping[str, Tensor], cfg: DecoderConfig,
                    cache: KVCache | None = None) -> tuple[Tensor, KVCache]:
    """Run all blocks over (T, hidden) embeddings; extends and returns the cache."""
    t_len = embeds.shape[0]
    if t_len < 1 or embeds.shape != (t_len, cfg.hidden):
        raise ConfigError(f"embeddings shape {embeds.shape} does not match hidden {cfg.hidden}")
    positions = [int(p) for p in positions]
    if len(positions) != t_len:
        raise ConfigError(f"{len(positions)} positions for {t_len} rows")
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ConfigError(f"positions must be strictly increasing, got {positions}")
    if cache is None:
        cache = KVCache(cfg.layers)
    cached_len = cache.length
    if positions[0] != cached_len:
        raise CacheError(
            f"cache holds {cached_len} positions but new positions start at {positions[0]}")
    if cached_len and T.active_tape() is not None:
        raise T.GradError("cached decode is inference-only; run without a tape")

    hd = cfg.head_dim
    mask = Tensor(_causal_mask(t_len, cached_len, embeds.data.dtype))
    x = embeds
    for i in range(cfg.layers):
        pre = f"decoder.block{i}."
        h = T.layer_norm(x, weights[pre + "ln.w"], weights[pre + "ln.b"], eps=cfg.eps)
        qkv = T.add(T.matmul(h, weights[pre + "attn.qkv.w"]), weights[pre + "attn.qkv.b"])
        q = T.reshape(T.narrow(qkv, 1, 0, cfg.hidden), (t_len, cfg.heads, hd))
        k = T.reshape(T.narrow(qkv, 1, cfg.hidden, cfg.hidden), (t_len, cfg.heads, hd))
        v = T.narrow(qkv, 1, 2 * cfg.hidden, cfg.hidden)
        q = rotary_apply(q, positions, cfg.rotary_dim, cfg.rotary_base)
        k = rotary_apply(k, positions, cfg.rotary_dim, cfg.rotary_base)

        k_new = np.ascontiguousarray(k.data)
        v_new = np.ascontiguousarray(v.data.reshape(t_len, cfg.heads, hd))
        if cached_len:
            k_heads = [Tensor(np.concatenate([cache.keys[i][:, hh, :], k_new[:, hh, :]]))
                       for hh in range(cfg.heads)]
            v_heads = [Tensor(np.concatenate([cache.values[i][:, hh, :], v_new[:, hh, :]]))
                       for hh in range(cfg.heads)]
        else:
            k2 = T.reshape(k, (t_len, cfg.hidden))
            k_heads = [T.narrow(k2, 1, hh * hd, hd) for hh in range(cfg.heads)]
            v_heads = [T.narrow(v, 1, hh * hd, hd) for hh in range(cfg.heads)]
        cache.append(i, k_new, v_new)

        attn = _attention(q, k_heads, v_heads, mask, cfg)
        attn = T.add(T.matmul(attn, weights[pre + "attn.out.w"]), weights[pre + "attn.out.b"])

        m = T.add(T.matmul(h, weights[pre + "mlp.fc1.w"]), weights[pre + "mlp.fc1.b"])
        m = T.gelu(m)
        m = T.add(T.matmul(m, weights[pre + "mlp.fc2.w"]), weights[pre + "mlp.fc2.b"])

        x = T.add(T.add(x, attn), m)
    return x, cache


def lm_logits(hidden_states: Tensor, weights: Mapping[str, Tensor],
              cfg: DecoderConfig) -> Tensor:
    """Final layer norm then the biased vocabulary head."""
    h = T.layer_norm(hidden_states, weights["decoder.final_ln.w"],
                     weights["decoder.final_ln.b"], eps=cfg.eps)
    return T.add(T.matmul(h, weights["decoder.head.w"]), weights["decoder.head.b"])
