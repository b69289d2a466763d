"""Windowed multi-head attention: W-MSA, SW-MSA, Swin blocks, patch merging,
and the guided cross-attention that takes queries from the Swin stream and
keys/values from the fused encoder stream.

Token maps are channels-last, ``[B, H, W, C]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    num_heads: int
    window_size: int

    def __post_init__(self):
        if self.num_heads < 1 or self.window_size < 1:
            raise InputError(f"num_heads and window_size must be positive: {self}")
        if self.dim % self.num_heads:
            raise DimensionError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


# ---------------------------------------------------------------- windowing


def window_partition(x: Tensor, M: int) -> Tensor:
    """[B,H,W,C] -> [B*(H/M)*(W/M), M*M, C], windows and tokens in raster order."""
    B, H, W, C = x.shape
    if H % M or W % M:
        raise DimensionError(f"window size {M} does not divide feature map {H}x{W}")
    x = T.reshape(x, (B, H // M, M, W // M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // M) * (W // M), M * M, C))


def window_reverse(windows: Tensor, M: int, H: int, W: int) -> Tensor:
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // M) * (W // M))
    x = T.reshape(windows, (B, H // M, W // M, M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll the map by (-shift, -shift) over (H, W) on the torus."""
    if shift == 0:
        return x
    return T.roll(x, (-shift, -shift), (1, 2))


def reverse_cyclic_shift(x: Tensor, shift: int) -> Tensor:
    if shift == 0:
        return x
    return T.roll(x, (shift, shift), (1, 2))


@lru_cache(maxsize=None)
def relative_position_index(M: int) -> np.ndarray:
    """[M*M, M*M] index into a (2M-1)^2 bias table for each (query, key) pair."""
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (M - 1)
    idx = rel[0] * (2 * M - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def build_shift_mask(H: int, W: int, M: int, shift: int) -> np.ndarray:
    """Additive [num_windows, M*M, M*M] mask separating pre-shift regions."""
    if not 0 <= shift < M:
        raise InputError(f"shift must lie in [0, {M}), got {shift}")
    if H % M or W % M:
        raise DimensionError(f"window size {M} does not divide feature map {H}x{W}")
    nw = (H // M) * (W // M)
    if shift == 0:
        mask = np.zeros((nw, M * M, M * M))
        mask.setflags(write=False)
        return mask
    region = np.zeros((H, W), dtype=np.int64)
    cuts = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    win = region.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(nw, M * M)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------- attention core


class RelPosBias(Module):
    def __init__(self, M: int, num_heads: int):
        self.table = param(np.zeros(((2 * M - 1) ** 2, num_heads)))
        self.window_size = M
        self.num_heads = num_heads

    def forward(self) -> Tensor:
        """Per-head bias, shape [heads, M*M, M*M]."""
        idx = relative_position_index(self.window_size)
        b = T.index_select(self.table, idx, axis=0)  # [L, L, heads]
        return T.transpose(b, (2, 0, 1))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         bias: Tensor | None = None, mask: np.ndarray | None = None,
                         proj: Linear | None = None, return_weights: bool = False):
    """softmax(q_h k_h^T / sqrt(d_k) + B_h + mask) v_h per head, concatenated and projected.

    ``q, k, v`` are [N, L, D] with N = batch * windows. ``mask`` is
    [num_windows, L, L] and is tiled over the batch.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    N, L, D = q.shape
    if D % num_heads:
        raise DimensionError(f"dim {D} not divisible by {num_heads} heads")
    dk = D // num_heads

    def heads(t):
        return T.transpose(T.reshape(t, (N, L, num_heads, dk)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    if bias is not None:
        if bias.shape != (num_heads, L, L):
            raise DimensionError(f"bias shape {bias.shape} != {(num_heads, L, L)}")
        scores = T.add(scores, bias)
    if mask is not None:
        nw = mask.shape[0]
        if N % nw or mask.shape[1:] != (L, L):
            raise DimensionError(f"mask {mask.shape} incompatible with {N} windows of {L} tokens")
        scores = T.reshape(scores, (N // nw, nw, num_heads, L, L))
        scores = T.add(scores, mask[None, :, None])
        scores = T.reshape(scores, (N, num_heads, L, L))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vh)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (N, L, D))
    if proj is not None:
        out = proj(out)
    return (out, attn) if return_weights else out


class WindowAttention(Module):
    """W-MSA over pre-partitioned windows, with a learnable relative bias."""

    def __init__(self, cfg: AttentionConfig, rng):
        self.cfg = cfg
        # no key bias: it shifts every score of a query row equally and cancels in softmax
        self.qkv = Linear(cfg.dim, 3 * cfg.dim, rng, bias=False)
        self.q_bias = param(np.zeros(cfg.dim))
        self.v_bias = param(np.zeros(cfg.dim))
        self.bias = RelPosBias(cfg.window_size, cfg.num_heads)
        self.proj = Linear(cfg.dim, cfg.dim, rng)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
        D = self.cfg.dim
        qkv = self.qkv(windows)
        q = T.add(qkv[..., :D], self.q_bias)
        k = qkv[..., D:2 * D]
        v = T.add(qkv[..., 2 * D:], self.v_bias)
        return multi_head_attention(q, k, v, self.cfg.num_heads, self.bias(), mask, self.proj,
                                    return_weights=return_weights)


def windowed_self_attention(x: Tensor, attn: WindowAttention, shift: int = 0) -> Tensor:
    """(S)W-MSA on a [B,H,W,C] map: shift, partition, attend with mask, undo."""
    B, H, W, C = x.shape
    M = attn.cfg.window_size
    if C != attn.cfg.dim:
        raise DimensionError(f"map has {C} channels, attention expects {attn.cfg.dim}")
    if H <= M and W <= M:
        shift = 0  # a single window: shifting would only fragment it
    mask = build_shift_mask(H, W, M, shift) if shift else None
    xs = cyclic_shift(x, shift)
    out = attn(window_partition(xs, M), mask)
    return reverse_cyclic_shift(window_reverse(out, M, H, W), shift)


class SwinBlock(Module):
    def __init__(self, cfg: AttentionConfig, shift: int, rng, mlp_ratio: int = 4):
        if shift not in (0, cfg.window_size // 2):
            raise InputError(f"shift must be 0 or {cfg.window_size // 2}, got {shift}")
        self.shift = shift
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = WindowAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, mlp_ratio * cfg.dim, rng)
        self.fc2 = Linear(mlp_ratio * cfg.dim, cfg.dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, windowed_self_attention(self.norm1(x), self.attn, self.shift))
        return T.add(x, self.fc2(T.relu(self.fc1(self.norm2(x)))))


class PatchMerging(Module):
    """[B,H,W,C] -> [B,H/2,W/2,2C]: gather 2x2 neighbours, LN over 4C, reduce to 2C."""

    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise DimensionError(f"patch merging needs even sides, got {H}x{W}")
        x = gather_2x2(x)
        return self.reduction(self.norm(x))


def gather_2x2(x: Tensor) -> Tensor:
    """Concatenate the four pixels of each 2x2 block: order (0,0), (1,0), (0,1), (1,1)."""
    B, H, W, C = x.shape
    x = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
    # axes: b, i, di, j, dj, c -> b, i, j, dj, di, c so the flattened order is di-fastest
    x = T.transpose(x, (0, 1, 3, 4, 2, 5))
    return T.reshape(x, (B, H // 2, W // 2, 4 * C))


class SwinStage(Module):
    """Patch merging followed by ``depth`` blocks alternating shift 0 and M/2."""

    def __init__(self, dim_in: int, num_heads: int, window_size: int, depth: int, rng):
        self.merge = PatchMerging(dim_in, rng)
        cfg = AttentionConfig(2 * dim_in, num_heads, window_size)
        self.blocks = [SwinBlock(cfg, 0 if i % 2 == 0 else window_size // 2, rng) for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class GuidedSelfAttention(Module):
    """Windowed cross-attention: queries from the Swin map, keys/values from the encoder map."""

    def __init__(self, cfg: AttentionConfig, rng):
        self.cfg = cfg
        self.q = Linear(cfg.dim, cfg.dim, rng)
        self.kv = Linear(cfg.dim, 2 * cfg.dim, rng, bias=False)
        self.v_bias = param(np.zeros(cfg.dim))
        self.bias = RelPosBias(cfg.window_size, cfg.num_heads)
        self.proj = Linear(cfg.dim, cfg.dim, rng)

    def forward(self, stream_s: Tensor, stream_e: Tensor, return_weights: bool = False):
        if stream_s.shape != stream_e.shape:
            raise DimensionError(f"stream shapes differ: {stream_s.shape} vs {stream_e.shape}")
        B, H, W, C = stream_s.shape
        if C != self.cfg.dim:
            raise DimensionError(f"streams have {C} channels, attention expects {self.cfg.dim}")
        M = self.cfg.window_size
        q = self.q(window_partition(stream_s, M))
        kv = self.kv(window_partition(stream_e, M))
        k, v = kv[..., :C], T.add(kv[..., C:], self.v_bias)
        out = multi_head_attention(q, k, v, self.cfg.num_heads, self.bias(), None, self.proj,
                                   return_weights=return_weights)
        if return_weights:
            out, attn = out
            return window_reverse(out, M, H, W), attn
        return window_reverse(out, M, H, W)
