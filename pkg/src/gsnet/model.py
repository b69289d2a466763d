"""The assembled classifier: encoder -> guided attention -> triple-stream merge -> head.

Channel schedule: the patch embedding produces ``embed_dim`` channels on a
``image_size / patch_size`` grid. Stage ``s`` halves the side and works at
``D_s = embed_dim * 2**(s+1)`` channels:

* Swin branch: patch merging (C -> 2C) and ``stage_depths[s]`` Swin blocks.
* Dense branch: dense block (C -> C + L*k), 3x3 stride-2 conv, same width.
* Each branch is aligned to ``D_s`` by a 1x1 conv and the two are concatenated.
* A merge dense block (2D -> 2D + L*k), a 1x1 transition back to ``D_s``,
  then IAWCA.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, GuidedSelfAttention, SwinStage, WindowAttention, window_partition, window_reverse
from .blocks import IAWCA, PSNL, DenseBlock, DenseBlockConfig, ResidualBlock
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module, make_rng, to_channels_first, to_channels_last
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 2
    embed_dim: int = 24
    num_stages: int = 2
    stage_depths: tuple[int, ...] = (2, 2)
    window_size: int = 4
    num_heads: tuple[int, ...] = (3, 6)
    dense_layers: tuple[int, ...] = (2, 2)
    growth_rate: int = 12
    psnl_patch: int = 4
    num_classes: int = 4
    iawca_reduction: int = 4
    iawca_every_stage: bool = True
    # ablation switches: GSNet-0 triple=False, GSNet-1 guided=False, GSNet-2 iawca=False
    guided: bool = True
    triple: bool = True
    iawca: bool = True

    def __post_init__(self):
        for f in ("stage_depths", "num_heads", "dense_layers"):
            setattr(self, f, tuple(int(v) for v in getattr(self, f)))

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * 2 ** (s + 1)

    def stage_side(self, s: int) -> int:
        return self.image_size // self.patch_size // 2 ** (s + 1)

    @property
    def out_dim(self) -> int:
        return self.stage_dim(self.num_stages - 1)

    @property
    def head_dim(self) -> int:
        return 2 * self.out_dim if self.triple else self.out_dim

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}")
        need(self.num_stages >= 1, "num_stages must be >= 1")
        for name in ("stage_depths", "num_heads", "dense_layers"):
            need(len(getattr(self, name)) == self.num_stages,
                 f"{name} has {len(getattr(self, name))} entries, expected num_stages={self.num_stages}")
        need(self.patch_size >= 1 and self.image_size % self.patch_size == 0,
             f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        grid = self.image_size // self.patch_size
        need(grid % 2 ** self.num_stages == 0,
             f"patch grid {grid} must be divisible by 2**num_stages={2 ** self.num_stages}")
        need(self.window_size >= 1, "window_size must be >= 1")
        for s in range(self.num_stages):
            side, dim = self.stage_side(s), self.stage_dim(s)
            need(side % self.window_size == 0,
                 f"stage {s} side {side} not divisible by window_size {self.window_size}")
            need(dim % self.num_heads[s] == 0,
                 f"stage {s} dim {dim} not divisible by num_heads {self.num_heads[s]}")
            need(dim % self.iawca_reduction == 0,
                 f"stage {s} dim {dim} not divisible by iawca_reduction {self.iawca_reduction}")
        need(self.psnl_patch >= 1 and self.stage_side(self.num_stages - 1) % self.psnl_patch == 0,
             f"psnl_patch {self.psnl_patch} must divide final side {self.stage_side(self.num_stages - 1)}")
        need(self.growth_rate >= 1, "growth_rate must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model keys: {unknown}")
        return cls(**d)


class EncoderStage(Module):
    def __init__(self, cin: int, dim: int, cfg: ModelConfig, s: int, rng):
        dcfg = DenseBlockConfig(cfg.dense_layers[s], cfg.growth_rate)
        dense_out = dcfg.out_channels(cin)
        self.swin = SwinStage(cin, cfg.num_heads[s], cfg.window_size, cfg.stage_depths[s], rng)
        self.dense = DenseBlock(cin, dcfg, rng)
        self.down = Conv2d(dense_out, dense_out, 3, rng, stride=2, padding=1)
        self.align_swin = Conv2d(dim, dim, 1, rng)
        self.align_dense = Conv2d(dense_out, dim, 1, rng)
        self.merge = DenseBlock(2 * dim, dcfg, rng)
        self.transition = Conv2d(dcfg.out_channels(2 * dim), dim, 1, rng)
        self.iawca = IAWCA(dim, rng, cfg.iawca_reduction) if cfg.iawca and cfg.iawca_every_stage else None

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: fused map [B,C,H,W] -> (fused [B,D,H/2,W/2], swin map [B,H/2,W/2,D])."""
        swin = self.swin(to_channels_last(x))
        a = self.align_swin(to_channels_first(swin))
        b = self.align_dense(self.down(self.dense(x)))
        fused = self.transition(self.merge(T.concat([a, b], axis=1)))
        if self.iawca is not None:
            fused = self.iawca(fused)
        return fused, swin


class GsnetModel(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.patch_embed = Conv2d(1, cfg.embed_dim, cfg.patch_size, rng, stride=cfg.patch_size)
        self.stages = []
        cin = cfg.embed_dim
        for s in range(cfg.num_stages):
            dim = cfg.stage_dim(s)
            self.stages.append(EncoderStage(cin, dim, cfg, s, rng))
            cin = dim
        D = cfg.out_dim
        acfg = AttentionConfig(D, cfg.num_heads[-1], cfg.window_size)
        if cfg.guided:
            self.guided = GuidedSelfAttention(acfg, rng)
        else:
            self.wmsa = WindowAttention(acfg, rng)
        if cfg.triple:
            self.stream2_iawca = IAWCA(D, rng, cfg.iawca_reduction) if cfg.iawca else None
            self.stream2_psnl = PSNL(D, cfg.psnl_patch, rng)
            self.stream3 = ResidualBlock(D, rng)
        self.head_norm = LayerNorm(cfg.head_dim)
        self.head = Linear(cfg.head_dim, cfg.num_classes, rng)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (feat_e [B,D,h,w] fused encoder map, feat_s [B,h,w,D] last Swin map)."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected input [B,1,{cfg.image_size},{cfg.image_size}], got {x.shape}"
            )
        h = self.patch_embed(x)
        swin = None
        for stage in self.stages:
            h, swin = stage(h)
        return h, swin

    def attend(self, feat_e: Tensor, feat_s: Tensor, return_weights: bool = False):
        """Stream 1: guided attention (or plain W-MSA on the Swin map), channels-first."""
        e_last = to_channels_last(feat_e)
        if self.cfg.guided:
            out = self.guided(feat_s, e_last, return_weights=return_weights)
        else:
            B, H, W, C = feat_s.shape
            M = self.cfg.window_size
            out = self.wmsa(window_partition(feat_s, M), return_weights=return_weights)
            if return_weights:
                out = (window_reverse(out[0], M, H, W), out[1])
            else:
                out = window_reverse(out, M, H, W)
        if return_weights:
            return to_channels_first(out[0]), out[1]
        return to_channels_first(out)

    def stream2(self, feat_e: Tensor) -> Tensor:
        s2 = feat_e
        if self.stream2_iawca is not None:
            s2 = self.stream2_iawca(s2)
        return self.stream2_psnl(s2)

    def triple_stream_merge(self, g: Tensor, feat_e: Tensor) -> Tensor:
        if g.shape != feat_e.shape:
            raise DimensionError(f"stream 1 {g.shape} and encoder map {feat_e.shape} differ")
        s2 = self.stream2(feat_e)
        s3 = self.stream3(feat_e)
        return T.concat([T.mul(g, s2), s3], axis=1)

    def classify(self, merged: Tensor) -> Tensor:
        pooled = T.mean(merged, axis=(2, 3))
        return self.head(self.head_norm(pooled))

    def forward(self, x: Tensor) -> Tensor:
        feat_e, feat_s = self.encode(x)
        g = self.attend(feat_e, feat_s)
        merged = self.triple_stream_merge(g, feat_e) if self.cfg.triple else g
        return self.classify(merged)

    def features(self, x: Tensor) -> dict[str, Tensor]:
        """Intermediate maps used by the diagnostics."""
        feat_e, feat_s = self.encode(x)
        g, attn = self.attend(feat_e, feat_s, return_weights=True)
        return {"feat_e": feat_e, "feat_s": to_channels_first(feat_s), "guided": g, "attention": attn}


def build_model(cfg: ModelConfig, seed: int) -> GsnetModel:
    cfg.validate()
    return GsnetModel(cfg, make_rng(seed))

