"""Finite-difference gradient checking, determinant-based independence probes,
and export of attention/feature maps as 8-bit PGM images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .checkpoint import atomic_write
from .errors import InputError
from .pgm import write_pgm
from .tensor import Tensor, backward, no_grad

SINGULAR = float("-inf")


# ---------------------------------------------------------------- gradient check


@dataclass
class ParamCheck:
    max_rel_err: float
    mean_rel_err: float
    worst_index: tuple[int, ...]
    n_checked: int


@dataclass
class GradCheckReport:
    entries: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries.values()), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def worst(self) -> tuple[str, ParamCheck]:
        return max(self.entries.items(), key=lambda kv: kv[1].max_rel_err)

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "params": {
                k: {"max_rel_err": e.max_rel_err, "mean_rel_err": e.mean_rel_err,
                    "worst_index": list(e.worst_index), "n_checked": e.n_checked}
                for k, e in self.entries.items()
            },
        }


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable, x: Tensor | Mapping[str, Tensor], h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``x`` is either one tensor, in which case ``f(x)`` is evaluated, or a
    mapping of named tensors (typically model parameters) that ``f()``
    closes over. ``max_coords`` caps the coordinates probed per tensor; the
    subset is drawn without replacement from a seeded generator.
    """
    if h <= 0:
        raise InputError(f"step h must be positive, got {h}")
    if isinstance(x, Tensor):
        named = {"x": x}
        call = lambda: f(x)  # noqa: E731
    else:
        named = dict(x)
        call = f
    for t in named.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = call()
    if out.size != 1:
        raise InputError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = {k: t.grad.copy() for k, t in named.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with no_grad():
        for name, t in named.items():
            flat = t.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if max_coords is None or max_coords >= n else np.sort(
                rng.choice(n, size=max_coords, replace=False))
            errs = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = float(call().data)
                flat[c] = orig - h
                fm = float(call().data)
                flat[c] = orig
                numeric = (fp - fm) / (2 * h)
                errs[j] = relative_error(np.array(analytic[name].reshape(-1)[c]), np.array(numeric))
            worst = int(np.argmax(errs)) if len(errs) else 0
            report.entries[name] = ParamCheck(
                max_rel_err=float(errs.max()) if len(errs) else 0.0,
                mean_rel_err=float(errs.mean()) if len(errs) else 0.0,
                worst_index=tuple(int(i) for i in np.unravel_index(coords[worst], t.shape)) if len(errs) else (),
                n_checked=len(coords),
            )
    return report


# ---------------------------------------------------------------- independence probe


@dataclass
class IndependenceReport:
    values: np.ndarray  # [B, C] log|det| per channel slice, -inf when singular
    dimension: int
    method: str  # "det" for square slices, "gram" otherwise
    source: str = ""

    @property
    def mean(self) -> float:
        finite = self.values[np.isfinite(self.values)]
        return float(finite.mean()) if finite.size else SINGULAR

    @property
    def n_singular(self) -> int:
        return int(np.sum(~np.isfinite(self.values)))

    def to_dict(self) -> dict:
        def enc(v):
            return "-inf" if v == SINGULAR else float(v)

        return {
            "source": self.source,
            "method": self.method,
            "dimension": self.dimension,
            "mean_finite": enc(self.mean),
            "n_singular": self.n_singular,
            "values": [[enc(v) for v in row] for row in self.values],
        }


def log_abs_det(a: np.ndarray) -> float:
    """log|det A|, or -inf when A is numerically rank deficient."""
    if np.linalg.matrix_rank(a) < a.shape[0]:
        return SINGULAR
    sign, logdet = np.linalg.slogdet(a)
    return SINGULAR if sign == 0 else float(logdet)


def log_gram_det(a: np.ndarray, eps: float = 1e-12) -> float:
    """(1/2) log det(A^T A + eps I)."""
    g = a.T @ a + eps * np.eye(a.shape[1])
    sign, logdet = np.linalg.slogdet(g)
    return SINGULAR if sign <= 0 else 0.5 * float(logdet)


def independence_probe(feat, eps: float = 1e-12, source: str = "") -> IndependenceReport:
    arr = feat.data if isinstance(feat, Tensor) else np.asarray(feat, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4:
        raise InputError(f"independence_probe expects [B,C,H,W], got shape {arr.shape}")
    B, C, H, W = arr.shape
    square = H == W
    vals = np.empty((B, C))
    for b in range(B):
        for c in range(C):
            a = arr[b, c]
            vals[b, c] = log_abs_det(a) if square else log_gram_det(a, eps)
    return IndependenceReport(vals, H if square else W, "det" if square else "gram", source)


def compare_independence(model, image: np.ndarray) -> dict[str, IndependenceReport]:
    """Probe the raw image and the fused encoder map of one sample."""
    x = Tensor(np.asarray(image, dtype=np.float64)[None, None])
    with no_grad():
        feat_e, _ = model.encode(x)
    return {
        "input": independence_probe(x, source="input"),
        "encoder": independence_probe(feat_e, source="encoder"),
    }


# ---------------------------------------------------------------- map export


def quantize_map(weights) -> np.ndarray:
    """Min-max normalise to [0, 1] (constant maps become 0.5), then round half up to 0..255."""
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if w.ndim != 2:
        raise InputError(f"expected a 2-D map, got shape {w.shape}")
    if np.any(w < 0):
        raise InputError("attention map must be non-negative")
    lo, hi = w.min(), w.max()
    norm = np.full_like(w, 0.5) if hi == lo else (w - lo) / (hi - lo)
    return np.floor(norm * 255 + 0.5).astype(np.int64)


def export_attention_map(weights, path) -> None:
    write_pgm(path, quantize_map(weights), 255)


def feature_map_summary(feat: Tensor, sample: int = 0) -> np.ndarray:
    """Channel-mean absolute activation of one sample, [H, W]."""
    return np.abs(feat.data[sample]).mean(axis=0)


def dump_json(obj, path) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))
