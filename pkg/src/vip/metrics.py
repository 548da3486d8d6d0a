"""Fidelity and attack-effect measurements.

Everything here is read-only over images and traces and works in float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import DimensionError
from .roi import RoiTokenSet
from .vit import MhaActivations, ViTModel


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------

def _ssim_map(x: np.ndarray, y: np.ndarray, c1: float, c2: float, window: int) -> np.ndarray:
    h, w = x.shape
    if h < window or w < window:
        blocks_x, blocks_y = x.reshape(1, -1), y.reshape(1, -1)
    else:
        nh, nw = h // window, w // window
        crop = (slice(0, nh * window), slice(0, nw * window))
        blocks_x = x[crop].reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, -1)
        blocks_y = y[crop].reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, -1)
    mx, my = blocks_x.mean(axis=1), blocks_y.mean(axis=1)
    dx, dy = blocks_x - mx[:, None], blocks_y - my[:, None]
    vx, vy = (dx * dx).mean(axis=1), (dy * dy).mean(axis=1)
    cov = (dx * dy).mean(axis=1)
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def _gaussian_ssim_map(x, y, c1, c2, sigma=1.5, radius=5):
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()

    def blur(img):
        rows = np.apply_along_axis(lambda r: np.convolve(r, taps, mode="valid"), 1, img)
        return np.apply_along_axis(lambda c: np.convolve(c, taps, mode="valid"), 0, rows)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cov = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def ssim(x, y, window: int = 8, data_range: float = 255.0, gaussian: bool = False) -> float:
    """Mean structural similarity of two images.

    Images are ``C x H x W`` (or ``H x W``). By default local statistics come
    from non-overlapping ``window x window`` blocks with uniform weights; with
    ``gaussian=True`` an 11-tap, sigma 1.5 Gaussian sliding window is used
    instead. Per-channel means are averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    per_channel = []
    for cx, cy in zip(x, y):
        local = _gaussian_ssim_map(cx, cy, c1, c2) if gaussian else _ssim_map(cx, cy, c1, c2, window)
        per_channel.append(local.mean())
    return float(np.mean(per_channel))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([cosine_similarity(u, v) for u, v in zip(a, b)])


# ---------------------------------------------------------------------------
# attention analysis
# ---------------------------------------------------------------------------

def roi_attention_mass(trace: MhaActivations, roi: RoiTokenSet, layer: int) -> float:
    """Fraction of one block's attention (all heads, all query rows) landing on ROI columns."""
    attn = trace.attention_array(layer)
    cols = list(roi.indices)
    return float(attn[:, :, cols].sum() / (trace.num_heads * trace.seq_len))


@dataclass
class RolloutMap:
    matrix: np.ndarray

    @property
    def heat(self) -> np.ndarray:
        """Per-patch relevance: the CLS row without its CLS column."""
        return self.matrix[0, 1:]

    def roi_mass(self, roi: RoiTokenSet) -> float:
        return float(self.matrix[0, list(roi.indices)].sum())


def attention_rollout(trace: MhaActivations, up_to_layer: Optional[int] = None) -> RolloutMap:
    """Head-averaged, identity-augmented attention rolled out over blocks ``1..up_to_layer``."""
    depth = trace.num_layers if up_to_layer is None else up_to_layer
    eye = np.eye(trace.seq_len)
    rollout = eye.copy()
    for layer in range(1, depth + 1):
        fused = trace.attention_array(layer).mean(axis=0) + eye
        fused /= fused.sum(axis=1, keepdims=True)
        rollout = fused @ rollout
    return RolloutMap(rollout)


def diagonal_dominance(trace: MhaActivations, layer: int) -> float:
    attn = trace.attention_array(layer)
    return float(np.trace(attn, axis1=1, axis2=2).mean() / trace.seq_len)


def averaged_attention_map(traces: Sequence[MhaActivations], layer: int) -> np.ndarray:
    """Mean of one block's attention over heads and a batch of traces."""
    if not traces:
        raise ValueError("averaged_attention_map needs at least one trace")
    seq = {t.seq_len for t in traces}
    if len(seq) != 1:
        raise DimensionError(f"traces disagree on seq_len: {sorted(seq)}")
    return np.mean([t.attention_array(layer).mean(axis=0) for t in traces], axis=0)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class MetricsBundle:
    ssim: float
    feature_cosine_global: float
    feature_cosine_roi: float
    feature_cosine_background: float
    roi_attention_mass_clean: List[float] = field(default_factory=list)
    roi_attention_mass_adv: List[float] = field(default_factory=list)
    rollout_roi_mass_clean: float = 0.0
    rollout_roi_mass_adv: float = 0.0
    diagonal_dominance: List[float] = field(default_factory=list)

    @property
    def rollout_ratio(self) -> float:
        if self.rollout_roi_mass_clean == 0:
            return float("inf")
        return self.rollout_roi_mass_adv / self.rollout_roi_mass_clean

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["rollout_ratio"] = self.rollout_ratio
        return out


def compute_metrics(model: ViTModel, clean: np.ndarray, adversarial: np.ndarray,
                    roi: RoiTokenSet, rollout_depth: int) -> MetricsBundle:
    """Compare clean and adversarial images through ``model``.

    Per-layer quantities cover every encoder block; rollout masses use blocks
    ``1..rollout_depth``.
    """
    out_c = model.forward(clean)
    out_a = model.forward(adversarial)
    tok_c, tok_a = out_c.tokens.data, out_a.tokens.data
    roi_idx, bg_idx = list(roi.indices), list(roi.background)
    layers = range(1, model.config.num_layers + 1)
    return MetricsBundle(
        ssim=ssim(clean, adversarial),
        feature_cosine_global=cosine_similarity(out_c.pooled.data, out_a.pooled.data),
        feature_cosine_roi=float(rowwise_cosine(tok_c[roi_idx], tok_a[roi_idx]).mean()),
        feature_cosine_background=float(rowwise_cosine(tok_c[bg_idx], tok_a[bg_idx]).mean()) if bg_idx else 1.0,
        roi_attention_mass_clean=[roi_attention_mass(out_c.activations, roi, l) for l in layers],
        roi_attention_mass_adv=[roi_attention_mass(out_a.activations, roi, l) for l in layers],
        rollout_roi_mass_clean=attention_rollout(out_c.activations, rollout_depth).roi_mass(roi),
        rollout_roi_mass_adv=attention_rollout(out_a.activations, rollout_depth).roi_mass(roi),
        diagonal_dominance=[diagonal_dominance(out_a.activations, l) for l in layers],
    )
