"""Seeded toy inputs and hand-built encoders with known attention patterns."""

from __future__ import annotations

import numpy as np

from .roi import BoundingBox
from .vit import ViTConfig, ViTModel, init_random, parameter_shapes

TOY_CONFIG = ViTConfig(resolution=64, patch_dim=16, embed_dim=64, num_heads=4, num_layers=4, mlp_hidden_dim=128)
TOY_SEED = 7
TOY_BOX = BoundingBox(16, 16, 32, 32)


def toy_model(seed: int = TOY_SEED) -> ViTModel:
    return init_random(TOY_CONFIG, seed)


def synthetic_image(resolution: int = 64, seed: int = TOY_SEED, spectral_slope: float = 1.0,
                    contrast: float = 45.0) -> np.ndarray:
    """A ``3 x R x R`` image with a natural-image-like ``1/f`` amplitude spectrum.

    Channels share most of their noise source so colours stay correlated.
    Values are clipped to ``[16, 239]``, so small finite-difference probes
    rarely touch the ``[0, 255]`` clipping boundary.
    """
    rng = np.random.default_rng(seed)
    freq = np.fft.fftfreq(resolution)
    fx, fy = np.meshgrid(freq, freq)
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0
    shared = rng.standard_normal((resolution, resolution))
    img = np.empty((3, resolution, resolution))
    for c in range(3):
        noise = 0.7 * shared + 0.3 * rng.standard_normal((resolution, resolution))
        spectrum = np.fft.fft2(noise) / radius ** spectral_slope
        spectrum[0, 0] = 0.0
        field = np.real(np.fft.ifft2(spectrum))
        field = (field - field.mean()) / field.std()
        img[c] = rng.uniform(100, 150) + contrast * field
    return np.clip(img, 16.0, 239.0)


def toy_image() -> np.ndarray:
    return np.rint(synthetic_image(TOY_CONFIG.resolution, TOY_SEED)).astype(np.float32)


def _zero_weights(config: ViTConfig) -> dict:
    weights = {name: np.zeros(shape, np.float32) for name, shape in parameter_shapes(config)}
    for name in weights:
        if name.endswith("_g"):
            weights[name][:] = 1.0
    return weights


def uniform_attention_model(config: ViTConfig = TOY_CONFIG, seed: int = 0) -> ViTModel:
    """Random encoder with zero query/key projections, so every attention row is uniform."""
    model = init_random(config, seed)
    weights = dict(model.weights)
    for layer in range(config.num_layers):
        for name in ("wq", "bq", "wk", "bk"):
            weights[f"layer{layer}.{name}"] = np.zeros_like(weights[f"layer{layer}.{name}"])
    return ViTModel(config, weights)


def identity_attention_model(config: ViTConfig = TOY_CONFIG, sharpness: float = 20.0,
                             seed: int = 0) -> ViTModel:
    """Encoder whose every head attends (numerically) only to the token itself.

    Patch content is ignored: the residual stream is a set of mutually
    orthogonal positional rows, and attention/MLP outputs are zeroed so the
    stream never changes. Within each head, token ``i`` is mapped to vertex
    ``u_i`` of a regular simplex, giving logits ``s^2 u_i . u_j / sqrt(d)``
    whose diagonal exceeds every off-diagonal entry by
    ``s^2 (1 + 1 / (n - 1)) / sqrt(d)``.
    """
    seq, e, d = config.seq_len, config.embed_dim, config.head_dim
    if seq > e - 1 or seq > d + 1:
        raise ValueError(f"seq_len {seq} too large for embed_dim {e} / head_dim {d}")
    rng = np.random.default_rng(seed)
    # orthonormal rows in the zero-mean subspace, scaled to norm sqrt(e)
    basis = rng.standard_normal((e, seq))
    basis -= basis.mean(axis=0, keepdims=True)
    q, _ = np.linalg.qr(basis)
    rows = q.T[:seq]
    pos = rows * np.sqrt(e)
    # regular simplex with seq vertices embedded in d dims
    centred = np.eye(seq) - 1.0 / seq
    u, s, _ = np.linalg.svd(centred)
    simplex = (u[:, : seq - 1] * s[: seq - 1]) @ np.eye(seq - 1, d)
    simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
    proj = rows.T @ simplex / np.sqrt(e) * sharpness

    weights = _zero_weights(config)
    weights["pos"] = pos.astype(np.float32)
    for layer in range(config.num_layers):
        wq = np.zeros((e, e))
        for head in range(config.num_heads):
            wq[:, head * d:(head + 1) * d] = proj
        weights[f"layer{layer}.wq"] = wq.astype(np.float32)
        weights[f"layer{layer}.wk"] = wq.astype(np.float32)
        weights[f"layer{layer}.wv"] = np.eye(e, dtype=np.float32)
    return ViTModel(config, weights)
