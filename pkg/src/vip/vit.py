"""Minimal pre-norm Vision Transformer encoder with an attention/value trace.

The forward pass takes raw ``3 x H x W`` pixels in ``[0, 255]`` and records,
for every traced block and head, the attention weights ``A`` and value matrix
``V`` (plus the query/key projections) as graph tensors, so attack losses
built from them differentiate back to the input pixels.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

# CLIP image statistics, per RGB channel on the [0, 1] scale.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ConfigError(ValueError):
    """Architecture parameters violate a structural invariant."""


class WeightFormatError(ValueError):
    """A weight file could not be decoded."""


@dataclass(frozen=True)
class ViTConfig:
    resolution: int = 64
    patch_dim: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_hidden_dim: int = 128
    mean: Tuple[float, float, float] = CLIP_MEAN
    std: Tuple[float, float, float] = CLIP_STD

    def __post_init__(self):
        for name in ("resolution", "patch_dim", "embed_dim", "num_heads", "num_layers", "mlp_hidden_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.resolution % self.patch_dim:
            raise ConfigError(
                f"resolution ({self.resolution}) must be a multiple of patch_dim ({self.patch_dim})"
            )
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("mean and std need exactly three channel values")
        if any(s <= 0 for s in self.std):
            raise ConfigError(f"std values must be positive, got {self.std}")
        # stored as f32 in weight files; round here so reloaded configs compare equal
        object.__setattr__(self, "mean", tuple(float(np.float32(m)) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(np.float32(s)) for s in self.std))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid_size(self) -> int:
        return self.resolution // self.patch_dim

    @property
    def num_patches(self) -> int:
        return math.ceil(self.resolution * self.resolution / self.patch_dim ** 2)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_size(self) -> int:
        """Flattened length of one patch (channels included)."""
        return 3 * self.patch_dim * self.patch_dim


def parameter_shapes(config: ViTConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes, in weight-file order."""
    e, m = config.embed_dim, config.mlp_hidden_dim
    shapes = [
        ("patch_w", (config.patch_size, e)),
        ("patch_b", (e,)),
        ("cls", (e,)),
        ("pos", (config.seq_len, e)),
    ]
    for layer in range(config.num_layers):
        p = f"layer{layer}."
        shapes += [
            (p + "ln1_g", (e,)), (p + "ln1_b", (e,)),
            (p + "wq", (e, e)), (p + "bq", (e,)),
            (p + "wk", (e, e)), (p + "bk", (e,)),
            (p + "wv", (e, e)), (p + "bv", (e,)),
            (p + "wo", (e, e)), (p + "bo", (e,)),
            (p + "ln2_g", (e,)), (p + "ln2_b", (e,)),
            (p + "w1", (e, m)), (p + "b1", (m,)),
            (p + "w2", (m, e)), (p + "b2", (e,)),
        ]
    shapes += [("lnf_g", (e,)), ("lnf_b", (e,))]
    return shapes


class MhaActivations:
    """Per-block, per-head record of ``A``, ``V``, ``Q`` and ``K``.

    Layers and heads are addressed 1-based for layers (block 1 is the first
    encoder block) and 0-based for heads. ``attention_reads`` counts calls to
    :meth:`attention`, which lets callers prove a code path never touched ``A``.
    """

    def __init__(self, num_layers: int, num_heads: int, seq_len: int):
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.seq_len = seq_len
        self.attention_reads = 0
        self._a: Dict[Tuple[int, int], Tensor] = {}
        self._v: Dict[Tuple[int, int], Tensor] = {}
        self._q: Dict[Tuple[int, int], Tensor] = {}
        self._k: Dict[Tuple[int, int], Tensor] = {}

    def record(self, layer: int, head: int, q: Tensor, k: Tensor, v: Tensor, a: Tensor) -> None:
        key = (layer, head)
        self._q[key], self._k[key], self._v[key], self._a[key] = q, k, v, a

    def _check(self, layer: int, head: int) -> Tuple[int, int]:
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} not traced (trace covers 1..{self.num_layers})")
        if not 0 <= head < self.num_heads:
            raise IndexError(f"head {head} out of range [0, {self.num_heads})")
        return layer, head

    def attention(self, layer: int, head: int) -> Tensor:
        self.attention_reads += 1
        return self._a[self._check(layer, head)]

    def value(self, layer: int, head: int) -> Tensor:
        return self._v[self._check(layer, head)]

    def query(self, layer: int, head: int) -> Tensor:
        return self._q[self._check(layer, head)]

    def key(self, layer: int, head: int) -> Tensor:
        return self._k[self._check(layer, head)]

    def attention_array(self, layer: int) -> np.ndarray:
        """``heads x seq x seq`` float64 copy of one block's attention weights."""
        return np.stack([self.attention(layer, h).data for h in range(self.num_heads)]).astype(np.float64)

    @classmethod
    def from_arrays(cls, attention: np.ndarray, values: Optional[np.ndarray] = None) -> "MhaActivations":
        """Build a trace from ``layers x heads x seq x seq`` attention weights.

        Useful for analysis of externally produced attention maps; ``values``
        (``layers x heads x seq x d``) defaults to zeros.
        """
        attention = np.asarray(attention)
        if attention.ndim != 4 or attention.shape[2] != attention.shape[3]:
            raise DimensionError(f"expected layers x heads x seq x seq, got {attention.shape}")
        n_layers, n_heads, seq, _ = attention.shape
        if values is None:
            values = np.zeros((n_layers, n_heads, seq, 1))
        trace = cls(n_layers, n_heads, seq)
        for l in range(n_layers):
            for h in range(n_heads):
                trace.record(l + 1, h, None, None, Tensor(values[l, h]), Tensor(attention[l, h]))
        return trace


@dataclass
class EncoderOutput:
    tokens: Tensor
    pooled: Tensor
    activations: MhaActivations


@dataclass
class ViTModel:
    config: ViTConfig
    weights: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = dict(parameter_shapes(self.config))
        missing = set(expected) - set(self.weights)
        if missing:
            raise ConfigError(f"missing weights: {sorted(missing)}")
        for name, shape in expected.items():
            arr = self.weights[name]
            if arr.shape != shape:
                raise ConfigError(f"weight {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"weight {name} contains non-finite values")

    @property
    def dtype(self):
        return self.weights["patch_w"].dtype

    def astype(self, dtype) -> "ViTModel":
        return ViTModel(self.config, {k: v.astype(dtype) for k, v in self.weights.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in parameter_shapes(self.config):
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def forward(self, image, trace_up_to: Optional[int] = None) -> EncoderOutput:
        return forward(self, image, trace_up_to)


def init_random(config: ViTConfig, seed: int) -> ViTModel:
    """Seeded weights: normal with std ``1/sqrt(fan_in)``, zero biases, unit norms.

    Embedding vectors (CLS, positions) use ``fan_in = embed_dim``.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(config):
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            arr = np.ones(shape)
        elif short.startswith("b") or short.endswith("_b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 and short not in ("pos",) else config.embed_dim
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        weights[name] = arr.astype(np.float32)
    return ViTModel(config, weights)


def _const(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, dtype=dtype)


def forward(model: ViTModel, image, trace_up_to: Optional[int] = None) -> EncoderOutput:
    """Run the encoder on raw pixels.

    Args:
        model: Encoder weights and configuration.
        image: ``3 x H x W`` tensor or array of pixel values in ``[0, 255]``.
        trace_up_to: Number of leading blocks whose activations are recorded;
            defaults to all blocks.

    Returns:
        Final-normalised token embeddings, the pooled CLS feature and the trace.
    """
    cfg = model.config
    dtype = model.dtype
    if trace_up_to is None:
        trace_up_to = cfg.num_layers
    if not 0 <= trace_up_to <= cfg.num_layers:
        raise ValueError(f"trace_up_to={trace_up_to} outside [0, {cfg.num_layers}]")
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=dtype)
    expected = (3, cfg.resolution, cfg.resolution)
    if x.shape != expected:
        raise DimensionError(f"image shape {x.shape} does not match model input {expected}")
    w = {k: _const(v, dtype) for k, v in model.weights.items()}

    mean = np.asarray(cfg.mean, dtype=dtype).reshape(3, 1, 1)
    inv_std = (1.0 / np.asarray(cfg.std, dtype=np.float64)).astype(dtype).reshape(3, 1, 1)
    x = ad.mul(ad.sub(ad.mul_scalar(x, 1.0 / 255.0), _const(mean, dtype)), _const(inv_std, dtype))

    g, p = cfg.grid_size, cfg.patch_dim
    patches = ad.reshape(x, (3, g, p, g, p))
    patches = ad.transpose(patches, (1, 3, 0, 2, 4))
    patches = ad.reshape(patches, (g * g, cfg.patch_size))
    tokens = ad.add(ad.matmul(patches, w["patch_w"]), w["patch_b"])
    cls = ad.reshape(w["cls"], (1, cfg.embed_dim))
    h = ad.add(ad.concat([cls, tokens], axis=0), w["pos"])

    trace = MhaActivations(trace_up_to, cfg.num_heads, cfg.seq_len)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    d = cfg.head_dim
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}."
        normed = ad.layernorm(h, w[pre + "ln1_g"], w[pre + "ln1_b"])
        q = ad.add(ad.matmul(normed, w[pre + "wq"]), w[pre + "bq"])
        k = ad.add(ad.matmul(normed, w[pre + "wk"]), w[pre + "bk"])
        v = ad.add(ad.matmul(normed, w[pre + "wv"]), w[pre + "bv"])
        heads = []
        for head in range(cfg.num_heads):
            cols = (slice(None), slice(head * d, (head + 1) * d))
            qh, kh, vh = q[cols], k[cols], v[cols]
            logits = ad.mul_scalar(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.softmax_rows(logits)
            if layer < trace_up_to:
                trace.record(layer + 1, head, qh, kh, vh, attn)
            heads.append(ad.matmul(attn, vh))
        mixed = ad.add(ad.matmul(ad.concat(heads, axis=1), w[pre + "wo"]), w[pre + "bo"])
        h = ad.add(h, mixed)
        normed = ad.layernorm(h, w[pre + "ln2_g"], w[pre + "ln2_b"])
        hidden = ad.gelu(ad.add(ad.matmul(normed, w[pre + "w1"]), w[pre + "b1"]))
        h = ad.add(h, ad.add(ad.matmul(hidden, w[pre + "w2"]), w[pre + "b2"]))

    out = ad.layernorm(h, w["lnf_g"], w["lnf_b"])
    return EncoderOutput(tokens=out, pooled=out[0], activations=trace)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   b"VITW" | u32 version | 7 x u32 (resolution, patch_dim, embed_dim,
#   num_heads, num_layers, mlp_hidden_dim, reserved=0) | 3 x f32 mean |
#   3 x f32 std | every tensor of parameter_shapes() in order, raw f32
#   row-major.

MAGIC = b"VITW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI7I6f")


def save_weights(model: ViTModel, path: Union[str, Path]) -> None:
    cfg = model.config
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION,
        cfg.resolution, cfg.patch_dim, cfg.embed_dim, cfg.num_heads, cfg.num_layers,
        cfg.mlp_hidden_dim, 0, *cfg.mean, *cfg.std,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in parameter_shapes(cfg):
            fh.write(np.ascontiguousarray(model.weights[name], dtype="<f4").tobytes())


def load_weights(path: Union[str, Path]) -> ViTModel:
    """Read a VITW file.

    Raises:
        WeightFormatError: Bad magic or version, inconsistent header, or a
            payload that is truncated or has trailing bytes. The message names
            the offending field.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise WeightFormatError(f"header truncated: {len(blob)} of {_HEADER.size} bytes")
    fields = _HEADER.unpack_from(blob)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise WeightFormatError(f"magic: expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"version: expected {FORMAT_VERSION}, found {version}")
    res, patch, embed, heads, layers, mlp, reserved = fields[2:9]
    if reserved != 0:
        raise WeightFormatError(f"reserved: expected 0, found {reserved}")
    # f32 round-trip of the normalisation constants keeps reload bit-exact
    mean, std = tuple(fields[9:12]), tuple(fields[12:15])
    try:
        cfg = ViTConfig(res, patch, embed, heads, layers, mlp, mean, std)
    except ConfigError as exc:
        raise WeightFormatError(f"config: {exc}") from exc
    weights = {}
    offset = _HEADER.size
    for name, shape in parameter_shapes(cfg):
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise WeightFormatError(f"tensor {name}: truncated ({len(blob) - offset} of {nbytes} bytes)")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        weights[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise WeightFormatError(f"payload: {len(blob) - offset} trailing bytes after last tensor")
    try:
        return ViTModel(cfg, weights)
    except ConfigError as exc:
        raise WeightFormatError(str(exc)) from exc
