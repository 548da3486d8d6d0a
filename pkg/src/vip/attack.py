"""Attention/value-suppression attack on a ViT encoder.

The perturbation ``delta`` lives in raw pixel units. Each iteration forms
``clip(x_clean + delta, 0, 255)``, runs the encoder with a trace over the
first ``l_max`` blocks, builds the loss from the ROI columns of the attention
weights and/or the ROI rows of the value matrices, differentiates it with
respect to ``delta`` and takes an Adam or sign-gradient step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import MetricsBundle, attention_rollout, compute_metrics, rowwise_cosine
from .roi import EmptyRoiError, RoiTokenSet
from .vit import MhaActivations, ViTModel

logger = logging.getLogger(__name__)

MODES = ("A", "A+V", "V")
OPTIMIZERS = ("adam", "sign-gd")
PIXEL_SCALE = 255.0
# relative improvement below which a convergence check counts as a stall
IMPROVEMENT_RTOL = 1e-4


class AttackError(RuntimeError):
    """The optimisation cannot continue (non-finite loss)."""


@dataclass
class AttackConfig:
    """Attack hyperparameters.

    ``alpha`` is a step size on the ``[0, 1]`` intensity scale and is applied
    as ``alpha * 255`` in pixel units. ``linf`` is in pixel units.
    """

    mode: str = "A+V"
    l_max: int = 1
    lambda_v: float = 1.0
    optimizer: str = "adam"
    alpha: float = 1e-3
    max_iters: int = 1500
    patience: int = 10
    check_every: int = 100
    linf: Optional[float] = None
    tau_rollout: float = 0.2
    tau_feat: float = 0.5
    seed: int = 0

    def validate(self, num_layers: Optional[int] = None) -> "AttackConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.l_max < 1 or (num_layers is not None and self.l_max > num_layers):
            raise ValueError(f"l_max={self.l_max} outside [1, {num_layers}]")
        if self.lambda_v < 0:
            raise ValueError(f"lambda_v must be nonnegative, got {self.lambda_v}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        if self.patience < 1 or self.check_every < 1:
            raise ValueError("patience and check_every must be positive")
        if self.linf is not None and self.linf < 0:
            raise ValueError(f"linf must be nonnegative, got {self.linf}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AttackState:
    delta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    best_loss: float = math.inf
    stall: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "AttackState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, np.float64), np.zeros(shape, np.float64))


@dataclass
class LossRecord:
    total: float
    attention: float
    value: float


@dataclass
class AttackResult:
    adversarial: np.ndarray
    delta: np.ndarray
    history: List[LossRecord]
    stop_reason: str
    iterations: int
    success: bool
    attention_reads: int = 0
    metrics: Optional[MetricsBundle] = None

    @property
    def max_abs_delta(self) -> float:
        return float(np.abs(self.delta).max())

    def to_dict(self) -> Dict:
        return {
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "success": self.success,
            "attention_reads": self.attention_reads,
            "max_abs_delta": self.max_abs_delta,
            "loss_history": [asdict(r) for r in self.history],
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
        }


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_depth(trace: MhaActivations, l_max: int) -> None:
    if l_max < 1 or l_max > trace.num_layers:
        raise ValueError(f"l_max={l_max} exceeds traced depth {trace.num_layers}")


def loss_attention(trace: MhaActivations, roi: RoiTokenSet, l_max: int) -> Tensor:
    """Attention paid by every token (CLS included) to ROI tokens, summed over blocks and heads."""
    _check_depth(trace, l_max)
    cols = list(roi.indices)
    terms = [
        ad.sum_all(ad.gather_columns(trace.attention(layer, head), cols))
        for layer in range(1, l_max + 1)
        for head in range(trace.num_heads)
    ]
    return _sum(terms)


def loss_value_norm(trace: MhaActivations, roi: RoiTokenSet, l_max: int) -> Tensor:
    """Sum of Euclidean norms of the ROI rows of every value matrix."""
    _check_depth(trace, l_max)
    rows = list(roi.indices)
    terms = [
        ad.sum_all(ad.l2_norm_rows(ad.gather_rows(trace.value(layer, head), rows)))
        for layer in range(1, l_max + 1)
        for head in range(trace.num_heads)
    ]
    return _sum(terms)


def _sum(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def loss_terms(trace: MhaActivations, roi: RoiTokenSet, config: AttackConfig):
    """``(total, attention, value)``; a term the mode ignores is ``None``."""
    att = loss_attention(trace, roi, config.l_max) if config.mode in ("A", "A+V") else None
    val = loss_value_norm(trace, roi, config.l_max) if config.mode in ("V", "A+V") else None
    if config.mode == "A":
        total = att
    elif config.mode == "V":
        total = val
    else:
        total = ad.add(att, ad.mul_scalar(val, config.lambda_v))
    return total, att, val


def loss_total(trace: MhaActivations, roi: RoiTokenSet, config: AttackConfig) -> Tensor:
    return loss_terms(trace, roi, config)[0]


# ---------------------------------------------------------------------------
# optimiser steps
# ---------------------------------------------------------------------------

def _project(state: AttackState, x_clean: Optional[np.ndarray], linf: Optional[float]) -> None:
    if linf is not None:
        np.clip(state.delta, -linf, linf, out=state.delta)
    if x_clean is not None:
        state.delta[...] = np.clip(x_clean + state.delta, 0.0, PIXEL_SCALE) - x_clean


def step_sign_gd(state: AttackState, grad: np.ndarray, alpha: float,
                 linf: Optional[float] = None, x_clean: Optional[np.ndarray] = None) -> AttackState:
    """``delta -= alpha * sign(grad)`` with ``sign(0) = 0``; ``alpha`` in pixel units."""
    state.t += 1
    state.delta -= (alpha * np.sign(grad)).astype(state.delta.dtype)
    _project(state, x_clean, linf)
    return state


def step_adam(state: AttackState, grad: np.ndarray, alpha: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, linf: Optional[float] = None,
              x_clean: Optional[np.ndarray] = None) -> AttackState:
    """Bias-corrected Adam step on ``delta``; ``alpha`` in pixel units."""
    g = np.asarray(grad, dtype=np.float64)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    state.delta -= (alpha * m_hat / (np.sqrt(v_hat) + eps)).astype(state.delta.dtype)
    _project(state, x_clean, linf)
    return state


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class _Reference:
    rollout_mass: float
    roi_tokens: np.ndarray


def _reference(model: ViTModel, image: np.ndarray, roi: RoiTokenSet, depth: int) -> _Reference:
    out = model.forward(image)
    return _Reference(
        attention_rollout(out.activations, depth).roi_mass(roi),
        out.tokens.data[list(roi.indices)],
    )


def success_predicate(model: ViTModel, adversarial: np.ndarray, roi: RoiTokenSet,
                      clean_ref: _Reference, config: AttackConfig) -> bool:
    """Proxy for "the ROI is no longer detectable".

    Both must hold: rollout mass on ROI tokens (blocks ``1..l_max``) fell
    below ``tau_rollout`` times its clean value, and the mean cosine between
    clean and adversarial ROI output tokens is below ``tau_feat``.
    """
    adv = _reference(model, adversarial, roi, config.l_max)
    if clean_ref.rollout_mass <= 0:
        return False
    ratio = adv.rollout_mass / clean_ref.rollout_mass
    feat = float(rowwise_cosine(clean_ref.roi_tokens, adv.roi_tokens).mean())
    return ratio < config.tau_rollout and feat < config.tau_feat


def run_attack(model: ViTModel, image: np.ndarray, roi: RoiTokenSet, config: AttackConfig,
               callback: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
               with_metrics: bool = True) -> AttackResult:
    """Optimise a perturbation hiding ``roi`` from the encoder.

    Args:
        model: Encoder under attack.
        image: Clean ``3 x H x W`` pixels in ``[0, 255]``.
        roi: Target tokens; must be non-empty.
        config: Hyperparameters.
        callback: Called after every update as ``callback(t, delta, x_adv)``
            with the post-step perturbation and the image the next forward
            would see.
        with_metrics: Fill ``result.metrics`` via :func:`compute_metrics`.

    Raises:
        EmptyRoiError: ``roi`` selects no token.
        AttackError: The loss became non-finite.
    """
    config.validate(model.config.num_layers)
    if roi is None or len(roi) == 0:
        raise EmptyRoiError("ROI token set is empty")
    dtype = model.dtype
    x_clean = np.asarray(image, dtype=dtype)
    expected = (3, model.config.resolution, model.config.resolution)
    if x_clean.shape != expected:
        raise ad.DimensionError(f"image shape {x_clean.shape} does not match model input {expected}")
    if config.mode == "V" and config.lambda_v != 1.0:
        logger.warning("mode V has no lambda_v; ignoring lambda_v=%s", config.lambda_v)

    alpha = config.alpha * PIXEL_SCALE
    state = AttackState.zeros(x_clean.shape, dtype)
    clean_const = Tensor(x_clean)
    clean_ref = _reference(model, x_clean, roi, config.l_max)
    history: List[LossRecord] = []
    attention_reads = 0
    stop_reason = "max_iters"

    for t in range(config.max_iters):
        delta = Tensor(state.delta.copy(), requires_grad=True)
        x_adv = ad.clip(ad.add(clean_const, delta), 0.0, PIXEL_SCALE)
        trace = model.forward(x_adv, trace_up_to=config.l_max).activations
        total, att, val = loss_terms(trace, roi, config)
        attention_reads += trace.attention_reads
        record = LossRecord(
            total.item(),
            att.item() if att is not None else 0.0,
            val.item() if val is not None else 0.0,
        )
        if not all(math.isfinite(v) for v in (record.total, record.attention, record.value)):
            raise AttackError(f"non-finite loss at iteration {t}: {record}")
        history.append(record)
        ad.backward(total)

        if config.optimizer == "adam":
            step_adam(state, delta.grad, alpha, linf=config.linf, x_clean=x_clean)
        else:
            step_sign_gd(state, delta.grad, alpha, linf=config.linf, x_clean=x_clean)
        if callback is not None:
            callback(t, state.delta, np.clip(x_clean + state.delta, 0.0, PIXEL_SCALE))

        if (t + 1) % config.check_every == 0 and t + 1 < config.max_iters:
            adv = np.clip(x_clean + state.delta, 0.0, PIXEL_SCALE)
            if success_predicate(model, adv, roi, clean_ref, config):
                stop_reason = "converged"
                break
            if record.total < state.best_loss * (1 - IMPROVEMENT_RTOL):
                state.best_loss = record.total
                state.stall = 0
            else:
                state.stall += 1
                if state.stall >= config.patience:
                    stop_reason = "patience"
                    break
            logger.debug("iter %d loss %.6g stall %d", t + 1, record.total, state.stall)

    adversarial = np.clip(x_clean + state.delta, 0.0, PIXEL_SCALE)
    success = stop_reason == "converged" or success_predicate(model, adversarial, roi, clean_ref, config)
    result = AttackResult(
        adversarial=adversarial,
        delta=adversarial - x_clean,
        history=history,
        stop_reason=stop_reason,
        iterations=len(history),
        success=success,
        attention_reads=attention_reads,
    )
    if with_metrics:
        result.metrics = compute_metrics(model, x_clean, adversarial, roi, config.l_max)
    return result
