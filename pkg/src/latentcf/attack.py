"""Latent-space adversarial search and pixel-space sign-gradient baselines.

All attacks minimise the squared error between the detector's fake-probability
and the numeric target label, and all return :class:`~latentcf.core.AttackResult`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    AttackConfig,
    AttackResult,
    Label,
    LatentCode,
    LevelMask,
    ShapeError,
    Status,
    check_image,
    scalar_to_label,
)
from .models import BackendError, Detector, Generator, adversarial_grad, decode, detector_score, pixel_adversarial_grad

log = logging.getLogger(__name__)

METHODS = ("latent", "fgsm", "pgd", "mifgsm")


class NonFiniteGradientError(BackendError):
    """Attack stopped because the backend returned NaN/inf gradients."""

    def __init__(self, message: str, partial: AttackResult):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class PixelAttackConfig:
    epsilon: float
    bound_beta: float = 0.1
    max_steps: int = 100
    momentum: float = 1.0
    target: Label = Label.REAL
    early_stop: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target", Label.parse(self.target))
        if not 0.0 <= self.epsilon <= self.bound_beta <= 1.0:
            raise ValueError(
                f"need 0 <= epsilon <= bound_beta <= 1, got epsilon={self.epsilon}, beta={self.bound_beta}"
            )
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def masked_sign_step(w: LatentCode, grad: LatentCode, mask: LevelMask, epsilon: float,
                     ascent: bool = False) -> LatentCode:
    """One masked sign step: ``w - eps * M * sign(grad)`` (``+`` when ``ascent``).

    Masked-out styles are copied through untouched.
    """
    if w.shape != grad.shape:
        raise ShapeError(f"latent {w.shape} and gradient {grad.shape} disagree")
    if len(mask) != w.num_styles:
        raise ShapeError(f"mask covers {len(mask)} styles, latent has {w.num_styles}")
    out = np.array(w.codes)
    rows = mask.as_array()
    step = epsilon * np.sign(grad.codes[rows])
    out[rows] = out[rows] + step if ascent else out[rows] - step
    return LatentCode(out)


def latent_attack(w0: LatentCode, g: Generator, d: Detector, cfg: AttackConfig,
                  grad_mode: str = "analytic") -> AttackResult:
    """Iterated masked sign descent on the latent code.

    Each query evaluates the gradient at the current iterate and takes one
    step; the score after the step is appended to the trace. With
    ``early_stop`` the search ends as soon as the verdict equals the target.
    """
    mask = cfg.mask if cfg.mask is not None else LevelMask.full(w0.num_styles)
    w = w0
    x = decode(g, w)
    score = detector_score(d, x)
    trace: list[float] = []

    def result(status=None):
        st = status or (Status.SUCCESS if scalar_to_label(score) is cfg.target else Status.BUDGET_EXHAUSTED)
        return AttackResult(x, len(trace), score, st, trace, adversarial_latent=w, target=cfg.target, method="latent")

    if cfg.early_stop and scalar_to_label(score) is cfg.target:
        return result()
    for _ in range(cfg.max_queries):
        try:
            grad = adversarial_grad(d, g, w, cfg.target, mode=grad_mode)
        except (BackendError, ValueError) as exc:
            raise NonFiniteGradientError(f"gradient failed after {len(trace)} queries: {exc}", result()) from exc
        w = masked_sign_step(w, grad, mask, cfg.epsilon, ascent=cfg.ascent)
        x = decode(g, w)
        score = detector_score(d, x)
        trace.append(score)
        if cfg.early_stop and scalar_to_label(score) is cfg.target:
            break
    return result()


def _pixel_grad(d, x, target, n_done, trace, x_cur, method):
    score, gx = pixel_adversarial_grad(d, x, target)
    if not np.all(np.isfinite(gx)):
        partial = AttackResult(x_cur, n_done, score, Status.BUDGET_EXHAUSTED, trace, target=target, method=method)
        raise NonFiniteGradientError(f"non-finite pixel gradient after {n_done} steps", partial)
    return gx


def _projected_sign_attack(x0, d, cfg: PixelAttackConfig, steps: int, momentum: float | None, method: str):
    x0 = check_image(x0, d.input_side)
    x = x0.copy()
    score = detector_score(d, x)
    trace: list[float] = []
    if cfg.early_stop and scalar_to_label(score) is cfg.target and steps > 1:
        return AttackResult(x, 0, score, Status.SUCCESS, trace, target=cfg.target, method=method)
    acc = np.zeros_like(x)
    lo = np.maximum(x0 - cfg.bound_beta, 0.0)
    hi = np.minimum(x0 + cfg.bound_beta, 1.0)
    for _ in range(steps):
        gx = _pixel_grad(d, x, cfg.target, len(trace), trace, x, method)
        if momentum is not None:
            norm = np.abs(gx).sum()
            acc = momentum * acc + (gx / norm if norm > 0 else 0.0)
            direction = np.sign(acc)
        else:
            direction = np.sign(gx)
        x = np.clip(x - cfg.epsilon * direction, lo, hi)
        score = detector_score(d, x)
        trace.append(score)
        if cfg.early_stop and scalar_to_label(score) is cfg.target:
            break
    status = Status.SUCCESS if scalar_to_label(score) is cfg.target else Status.BUDGET_EXHAUSTED
    return AttackResult(x, len(trace), score, status, trace, target=cfg.target, method=method)


def fgsm(x: np.ndarray, d: Detector, cfg: PixelAttackConfig, target: Label | str | None = None) -> AttackResult:
    """Single sign step of size epsilon, clamped to [0, 1]."""
    if target is not None:
        cfg = _with_target(cfg, target)
    return _projected_sign_attack(x, d, cfg, 1, None, "fgsm")


def pgd_linf(x: np.ndarray, d: Detector, cfg: PixelAttackConfig, target: Label | str | None = None) -> AttackResult:
    """Iterated sign steps projected onto the l-inf ball of radius beta and [0, 1]."""
    if target is not None:
        cfg = _with_target(cfg, target)
    return _projected_sign_attack(x, d, cfg, cfg.max_steps, None, "pgd")


def mifgsm(x: np.ndarray, d: Detector, cfg: PixelAttackConfig, target: Label | str | None = None) -> AttackResult:
    """PGD with an L1-normalised momentum accumulator feeding the sign."""
    if target is not None:
        cfg = _with_target(cfg, target)
    return _projected_sign_attack(x, d, cfg, cfg.max_steps, cfg.momentum, "mifgsm")


def _with_target(cfg: PixelAttackConfig, target) -> PixelAttackConfig:
    from dataclasses import replace

    return replace(cfg, target=Label.parse(target))


PIXEL_ATTACKS = {"fgsm": fgsm, "pgd": pgd_linf, "mifgsm": mifgsm}
