"""Backend-neutral model handles and the operations built on them.

A backend supplies four kinds of handle. They are duck-typed; the protocols
below document what downstream code relies on.

Gradients are part of the contract: generators expose a vector-Jacobian
product through ``decode`` and detectors expose the gradient of their
fake-probability with respect to the input image. The toy stack implements
these by hand, adapters delegate to their framework's autodiff.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from ..core import Label, LatentCode, ShapeError, check_image, clamp_image, label_to_scalar


class BackendError(RuntimeError):
    """A backend cannot honour part of the handle contract."""


@runtime_checkable
class Generator(Protocol):
    num_styles: int
    dim: int
    output_side: int
    reentrant: bool

    def decode(self, codes: np.ndarray) -> np.ndarray: ...

    def decode_vjp(self, codes: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class Encoder(Protocol):
    input_side: int
    num_styles: int
    dim: int

    def encode(self, x: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class TrainableEncoder(Encoder, Protocol):
    def parameters(self) -> dict[str, np.ndarray]: ...

    def with_parameters(self, params: dict[str, np.ndarray]) -> "TrainableEncoder": ...

    def parameter_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> dict[str, np.ndarray]: ...


@runtime_checkable
class Detector(Protocol):
    name: str
    input_side: int
    reentrant: bool
    gradcam: bool

    def score(self, x: np.ndarray) -> float: ...

    def score_grad(self, x: np.ndarray) -> np.ndarray: ...


class GradCamDetector(Detector, Protocol):
    layers: tuple[str, ...]

    def activations(self, x: np.ndarray, layer: str) -> np.ndarray: ...

    def head(self, layer: str, acts: np.ndarray) -> float: ...

    def head_grad(self, layer: str, acts: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class IdentityEmbedder(Protocol):
    embedding_dim: int

    def embed(self, x: np.ndarray) -> np.ndarray: ...

    def embed_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


# -- operations -------------------------------------------------------------


def _check_latent(g: Generator, w: LatentCode) -> None:
    if w.shape != (g.num_styles, g.dim):
        raise ShapeError(f"latent {w.shape} does not match generator ({g.num_styles}, {g.dim})")


def decode(g: Generator, w: LatentCode) -> np.ndarray:
    _check_latent(g, w)
    x = clamp_image(np.asarray(g.decode(w.codes), dtype=np.float64))
    return check_image(x, g.output_side)


def encode(e: Encoder, x: np.ndarray) -> LatentCode:
    x = check_image(x, e.input_side)
    codes = np.asarray(e.encode(x), dtype=np.float64)
    if codes.shape != (e.num_styles, e.dim):
        raise ShapeError(f"encoder produced {codes.shape}, declared ({e.num_styles}, {e.dim})")
    return LatentCode(codes)


def detector_score(d: Detector, x: np.ndarray) -> float:
    x = check_image(x, d.input_side)
    s = float(d.score(x))
    if not 0.0 <= s <= 1.0:
        raise BackendError(f"detector {d.name} returned score {s} outside [0, 1]")
    return s


def adversarial_loss(d: Detector, g: Generator, w: LatentCode, target: Label | str) -> float:
    s = detector_score(d, decode(g, w))
    return (s - label_to_scalar(target)) ** 2


def adversarial_grad(
    d: Detector,
    g: Generator,
    w: LatentCode,
    target: Label | str,
    mode: str = "analytic",
    h: float = 1e-4,
) -> LatentCode:
    """Gradient of the squared error between the detector score and the target.

    ``mode="fd"`` falls back to central finite differences (2*k*dim score
    evaluations) for backends that cannot differentiate.
    """
    _check_latent(g, w)
    y = label_to_scalar(target)
    if mode == "fd":
        base = w.codes
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            step = np.zeros_like(base)
            step[idx] = h
            lp = (detector_score(d, decode(g, LatentCode(base + step))) - y) ** 2
            lm = (detector_score(d, decode(g, LatentCode(base - step))) - y) ** 2
            grad[idx] = (lp - lm) / (2 * h)
        return LatentCode(grad)
    if mode != "analytic":
        raise ValueError(f"unknown gradient mode {mode!r}")

    x = decode(g, w)
    s = detector_score(d, x)
    gx = 2.0 * (s - y) * np.asarray(d.score_grad(x), dtype=np.float64)
    gw = np.asarray(g.decode_vjp(w.codes, gx), dtype=np.float64)
    if not np.all(np.isfinite(gw)):
        raise BackendError("backend produced a non-finite gradient")
    return LatentCode(gw)


def pixel_adversarial_grad(d: Detector, x: np.ndarray, target: Label | str) -> tuple[float, np.ndarray]:
    """Returns ``(score, dL/dx)`` for the same squared-error loss in pixel space."""
    x = check_image(x, d.input_side)
    s = detector_score(d, x)
    gx = 2.0 * (s - label_to_scalar(target)) * np.asarray(d.score_grad(x), dtype=np.float64)
    return s, gx


def identity_similarity(i: IdentityEmbedder, a: np.ndarray, b: np.ndarray) -> float:
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    ea = np.asarray(i.embed(a), dtype=np.float64)
    eb = np.asarray(i.embed(b), dtype=np.float64)
    return float(np.clip(ea @ eb, -1.0, 1.0))


def gradcam_activations(d: Detector, x: np.ndarray, layer: str) -> tuple[np.ndarray, np.ndarray]:
    """Activations at ``layer`` and the gradient of the fake-score w.r.t. them.

    Both are ``(channels, h, w)`` stacks.
    """
    if not getattr(d, "gradcam", False):
        raise BackendError(f"detector {d.name} does not support Grad-CAM")
    if layer not in getattr(d, "layers", ()):
        raise KeyError(f"detector {d.name} has no layer {layer!r}; known: {getattr(d, 'layers', ())}")
    x = check_image(x, d.input_side)
    acts = np.asarray(d.activations(x, layer), dtype=np.float64)
    grads = np.asarray(d.head_grad(layer, acts), dtype=np.float64)
    return acts, grads


class NegatedDetector:
    """Wraps a detector so that its score becomes ``1 - score``."""

    def __init__(self, inner: Detector):
        self.inner = inner
        self.name = f"neg({inner.name})"
        self.input_side = inner.input_side
        self.reentrant = inner.reentrant
        self.gradcam = getattr(inner, "gradcam", False)
        self.layers = getattr(inner, "layers", ())

    def score(self, x):
        return 1.0 - self.inner.score(x)

    def score_grad(self, x):
        return -self.inner.score_grad(x)

    def activations(self, x, layer):
        return self.inner.activations(x, layer)

    def head(self, layer, acts):
        return 1.0 - self.inner.head(layer, acts)

    def head_grad(self, layer, acts):
        return -self.inner.head_grad(layer, acts)


__all__ = [
    "BackendError",
    "Detector",
    "Encoder",
    "Generator",
    "GradCamDetector",
    "IdentityEmbedder",
    "NegatedDetector",
    "TrainableEncoder",
    "adversarial_grad",
    "adversarial_loss",
    "decode",
    "detector_score",
    "encode",
    "gradcam_activations",
    "identity_similarity",
    "pixel_adversarial_grad",
]
