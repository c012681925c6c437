"""Scalar evaluation metrics: ASR, total variation, ESNLE, ID retention."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import gamma

from .core import Label, scalar_to_label
from .models import Detector, IdentityEmbedder, detector_score, identity_similarity

TV_SCALE = 1e4
ID_THRESHOLD = 0.75
ESNLE_PATCH = 7
ESNLE_ITERATIONS = 3
ESNLE_CONFIDENCE = 0.99


@dataclass(frozen=True)
class QualityReport:
    tv: float
    esnle: float
    perceptual: float
    id_similarity: float

    @property
    def id_retained(self) -> bool:
        return self.id_similarity >= ID_THRESHOLD

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id_retained"] = self.id_retained
        return d


def total_variation(x: np.ndarray, scale: float = TV_SCALE) -> float:
    """Anisotropic TV per pixel, times ``scale``.

    Sums absolute forward differences along both axes over all channels and
    divides by ``height * width``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    dv = np.abs(np.diff(x, axis=0)).sum()
    dh = np.abs(np.diff(x, axis=1)).sum()
    return float(scale * (dv + dh) / (x.shape[0] * x.shape[1]))


def _noise_variance_from_patches(patches: np.ndarray) -> float:
    """Smallest-eigenvalue statistic on the patch covariance.

    Walks the sorted eigenvalues from the small end and stops at the largest
    tail whose mean equals its median, i.e. the tail looks like pure noise.
    """
    if patches.shape[0] < 2:
        return 0.0
    centered = patches - patches.mean(axis=0)
    cov = centered.T @ centered / patches.shape[0]
    eig = np.clip(np.linalg.eigvalsh(cov), 0.0, None)  # ascending
    # drop the largest eigenvalues one at a time until the tail's mean is no
    # longer above its median (balanced counts around the mean)
    for count in range(eig.size, 0, -1):
        tail = eig[:count]
        tau = tail.mean()
        if np.sum(tail > tau) >= np.sum(tail < tau):
            return float(tau)
    return float(eig[0])


def _texture_strength(patches: np.ndarray, d: int) -> np.ndarray:
    p = patches.reshape(-1, d, d)
    gh = np.diff(p, axis=2)
    gv = np.diff(p, axis=1)
    return (gh**2).sum(axis=(1, 2)) + (gv**2).sum(axis=(1, 2))


def _gradient_trace(d: int) -> float:
    # tr(Dh^T Dh + Dv^T Dv) for forward differences on a d x d patch
    return 2.0 * 2.0 * d * (d - 1)


def esnle_channel(x: np.ndarray, patch: int = ESNLE_PATCH, iterations: int = ESNLE_ITERATIONS,
                  confidence: float = ESNLE_CONFIDENCE) -> float:
    """Noise std of a single-channel image.

    Starts from all overlapping ``patch x patch`` windows and repeatedly keeps
    only weak-texture windows, whose summed squared gradients fall under the
    gamma quantile expected for pure noise at the current estimate.
    """
    win = sliding_window_view(np.asarray(x, dtype=np.float64), (patch, patch)).reshape(-1, patch * patch)
    strength = _texture_strength(win, patch)
    n = patch * patch
    shape = n / 2.0
    scale_unit = 2.0 * _gradient_trace(patch) / n
    var = _noise_variance_from_patches(win)
    selected = win
    for _ in range(iterations):
        if var <= 0.0:
            break
        tau = gamma.ppf(confidence, a=shape, scale=scale_unit * var)
        keep = strength < tau
        if keep.sum() < n + 1:
            break
        selected = win[keep]
        new_var = _noise_variance_from_patches(selected)
        if np.isclose(new_var, var, rtol=0, atol=1e-14):
            var = new_var
            break
        var = new_var
    return float(np.sqrt(max(var, 0.0)))


def esnle(x: np.ndarray, patch: int = ESNLE_PATCH, iterations: int = ESNLE_ITERATIONS) -> float:
    """Estimated noise standard deviation in image units, averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[0] < patch or x.shape[1] < patch:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {patch}x{patch} patch")
    return float(np.mean([esnle_channel(x[..., c], patch, iterations) for c in range(x.shape[2])]))


# -- record-level metrics -------------------------------------------------------


def verdict(d: Detector, x: np.ndarray) -> Label:
    return scalar_to_label(detector_score(d, x))


def attack_success_rate(records: Sequence, d_eval: Detector | None = None,
                        evaluator: str | None = None) -> dict:
    """ASR over all attacked images and over source-successful ones.

    ``records`` hold either an ``adversarial_image`` (scored with ``d_eval``)
    or a precomputed ``verdicts`` map (looked up by ``evaluator``).
    """
    if len(records) == 0:
        raise ValueError("attack_success_rate needs at least one record")
    hits = []
    for rec in records:
        target = Label.parse(_get(rec, "target", "real"))
        if d_eval is not None:
            v = verdict(d_eval, _get(rec, "adversarial_image"))
        else:
            v = Label.parse(_get(rec, "verdicts")[evaluator])
        hits.append(v is target)
    hits = np.array(hits)
    source_ok = np.array([_status_ok(_get(r, "status")) for r in records])
    out = {"all": float(hits.mean()), "n_all": int(hits.size)}
    if source_ok.any():
        out["source_successful"] = float(hits[source_ok].mean())
    else:
        out["source_successful"] = float("nan")
    out["n_source_successful"] = int(source_ok.sum())
    return out


def _status_ok(status) -> bool:
    return getattr(status, "value", status) == "success"


def _get(rec, key, default=None):
    if isinstance(rec, dict):
        return rec.get(key, default)
    return getattr(rec, key, default)


def id_retention(pairs: Iterable[tuple[np.ndarray, np.ndarray]], embedder: IdentityEmbedder,
                 threshold: float = ID_THRESHOLD) -> float:
    """Fraction of (original, adversarial) pairs with cosine similarity >= threshold."""
    sims = [identity_similarity(embedder, a, b) for a, b in pairs]
    if not sims:
        raise ValueError("id_retention needs at least one pair")
    return float(np.mean(np.array(sims) >= threshold))


def quality_report(original: np.ndarray, adversarial: np.ndarray, embedder: IdentityEmbedder,
                   perceptual, tv_scale: float = TV_SCALE) -> QualityReport:
    return QualityReport(
        tv=total_variation(adversarial, tv_scale),
        esnle=esnle(adversarial),
        perceptual=float(perceptual.distance(original, adversarial)),
        id_similarity=identity_similarity(embedder, original, adversarial),
    )
