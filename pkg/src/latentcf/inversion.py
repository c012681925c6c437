"""Encoder fine-tuning with a composite reconstruction loss, and corpus inversion."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .core import LatentCode, ShapeError, check_image, load_png
from .models import Generator, IdentityEmbedder, TrainableEncoder, decode, encode, identity_similarity
from .models.toy import avg_pool, avg_pool_vjp

log = logging.getLogger(__name__)


class FinetuneDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    lambda_mse: float = 1.0
    lambda_lpips: float = 0.8
    lambda_id: float = 0.5
    steps: int = 80000
    batch_size: int = 8
    learning_rate: float = 1e-4
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_mse, self.lambda_lpips, self.lambda_id) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class PerceptualMetric(Protocol):
    name: str

    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


class GradientMagnitudeDistance:
    """Multi-scale L2 distance between gradient-magnitude maps.

    A weight-free stand-in for LPIPS. Each scale halves the image by average
    pooling; the distance is the mean over scales of the mean squared
    difference of per-channel gradient magnitudes.
    """

    name = "gradmag"

    def __init__(self, scales: int = 3, delta: float = 1e-6):
        self.scales = scales
        self.delta = delta

    def _levels(self, x):
        out = [x]
        for _ in range(self.scales - 1):
            if min(out[-1].shape[:2]) < 4:
                break
            out.append(avg_pool(out[-1], 2))
        return out

    def _magnitude(self, y):
        gx = y[:-1, 1:] - y[:-1, :-1]
        gy = y[1:, :-1] - y[:-1, :-1]
        return np.sqrt(gx**2 + gy**2 + self.delta), gx, gy

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if np.shape(a) != np.shape(b):
            raise ShapeError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")
        la, lb = self._levels(np.asarray(a, float)), self._levels(np.asarray(b, float))
        total = 0.0
        for ya, yb in zip(la, lb):
            ma = self._magnitude(ya)[0]
            mb = self._magnitude(yb)[0]
            total += np.mean((ma - mb) ** 2)
        return float(total / len(la))

    def grad_b(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Gradient of ``distance(a, b)`` with respect to ``b``."""
        la, lb = self._levels(np.asarray(a, float)), self._levels(np.asarray(b, float))
        n_levels = len(la)
        upstream = None
        for level in range(n_levels - 1, -1, -1):
            ya, yb = la[level], lb[level]
            ma = self._magnitude(ya)[0]
            mb, gx, gy = self._magnitude(yb)
            gm = 2.0 * (mb - ma) / (mb.size * n_levels)
            ggx, ggy = gm * gx / mb, gm * gy / mb
            g = np.zeros_like(yb)
            g[:-1, 1:] += ggx
            g[:-1, :-1] -= ggx
            g[1:, :-1] += ggy
            g[:-1, :-1] -= ggy
            if upstream is not None:
                g += upstream
            upstream = avg_pool_vjp(g, 2, lb[level - 1].shape) if level > 0 else g
        return upstream


PERCEPTUAL_PLUGINS = {"gradmag": GradientMagnitudeDistance}


def reconstruction_loss(x: np.ndarray, xhat: np.ndarray, cfg: FinetuneConfig, p: PerceptualMetric,
                        i: IdentityEmbedder) -> tuple[float, dict[str, float]]:
    """Weighted sum of pixel MSE, perceptual distance and (1 - identity cosine)."""
    x = check_image(x)
    xhat = check_image(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {xhat.shape}")
    parts = {
        "mse": float(np.mean((x - xhat) ** 2)),
        "lpips": float(p.distance(x, xhat)),
        "id": 1.0 - identity_similarity(i, x, xhat),
    }
    total = cfg.lambda_mse * parts["mse"] + cfg.lambda_lpips * parts["lpips"] + cfg.lambda_id * parts["id"]
    return float(total), parts


def reconstruction_loss_grad(x, xhat, cfg: FinetuneConfig, p, i: IdentityEmbedder) -> np.ndarray:
    """Gradient of :func:`reconstruction_loss` with respect to ``xhat``."""
    g = cfg.lambda_mse * 2.0 * (xhat - x) / x.size
    if cfg.lambda_lpips:
        g = g + cfg.lambda_lpips * p.grad_b(x, xhat)
    if cfg.lambda_id:
        g = g - cfg.lambda_id * i.embed_vjp(xhat, i.embed(x))
    return g


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


@dataclass
class FinetuneResult:
    encoder: TrainableEncoder
    curve: list[dict] = field(default_factory=list)
    holdout_before: float = float("nan")
    holdout_after: float = float("nan")
    reverted: bool = False
    metadata: dict = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out_dir / "loss_curve.csv", self.curve)
        (out_dir / "finetune_meta.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")
        if hasattr(self.encoder, "save"):
            self.encoder.save(out_dir / "encoder.npz")


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total", "mse", "lpips", "id"])
        for row in curve:
            w.writerow([row["step"], *(repr(float(row[k])) for k in ("total", "mse", "lpips", "id"))])


def mean_loss(e, g, images, cfg, p, i) -> float:
    if not images:
        return float("nan")
    return float(np.mean([reconstruction_loss(x, decode(g, encode(e, x)), cfg, p, i)[0] for x in images]))


def finetune_encoder(e: TrainableEncoder, g: Generator, corpus: list[np.ndarray], cfg: FinetuneConfig,
                     p: PerceptualMetric, i: IdentityEmbedder) -> FinetuneResult:
    """Adam on the encoder parameters; the generator stays frozen.

    A held-out split is scored before and after. If training made it worse the
    original encoder is returned and ``reverted`` is set.
    """
    images = [check_image(x, e.input_side) for x in corpus]
    if not images:
        raise ValueError("fine-tuning corpus is empty")
    meta = {"config": asdict(cfg), "steps_semantics": "optimizer steps", "perceptual": p.name,
            "n_images": len(images)}
    if cfg.steps == 0:
        return FinetuneResult(e, [], metadata=meta)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(images))
    n_hold = int(round(cfg.holdout_fraction * len(images))) if len(images) > 1 else 0
    hold = [images[k] for k in order[:n_hold]]
    train = [images[k] for k in order[n_hold:]] or images

    digest_before = g.digest() if hasattr(g, "digest") else None
    before = mean_loss(e, g, hold, cfg, p, i)
    opt = _Adam(cfg.learning_rate)
    params = {k: np.array(v) for k, v in e.parameters().items()}
    current = e
    curve = []
    for step in range(cfg.steps):
        batch = rng.integers(0, len(train), size=cfg.batch_size)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        sums = {"total": 0.0, "mse": 0.0, "lpips": 0.0, "id": 0.0}
        for b in batch:
            x = train[b]
            w = encode(current, x)
            xhat = decode(g, w)
            total, parts = reconstruction_loss(x, xhat, cfg, p, i)
            gx = reconstruction_loss_grad(x, xhat, cfg, p, i)
            gw = g.decode_vjp(w.codes, gx)
            for k, v in current.parameter_vjp(x, gw).items():
                grads[k] += v / cfg.batch_size
            sums["total"] += total / cfg.batch_size
            for k in parts:
                sums[k] += parts[k] / cfg.batch_size
        if not math.isfinite(sums["total"]) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            raise FinetuneDivergence(f"loss became non-finite at step {step}: {sums}")
        params = opt.step(params, grads)
        current = current.with_parameters(params)
        curve.append({"step": step, **sums})

    if digest_before is not None and g.digest() != digest_before:
        raise RuntimeError("generator parameters changed during fine-tuning")
    after = mean_loss(current, g, hold, cfg, p, i)
    reverted = bool(hold) and after > before
    if reverted:
        log.warning("held-out loss rose from %.6g to %.6g; keeping the original encoder", before, after)
        current = e
    meta.update(holdout_before=before, holdout_after=after, reverted=reverted, n_holdout=len(hold))
    return FinetuneResult(current, curve, before, after, reverted, meta)


@dataclass
class InversionStore:
    root: Path
    latents: dict[str, Path] = field(default_factory=dict)
    mse: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.latents)

    def load(self, image_id: str) -> LatentCode:
        return LatentCode.load(self.latents[image_id])

    @classmethod
    def open(cls, root: str | Path) -> "InversionStore":
        root = Path(root)
        store = cls(root)
        metrics = root / "inversion_metrics.csv"
        if metrics.exists():
            with open(metrics) as fh:
                for row in csv.DictReader(fh):
                    store.latents[row["image_id"]] = root / "latents" / f"{row['image_id']}.f32"
                    store.mse[row["image_id"]] = float(row["mse"])
        return store


def invert_corpus(e, g: Generator, images: Iterable[tuple[str, np.ndarray | str | Path]],
                  out_dir: str | Path) -> InversionStore:
    """Encodes every image, persists its latent and records reconstruction MSE.

    ``images`` yields ``(image_id, image_or_path)``. Images that cannot be read
    or have the wrong size are skipped with a warning and listed in
    ``store.skipped``.
    """
    root = Path(out_dir)
    (root / "latents").mkdir(parents=True, exist_ok=True)
    store = InversionStore(root)
    for image_id, src in images:
        try:
            x = load_png(src) if isinstance(src, (str, Path)) else src
            w = encode(e, x)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", image_id, exc)
            store.skipped[image_id] = str(exc)
            continue
        w = w.quantized()
        path = root / "latents" / f"{image_id}.f32"
        w.save(path)
        store.latents[image_id] = path
        store.mse[image_id] = float(np.mean((decode(g, w) - x) ** 2))
    with open(root / "inversion_metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "mse"])
        for image_id in store.latents:
            wr.writerow([image_id, repr(store.mse[image_id])])
    if store.skipped:
        (root / "skipped.json").write_text(json.dumps(store.skipped, indent=2, sort_keys=True) + "\n")
    return store
