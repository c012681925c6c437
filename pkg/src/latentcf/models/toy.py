"""A small analytic model stack that stands in for StyleGAN/e4e/detectors.

The generator is a fixed basis expansion squashed by a sigmoid. Most basis
atoms are smooth bumps ("content"); the last atom of every style is a
high-frequency grid confined to a fixed bounding box ("artifact"). Reals carry
almost no artifact energy, fakes carry a lot, so removing the artifact in
latent space is the counterfactual the detectors respond to.

Every handle implements its gradients by hand. ``tests/test_models.py`` checks
them against central finite differences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize
from scipy.special import expit, logit

from ..core import LatentCode, ShapeError, check_image, derive_seed, level_slices

LOGIT_CLIP = 1e-4


def _logit_features(x: np.ndarray) -> np.ndarray:
    return logit(np.clip(x, LOGIT_CLIP, 1.0 - LOGIT_CLIP))


def _gaussian_bump(side: int, center: np.ndarray, sigma: float) -> np.ndarray:
    r = np.arange(side)[:, None]
    c = np.arange(side)[None, :]
    return np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2.0 * sigma**2))


_GRIDS = (
    lambda r, c: (-1.0) ** (r + c),
    lambda r, c: (-1.0) ** r,
    lambda r, c: (-1.0) ** c,
    lambda r, c: (-1.0) ** (r // 2 + c // 2),
    lambda r, c: (-1.0) ** (r + c // 2),
    lambda r, c: (-1.0) ** (r // 2 + c),
)


class ToyGenerator:
    """``x = sigmoid(bias + sum_{j,c} w[j, c] * basis[j, c])``, clamped to [0, 1]."""

    reentrant = True

    def __init__(
        self,
        seed: int = 0,
        side: int = 24,
        num_styles: int = 18,
        dim: int = 4,
        content_scale: float = 0.03,
        artifact_scale: float = 1.0,
        artifact_box: tuple[int, int, int, int] | None = None,
    ):
        if dim < 2:
            raise ValueError("toy generator needs dim >= 2 (content + artifact atoms)")
        self.num_styles = num_styles
        self.dim = dim
        self.output_side = side
        self.content_scale = content_scale
        self.artifact_scale = artifact_scale
        if artifact_box is None:
            q = side // 4
            artifact_box = (q, q + side // 3, side // 2, side // 2 + side // 3)
        self.artifact_box = artifact_box
        rng = np.random.default_rng(seed)

        r = np.arange(side)[:, None]
        c = np.arange(side)[None, :]
        radial = np.hypot(r - side / 2, c - side / 2) / side
        base_color = np.array([0.6, 0.1, -0.3])
        self.bias = 0.9 * (0.5 - 2.0 * radial)[..., None] + base_color

        basis = np.zeros((num_styles, dim, side, side, 3))
        levels = level_slices(num_styles) if num_styles % 3 == 0 else {"M": slice(0, num_styles)}
        sigma_for = {"S": side / 4, "M": side / 8, "D": side / 3}
        r0, r1, c0, c1 = artifact_box
        rr, cc = np.meshgrid(np.arange(r1 - r0), np.arange(c1 - c0), indexing="ij")
        for level, sl in levels.items():
            for j in range(sl.start, sl.stop):
                for k in range(dim - 1):
                    center = rng.uniform(0, side, size=2)
                    color = rng.normal(size=3)
                    if level == "D":
                        # colour-scheme atoms: broad, mostly chromatic
                        color -= color.mean() * 0.5
                    color /= np.linalg.norm(color)
                    bump = _gaussian_bump(side, center, sigma_for[level])
                    basis[j, k] = content_scale * bump[..., None] * color
                grid = _GRIDS[j % len(_GRIDS)](rr, cc)
                color = rng.normal(size=3)
                color /= np.linalg.norm(color)
                color *= np.sign(color.sum()) or 1.0
                basis[j, dim - 1, r0:r1, c0:c1] = artifact_scale * grid[..., None] * color
        self.basis = basis
        self._flat = basis.reshape(num_styles * dim, -1)

    @property
    def artifact_dims(self) -> np.ndarray:
        """Boolean (num_styles, dim) mask of artifact atoms."""
        m = np.zeros((self.num_styles, self.dim), dtype=bool)
        m[:, -1] = True
        return m

    def pre_activation(self, codes: np.ndarray) -> np.ndarray:
        pre = codes.reshape(-1) @ self._flat
        return self.bias + pre.reshape(self.bias.shape)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64)
        if codes.shape != (self.num_styles, self.dim):
            raise ShapeError(f"latent {codes.shape} does not match ({self.num_styles}, {self.dim})")
        return np.clip(expit(self.pre_activation(codes)), 0.0, 1.0)

    def decode_vjp(self, codes: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        x = expit(self.pre_activation(np.asarray(codes, dtype=np.float64)))
        gpre = cotangent * x * (1.0 - x)
        return (self._flat @ gpre.reshape(-1)).reshape(self.num_styles, self.dim)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.bias.tobytes())
        h.update(self.basis.tobytes())
        return h.hexdigest()


class LinearEncoder:
    """``w = weight @ logit(x) + bias``; trainable with :mod:`latentcf.inversion`."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, input_side: int, num_styles: int, dim: int):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.input_side = input_side
        self.num_styles = num_styles
        self.dim = dim
        if self.weight.shape != (num_styles * dim, input_side * input_side * 3):
            raise ShapeError(f"encoder weight has shape {self.weight.shape}")
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    @classmethod
    def pseudo_inverse(cls, g: ToyGenerator, atoms: np.ndarray | None = None) -> "LinearEncoder":
        """Least-squares inverse of ``g`` restricted to the atoms flagged in ``atoms``."""
        if atoms is None:
            atoms = np.ones((g.num_styles, g.dim), dtype=bool)
        sel = atoms.reshape(-1)
        weight = np.zeros((g.num_styles * g.dim, g._flat.shape[1]))
        weight[sel] = np.linalg.pinv(g._flat[sel].T)
        bias = -weight @ g.bias.reshape(-1)
        return cls(weight, bias, g.output_side, g.num_styles, g.dim)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = check_image(x, self.input_side)
        w = self.weight @ _logit_features(x).reshape(-1) + self.bias
        return w.reshape(self.num_styles, self.dim)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def with_parameters(self, params: dict[str, np.ndarray]) -> "LinearEncoder":
        return LinearEncoder(params["weight"], params["bias"], self.input_side, self.num_styles, self.dim)

    def parameter_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> dict[str, np.ndarray]:
        gw = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        return {"weight": np.outer(gw, _logit_features(x).reshape(-1)), "bias": gw}

    def save(self, path) -> None:
        np.savez(path, weight=self.weight, bias=self.bias,
                 shape=np.array([self.input_side, self.num_styles, self.dim]))

    @classmethod
    def load(cls, path) -> "LinearEncoder":
        with np.load(path) as z:
            side, k, dim = (int(v) for v in z["shape"])
            return cls(z["weight"], z["bias"], side, k, dim)


def avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    h, w = x.shape[0] // f, x.shape[1] // f
    return x[: h * f, : w * f].reshape(h, f, w, f, *x.shape[2:]).mean(axis=(1, 3))


def avg_pool_vjp(g: np.ndarray, f: int, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[0], g.shape[1]
    out[: h * f, : w * f] = np.repeat(np.repeat(g, f, axis=0), f, axis=1) / (f * f)
    return out


class ToyEmbedder:
    """Random projection of a pooled, reference-centred image, L2-normalised."""

    def __init__(self, side: int, reference: np.ndarray | None = None, pool: int = 4,
                 embedding_dim: int = 32, seed: int = 0, projection: np.ndarray | None = None):
        self.side = side
        self.pool = pool
        self.reference = np.zeros((side, side, 3)) if reference is None else np.asarray(reference, dtype=np.float64)
        n_in = (side // pool) ** 2 * 3
        if projection is None:
            projection = np.random.default_rng(seed).normal(size=(embedding_dim, n_in)) / np.sqrt(n_in)
        self.projection = np.asarray(projection, dtype=np.float64)
        self.embedding_dim = self.projection.shape[0]

    def _raw(self, x):
        return self.projection @ avg_pool(x - self.reference, self.pool).reshape(-1)

    def embed(self, x: np.ndarray) -> np.ndarray:
        u = self._raw(check_image(x, self.side))
        n = np.linalg.norm(u)
        if n < 1e-12:
            e = np.zeros(self.embedding_dim)
            e[0] = 1.0
            return e
        return u / n

    def embed_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        u = self._raw(x)
        n = np.linalg.norm(u)
        if n < 1e-12:
            return np.zeros_like(x)
        e = u / n
        gu = (cotangent - e * (e @ cotangent)) / n
        gp = (self.projection.T @ gu).reshape(self.side // self.pool, self.side // self.pool, 3)
        return avg_pool_vjp(gp, self.pool, x.shape)


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(0, 1))  # (h, w, C, k, k)
    h, w = win.shape[:2]
    return win.transpose(0, 1, 3, 4, 2).reshape(h, w, -1)


def _patches_vjp(g: np.ndarray, k: int, shape: tuple) -> np.ndarray:
    h, w = g.shape[:2]
    g = g.reshape(h, w, k, k, shape[2])
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[i : i + h, j : j + w] += g[:, :, i, j]
    return out


SHARPNESS = 40.0


class ToyDetector:
    """Bias-free conv layer + smooth rectifier ("conv1"), average pooling, logistic head.

    The rectifier is a softplus of sharpness ``sharpness`` shifted to pass
    through the origin; it has no kinks, so central finite differences agree
    with the analytic gradient. ``sharpness=None`` gives a plain ReLU.
    ``pool=0`` pools globally; otherwise activations are average-pooled by
    ``pool`` and the head is linear over every pooled position. Filters are
    random draws fixed by ``seed``; only the head is trained. Score is the
    fake-probability.
    """

    reentrant = True
    gradcam = True
    layers = ("conv1",)

    def __init__(self, name: str, side: int, seed: int = 0, n_filters: int = 8, ksize: int = 3,
                 pool: int = 2, zero_mean: bool = True, sharpness: float | None = SHARPNESS,
                 head_weight: np.ndarray | None = None, head_bias: float = 0.0):
        self.name = name
        self.input_side = side
        self.ksize = ksize
        self.pool = pool
        self.sharpness = sharpness
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(n_filters, ksize, ksize, 3))
        if zero_mean:
            f -= f.mean(axis=(1, 2, 3), keepdims=True)
        f /= np.linalg.norm(f.reshape(n_filters, -1), axis=1)[:, None, None, None]
        self.filters = f
        self._rng_head = np.random.default_rng(rng.integers(2**63))
        self._fmat = f.reshape(n_filters, -1)
        self.act_side = side - ksize + 1
        n_feat = n_filters if pool == 0 else n_filters * (self.act_side // pool) ** 2
        self.head_weight = np.zeros(n_feat) if head_weight is None else np.asarray(head_weight, dtype=np.float64)
        self.head_bias = float(head_bias)

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    def _pre(self, x):
        return _patches(x, self.ksize) @ self._fmat.T  # (h, w, C)

    def _rectify(self, pre):
        if self.sharpness is None:
            return np.maximum(pre, 0.0)
        b = self.sharpness
        return (np.logaddexp(0.0, b * pre) - np.log(2.0)) / b

    def _rectify_grad(self, pre):
        if self.sharpness is None:
            return (pre > 0).astype(np.float64)
        return expit(self.sharpness * pre)

    def activations(self, x: np.ndarray, layer: str = "conv1") -> np.ndarray:
        if layer != "conv1":
            raise KeyError(layer)
        return self._rectify(self._pre(x)).transpose(2, 0, 1)

    def _pooled(self, acts: np.ndarray) -> np.ndarray:
        if self.pool == 0:
            return acts.mean(axis=(1, 2))
        return avg_pool(acts.transpose(1, 2, 0), self.pool).transpose(2, 0, 1).reshape(-1)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self._pooled(self.activations(x))

    def head(self, layer: str, acts: np.ndarray) -> float:
        return float(expit(self.head_weight @ self._pooled(acts) + self.head_bias))

    def head_grad(self, layer: str, acts: np.ndarray) -> np.ndarray:
        s = self.head(layer, acts)
        g = s * (1 - s) * self.head_weight
        if self.pool == 0:
            n = acts.shape[1] * acts.shape[2]
            return np.broadcast_to((g / n)[:, None, None], acts.shape).copy()
        c, h, w = acts.shape
        gp = g.reshape(c, h // self.pool, w // self.pool).transpose(1, 2, 0)
        return avg_pool_vjp(gp, self.pool, (h, w, c)).transpose(2, 0, 1)

    def score(self, x: np.ndarray) -> float:
        x = check_image(x, self.input_side)
        return self.head("conv1", self.activations(x))

    def score_grad(self, x: np.ndarray) -> np.ndarray:
        x = check_image(x, self.input_side)
        pre = self._pre(x)
        acts = self._rectify(pre).transpose(2, 0, 1)
        ga = self.head_grad("conv1", acts).transpose(1, 2, 0) * self._rectify_grad(pre)
        return _patches_vjp(ga @ self._fmat, self.ksize, x.shape)

    def fit(self, images, labels, l2: float = 1e-2, init_scale: float = 0.0) -> "ToyDetector":
        """Fits the logistic head on pooled features; returns self.

        The L2 penalty pulls towards a random initial head of size
        ``init_scale`` (seeded like the filters), so directions the training
        data never excites keep detector-specific weights.
        """
        feats = np.stack([self.features(check_image(x, self.input_side)) for x in images])
        y = np.asarray(labels, dtype=np.float64)
        std = feats.std(axis=0)
        # dead units would otherwise get unbounded weights
        scale = np.maximum(std, np.median(std) + 1e-12)
        n = feats.shape[1]
        prior = self._rng_head.normal(scale=init_scale / np.sqrt(n), size=n)

        def objective(theta):
            z = (feats / scale) @ theta[:-1] + theta[-1]
            p = expit(z)
            dev = theta[:-1] - prior
            loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * dev @ dev
            r = (p - y) / len(y)
            grad = np.concatenate([(feats / scale).T @ r + l2 * dev, [r.sum()]])
            return loss, grad

        res = minimize(objective, np.concatenate([prior, [0.0]]), jac=True, method="L-BFGS-B")
        self.head_weight = res.x[:-1] / scale
        self.head_bias = float(res.x[-1])
        return self

    def accuracy(self, images, labels) -> float:
        pred = np.array([self.score(x) > 0.5 for x in images])
        return float(np.mean(pred == np.asarray(labels, dtype=bool)))


# -- 1-D logistic stack --------------------------------------------------------


class ScalarGenerator:
    """One style of width one, decoded to a 1x1 image of ``sigmoid(w)``."""

    num_styles = 1
    dim = 1
    output_side = 1
    reentrant = True

    def decode(self, codes):
        v = expit(float(np.asarray(codes).reshape(-1)[0]))
        return np.full((1, 1, 3), v)

    def decode_vjp(self, codes, cotangent):
        v = expit(float(np.asarray(codes).reshape(-1)[0]))
        return np.array([[np.sum(cotangent) * v * (1 - v)]])


class LogisticDetector:
    """``score = sigmoid(a * logit(mean pixel) + b)``; with :class:`ScalarGenerator`
    the composition is ``sigmoid(a * w + b)``."""

    reentrant = True
    gradcam = False
    input_side = 1

    def __init__(self, a: float = 1.0, b: float = 0.0, name: str = "logistic1d"):
        self.a = a
        self.b = b
        self.name = name

    def score(self, x):
        m = float(np.clip(np.mean(x), 1e-12, 1 - 1e-12))
        return float(expit(self.a * logit(m) + self.b))

    def score_grad(self, x):
        m = float(np.clip(np.mean(x), 1e-12, 1 - 1e-12))
        s = expit(self.a * logit(m) + self.b)
        return np.full(np.shape(x), s * (1 - s) * self.a / (m * (1 - m)) / np.size(x))


# -- toy world ---------------------------------------------------------------


@dataclass
class CorpusItem:
    image_id: str
    image: np.ndarray
    label: str
    video_id: str | None = None
    latent: LatentCode | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class ToyWorld:
    """Generator, embedder and a sampler for labelled toy faces.

    Fakes carry an artifact whose strength is split across the three style
    levels, weighted towards the middle one.
    """

    seed: int = 0
    side: int = 24
    num_styles: int = 18
    dim: int = 4
    content_std: float = 6.0
    content_scale: float = 0.03
    real_artifact_std: float = 0.05
    fake_strength: tuple[float, float] = (0.35, 0.8)
    level_weights: tuple[float, float, float] = (0.5, 1.0, 0.5)

    def __post_init__(self):
        self.generator = ToyGenerator(seed=self.seed, side=self.side, num_styles=self.num_styles, dim=self.dim,
                                      content_scale=self.content_scale)
        self.reference = self.generator.decode(np.zeros((self.num_styles, self.dim)))
        self.embedder = ToyEmbedder(self.side, reference=self.reference, seed=self.seed + 1)

    @property
    def artifact_box(self) -> tuple[int, int, int, int]:
        return self.generator.artifact_box

    def sample_latent(self, rng: np.random.Generator, fake: bool) -> np.ndarray:
        w = rng.normal(scale=self.content_std, size=(self.num_styles, self.dim))
        art = rng.normal(scale=self.real_artifact_std, size=self.num_styles)
        if fake:
            strength = rng.uniform(*self.fake_strength)
            per_style = np.empty(self.num_styles)
            for level, sl in level_slices(self.num_styles).items():
                per_style[sl] = self.level_weights["SMD".index(level)]
            art = art + strength * per_style * (1.0 + 0.25 * rng.normal(size=self.num_styles))
        w[:, -1] = art
        return w

    def sample(self, n_real: int, n_fake: int, seed: int = 0, prefix: str = "") -> list[CorpusItem]:
        items = []
        for label, n in (("real", n_real), ("fake", n_fake)):
            for i in range(n):
                image_id = f"{prefix}{label}_{i:05d}"
                rng = np.random.default_rng(derive_seed(seed, image_id))
                w = self.sample_latent(rng, fake=label == "fake")
                items.append(CorpusItem(image_id, self.generator.decode(w), label, latent=LatentCode(w)))
        return items

    def pretrained_encoder(self) -> LinearEncoder:
        """Encoder fit to clean faces only: it cannot see the artifact atoms."""
        return LinearEncoder.pseudo_inverse(self.generator, ~self.generator.artifact_dims)

    def oracle_encoder(self) -> LinearEncoder:
        return LinearEncoder.pseudo_inverse(self.generator)

    def train_detector(self, name: str, seed: int, n_train: int = 300, l2: float = 1e-2,
                       init_scale: float = 5.0, **kw) -> ToyDetector:
        det = ToyDetector(name, self.side, seed=seed, **kw)
        train = self.sample(n_train, n_train, seed=derive_seed(seed, "detector-train"), prefix=f"{name}-train-")
        det.fit([it.image for it in train], [it.label == "fake" for it in train], l2=l2, init_scale=init_scale)
        return det

    def train_detectors(self, n: int, seed: int, **kw) -> list[ToyDetector]:
        return [self.train_detector(f"det{i}", derive_seed(seed, f"det{i}"), **kw) for i in range(n)]
