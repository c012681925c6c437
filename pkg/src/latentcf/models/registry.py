"""Backend discovery by name and the adapter conformance suite.

A backend is either ``"toy"`` or an import path ``"package.module:factory"``
whose factory takes keyword options and returns a
:class:`latentcf.harness.Pipeline`.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass

import numpy as np

from ..core import Label, LatentCode, ShapeError
from . import (
    BackendError,
    adversarial_grad,
    decode,
    detector_score,
    encode,
    gradcam_activations,
)


def toy_backend(seed: int = 0, n_detectors: int = 4, side: int = 24, num_styles: int = 18, dim: int = 4,
                detector_train: int = 300, **world_kw):
    """Toy world with independently seeded detectors and the content-only encoder."""
    from ..harness import Pipeline
    from ..inversion import GradientMagnitudeDistance
    from .toy import ToyWorld

    world = ToyWorld(seed=seed, side=side, num_styles=num_styles, dim=dim, **world_kw)
    dets = world.train_detectors(n_detectors, seed=seed, n_train=detector_train)
    pipe = Pipeline(world.generator, world.pretrained_encoder(), {d.name: d for d in dets}, world.embedder,
                    GradientMagnitudeDistance(), dataset="toy", world=world)
    return pipe


BUILTIN = {"toy": toy_backend}


def load_backend(name: str, **options):
    """Instantiates a backend by registry name or ``module:factory`` path."""
    if name in BUILTIN:
        factory = BUILTIN[name]
    elif ":" in name:
        mod_name, attr = name.split(":", 1)
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise BackendError(f"cannot load backend {name!r}: {exc}") from exc
    else:
        raise BackendError(f"unknown backend {name!r}; use 'toy' or 'module:factory'")
    return factory(**options)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _check(name, fn) -> Check:
    try:
        detail = fn()
        return Check(name, True, detail or "")
    except Exception as exc:  # every failure is reported, none is fatal
        return Check(name, False, f"{type(exc).__name__}: {exc}")


def verify_pipeline(pipe, seed: int = 0, n_latents: int = 3, fd_coords: int = 8, rtol: float = 1e-4,
                    h: float = 1e-4) -> list[Check]:
    """Shape, range, determinism and finite-difference spot checks.

    Any backend for which every check passes can be used by the attack,
    metric and harness modules unchanged.
    """
    g, e = pipe.generator, pipe.encoder
    rng = np.random.default_rng(seed)
    latents = [LatentCode(rng.normal(size=(g.num_styles, g.dim))) for _ in range(n_latents)]
    checks = []

    def gen_shape():
        for w in latents:
            x = decode(g, w)
            if x.shape != (g.output_side, g.output_side, 3):
                raise ShapeError(f"decode gave {x.shape}")
        return f"side {g.output_side}"

    def gen_det():
        for w in latents:
            a = np.asarray(g.decode(w.codes))
            b = np.asarray(g.decode(w.codes))
            if not np.array_equal(a, b):
                raise AssertionError("decode is not deterministic")

    def enc_shape():
        if e.input_side != g.output_side:
            raise ShapeError(f"encoder side {e.input_side} vs generator side {g.output_side}")
        for w in latents:
            x = decode(g, w)
            a, b = encode(e, x), encode(e, x)
            if a.shape != w.shape:
                raise ShapeError(f"encode gave {a.shape}, generator wants {w.shape}")
            if a != b:
                raise AssertionError("encode is not deterministic")
        encode(e, np.zeros((e.input_side, e.input_side, 3)))

    checks += [_check("generator.shape", gen_shape), _check("generator.deterministic", gen_det),
               _check("encoder.shape_determinism", enc_shape)]

    for name, d in pipe.detectors.items():

        def det_range(d=d):
            noise = rng.random((d.input_side, d.input_side, 3))
            for x in [noise, *[decode(g, w) for w in latents]]:
                s1, s2 = detector_score(d, x), detector_score(d, x)
                if s1 != s2:
                    raise AssertionError("score is not deterministic")

        def det_fd(d=d):
            worst = 0.0
            for w in latents:
                ga = adversarial_grad(d, g, w, Label.REAL).codes
                flat = rng.choice(ga.size, size=min(fd_coords, ga.size), replace=False)
                for idx in flat:
                    ij = np.unravel_index(idx, ga.shape)
                    step = np.zeros(ga.shape)
                    step[ij] = h
                    lp = detector_score(d, decode(g, LatentCode(w.codes + step))) ** 2
                    lm = detector_score(d, decode(g, LatentCode(w.codes - step))) ** 2
                    fd = (lp - lm) / (2 * h)
                    if abs(ga[ij]) > 1e-6:
                        err = abs(ga[ij] - fd) / max(abs(ga[ij]), abs(fd))
                        worst = max(worst, err)
                        if err > rtol:
                            raise AssertionError(f"gradient mismatch at {ij}: analytic {ga[ij]}, fd {fd}")
            return f"max rel err {worst:.2e}"

        checks += [_check(f"detector[{name}].range_determinism", det_range),
                   _check(f"detector[{name}].finite_difference", det_fd)]
        if getattr(d, "gradcam", False):

            def det_cam(d=d):
                x = decode(g, latents[0])
                for layer in d.layers:
                    acts, grads = gradcam_activations(d, x, layer)
                    if acts.shape != grads.shape or acts.ndim != 3:
                        raise ShapeError(f"layer {layer}: {acts.shape} vs {grads.shape}")

            checks.append(_check(f"detector[{name}].gradcam", det_cam))

    def emb():
        x = decode(g, latents[0])
        v = np.asarray(pipe.embedder.embed(x))
        if v.shape != (pipe.embedder.embedding_dim,):
            raise ShapeError(f"embedding shape {v.shape}")
        if not np.isclose(np.linalg.norm(v), 1.0, atol=1e-6):
            raise AssertionError(f"embedding norm {np.linalg.norm(v)}")

    def perc():
        x = decode(g, latents[0])
        y = decode(g, latents[1 % len(latents)])
        if pipe.perceptual.distance(x, x) != 0:
            raise AssertionError("distance(a, a) != 0")
        dxy, dyx = pipe.perceptual.distance(x, y), pipe.perceptual.distance(y, x)
        if dxy < 0 or not np.isclose(dxy, dyx):
            raise AssertionError(f"asymmetric or negative distance {dxy} / {dyx}")

    checks += [_check("embedder.unit_norm", emb), _check("perceptual.metric", perc)]
    return checks
