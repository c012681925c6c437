import numpy as np
import pytest

from latentcf.harness import Pipeline
from latentcf.inversion import FinetuneConfig, GradientMagnitudeDistance, finetune_encoder
from latentcf.models.toy import ToyWorld


@pytest.fixture(scope="session")
def world():
    return ToyWorld(seed=0)


@pytest.fixture(scope="session")
def detectors(world):
    return world.train_detectors(4, seed=0)


@pytest.fixture(scope="session")
def finetuned(world):
    corpus = [it.image for it in world.sample(100, 100, seed=11, prefix="ft-")]
    cfg = FinetuneConfig(steps=2000, learning_rate=1e-4, seed=0)
    return finetune_encoder(world.pretrained_encoder(), world.generator, corpus, cfg,
                            GradientMagnitudeDistance(), world.embedder)


@pytest.fixture(scope="session")
def pipeline(world, detectors, finetuned):
    return Pipeline(world.generator, finetuned.encoder, {d.name: d for d in detectors}, world.embedder,
                    GradientMagnitudeDistance(), world=world)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
