import numpy as np
import pytest

from tcsc.cascade import TrainConfig, train_cascade
from tcsc.datasets import SyntheticSpec, generate_synthetic
from tcsc.decoders import SGDSchedule


@pytest.fixture(scope="session")
def synth_small():
    samples, meta = generate_synthetic(SyntheticSpec(n_landmarks=6, image_size=64, count=60, seed=3,
                                                     box_size=(36, 44)))
    return samples, meta


def tiny_config(decoder="ll", **kw):
    base = dict(n_trees=2, depth=3, stages=2, augment=1, decoder=decoder, r_schedule=(4, 6),
                n_candidates=24, flip_prob=0.0, max_rotation=0.0, ridge=None,
                sgd=SGDSchedule(max_epochs=5, batch_size=16), seed=11)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_models(synth_small):
    samples, meta = synth_small
    out = {}
    for kind in ("ll", "rrr", "rrrbp", "nn"):
        model, report = train_cascade(samples[:40], tiny_config(kind), iod=meta.iod,
                                      mirror_map=meta.mirror_map)
        out[kind] = (model, report)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
