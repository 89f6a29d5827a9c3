import math

import numpy as np
import pytest

from data import Dataset, synth_generate
from schema import SynthSpec
from sigproc import N_FEATURES, N_STEPS, FeatureSequence


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_sequences(n_per_class, sessions=(1,), experiment=0, seed=0, prefix="seg"):
    """Cheap labeled sequences; class c shifts a band of features by +c."""
    gen = np.random.default_rng(seed)
    samples = []
    for session in sessions:
        for label in range(3):
            for k in range(n_per_class):
                steps = gen.normal(size=(N_STEPS, N_FEATURES))
                steps[:, label * 100 : label * 100 + 100] += 2.0
                samples.append(
                    FeatureSequence(
                        steps=steps,
                        label=label,
                        segment_id=f"{prefix}-e{experiment}-s{session:02d}-c{label}-{k:04d}",
                        session_id=session,
                        experiment_id=experiment,
                    )
                )
    return samples


@pytest.fixture
def balanced_dataset():
    """1000 samples: 334/333/333 per class."""
    samples = make_sequences(334)
    drop = {samples[334 + 333].segment_id, samples[-1].segment_id}
    return Dataset(tuple(s for s in samples if s.segment_id not in drop))


@pytest.fixture
def small_dataset():
    return Dataset(tuple(make_sequences(10)))


@pytest.fixture
def session_dataset():
    """Two experiments x 15 sessions x 2 segments per class."""
    samples = []
    for exp in range(2):
        samples.extend(make_sequences(2, sessions=range(1, 16), experiment=exp, seed=exp))
    return Dataset(tuple(samples))


@pytest.fixture
def separable_synth():
    spec = SynthSpec(segments_per_class=2, sessions=15, experiments=1, snr=math.inf)
    return synth_generate(spec, seed=3)
