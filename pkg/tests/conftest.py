"""Shared fixtures: a small world and a detector trained on it.

Session scope keeps the suite fast; tests treat these values as read-only.
"""

import numpy as np
import pytest

from morphdet.em_trainer import DetectorState, TrainConfig, train
from morphdet.embedder import AffineLayer, EmbedderParams
from morphdet.prototype_store import Prototype, PrototypeSet
from morphdet.toyworld import exemplars_for, make_dataset, make_universe, semantic_vectors

TINY_TRAIN = TrainConfig(em_iterations=2, m_step_epochs=3, batch_size=16, seed=0)


@pytest.fixture(scope="session")
def tiny_universe():
    return make_universe(n_base=6, n_novel=2, k=4, d_sem=8, m_in=10, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_universe):
    return make_dataset(tiny_universe, tiny_universe.base, 2, 2, 16, seed=0)


@pytest.fixture(scope="session")
def tiny_exemplars(tiny_universe):
    return exemplars_for(tiny_universe, tiny_universe.novel, shots=5, seed=0)


@pytest.fixture(scope="session")
def tiny_result(tiny_universe, tiny_dataset):
    return train(tiny_dataset, semantic_vectors(tiny_universe), TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_state(tiny_result):
    return tiny_result.state


def identity_detector(class_axes, scale=8.0):
    """A trunk-free detector whose feature head is a scaled identity:
    descriptors map straight to features, the background logit and box deltas
    are 0 (decoded boxes equal their anchors). One unit-vector prototype per
    (class_id, axis) pair makes posteriors predictable by hand."""
    axes = {cid: np.asarray(axis, dtype=np.float64) for cid, axis in class_axes}
    dim = next(iter(axes.values())).shape[0]
    params = EmbedderParams(
        trunk=[],
        feature_head=AffineLayer(np.eye(dim) * scale, np.zeros(dim)),
        background_head=AffineLayer(np.zeros((dim, 1)), np.zeros(1)),
        box_head=AffineLayer(np.zeros((dim, 4)), np.zeros(4)),
    )
    protos = PrototypeSet(
        base={cid: Prototype(cid, vec) for cid, vec in axes.items()}, novel={}, dim=dim
    )
    return DetectorState(params=params, prototypes=protos, config=TrainConfig())
