"""Alternating-training loop: M-step, E-step, the full run, and checkpoints."""

from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import TINY_TRAIN, identity_detector
from morphdet.em_trainer import (
    DetectorState,
    MissingClassSamples,
    TrainConfig,
    TrainingDiverged,
    _epoch_lr,
    checkpoint_text,
    collect_proposals,
    e_step,
    load_checkpoint,
    m_step,
    read_metrics_csv,
    save_checkpoint,
    train,
    visual_init_vectors,
    write_metrics_csv,
)
from morphdet.embedder import CheckpointError, forward_batch, init_params, params_equal
from morphdet.morph_inference import morph
from morphdet.numkernel import DimensionMismatch, EmptyInput
from morphdet.prototype_store import PrototypeSet, UnknownClass, e_step_update
from morphdet.toyworld import semantic_vectors


def test_train_config_validation():
    cfg = TrainConfig(hidden_sizes=[8, 4])
    assert cfg.hidden_sizes == (8, 4)
    weights = cfg.loss_weights()
    assert (weights.fg, weights.bg, weights.bbox) == (1.0, 1.0, 1.0)
    for bad in (
        dict(em_iterations=0),
        dict(m_step_epochs=-1),
        dict(batch_size=0),
        dict(learning_rate=0.0),
        dict(lr_decay_factor=0.0),
        dict(lr_decay_factor=1.5),
        dict(lr_decay_at=0.0),
        dict(momentum=1.0),
        dict(momentum=-0.1),
        dict(lam=1.5),
    ):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_detector_state_checks_dimensions():
    params = init_params(4, (), 3, seed=0)
    with pytest.raises(DimensionMismatch):
        DetectorState(params=params, prototypes=PrototypeSet.empty(2), config=TrainConfig())


def test_epoch_lr_schedule():
    cfg = TrainConfig(m_step_epochs=10, learning_rate=0.5, lr_decay_factor=0.1, lr_decay_at=0.8)
    assert [_epoch_lr(cfg, e) for e in range(8)] == [0.5] * 8
    assert _epoch_lr(cfg, 8) == 0.5 * 0.1
    assert _epoch_lr(cfg, 9) == 0.5 * 0.1
    # Fractional products round up: decay starts at epoch 5 of 6.
    cfg = TrainConfig(m_step_epochs=6, learning_rate=0.5, lr_decay_at=0.8)
    assert _epoch_lr(cfg, 4) == 0.5
    assert _epoch_lr(cfg, 5) == 0.5 * 0.1


def test_collect_proposals_preserves_order(tiny_dataset):
    pool = collect_proposals(tiny_dataset)
    assert len(pool) == sum(len(s.proposals) for s in tiny_dataset)
    assert pool[0] is tiny_dataset[0].proposals[0]
    assert pool[-1] is tiny_dataset[-1].proposals[-1]


def _axis(dim, i):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def _identity3():
    return identity_detector([(1, _axis(3, 0)), (2, _axis(3, 1)), (3, _axis(3, 2))])


def _scene(objects=(), proposals=(), scene_id=0):
    return SimpleNamespace(scene_id=scene_id, objects=list(objects), proposals=list(proposals))


def _fg(label, descriptor):
    return SimpleNamespace(
        descriptor=np.asarray(descriptor, dtype=np.float64),
        label=label,
        target_deltas=np.zeros(4),
    )


def _bg(descriptor):
    return SimpleNamespace(
        descriptor=np.asarray(descriptor, dtype=np.float64), label=0, target_deltas=None
    )


def test_m_step_zero_epochs_is_identity(tiny_state, tiny_dataset):
    cfg = replace(TINY_TRAIN, m_step_epochs=0)
    assert m_step(tiny_state, tiny_dataset, cfg) is tiny_state


def test_m_step_is_deterministic(tiny_state, tiny_dataset):
    sink_a, sink_b = [], []
    a = m_step(tiny_state, tiny_dataset, TINY_TRAIN, rng_tag=2, metrics=sink_a)
    b = m_step(tiny_state, tiny_dataset, TINY_TRAIN, rng_tag=2, metrics=sink_b)
    assert params_equal(a.params, b.params)
    assert sink_a == sink_b
    assert len(sink_a) == TINY_TRAIN.m_step_epochs
    assert a.prototypes is tiny_state.prototypes
    c = m_step(tiny_state, tiny_dataset, TINY_TRAIN, rng_tag=3)
    assert not params_equal(a.params, c.params)


def test_m_step_error_paths(tiny_state):
    with pytest.raises(EmptyInput):
        m_step(tiny_state, [], TINY_TRAIN)
    state = _identity3()
    bad = [_scene(proposals=[_fg(9, [1.0, 0.0, 0.0])])]
    with pytest.raises(UnknownClass):
        m_step(state, bad, TINY_TRAIN)


def test_m_step_handles_single_sided_pools():
    cfg = TrainConfig(m_step_epochs=2, batch_size=4, learning_rate=0.01)
    all_fg = [
        _scene(
            proposals=[
                _fg(1, [1.0, 0.0, 0.0]),
                _fg(2, [0.0, 1.0, 0.0]),
                _fg(3, [0.0, 0.0, 1.0]),
                _fg(1, [0.9, 0.1, 0.0]),
            ]
        )
    ]
    sink = []
    m_step(_identity3(), all_fg, cfg, metrics=sink)
    assert all(rec[2] == 0.0 for rec in sink)  # no background term without bg proposals
    assert all(rec[1] > 0.0 for rec in sink)

    all_bg = [_scene(proposals=[_bg([0.2, 0.1, 0.0]), _bg([0.0, 0.3, 0.1])])]
    sink = []
    m_step(_identity3(), all_bg, cfg, metrics=sink)
    assert all(rec[1] == 0.0 and rec[3] == 0.0 for rec in sink)
    assert all(rec[2] > 0.0 for rec in sink)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_m_step_divergence_is_reported(tiny_state, tiny_dataset):
    cfg = replace(TINY_TRAIN, learning_rate=1e308)
    with pytest.raises(TrainingDiverged):
        m_step(tiny_state, tiny_dataset, cfg)


def test_e_step_matches_manual_means(tiny_state, tiny_dataset):
    gts = [obj for scene in tiny_dataset for obj in scene.objects]
    feats, _, _ = forward_batch(tiny_state.params, np.stack([o.descriptor for o in gts]))
    rows: dict[int, list] = {}
    for row, obj in zip(feats, gts):
        rows.setdefault(obj.class_id, []).append(row)
    means = {}
    for cid in rows:
        acc = rows[cid][0].copy()
        for extra in rows[cid][1:]:
            acc = acc + extra
        means[cid] = acc / len(rows[cid])
    expected = e_step_update(tiny_state.prototypes, means, 0.5)

    after = e_step(tiny_state, tiny_dataset, 0.5)
    assert after.params is tiny_state.params
    assert after.prototypes.class_ids() == expected.class_ids()
    for cid in expected.class_ids():
        assert np.array_equal(after.prototypes.vector_for(cid), expected.vector_for(cid))
        assert np.linalg.norm(after.prototypes.vector_for(cid)) == pytest.approx(1.0, abs=1e-9)


def test_e_step_lam_one_keeps_prototype_object(tiny_state, tiny_dataset):
    after = e_step(tiny_state, tiny_dataset, 1.0)
    assert after.prototypes is tiny_state.prototypes


def test_e_step_error_paths(tiny_state):
    with pytest.raises(EmptyInput):
        e_step(tiny_state, [_scene(proposals=[_bg(np.zeros(10))])], 0.5)
    state = _identity3()
    # Class 3 owns a prototype but contributes no ground truth.
    data = [
        _scene(
            objects=[
                SimpleNamespace(class_id=1, descriptor=_axis(3, 0)),
                SimpleNamespace(class_id=2, descriptor=_axis(3, 1)),
            ]
        )
    ]
    with pytest.raises(MissingClassSamples):
        e_step(state, data, 0.5)
    stray = [_scene(objects=[SimpleNamespace(class_id=7, descriptor=_axis(3, 0))])]
    with pytest.raises(UnknownClass):
        e_step(state, stray, 0.5)


def test_train_shapes_and_snapshots(tiny_result):
    cfg = TINY_TRAIN
    assert len(tiny_result.snapshots) == cfg.em_iterations
    assert tiny_result.state is tiny_result.snapshots[-1]
    assert len(tiny_result.metrics) == cfg.em_iterations * cfg.m_step_epochs
    for k, rec in enumerate(tiny_result.metrics):
        assert rec.iteration == 1 + k // cfg.m_step_epochs
        assert rec.epoch == k % cfg.m_step_epochs
        assert rec.total == pytest.approx(rec.fg + rec.bg + rec.bbox)
    # The trailing E-step moved at least one prototype past the last snapshot.
    last = tiny_result.state.prototypes
    moved = any(
        not np.array_equal(tiny_result.final_prototypes.vector_for(cid), last.vector_for(cid))
        for cid in last.class_ids()
    )
    assert moved


def test_train_prototypes_cover_exactly_the_dataset_classes(tiny_result, tiny_universe):
    protos = tiny_result.state.prototypes
    assert sorted(protos.base) == [c.class_id for c in tiny_universe.base]
    assert protos.novel == {}


def test_train_is_deterministic(tiny_universe, tiny_dataset, tiny_result):
    again = train(tiny_dataset, semantic_vectors(tiny_universe), TINY_TRAIN)
    assert params_equal(again.state.params, tiny_result.state.params)
    for cid in tiny_result.state.prototypes.class_ids():
        assert np.array_equal(
            again.state.prototypes.vector_for(cid),
            tiny_result.state.prototypes.vector_for(cid),
        )
    assert again.metrics == tiny_result.metrics


def test_train_requires_semantics_for_every_class(tiny_universe, tiny_dataset):
    table = semantic_vectors(tiny_universe)
    table.pop(3)
    with pytest.raises(UnknownClass):
        train(tiny_dataset, table, TINY_TRAIN)
    with pytest.raises(EmptyInput):
        train([], semantic_vectors(tiny_universe), TINY_TRAIN)


def test_visual_init_vectors_oracle():
    scenes = [
        _scene(
            objects=[
                SimpleNamespace(class_id=2, descriptor=np.array([1.0, 2.0, 3.0])),
                SimpleNamespace(class_id=1, descriptor=np.array([10.0, 0.0, 0.0])),
            ]
        ),
        _scene(objects=[SimpleNamespace(class_id=2, descriptor=np.array([3.0, 2.0, 1.0]))]),
    ]
    exact = visual_init_vectors(scenes, 3)
    assert sorted(exact) == [1, 2]
    assert np.array_equal(exact[1], [10.0, 0.0, 0.0])
    assert np.array_equal(exact[2], [2.0, 2.0, 2.0])
    padded = visual_init_vectors(scenes, 5)
    assert np.array_equal(padded[2], [2.0, 2.0, 2.0, 0.0, 0.0])
    cut = visual_init_vectors(scenes, 2)
    assert np.array_equal(cut[2], [2.0, 2.0])
    with pytest.raises(EmptyInput):
        visual_init_vectors([_scene()], 3)


def test_metrics_csv_round_trip(tmp_path, tiny_result):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, tiny_result.metrics)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "iteration,epoch,fg_loss,bg_loss,bbox_loss,total_loss"
    assert read_metrics_csv(path) == tiny_result.metrics
    bad = tmp_path / "other.csv"
    bad.write_text("scene,ap\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_metrics_csv(bad)


def test_checkpoint_round_trip(tmp_path, tiny_state, tiny_exemplars):
    state = morph(tiny_state, tiny_exemplars)
    path = tmp_path / "detector.ckpt"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert params_equal(back.params, state.params)
    assert back.config == state.config
    assert sorted(back.prototypes.base) == sorted(state.prototypes.base)
    assert sorted(back.prototypes.novel) == sorted(state.prototypes.novel)
    for cid in state.prototypes.class_ids():
        assert np.array_equal(back.prototypes.vector_for(cid), state.prototypes.vector_for(cid))
    # Value-exact round trip implies byte-stable re-serialization.
    assert checkpoint_text(back) == checkpoint_text(state)


def test_checkpoint_rejects_corruption(tmp_path, tiny_state):
    text = checkpoint_text(tiny_state)
    lines = text.splitlines()
    first_tensor = next(i for i, line in enumerate(lines) if line.startswith("tensor "))

    cases = {
        "bad_header.ckpt": "\n".join(["junk"] + lines[1:]) + "\n",
        "no_config.ckpt": "\n".join([lines[0]] + lines[2:]) + "\n",
        "bad_config.ckpt": text.replace('"em_iterations": 2', '"em_iterations": 0', 1),
        "no_prototypes.ckpt": "\n".join(line for line in lines if line != "prototypes") + "\n",
        "dangling.ckpt": "\n".join(lines[: first_tensor + 1]) + "\n",
        "duplicate.ckpt": "\n".join(
            lines[: first_tensor + 2]
            + lines[first_tensor : first_tensor + 2]
            + lines[first_tensor + 2 :]
        )
        + "\n",
    }
    for name, payload in cases.items():
        path = tmp_path / name
        path.write_text(payload, encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
