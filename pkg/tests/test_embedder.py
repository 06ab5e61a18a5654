"""Network forward/backward: finite-difference gradient oracle, SGD algebra,
parameter checkpoints, and the gradient-evaluation counter discipline."""

import numpy as np
import pytest

from morphdet.embedder import (
    CheckpointError,
    EmbedderParams,
    clone_params,
    forward,
    forward_batch,
    forward_batch_with_grad,
    grad_evaluation_count,
    init_params,
    load_params,
    params_equal,
    save_params,
    sgd_step,
    validate_params,
    zeros_like_params,
)
from morphdet.numkernel import DimensionMismatch
from morphdet.objective import LossWeights
from morphdet.prototype_store import PrototypeSet, Prototype, UnknownClass, init_from_semantic


class FakeProposal:
    def __init__(self, descriptor, label, target_deltas=None):
        self.descriptor = descriptor
        self.label = label
        self.target_deltas = target_deltas


def make_protos(rng, count, dim):
    return init_from_semantic({k + 1: rng.normal(size=dim) for k in range(count)})


def make_batch(rng, m_in, labels):
    return [
        FakeProposal(
            rng.normal(size=m_in),
            label,
            rng.uniform(-1, 1, size=4) if label > 0 else None,
        )
        for label in labels
    ]


def test_init_params_deterministic_and_shaped():
    a = init_params(6, (8, 5), 4, seed=3)
    b = init_params(6, (8, 5), 4, seed=3)
    c = init_params(6, (8, 5), 4, seed=4)
    assert params_equal(a, b)
    assert not params_equal(a, c)
    validate_params(a)
    assert a.m_in == 6 and a.hidden_sizes == (8, 5) and a.feature_dim == 4
    assert a.trunk[0].weight.shape == (6, 8)
    assert a.box_head.weight.shape == (5, 4)
    assert np.all(a.trunk[0].bias == 0.0)
    with pytest.raises(ValueError):
        init_params(0, (4,), 3, seed=0)
    with pytest.raises(ValueError):
        init_params(4, (0,), 3, seed=0)


def test_forward_matches_forward_batch_rows():
    rng = np.random.default_rng(0)
    params = init_params(5, (7,), 4, seed=1)
    x = rng.normal(size=(6, 5))
    feats, bg, deltas = forward_batch(params, x)
    for i in range(6):
        out = forward(params, x[i])
        assert np.allclose(out.feature, feats[i], atol=1e-12)
        assert out.bg_logit == pytest.approx(bg[i], abs=1e-12)
        assert np.allclose(out.box_deltas, deltas[i], atol=1e-12)
    with pytest.raises(DimensionMismatch):
        forward(params, np.zeros(4))
    with pytest.raises(DimensionMismatch):
        forward_batch(params, np.zeros((2, 4)))


def test_inference_paths_never_touch_the_grad_counter():
    rng = np.random.default_rng(1)
    params = init_params(5, (7,), 4, seed=2)
    before = grad_evaluation_count()
    forward(params, rng.normal(size=5))
    forward_batch(params, rng.normal(size=(8, 5)))
    assert grad_evaluation_count() == before


def test_forward_batch_with_grad_counts_once_per_call():
    rng = np.random.default_rng(2)
    params = init_params(5, (7,), 4, seed=2)
    protos = make_protos(rng, 3, 4)
    batch = make_batch(rng, 5, [1, 0, 2])
    before = grad_evaluation_count()
    forward_batch_with_grad(params, batch, protos)
    forward_batch_with_grad(params, batch, protos)
    assert grad_evaluation_count() == before + 2


def flat_arrays(params):
    out = []
    for layer in params.blocks():
        out.append(layer.weight)
        out.append(layer.bias)
    return out


def max_grad_error(params, batch, protos, weights, h=1e-5):
    """Central finite differences over every parameter coordinate."""
    _, grads = forward_batch_with_grad(params, batch, protos, weights)
    worst = 0.0
    for p_arr, g_arr in zip(flat_arrays(params), flat_arrays(grads)):
        flat_p = p_arr.reshape(-1)
        flat_g = g_arr.reshape(-1)
        for j in range(flat_p.size):
            keep = flat_p[j]
            flat_p[j] = keep + h
            up = forward_batch_with_grad(params, batch, protos, weights)[0].total
            flat_p[j] = keep - h
            down = forward_batch_with_grad(params, batch, protos, weights)[0].total
            flat_p[j] = keep
            fd = (up - down) / (2 * h)
            err = abs(flat_g[j] - fd) / max(abs(flat_g[j]), abs(fd), 1e-4)
            worst = max(worst, err)
    return worst


def test_gradients_match_finite_differences():
    weights = LossWeights(fg=1.0, bg=0.7, bbox=1.3)
    compositions = [[1, 0, 2, 0, 3, 0], [1, 2, 3, 1], [0, 0, 0, 0]]
    for seed in range(3):
        rng = np.random.default_rng([100, seed])
        params = init_params(6, (8,), 5, seed=seed)
        protos = make_protos(rng, 3, 5)
        for labels in compositions:
            batch = make_batch(rng, 6, labels)
            assert max_grad_error(params, batch, protos, weights) < 1e-4


def test_grad_rejects_unknown_label_and_empty_batch():
    rng = np.random.default_rng(3)
    params = init_params(5, (6,), 4, seed=0)
    protos = make_protos(rng, 2, 4)
    with pytest.raises(UnknownClass):
        forward_batch_with_grad(params, make_batch(rng, 5, [9]), protos)
    from morphdet.numkernel import EmptyInput

    with pytest.raises(EmptyInput):
        forward_batch_with_grad(params, [], protos)
    with pytest.raises(EmptyInput):
        forward_batch_with_grad(params, make_batch(rng, 5, [0]), PrototypeSet.empty(4))


def test_sgd_step_matches_hand_unrolled_updates():
    rng = np.random.default_rng(4)
    params = init_params(4, (5,), 3, seed=7)
    grads1 = init_params(4, (5,), 3, seed=8)
    grads2 = init_params(4, (5,), 3, seed=9)
    lr, mom = 0.1, 0.9

    p1, v1 = sgd_step(params, grads1, lr, None, mom)
    p2, v2 = sgd_step(p1, grads2, lr, v1, mom)

    for p0_l, g1_l, g2_l, p2_l, v2_l in zip(
        params.blocks(), grads1.blocks(), grads2.blocks(), p2.blocks(), v2.blocks()
    ):
        v1_w = g1_l.weight  # zero initial velocity
        v2_w = mom * v1_w + g2_l.weight
        expect_w = p0_l.weight - lr * v1_w - lr * v2_w
        assert np.allclose(p2_l.weight, expect_w, atol=1e-15)
        assert np.allclose(v2_l.weight, v2_w, atol=1e-15)


def test_sgd_step_does_not_mutate_inputs():
    params = init_params(4, (5,), 3, seed=1)
    grads = init_params(4, (5,), 3, seed=2)
    before = clone_params(params)
    sgd_step(params, grads, 0.5)
    assert params_equal(params, before)


def test_sgd_step_validation():
    params = init_params(4, (5,), 3, seed=1)
    grads = init_params(4, (5,), 3, seed=2)
    with pytest.raises(ValueError):
        sgd_step(params, grads, 0.0)
    with pytest.raises(ValueError):
        sgd_step(params, grads, 0.1, None, 1.0)
    bad = init_params(4, (6,), 3, seed=2)
    with pytest.raises(DimensionMismatch):
        sgd_step(params, bad, 0.1)


def test_clone_and_zeros_helpers():
    params = init_params(4, (5,), 3, seed=1)
    dup = clone_params(params)
    assert params_equal(params, dup)
    dup.trunk[0].weight[0, 0] += 1.0
    assert not params_equal(params, dup)
    zeros = zeros_like_params(params)
    assert all(np.all(l.weight == 0.0) and np.all(l.bias == 0.0) for l in zeros.blocks())


def test_params_checkpoint_round_trip(tmp_path):
    params = init_params(6, (8, 5), 4, seed=11)
    path = tmp_path / "params.ckpt"
    save_params(path, params, extra_config={"note": 7})
    back, config = load_params(path)
    assert params_equal(params, back)
    assert config["m_in"] == 6 and config["hidden_sizes"] == [8, 5]
    assert config["note"] == 7


def test_params_checkpoint_rejects_corruption(tmp_path):
    params = init_params(4, (5,), 3, seed=1)
    path = tmp_path / "params.ckpt"
    save_params(path, params)
    text = path.read_text()

    (tmp_path / "bad1.ckpt").write_text("something else\n" + text)
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad1.ckpt")

    lines = text.splitlines()
    at = next(k for k, ln in enumerate(lines) if ln.startswith("tensor box_head.bias"))
    (tmp_path / "bad2.ckpt").write_text("\n".join(lines[:at] + lines[at + 2 :]) + "\n")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad2.ckpt")

    (tmp_path / "bad3.ckpt").write_text(text.replace('"m_in": 4', '"m_in": 5'))
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad3.ckpt")

    (tmp_path / "bad4.ckpt").write_text(text + "tensor extra 1 1\n1\n")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad4.ckpt")
