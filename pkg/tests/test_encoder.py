import numpy as np
import pytest

from subuda.encoder import (
    EncoderParams,
    ShapeError,
    StaleCacheError,
    backward,
    forward,
    grad_check,
    init_encoder,
    update_running_stats,
)

from drawing import smooth_draw


def sum_loss(f):
    return float(f.sum()), np.ones_like(f)


def quadratic_loss(target):
    def fn(f):
        d = f - target
        return float((d * d).sum()), 2.0 * d
    return fn


def backbone_only(weights, biases):
    sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    tensors = {}
    for i, (w, b) in enumerate(zip(weights, biases)):
        tensors[f"backbone.{i}.W"] = np.asarray(w, dtype=float)
        tensors[f"backbone.{i}.b"] = np.asarray(b, dtype=float)
    return EncoderParams(sizes=sizes, head_hidden=0, d_head=0, tensors=tensors, buffers={},
                         dropout=0.0, use_head=False)


def test_identity_layer_is_rectifier():
    p = backbone_only([np.eye(2)], [np.zeros(2)])
    out, _ = forward(p, [[1.0, -2.0]])
    assert out.tolist() == [[1.0, 0.0]]


def test_scalar_chain_rule():
    p = backbone_only([np.array([[2.0]])], [np.zeros(1)])
    out, cache = forward(p, [[3.0]])
    assert out[0, 0] == 6.0
    grads = backward(cache, np.ones_like(out))
    assert grads["backbone.0.W"][0, 0] == 3.0
    assert grads["backbone.0.b"][0] == 1.0


def test_zero_upstream_gives_zero_gradients():
    p = init_encoder(5, seed=1)
    x = np.random.default_rng(0).standard_normal((7, 5))
    out, cache = forward(p, x, mode="train", rng=np.random.default_rng(1))
    grads = backward(cache, np.zeros_like(out))
    assert set(grads) == set(p.tensors)
    assert all(not g.any() for g in grads.values())
    assert all(grads[k].shape == p.tensors[k].shape for k in grads)


def test_batchnorm_on_identical_rows_is_zero():
    p = init_encoder(3, hidden=(4,), head_hidden=5, d_head=2, dropout=0.0, seed=2)
    x = np.tile([[0.3, -1.0, 2.0]], (6, 1))
    _, cache = forward(p, x, mode="train")
    assert np.all(cache.head["zb"] == 0.0)


def test_dropout_zero_train_equals_eval():
    p = init_encoder(4, dropout=0.0, seed=3)
    x = np.random.default_rng(0).standard_normal((5, 4))
    # equal running stats and batch stats only when they match; use one row stats
    tr, cache = forward(p, x, mode="train")
    update_running_stats(p, cache)
    p.bn_momentum = 0.0
    p.buffers["head.bn.running_mean"] = cache.batch_stats[0]
    p.buffers["head.bn.running_var"] = cache.batch_stats[1]
    ev, _ = forward(p, x, mode="eval")
    np.testing.assert_allclose(tr, ev, rtol=0, atol=0)


def test_eval_forward_deterministic_and_shaped():
    p = init_encoder(6, d_head=9, seed=4)
    x = np.random.default_rng(5).standard_normal((11, 6))
    a, _ = forward(p, x)
    b, _ = forward(p, x)
    assert a.shape == (11, 9)
    assert np.array_equal(a, b)
    assert p.out_dim == 9


def test_shape_mismatch():
    p = init_encoder(6, seed=0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((2, 5)))


def test_stale_and_reused_cache():
    p = init_encoder(3, seed=0)
    x = np.ones((4, 3))
    out, cache = forward(p, x)
    backward(cache, np.ones_like(out))
    with pytest.raises(StaleCacheError):
        backward(cache, np.ones_like(out))
    out, cache = forward(p, x)
    p.version += 1
    with pytest.raises(StaleCacheError):
        backward(cache, np.ones_like(out))


def test_train_mode_backward_matches_finite_difference():
    """Train-mode batchnorm gradient, dropout off, against central differences."""
    rng = np.random.default_rng(9)
    p = init_encoder(4, hidden=(6,), head_hidden=5, d_head=3, dropout=0.0, seed=9)
    for name in p.tensors:
        if name.endswith(".b") or name.endswith("beta"):
            p.tensors[name] = p.tensors[name] + rng.uniform(0.05, 0.2, p.tensors[name].shape)
    x = rng.standard_normal((8, 4))
    target = rng.standard_normal((8, 3))
    loss = quadratic_loss(target)
    out, cache = forward(p, x, mode="train")
    grads = backward(cache, loss(out)[1])
    h = 1e-5
    for name, tensor in p.tensors.items():
        flat = tensor.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss(forward(p, x, mode="train")[0])[0]
            flat[j] = orig - h
            down = loss(forward(p, x, mode="train")[0])[0]
            flat[j] = orig
            num = (up - down) / (2 * h)
            assert abs(num - grads[name].reshape(-1)[j]) <= 1e-6 * max(1.0, abs(num))


@pytest.mark.parametrize("draw", range(20))
def test_grad_check_random_encoders(draw):
    rng = np.random.default_rng(1000 + draw)
    p, x = smooth_draw(rng)
    target = rng.standard_normal((6, p.out_dim))
    report = grad_check(p, x, quadratic_loss(target), tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_grad_check_trivial_cases():
    p = init_encoder(3, dropout=0.0, seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert grad_check(p, x, lambda f: (0.0, np.zeros_like(f))).passed
    # zero input: only biases carry signal; keep them off the rectifier kink
    for name in p.tensors:
        if name.endswith(".b") or name.endswith("beta"):
            p.tensors[name] = p.tensors[name] + 0.1
    assert grad_check(p, np.zeros((4, 3)), sum_loss).passed


def test_grad_check_detects_wrong_gradient():
    p = init_encoder(3, dropout=0.0, seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    report = grad_check(p, x, lambda f: (float((f ** 2).sum()), 3.0 * f))
    assert not report.passed


def test_head_can_be_disabled():
    p = init_encoder(5, hidden=(7, 6), use_head=False, seed=0)
    out, _ = forward(p, np.ones((2, 5)))
    assert out.shape == (2, 6)
    assert not any(k.startswith("head") for k in p.tensors)


def test_validate_catches_bad_shapes():
    p = init_encoder(5, seed=0)
    p.validate()
    p.tensors["head.fc2.W"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        p.validate()
