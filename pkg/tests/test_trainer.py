import math

import numpy as np
import pytest

from xfq import trainer
from xfq.datasets import make_blobs
from xfq.errors import GradCheckError, ShapeError, StaleCacheError, TrainingDivergedError
from xfq.quantizer import Mode
from xfq.tensor import ConvGeometry, conv2d_reference
from xfq.trainer import (
    Conv,
    Dense,
    MaxPool2,
    QuantConfig,
    ReLU,
    ToyNet,
    TrainConfig,
    backward,
    forward,
    grad_check,
    make_toy_net,
    shadow_to_quantized,
    train,
    train_step,
)


def filterwise_bw(w):
    """Filter-wise binary weights for a dense (in, out) matrix: column j -> mean|w_j| * sign(w_j)."""
    alphas = np.array([math.fsum(np.abs(w[:, j])) / w.shape[0] for j in range(w.shape[1])])
    return alphas * np.where(w >= 0, 1.0, -1.0)


def cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def dense_net(mode=Mode.BW, beta=1, quantize=True, seed=0, n_in=(4, 4, 1), n_out=3):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-0.9, 0.9, (int(np.prod(n_in)), n_out))
    return ToyNet([Dense(w, rng.standard_normal(n_out) * 0.1, QuantConfig(mode, beta, quantize))], n_in, n_out)


def batch(shape=(4, 4, 1), n=12, n_classes=3, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n,) + tuple(shape)), rng.integers(0, n_classes, n)


def test_beta_one_single_layer_is_filterwise():
    net = dense_net()
    x, y = batch()
    _, loss, _ = forward(net, x, y)
    d = net.layers[0]
    assert loss == cross_entropy(x.reshape(len(x), -1) @ filterwise_bw(d.weight) + d.bias, y)


def test_beta_one_training_matches_oracle(monkeypatch):
    data = make_blobs(n_train=64, n_eval=32, seed=3)
    cfg = TrainConfig(batch_size=16, epochs=1, lr=1e-2, seed=2)
    a = make_toy_net(channels=(4,), mode=Mode.BW, beta=1, seed=5, quantize_first=True, quantize_last=True)
    b = a.copy()
    rng = np.random.Generator(np.random.Philox(key=0))
    opt_a, opt_b = trainer._Adam(), trainer._Adam()
    steps = []
    for _ in range(10):
        sel = rng.choice(64, 16, replace=False)
        steps.append(train_step(a, data.x_train[sel], data.y_train[sel], cfg, opt_a, cfg.lr))
    real = trainer._dequantized

    def oracle(weight, quant):
        q = real(weight, quant)[1]
        w2 = weight.reshape(-1, weight.shape[-1])
        return filterwise_bw(w2).reshape(weight.shape), q

    monkeypatch.setattr(trainer, "_dequantized", oracle)
    rng = np.random.Generator(np.random.Philox(key=0))
    for i in range(10):
        sel = rng.choice(64, 16, replace=False)
        loss = train_step(b, data.x_train[sel], data.y_train[sel], cfg, opt_b, cfg.lr)
        assert abs(loss - steps[i]) <= 1e-12


def test_unquantized_pass_through():
    x, y = batch((6, 6, 2), n_classes=2)
    fp = make_toy_net((6, 6, 2), channels=(3, 4), mode=Mode.FP, seed=4)
    off = make_toy_net((6, 6, 2), channels=(3, 4), mode=Mode.BW, seed=4)
    for layer in off.layers:
        if hasattr(layer, "quant"):
            layer.quant.quantize = False
    _, la, ca = forward(fp, x, y)
    _, lb, cb = forward(off, x, y)
    assert la == lb
    ga, gb = backward(fp, ca), backward(off, cb)
    for key in ga:
        np.testing.assert_array_equal(ga[key], gb[key])


def test_fp_forward_matches_reference_conv():
    net = make_toy_net((6, 6, 1), channels=(3,), mode=Mode.FP, seed=1, pool=False)
    x, y = batch((6, 6, 1), n=3, n_classes=2)
    conv, dense = net.layers[0], net.layers[2]
    h = conv2d_reference(x.transpose(1, 2, 3, 0), conv.weight, ConvGeometry(1, 1)).data.transpose(3, 0, 1, 2)
    logits = np.maximum(h, 0).reshape(3, -1) @ dense.weight + dense.bias
    got, loss, _ = forward(net, x, y)
    np.testing.assert_allclose(got, logits, atol=1e-12)
    assert abs(loss - cross_entropy(logits, y)) < 1e-12


def test_forward_determinism():
    net = make_toy_net(channels=(4,), mode=Mode.XNOR, beta=2, seed=9, quantize_first=True)
    x, y = batch((8, 8, 1), n_classes=2)
    assert forward(net, x, y)[1] == forward(net.copy(), x, y)[1]


def test_shape_errors():
    net = make_toy_net()
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 7, 8, 1)), np.zeros(2, dtype=int))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 8, 8, 1)), np.zeros(3, dtype=int))


def test_stale_cache():
    net = dense_net()
    x, y = batch()
    _, _, cache = forward(net, x, y)
    train_step(net, x, y, TrainConfig(), trainer._SGD(), 0.1)
    with pytest.raises(StaleCacheError):
        backward(net, cache)


def test_ste_clip_region():
    net = dense_net(beta=2)
    w = net.layers[0].weight
    w[:3, 0] = [1.5, -2.0, 1.2]
    x, y = batch()
    _, _, cache = forward(net, x, y)
    g = backward(net, cache)
    g_hat = g[(0, "weight_hat")]
    n = w.shape[0] * 2  # beta = 2 filters per group
    np.testing.assert_allclose(g[(0, "weight")][:3, 0], g_hat[:3, 0] / n, rtol=0, atol=1e-18)
    alpha = cache.layers[0].qlayer.filter_alphas()[0]
    np.testing.assert_allclose(g[(0, "weight")][3, 0], g_hat[3, 0] / n + alpha * g_hat[3, 0], rtol=1e-14)


def test_gradient_options():
    net = dense_net(beta=3)
    x, y = batch()
    _, _, cache = forward(net, x, y)
    g_hat = backward(net, cache)[(0, "weight_hat")]
    w = net.layers[0].weight
    alpha = cache.layers[0].qlayer.filter_alphas()[None, :]
    lit = backward(net, cache, ste="literal")[(0, "weight")]
    np.testing.assert_allclose(lit, g_hat / w.size + alpha * w * g_hat, rtol=1e-12, atol=1e-18)
    with pytest.raises(ValueError):
        backward(net, cache, ste="bogus")


def test_requantization_idempotent():
    w = np.random.default_rng(3).uniform(-1, 1, (3, 3, 4, 6))
    q = QuantConfig(Mode.BW, 2)
    once = shadow_to_quantized(w, q).dequantize().data
    twice = shadow_to_quantized(once, q).dequantize().data
    np.testing.assert_array_equal(once, twice)


def test_grad_check_full_precision():
    net = make_toy_net(channels=(3,), mode=Mode.FP, seed=2)
    x, y = batch((8, 8, 1), n=8, n_classes=2)
    rep = grad_check(net, x, y, epsilon=1e-5)
    assert rep.max_rel_deviation < 1e-6
    assert rep.n_checked > 100


@pytest.mark.parametrize("mode,beta", [(Mode.BW, 1), (Mode.BW, 2), (Mode.XNOR, 2)])
def test_grad_check_quantized(mode, beta):
    net = make_toy_net(channels=(4,), mode=mode, beta=beta, seed=6, quantize_first=True, quantize_last=True)
    x, y = batch((8, 8, 1), n=8, n_classes=2, seed=3)
    rep = grad_check(net, x, y, max_per_tensor=40)
    assert rep.max_rel_deviation < 1e-4
    assert rep.hat_max_rel_deviation < 1e-4
    assert rep.n_checked > 20


def test_grad_check_skips_kink():
    net = dense_net()
    net.layers[0].weight[0, 0] = 1.0005
    x, y = batch()
    rep = grad_check(net, x, y, epsilon=1e-5, margin=1e-3)
    assert ((0, "weight", 0), "near STE kink") in rep.skipped
    assert (0, "weight", 0) not in rep.names


def test_grad_check_all_excluded():
    net = dense_net()
    net.layers[0].weight[:] = 1.0
    x, y = batch()
    with pytest.raises(GradCheckError, match="larger net"):
        grad_check(net, x, y, include=("weight",))


def test_lr_schedule():
    cfg = TrainConfig(lr=0.01, decay_factor=0.5, decay_epochs=(2, 4))
    assert [cfg.lr_at(e) for e in range(6)] == [0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025]
    data = make_blobs(n_train=32, n_eval=16)
    _, hist = train(make_toy_net(channels=(2,)), data, TrainConfig(batch_size=16, epochs=3, lr=0.01, decay_factor=0.5, decay_epochs=(1,)))
    assert hist[1].lr == 0.01 * 0.5
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=0.0)


def test_train_determinism():
    data = make_blobs(n_train=64, n_eval=32, seed=1)
    cfg = TrainConfig(batch_size=16, epochs=2, lr=5e-3, seed=7)
    _, h1 = train(make_toy_net(channels=(4,), beta=2, seed=1), data, cfg)
    _, h2 = train(make_toy_net(channels=(4,), beta=2, seed=1), data, cfg)
    assert h1[-1].step_losses == h2[-1].step_losses


def test_shadow_clipping_only_on_quantized_layers():
    data = make_blobs(n_train=32, n_eval=16)
    net = make_toy_net(channels=(2,), mode=Mode.BW, quantize_first=True)
    net.layers[-1].weight[0, 0] = 3.0
    net.layers[0].weight[0, 0, 0, 0] = 3.0
    train(net, data, TrainConfig(batch_size=32, epochs=1, optimizer="sgd", lr=1e-6))
    assert net.layers[0].weight.max() <= 1.0
    assert net.layers[-1].weight[0, 0] > 2.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    data = make_blobs(n_train=32, n_eval=16)
    cfg = TrainConfig(batch_size=8, epochs=3, optimizer="sgd", lr=1e300, seed=0)
    with pytest.raises(TrainingDivergedError) as e:
        train(make_toy_net(mode=Mode.FP), data, cfg)
    assert e.value.step >= 1
    assert f"step {e.value.step}" in str(e.value)


def test_non_finite_batch_rejected():
    x, y = batch((8, 8, 1), n=2, n_classes=2)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward(make_toy_net(), x, y)


def test_make_toy_net_defaults():
    net = make_toy_net(channels=(4, 6), mode=Mode.BW)
    quant = [layer.quant.active for _, layer in net.weight_layers()]
    assert quant == [False, True, False]
    assert isinstance(net.layers[-2], MaxPool2) and isinstance(net.layers[1], ReLU)
    assert isinstance(net.layers[0], Conv)
