import numpy as np
import pytest
from numpy.testing import assert_allclose

from diffkernel import (
    Adam,
    AdamState,
    Concat,
    Conv2d,
    Flatten,
    Graph,
    GraphError,
    Linear,
    LogSoftmax,
    MaxPool2d,
    NonFiniteGradientError,
    ReLU,
    Reshape,
    Softmax,
    StepLr,
    Sum,
    Tanh,
    Upsample2x,
    adam_update,
    backward,
    clip_by_global_norm,
    forward,
    global_norm,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
)


def numeric_gradient(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        g[idx] = (plus - minus) / (2 * eps)
    return g


def small_unet(rng) -> Graph:
    g = Graph()
    g.input("x")
    g.add("c1", Conv2d(2, 3, rng=rng), "x")
    g.add("r1", ReLU(), "c1")
    g.add("p1", MaxPool2d(), "r1")
    g.add("c2", Conv2d(3, 3, rng=rng), "p1")
    g.add("t2", Tanh(), "c2")
    g.add("up", Upsample2x(), "t2")
    g.add("cat", Concat(), "up", "r1")
    g.add("c3", Conv2d(6, 2, kernel_size=1, padding=0, rng=rng), "cat")
    g.add("flat", Flatten(), "c3")
    g.add("fc", Linear(2 * 4 * 4, 5, rng=rng), "flat")
    g.add("logp", LogSoftmax(axis=1), "fc")
    g.add("loss", Sum(), "logp")
    return g


def weighted_loss_graph(rng) -> tuple[Graph, np.ndarray]:
    # sum of log-softmax outputs is constant, so weight them to get a useful check
    g = small_unet(rng)
    weights = rng.normal(size=(3, 5))
    return g, weights


def test_identity_graph_returns_input():
    g = Graph()
    g.input("x")
    x = np.arange(6.0).reshape(2, 3)
    assert_allclose(g.forward({"x": x})["x"], x)


def test_all_ones_conv_interior_pixel():
    conv = Conv2d(1, 1)
    conv.params["weight"][...] = 1.0
    out, _ = conv.forward(np.ones((1, 1, 5, 5)))
    assert out[0, 0, 2, 2] == pytest.approx(9.0)
    assert out[0, 0, 0, 0] == pytest.approx(4.0)


def test_sum_gradient_is_ones():
    g = Graph()
    g.input("x")
    g.add("s", Sum(), "x")
    g.forward({"x": np.random.default_rng(0).normal(size=(2, 3))})
    assert_allclose(g.backward("s")["x"], np.ones((2, 3)))


def test_disconnected_parameter_has_zero_gradient():
    rng = np.random.default_rng(0)
    g = Graph()
    g.input("x")
    g.add("used", Linear(3, 2, rng=rng), "x")
    g.add("unused", Linear(3, 2, rng=rng), "x")
    g.add("loss", Sum(), "used")
    g.forward({"x": rng.normal(size=(4, 3))})
    grads = g.backward("loss")
    assert_allclose(grads["unused.weight"], 0.0)
    assert np.any(grads["used.weight"] != 0.0)


def test_backward_before_forward():
    g = Graph()
    g.input("x")
    g.add("s", Sum(), "x")
    with pytest.raises(GraphError):
        g.backward("s")


def test_non_scalar_backward_needs_seed():
    g = Graph()
    g.input("x")
    g.add("t", Tanh(), "x")
    g.forward({"x": np.zeros((2, 2))})
    with pytest.raises(GraphError):
        g.backward("t")
    assert_allclose(g.backward("t", np.ones((2, 2)))["x"], 1.0)


def test_shape_mismatch_names_node():
    g = Graph()
    g.input("x")
    g.add("fc", Linear(3, 2), "x")
    with pytest.raises(GraphError, match="fc"):
        g.forward({"x": np.zeros((1, 4))})


def test_graph_construction_errors():
    g = Graph()
    g.input("x")
    with pytest.raises(GraphError):
        g.add("y", ReLU(), "missing")
    with pytest.raises(GraphError):
        g.add("x", ReLU(), "x")
    with pytest.raises(GraphError):
        g.add("two", ReLU(), "x", "x")
    with pytest.raises(GraphError):
        g.forward({})


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    g, weights = weighted_loss_graph(rng)
    x = rng.normal(size=(3, 2, 4, 4))

    def loss():
        return float((g.forward({"x": x})["logp"] * weights).sum())

    loss()
    grads = g.backward("logp", weights)
    params = g.parameters()
    for key in ("c1.weight", "c2.bias", "c3.weight", "fc.weight"):
        assert_allclose(grads[key], numeric_gradient(loss, params[key]), rtol=1e-4, atol=1e-6)
    assert_allclose(grads["x"], numeric_gradient(loss, x), rtol=1e-4, atol=1e-6)


def test_softmax_and_reshape_gradients():
    rng = np.random.default_rng(2)
    g = Graph()
    g.input("x")
    g.add("r", Reshape((2, 3)), "x")
    g.add("s", Softmax(axis=-1), "r")
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 2, 3))

    def loss():
        return float((g.forward({"x": x})["s"] * w).sum())

    loss()
    assert_allclose(g.backward("s", w)["x"], numeric_gradient(loss, x), rtol=1e-5, atol=1e-8)


def test_stride_two_conv_gradient():
    rng = np.random.default_rng(3)
    g = Graph()
    g.input("x")
    g.add("c", Conv2d(1, 2, stride=2, rng=rng), "x")
    g.add("loss", Sum(), "c")
    x = rng.normal(size=(1, 1, 6, 6))

    def loss():
        return float(g.forward({"x": x})["loss"])

    loss()
    assert g.value("c").shape == (1, 2, 3, 3)
    assert_allclose(g.backward("loss")["x"], numeric_gradient(loss, x), rtol=1e-5, atol=1e-8)


def test_maxpool_routes_to_first_maximum():
    x = np.zeros((1, 1, 2, 2))
    out, cache = MaxPool2d().forward(x)
    (g,), _ = MaxPool2d().backward(cache, np.ones((1, 1, 1, 1)))
    assert out[0, 0, 0, 0] == 0.0
    assert_allclose(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_rejects_odd_size():
    with pytest.raises(ValueError):
        MaxPool2d().forward(np.zeros((1, 1, 3, 4)))


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.0, -2.0])}
    adam_update(params, {"w": np.zeros(2)}, AdamState(), lr=1e-3)
    assert_allclose(params["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    params = {"w": np.array([0.5])}
    adam_update(params, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    assert params["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError):
        adam_update(params, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=1e-3)
    assert_allclose(params["w"], 0.0)


def test_adam_ignores_input_gradients():
    params = {"w": np.zeros(1)}
    adam_update(params, {"w": np.ones(1), "x": np.ones(3)}, AdamState(), lr=0.1)
    assert params["w"][0] == pytest.approx(-0.1, abs=1e-6)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(grads) == pytest.approx(5.0)
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_step_schedule():
    schedule = StepLr(1e-3, (200, 1000), 0.3)
    assert schedule(0) == pytest.approx(1e-3)
    assert schedule(199) == pytest.approx(1e-3)
    assert schedule(200) == pytest.approx(3e-4)
    assert schedule(999) == pytest.approx(3e-4)
    assert schedule(1000) == pytest.approx(9e-5)


def test_adam_follows_schedule():
    params = {"w": np.zeros(1)}
    opt = Adam(params, StepLr(1e-3, (2,), 0.5))
    rates = [opt.step({"w": np.ones(1)}) for _ in range(3)]
    assert rates == pytest.approx([1e-3, 1e-3, 5e-4])
    assert opt.iteration == 3


def test_training_step_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        g = small_unet(rng)
        x = rng.normal(size=(2, 2, 4, 4))
        opt = Adam(g.parameters(), 1e-2)
        for _ in range(3):
            g.forward({"x": x})
            opt.step(g.backward("logp", np.ones((2, 5)) * np.arange(5)))
        return parameter_digest(g.parameters())

    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    g = small_unet(rng)
    save_checkpoint(g, tmp_path / "ckpt", {"kind": "test"})
    loaded, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta == {"kind": "test"}
    assert parameter_digest(loaded.parameters()) == parameter_digest(g.parameters())
    x = rng.normal(size=(1, 2, 4, 4))
    assert_allclose(loaded.forward({"x": x})["logp"], g.forward({"x": x})["logp"])


def test_checkpoint_version_check(tmp_path):
    g = Graph()
    g.input("x")
    save_checkpoint(g, tmp_path)
    text = (tmp_path / "architecture.yaml").read_text().replace("format_version: 1", "format_version: 99")
    (tmp_path / "architecture.yaml").write_text(text)
    with pytest.raises(GraphError):
        load_checkpoint(tmp_path)


def test_load_parameters_checks_shapes():
    g = Graph()
    g.input("x")
    g.add("fc", Linear(2, 2), "x")
    with pytest.raises(GraphError):
        g.load_parameters({"fc.weight": np.zeros((3, 3)), "fc.bias": np.zeros(2)})
    with pytest.raises(GraphError):
        g.load_parameters({"fc.weight": np.zeros((2, 2))})


def test_module_level_forward_and_backward():
    g = Graph()
    g.input("x")
    g.add("t", Tanh(), "x")
    g.add("s", Sum(), "t")
    x = np.array([[0.0, 1.0]])
    out = forward(g, {"x": x})
    assert float(out["s"]) == pytest.approx(np.tanh(1.0))
    assert_allclose(backward(g, "s")["x"], 1.0 - np.tanh(x) ** 2)
