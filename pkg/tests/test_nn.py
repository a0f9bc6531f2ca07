import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (check_layer, direct_conv1d, kink_margin, min_bn_variance_ratio, numeric_grad,
                     reference_adam, rel_error)
from ppgbp.errors import FormatError, StructuralError
from ppgbp.nn import (
    AdamState,
    BatchNorm1d,
    Conv1d,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool1d,
    Model,
    ModelCheckpoint,
    ReLU,
    ResidualBlock,
    adam_step,
    build_architecture,
    conv1d_backward,
    conv1d_forward,
    glorot_init,
    load_checkpoint,
    loss_mse,
    loss_softmax_xent,
    save_checkpoint,
    softmax,
)

TOL = 1e-4


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


class TestGlorot:
    def test_unit_bound(self):
        w = glorot_init((1000,), 3, 3, seed=1, dtype=np.float64)
        assert w.min() >= -1 and w.max() <= 1
        assert w.max() > 0.99

    def test_variance(self):
        w = glorot_init((100_000,), 100, 100, seed=2, dtype=np.float64)
        expected = (2 * math.sqrt(0.03)) ** 2 / 12
        assert abs(w.var() - expected) / expected < 0.05

    def test_seeded(self):
        assert np.array_equal(glorot_init((4, 5), 4, 5, 9), glorot_init((4, 5), 4, 5, 9))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


class TestConv:
    def test_hand_example(self):
        x = np.array([1.0, 2, 3, 4]).reshape(1, 4, 1)
        y, _ = conv1d_forward(x, np.ones((1, 1, 2)), np.zeros(1), 1, "valid")
        assert y.ravel().tolist() == [3, 5, 7]

    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 9, 1))
        y, _ = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
        assert np.array_equal(y, x)

    @pytest.mark.parametrize("length,k,stride,pad", [(11, 3, 1, 1), (17, 5, 2, 2), (20, 7, 3, 0),
                                                     (9, 1, 1, 0), (30, 11, 4, 0)])
    def test_against_loops(self, length, k, stride, pad):
        rng = np.random.default_rng(length)
        x = rng.standard_normal((2, length, 3))
        w = rng.standard_normal((4, 3, k))
        b = rng.standard_normal(4)
        y, _ = conv1d_forward(x, w, b, stride, pad)
        assert y.shape[1] == (length + 2 * pad - k) // stride + 1
        assert np.allclose(y, direct_conv1d(x, w, b, stride, pad))

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            conv1d_forward(np.zeros((1, 10, 2)), np.zeros((3, 4, 3)), np.zeros(3))
        with pytest.raises(StructuralError):
            conv1d_forward(np.zeros((1, 2, 1)), np.zeros((1, 1, 5)), np.zeros(1))

    def test_functional_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 13, 3))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)
        y, cache = conv1d_forward(x, w, b, 2, "same")
        r = rng.standard_normal(y.shape)
        dx, dw, db = conv1d_backward(r, cache)
        f = lambda: float(np.sum(conv1d_forward(x, w, b, 2, "same")[0] * r))  # noqa: E731
        assert rel_error(dx, numeric_grad(f, x)) < TOL
        assert rel_error(dw, numeric_grad(f, w)) < TOL
        assert rel_error(db, numeric_grad(f, b)) < TOL


# ---------------------------------------------------------------------------
# Layers: examples
# ---------------------------------------------------------------------------


class TestLayerExamples:
    def test_relu(self):
        assert ReLU().forward(np.array([-1.0, 0, 2])).tolist() == [0, 0, 2]

    def test_gap_constant(self):
        x = np.full((2, 17, 3), 4.5)
        assert np.allclose(GlobalAvgPool().forward(x), 4.5)

    def test_batchnorm_train_stats(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (8, 50, 4))
        bn = BatchNorm1d(4)
        bn.astype(np.float64)
        y = bn.forward(x, training=True)
        assert np.all(np.abs(y.mean(axis=(0, 1))) < 1e-5)
        assert np.all(np.abs(y.var(axis=(0, 1)) - 1) < 1e-4)

    def test_batchnorm_running_stats(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, (8, 50, 2))
        bn = BatchNorm1d(2)
        bn.astype(np.float64)
        bn.forward(x, training=True)
        assert np.allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 1)))
        assert np.allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 1)))
        y = bn.forward(x, training=False)
        rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
        assert np.allclose(y, (x - rm) / np.sqrt(rv + 1e-5))

    def test_batchnorm_single_sample(self):
        with pytest.raises(StructuralError):
            BatchNorm1d(3).forward(np.zeros((1, 5, 3)), training=True)
        BatchNorm1d(3).forward(np.zeros((1, 5, 3)), training=False)

    def test_dropout_eval_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 10))
        assert Dropout(0.5, seed=1).forward(x, training=False) is x

    def test_dropout_seeded(self):
        x = np.ones((50, 40))
        a = Dropout(0.5, seed=3).forward(x, training=True)
        b = Dropout(0.5, seed=3).forward(x, training=True)
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}
        assert abs(a.mean() - 1) < 0.05

    def test_maxpool_values(self):
        x = np.array([1.0, 5, 2, 0, 3, 9, 4]).reshape(1, 7, 1)
        assert MaxPool1d(3, 2).forward(x).ravel().tolist() == [5, 3, 9]
        assert MaxPool1d(3, 2, padding=1).forward(x).ravel().tolist() == [5, 5, 9, 9]

    def test_dense_mismatch(self):
        with pytest.raises(StructuralError):
            Dense(4, 2).forward(np.zeros((3, 5)))


# ---------------------------------------------------------------------------
# Gradient oracle (float64 central differences)
# ---------------------------------------------------------------------------


def make_case(kind, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    length = int(rng.integers(6, 14))
    c = int(rng.integers(1, 4))
    if kind == "conv":
        k = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 3))
        pad = ["same", "valid", int(rng.integers(0, 3))][seed % 3]
        layer = Conv1d(c, int(rng.integers(1, 4)), k, stride, pad, rng)
        return layer, rng.standard_normal((n, max(length, k), c)), True, None
    if kind == "batchnorm_train":
        layer = BatchNorm1d(c)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
        layer.params["beta"] = rng.standard_normal(c)
        return layer, rng.normal(1.0, 2.0, (n, length, c)), True, None
    if kind == "batchnorm_eval":
        layer = BatchNorm1d(c)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
        layer.buffers["running_mean"] = rng.standard_normal(c)
        layer.buffers["running_var"] = rng.uniform(0.5, 2, c)
        return layer, rng.standard_normal((n, length, c)), False, None
    if kind == "relu":
        return ReLU(), away_from_zero(rng, (n, length, c)), True, None
    if kind == "maxpool":
        pad = int(rng.integers(0, 2))
        return MaxPool1d(3, int(rng.integers(1, 3)), pad), rng.standard_normal((n, length, c)), \
            True, None
    if kind == "gap":
        return GlobalAvgPool(), rng.standard_normal((n, length, c)), True, None
    if kind == "flatten":
        return Flatten(), rng.standard_normal((n, length, c)), True, None
    if kind == "dense":
        fin = int(rng.integers(1, 8))
        return Dense(fin, int(rng.integers(1, 6)), rng), rng.standard_normal((n, fin)), True, None
    if kind == "dropout":
        layer = Dropout(float(rng.uniform(0.1, 0.7)), seed=seed)
        state = layer.rng.bit_generator.state

        def reset():
            layer.rng.bit_generator.state = state
        return layer, rng.standard_normal((n, length, c)), True, reset
    if kind in ("basic", "basic_down", "bottleneck", "bottleneck_down"):
        variant = kind.split("_")[0]
        down = kind.endswith("down")
        width = int(rng.integers(1, 4))
        cin = width if variant == "basic" and not down and seed % 2 else c
        layer = ResidualBlock(cin, width, variant, down, rng=rng)
        return layer, rng.standard_normal((n, length, cin)), True, None
    raise ValueError(kind)


def smooth_case(kind, seed, h=1e-4, max_draws=50):
    """A random case whose ReLU/max-pool kinks all lie more than 10 h away.

    Central differences straddling a kink measure the kink, not the backward
    pass, so such draws are replaced by the next seed in a fixed sequence.
    Training-mode batch norms over channels with variance below 10 eps are
    near-kinks of the same kind and are redrawn too.
    """
    for attempt in range(max_draws):
        case = make_case(kind, seed + 1000 * attempt)
        layer, x, training, reset = case
        layer.astype(np.float64)
        if kink_margin(layer, x, training, reset) <= 10 * h:
            continue
        if training and min_bn_variance_ratio(layer, x, reset) < 10:
            continue
        return case
    raise RuntimeError(f"no smooth draw for {kind} seed {seed}")


LAYER_KINDS = ("conv", "batchnorm_train", "batchnorm_eval", "relu", "maxpool", "gap", "flatten",
               "dense", "dropout", "basic", "basic_down", "bottleneck", "bottleneck_down")


class TestGradients:
    @pytest.mark.parametrize("kind", LAYER_KINDS)
    @pytest.mark.parametrize("seed", range(4))
    def test_layer(self, kind, seed):
        layer, x, training, reset = smooth_case(kind, seed)
        errors = check_layer(layer, x, training, seed=seed, rng_reset=reset)
        worst = max(errors, key=errors.get)
        assert errors[worst] < TOL, (worst, errors[worst])

    def test_rejected_bn_draw_is_truncation(self):
        # a shortcut channel with batch variance ~2 eps: the h = 1e-4 error is
        # h^2 truncation, and shrinks 100x with a 10x smaller step
        layer, x, training, reset = make_case("bottleneck", 2017)
        layer.astype(np.float64)
        assert min_bn_variance_ratio(layer, x) < 10
        coarse = max(check_layer(layer, x, training, seed=17).values())
        fine = max(check_layer(layer, x, training, seed=17, h=1e-5).values())
        assert coarse > 1e-4 and fine < coarse / 50

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_xent(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 11))
        logits = rng.standard_normal((n, k)) * 3
        labels = rng.integers(0, k, n)
        _, g = loss_softmax_xent(logits, labels)
        num = numeric_grad(lambda: loss_softmax_xent(logits, labels)[0], logits)
        assert rel_error(g, num) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_mse(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.normal(120, 20, (int(rng.integers(1, 9)), 1))
        target = rng.normal(120, 20, pred.shape[0])
        _, g = loss_mse(pred, target)
        num = numeric_grad(lambda: loss_mse(pred, target)[0], pred)
        assert rel_error(g, num) < 1e-5

    def test_model_end_to_end(self):
        config = build_architecture("resnet18", "classification", 3, "desk", input_length=40)
        model = Model(config, seed=1).astype(np.float64)
        # thousands of ReLU inputs: some always sit within 1e-4 of a kink, so this
        # composition check takes the widest-margin draw and a 1e-5 step; the
        # per-layer checks above carry the h = 1e-4 contract
        draws = [np.random.default_rng(d).standard_normal((3, 40, 1)) for d in range(20)]
        x = max(draws, key=lambda v: kink_margin(model.net, v))
        y = np.array([0, 2, 1])
        model.zero_grads()
        out = model.forward(x, training=True)
        _, g = loss_softmax_xent(out, y)
        model.backward(g)
        params = model.parameters()
        grads = [gr.copy() for gr in model.gradients()]
        f = lambda: loss_softmax_xent(model.forward(x, training=True), y)[0]  # noqa: E731
        for i in (0, len(params) // 2, len(params) - 2):
            assert rel_error(grads[i], numeric_grad(f, params[i], h=1e-5)) < TOL


# ---------------------------------------------------------------------------
# Residual blocks
# ---------------------------------------------------------------------------


class TestResidual:
    def test_zero_branch_is_relu(self):
        block = ResidualBlock(4, 4, "basic")
        block.astype(np.float64)
        for _, layer, key in block.param_slots():
            if key == "w":
                layer.params[key][...] = 0
        x = np.random.default_rng(0).standard_normal((2, 10, 4))
        assert np.allclose(block.forward(x, training=False), np.maximum(x, 0))

    def test_downsample_shape(self):
        block = ResidualBlock(32, 48, "basic", downsample=True)
        y = block.forward(np.zeros((2, 64, 32), dtype=np.float32), training=False)
        assert y.shape == (2, 32, 48)
        assert block.output_shape((64, 32)) == (32, 48)

    def test_bottleneck_expansion(self):
        block = ResidualBlock(8, 4, "bottleneck")
        assert block.forward(np.zeros((2, 16, 8), np.float32)).shape == (2, 16, 16)

    def test_missing_projection(self):
        with pytest.raises(StructuralError):
            ResidualBlock(32, 48, "basic", project=False)
        with pytest.raises(StructuralError):
            ResidualBlock(8, 8, "basic", downsample=True, project=False)


# ---------------------------------------------------------------------------
# Losses and optimizer closed forms
# ---------------------------------------------------------------------------


class TestLosses:
    @pytest.mark.parametrize("n", [3, 4, 6, 10])
    def test_uniform_logits(self, n):
        loss, _ = loss_softmax_xent(np.full((5, n), 0.3), np.arange(5) % n)
        assert abs(loss - math.log(n)) < 1e-6

    def test_stable_for_large_logits(self):
        loss, g = loss_softmax_xent(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12) and np.all(np.isfinite(g))

    def test_mse_zero(self):
        p = np.array([[120.0], [95.0]])
        loss, g = loss_mse(p, p.ravel())
        assert loss == 0 and not g.any()

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            loss_softmax_xent(np.zeros((2, 3)), np.array([0, 3]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(2, 10), st.integers(0, 1000))
    def test_softmax_rows(self, n, k, seed):
        p = softmax(np.random.default_rng(seed).normal(0, 10, (n, k)))
        assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


class TestAdam:
    def test_first_step_sign(self):
        g = np.array([3.0, -0.002, 1e3, -7.5])
        p = np.zeros(4)
        adam_step([p], [g], AdamState(), lr=0.001)
        assert np.allclose(p, -0.001 * np.sign(g), rtol=1e-6)

    def test_zero_gradient(self):
        p = np.array([1.0, 2.0])
        state = AdamState()
        adam_step([p], [np.zeros(2)], state)
        assert p.tolist() == [1.0, 2.0] and state.step == 1

    def test_reference(self):
        rng = np.random.default_rng(4)
        theta0 = rng.standard_normal(3)
        grads = [rng.standard_normal(3) for _ in range(25)]
        expected = reference_adam(theta0, grads, lr=0.01)
        p = theta0.copy()
        state = AdamState()
        for g, want in zip(grads, expected):
            adam_step([p], [g], state, lr=0.01)
            assert np.allclose(p, want, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


class TestArchitectures:
    def test_resnet18_full(self):
        cfg = build_architecture("resnet18", "classification", 6, "full")
        blocks = [s for s in cfg.layers if s["kind"].startswith("residual")]
        assert len(blocks) == 8
        assert cfg.layers[-1] == {"kind": "softmax_head", "units": 6}
        assert cfg.layers[0]["channels"] == 64

    @pytest.mark.parametrize("name,count", [("resnet34", 16), ("resnet50", 16)])
    def test_block_counts(self, name, count):
        cfg = build_architecture(name, "classification", 3, "desk")
        assert sum(s["kind"].startswith("residual") for s in cfg.layers) == count

    def test_alexnet_regression(self):
        cfg = build_architecture("alexnet", "regression", 10)
        assert cfg.n_outputs == 1 and cfg.layers[-1]["units"] == 1

    def test_desk_widths(self):
        full = build_architecture("alexnet", "classification", 4, "full")
        desk = build_architecture("alexnet", "classification", 4, "desk")
        widths = lambda c: [s.get("channels", s.get("units")) for s in c.layers  # noqa: E731
                            if s["kind"] in ("conv1d", "dense")]
        assert widths(desk) == [max(8, w // 4) for w in widths(full)]

    @pytest.mark.parametrize("name", ["alexnet", "resnet18", "resnet34", "resnet50"])
    def test_desk_forward(self, name):
        model = Model(build_architecture(name, "classification", 4, "desk"), seed=0)
        out = model.forward(np.zeros((2, 625, 1), dtype=np.float32))
        assert out.shape == (2, 4)
        assert np.allclose(softmax(out).sum(axis=1), 1, atol=1e-6)

    def test_unknown(self):
        from ppgbp.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            build_architecture("vgg16")

    def test_deterministic_init(self):
        cfg = build_architecture("resnet18", "regression")
        a, b = Model(cfg, seed=5), Model(cfg, seed=5)
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_bad_input_shape(self):
        model = Model(build_architecture("alexnet", "regression"))
        with pytest.raises(StructuralError):
            model.forward(np.zeros((1, 600)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _train_steps(model, state, x, y, steps):
    losses = []
    for _ in range(steps):
        model.zero_grads()
        out = model.forward(x, training=True)
        loss, g = loss_softmax_xent(out, y)
        model.backward(g.astype(out.dtype))
        adam_step(model.parameters(), model.gradients(), state)
        losses.append(loss)
    return losses


class TestCheckpoint:
    def setup_method(self):
        self.cfg = build_architecture("alexnet", "classification", 3, "desk", input_length=200)
        rng = np.random.default_rng(0)
        self.x = rng.standard_normal((6, 200)).astype(np.float32)
        self.y = np.array([0, 1, 2, 0, 1, 2])

    def test_roundtrip_and_resume(self, tmp_path):
        model = Model(self.cfg, seed=3)
        state = AdamState()
        _train_steps(model, state, self.x, self.y, 2)
        ckpt = ModelCheckpoint.from_model(model, state, {"note": "x"})
        path = tmp_path / "m.ppgm"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.equals(ckpt)
        save_checkpoint(back, tmp_path / "again.ppgm")
        assert (tmp_path / "again.ppgm").read_bytes() == path.read_bytes()
        expected = _train_steps(model, state, self.x, self.y, 1)[0]
        resumed = back.to_model()
        got = _train_steps(resumed, back.adam, self.x, self.y, 1)[0]
        assert abs(got - expected) < 1e-6

    def test_corruption(self, tmp_path):
        path = tmp_path / "m.ppgm"
        save_checkpoint(ModelCheckpoint.from_model(Model(self.cfg)), path)
        raw = path.read_bytes()
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError):
            load_checkpoint(path)
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(path)
        path.write_bytes(raw + b"\0\0")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        ckpt = ModelCheckpoint.from_model(Model(self.cfg))
        ckpt.params[0] = ckpt.params[0][:1]
        ckpt.adam.m[0] = ckpt.adam.m[0][:1]
        ckpt.adam.v[0] = ckpt.adam.v[0][:1]
        path = tmp_path / "m.ppgm"
        save_checkpoint(ckpt, path)
        with pytest.raises(StructuralError):
            load_checkpoint(path)
