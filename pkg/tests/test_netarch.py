import numpy as np
import pytest

from sonarmatch import netarch as N
from sonarmatch import tensor as T
from sonarmatch.errors import ConfigError, FormatError, InputError, ShapeError
from sonarmatch.pairgen import MATCH, NON_MATCH, PairKind, PairSample

# weights + biases per layer, worked out by hand from the layer lists
HAND_COUNTS = {
    "two-chan-class": 816 + 12832 + 25632 + 12816 + 4160 + 2080 + 66,
    "two-chan-score": 816 + 12832 + 25632 + 12816 + 4160 + 2080 + 33,
    "siamese-class": 416 + 12832 + 51264 + 51232 + 12384 + 9312 + 12352 + 130,
    "siamese-score": 416 + 12832 + 51264 + 51232 + 12384 + 9312 + 12352 + 65,
}


def reference_logits(net, a, b):
    """Independent forward pass in N x C x H x W layout, ReLU before pooling."""
    def run(stack, x):
        for layer in stack:
            if isinstance(layer, N.Conv2D):
                x = T.relu(T.conv2d(x, layer.p))
            elif isinstance(layer, N.MaxPool2x2):
                x = T.maxpool2x2(x)[0]
            elif isinstance(layer, N.Dense):
                x = T.dense(x.reshape(len(x), -1), layer.p)
            elif isinstance(layer, N.Sigmoid):
                x = T.sigmoid(x)
            elif isinstance(layer, N.ReLU) and x.ndim == 2:
                x = T.relu(x)
        return x

    if net.spec.architecture == N.TWO_CHANNEL:
        return run(net.body.layers, np.stack([a, b], axis=1))
    fa = run(net.body.layers, a[:, None])
    fb = run(net.body.layers, b[:, None])
    return run(net.decision.layers, np.concatenate([fa, fb], axis=1))


@pytest.fixture(scope="module")
def patches():
    rng = np.random.default_rng(5)
    return rng.random((3, 96, 96)), rng.random((3, 96, 96))


class TestSpec:
    @pytest.mark.parametrize("name", N.ARCH_NAMES)
    def test_parameter_counts(self, name):
        net = N.build(name)
        assert net.parameter_count == HAND_COUNTS[name]
        assert N.parameter_count(net.spec) == HAND_COUNTS[name]

    def test_spatial_chain(self, patches):
        net = N.build("two-chan-class")
        x = np.stack(patches)[:, :1]
        sizes = []
        for layer in net.body.layers:
            x = layer.forward(x)
            if isinstance(layer, (N.Conv2D, N.MaxPool2x2)):
                sizes.append(x.shape[-1])
        assert sizes == [92, 46, 42, 21, 17, 8, 4, 2]

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="unknown architecture"):
            N.NetworkSpec.from_name("three-chan")

    def test_non_canonical_layers_rejected(self):
        spec = N.NetworkSpec.from_name("two-chan-class")
        bad = N.NetworkSpec(spec.architecture, spec.head, spec.body[:-1], spec.decision)
        with pytest.raises(ConfigError):
            N.Network(bad, np.random.default_rng(0))

    def test_dict_round_trip(self):
        for name in N.ARCH_NAMES:
            spec = N.NetworkSpec.from_name(name)
            assert N.NetworkSpec.from_dict(spec.to_dict()) == spec
            assert spec.name == name

    def test_glorot_init(self):
        net = N.build("siamese-score", seed=3)
        for layer in net.body.layers + net.decision.layers:
            if isinstance(layer, (N.Conv2D, N.Dense)):
                w = layer.p.weights
                fan_in = w[0].size
                fan_out = w.shape[0] * (w[0, 0].size if w.ndim == 4 else 1)
                assert np.abs(w).max() <= T.glorot_bound(fan_in, fan_out)
                assert not layer.p.bias.any()


class TestForward:
    @pytest.mark.parametrize("name", N.ARCH_NAMES)
    def test_matches_reference(self, name, patches):
        net = N.build(name, seed=1)
        a, b = patches
        np.testing.assert_allclose(net.logits(a, b), reference_logits(net, a, b), rtol=1e-10,
                                   atol=1e-12)

    @pytest.mark.parametrize("name", N.ARCH_NAMES)
    def test_probability_range_and_batch_independence(self, name, patches):
        net = N.build(name, seed=2)
        a, b = patches
        p = net.predict(a, b)
        assert np.all((p >= 0) & (p <= 1))
        single = [N.forward_pair(net, a[i], b[i]).p for i in range(len(a))]
        np.testing.assert_allclose(p, single, rtol=1e-12)

    def test_siamese_branches_share_weights(self, patches):
        net = N.build("siamese-class")
        left, right = net.branches
        assert left is right
        a, _ = patches
        np.testing.assert_allclose(net.features(a)[1], net.features(a[1:2])[0], rtol=1e-12)

    def test_two_channel_has_no_branches(self):
        with pytest.raises(ConfigError):
            N.build("two-chan-score").branches

    def test_class_head_uses_second_component(self, patches):
        net = N.build("two-chan-class")
        a, b = patches
        z = net.logits(a, b)
        np.testing.assert_allclose(net.probabilities(z), T.softmax(z)[:, 1])

    def test_dropout_only_in_training(self, patches):
        net = N.build("two-chan-class")
        a, b = patches
        np.testing.assert_array_equal(net.logits(a, b), net.logits(a, b))
        rng = np.random.default_rng(0)
        assert not np.array_equal(net.logits(a, b, train=True, rng=rng), net.logits(a, b))

    def test_dropout_placement(self):
        two = N.build("two-chan-class")
        kinds = [type(l).__name__ for l in two.body.layers if type(l).__name__ in ("Dense", "Dropout")]
        assert kinds == ["Dense", "Dropout", "Dense", "Dropout", "Dense"]
        siam = N.build("siamese-class")
        kinds = [type(l).__name__ for l in siam.body.layers if type(l).__name__ in ("Dense", "Dropout", "Sigmoid")]
        assert kinds == ["Dense", "Dropout", "Dense", "Sigmoid"]

    def test_bad_patch_shape(self):
        net = N.build("two-chan-class")
        with pytest.raises(ShapeError):
            N.forward_pair(net, np.zeros((64, 64)), np.zeros((64, 64)))

    @pytest.mark.parametrize("name", ["two-chan-score", "siamese-class"])
    def test_input_gradient(self, name):
        rng = np.random.default_rng(9)
        net = N.build(name, seed=4)
        a = rng.random((1, 96, 96))
        b = rng.random((1, 96, 96))
        y = np.array([1])
        _, g = net.loss(net.logits(a, b), y)
        ga, gb = net.input_backward(g)
        err = T.finite_difference_check(lambda: net.loss(net.logits(a, b), y)[0], [a, b], [ga, gb],
                                        samples=5, rng=rng, signature_fn=net.regime)
        assert err < 1e-5


class TestGradients:
    @pytest.mark.parametrize("name", N.ARCH_NAMES)
    def test_finite_differences(self, name):
        assert N.gradient_check_architecture(name, seed=11, samples=2) < 1e-4


def _pairs(n, rng):
    out = []
    for i in range(n):
        a = rng.random((96, 96))
        if i % 2:
            out.append(PairSample(a, a, MATCH, PairKind.OBJ_OBJ_POS))
        else:
            out.append(PairSample(a, rng.random((96, 96)), NON_MATCH, PairKind.OBJ_OBJ_NEG))
    return out


class TestTraining:
    def test_augmentation(self, rng):
        pairs = _pairs(3, rng)
        aug = N.augment_symmetric(pairs)
        assert len(aug) == 6
        assert aug[4].patch_a is pairs[1].patch_b and aug[4].patch_b is pairs[1].patch_a

    def test_deterministic_and_partial_batches(self, rng):
        pairs = _pairs(10, rng)
        cfg = N.TrainConfig(epochs=2, batch_size=4, adam=T.AdamConfig(alpha=1e-3), seed=7)
        n1, h1 = N.train(N.build("siamese-score", seed=0), pairs, cfg)
        n2, h2 = N.train(N.build("siamese-score", seed=0), pairs, cfg)
        assert h1.steps == 6  # ceil(10 / 4) per epoch
        assert h1.batch_loss == h2.batch_loss
        assert N.to_bytes(n1) == N.to_bytes(n2)

    def test_loss_decreases(self, rng):
        pairs = _pairs(8, rng)
        cfg = N.TrainConfig(epochs=15, batch_size=8, adam=T.AdamConfig(alpha=1e-3), dropout_rate=0.0)
        _, hist = N.train(N.build("two-chan-class"), pairs, cfg)
        assert hist.train_loss[-1] < hist.train_loss[0]

    def test_stops_on_max_steps(self, rng):
        cfg = N.TrainConfig(epochs=5, batch_size=2, max_steps=3)
        _, hist = N.train(N.build("two-chan-score"), _pairs(6, rng), cfg)
        assert hist.steps == 3

    def test_patience_restores_best(self, rng):
        pairs = _pairs(6, rng)
        cfg = N.TrainConfig(epochs=6, batch_size=6, adam=T.AdamConfig(alpha=0.5), patience=1)
        net, hist = N.train(N.build("two-chan-score"), pairs, cfg, validation=pairs)
        if hist.stopped_early:
            best = min(hist.val_loss)
            assert N.mean_loss(net, pairs) == pytest.approx(best)

    def test_rejects_empty(self):
        with pytest.raises(InputError):
            N.train(N.build("two-chan-class"), [])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            N.TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            N.TrainConfig(dropout_rate=1.0)


class TestCheckpoint:
    @pytest.mark.parametrize("name", N.ARCH_NAMES)
    def test_round_trip(self, name, patches, tmp_path):
        net = N.build(name, seed=6)
        path = tmp_path / "m.ckpt"
        N.save(net, path)
        loaded = N.load(path, expected=net.spec)
        a, b = patches
        assert np.array_equal(net.logits(a, b), loaded.logits(a, b))
        assert path.read_bytes() == N.to_bytes(loaded)

    def test_layout(self):
        net = N.build("two-chan-score")
        data = N.to_bytes(net)
        assert data[:8] == N.MAGIC
        expected = 8 + 4 + 4 + len(data[16:].split(b"}")[0]) + 1 + 8 + 8 * net.parameter_count + 32
        assert len(data) == expected

    def test_corruption_detected(self):
        data = bytearray(N.to_bytes(N.build("two-chan-class")))
        data[200] ^= 0xFF
        with pytest.raises(FormatError, match="checksum") as exc:
            N.from_bytes(bytes(data))
        assert exc.value.offset is not None

    def test_truncation_and_magic(self):
        data = N.to_bytes(N.build("two-chan-class"))
        with pytest.raises(FormatError, match="byte offset"):
            N.from_bytes(data[:-5])
        with pytest.raises(FormatError, match="magic"):
            N.from_bytes(b"XXXXXXXX" + data[8:])
        with pytest.raises(FormatError):
            N.from_bytes(data[:4])

    def test_wrong_architecture(self):
        data = N.to_bytes(N.build("two-chan-class"))
        with pytest.raises(ConfigError, match="expected siamese-class"):
            N.from_bytes(data, expected=N.NetworkSpec.from_name("siamese-class"))
