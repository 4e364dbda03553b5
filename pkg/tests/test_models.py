import math

import numpy as np
import pytest

from fedwrap.errors import ConfigError, DecodeError, DivergenceError, InputError
from fedwrap.models import (
    Model,
    ModelSpec,
    TrainHp,
    batch_loss,
    deserialize_model,
    forward,
    forward_batch,
    grad,
    init_model,
    serialize_model,
    sgd_train,
    softmax,
)

from conftest import make_blobs, random_dataset


def lr_spec(in_dim=4, n_classes=2):
    return ModelSpec(kind="lr", in_dim=in_dim, n_classes=n_classes)


def mlp_spec(in_dim=8, hidden=16, n_classes=2):
    return ModelSpec(kind="mlp3", in_dim=in_dim, n_classes=n_classes, hidden_dim=hidden)


class TestSpec:
    def test_invalid_dims_rejected(self):
        with pytest.raises(ConfigError):
            ModelSpec(kind="lr", in_dim=0, n_classes=2)
        with pytest.raises(ConfigError):
            ModelSpec(kind="lr", in_dim=3, n_classes=1)
        with pytest.raises(ConfigError):
            ModelSpec(kind="mlp3", in_dim=3, n_classes=2)  # missing hidden_dim
        with pytest.raises(ConfigError):
            ModelSpec(kind="gru", in_dim=3, n_classes=2)

    def test_lr_param_count(self):
        model = init_model(lr_spec(in_dim=4, n_classes=2), seed=7)
        assert model.spec.param_count() == 10
        assert np.array_equal(model.params[1], np.zeros(2))  # biases exactly zero

    def test_mlp_param_count_hand_value(self):
        # 8*16+16 + 16*16+16 + 16*16+16 + 16*2+2
        assert mlp_spec(8, 16, 2).param_count() == 722

    def test_param_count_formula_random_dims(self, rng):
        for _ in range(50):
            d = int(rng.integers(1, 30))
            k = int(rng.integers(2, 8))
            assert lr_spec(d, k).param_count() == k * d + k
            h = int(rng.integers(1, 20))
            expected = (d * h + h) + 2 * (h * h + h) + (h * k + k)
            assert mlp_spec(d, h, k).param_count() == expected


class TestInit:
    def test_deterministic(self):
        a = init_model(mlp_spec(), seed=1)
        b = init_model(mlp_spec(), seed=1)
        assert a == b

    def test_seed_changes_weights(self):
        a = init_model(lr_spec(), seed=1)
        b = init_model(lr_spec(), seed=2)
        assert not np.array_equal(a.params[0], b.params[0])

    def test_glorot_bounds(self):
        model = init_model(lr_spec(in_dim=10, n_classes=4), seed=3)
        s = math.sqrt(6.0 / (10 + 4))
        assert np.all(np.abs(model.params[0]) <= s)


class TestForward:
    def test_zero_params_uniform(self, rng):
        spec = lr_spec(in_dim=3, n_classes=4)
        model = Model(spec=spec, params=[np.zeros((4, 3)), np.zeros(4)])
        r = forward(model, rng.normal(size=3))
        np.testing.assert_allclose(r.probs, 0.25)

    def test_identity_weight_symmetric(self):
        model = Model(spec=lr_spec(2, 2), params=[np.eye(2), np.zeros(2)])
        r = forward(model, np.array([0.0, 0.0]))
        np.testing.assert_allclose(r.probs, [0.5, 0.5])
        np.testing.assert_array_equal(r.features, [0.0, 0.0])

    def test_identity_weight_hand_softmax(self):
        model = Model(spec=lr_spec(2, 2), params=[np.eye(2), np.zeros(2)])
        r = forward(model, np.array([2.0, 0.0]))
        e2 = math.exp(2.0)
        np.testing.assert_allclose(r.probs, [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-12)

    def test_dimension_mismatch(self):
        model = init_model(lr_spec(3, 2), seed=0)
        with pytest.raises(InputError):
            forward(model, np.zeros(4))

    def test_mlp_features_are_last_hidden(self, rng):
        model = init_model(mlp_spec(5, 7, 3), seed=0)
        r = forward(model, rng.normal(size=5))
        assert r.features.shape == (7,)
        assert np.all(r.features >= 0)  # post-ReLU

    def test_softmax_stability_and_sum(self, rng):
        logits = rng.normal(scale=300.0, size=(200, 5))
        p = softmax(logits)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestGrad:
    def test_duplicated_sample_equals_single(self, rng):
        model = init_model(mlp_spec(4, 5, 3), seed=1)
        x = rng.normal(size=4)
        single = grad(model, [(x, 2)])
        double = grad(model, [(x, 2), (x, 2)])
        for a, b in zip(single, double):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_param_lr_hand_gradient(self, rng):
        k, d = 3, 4
        model = Model(spec=lr_spec(d, k), params=[np.zeros((k, d)), np.zeros(k)])
        x = rng.normal(size=d)
        g = grad(model, [(x, 1)])
        np.testing.assert_allclose(g[0][1], (1.0 / k - 1.0) * x, atol=1e-12)
        np.testing.assert_allclose(g[0][0], (1.0 / k) * x, atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(InputError):
            grad(init_model(lr_spec(), seed=0), [])

    @pytest.mark.parametrize("kind", ["lr", "mlp3"])
    @pytest.mark.parametrize("l2", [0.0, 0.05])
    def test_finite_difference_check(self, rng, kind, l2):
        for trial in range(5):
            d = int(rng.integers(2, 5))
            k = int(rng.integers(2, 4))
            if kind == "lr":
                spec = lr_spec(d, k)
            else:
                spec = mlp_spec(d, int(rng.integers(3, 6)), k)
            # random parameter point (nonzero biases): keeps ReLU
            # pre-activations away from the kink, where central
            # differences are not a valid oracle
            model = Model(
                spec=spec,
                params=[rng.normal(scale=0.6, size=s) for s in spec.block_shapes()],
            )
            x = rng.normal(size=(4, d))
            y = rng.integers(0, k, size=4)
            analytic = grad(model, (x, y), l2=l2)
            h = 1e-5
            for bi, block in enumerate(model.params):
                flat = block.ravel()
                for j in range(flat.size):
                    params_p = [p.copy() for p in model.params]
                    params_m = [p.copy() for p in model.params]
                    params_p[bi].ravel()[j] += h
                    params_m[bi].ravel()[j] -= h
                    lp = batch_loss(Model(spec=spec, params=params_p), (x, y), l2=l2)
                    lm = batch_loss(Model(spec=spec, params=params_m), (x, y), l2=l2)
                    numeric = (lp - lm) / (2 * h)
                    a = analytic[bi].ravel()[j]
                    denom = max(abs(a), abs(numeric), 1e-6)
                    assert abs(a - numeric) / denom < 1e-4


class TestSgdTrain:
    def test_zero_learning_rate_identity(self):
        data = make_blobs()
        model = init_model(lr_spec(2, 2), seed=5)
        hp = TrainHp(learning_rate=0.0, batch_size=8, local_epochs=3, seed=9)
        trained = sgd_train(model, data, hp)
        for a, b in zip(model.params, trained.params):
            assert np.array_equal(a, b)

    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainHp(learning_rate=0.1, batch_size=8, local_epochs=0)

    def test_separable_blobs_reach_full_accuracy(self):
        data = make_blobs(n_per_class=20)
        model = init_model(lr_spec(2, 2), seed=5)
        hp = TrainHp(learning_rate=0.5, batch_size=8, local_epochs=50, seed=9)
        trained = sgd_train(model, data, hp)
        pred = forward_batch(trained, data.features).probs.argmax(axis=1)
        assert np.mean(pred == data.labels) == 1.0

    def test_deterministic(self):
        data = make_blobs()
        hp = TrainHp(learning_rate=0.2, batch_size=4, local_epochs=5, seed=3)
        a = sgd_train(init_model(mlp_spec(2, 4, 2), seed=1), data, hp)
        b = sgd_train(init_model(mlp_spec(2, 4, 2), seed=1), data, hp)
        assert a == b

    def test_divergence_reported_with_location(self):
        # l2 feedback at an absurd step size drives weights to inf, then the
        # cross-entropy turns NaN; the error must name where it happened
        data = make_blobs()
        model = init_model(lr_spec(2, 2), seed=1)
        hp = TrainHp(learning_rate=1e200, batch_size=8, local_epochs=5, l2=1.0, seed=0)
        with pytest.raises(DivergenceError, match=r"epoch \d+, batch \d+"):
            sgd_train(model, data, hp)

    def test_input_model_not_mutated(self):
        data = make_blobs()
        model = init_model(lr_spec(2, 2), seed=5)
        before = [p.copy() for p in model.params]
        sgd_train(model, data, TrainHp(learning_rate=0.5, batch_size=8, local_epochs=2, seed=0))
        for a, b in zip(model.params, before):
            assert np.array_equal(a, b)


class TestSerialization:
    def test_round_trip_random_models(self, rng):
        for i in range(20):
            if rng.random() < 0.5:
                spec = lr_spec(int(rng.integers(1, 10)), int(rng.integers(2, 6)))
            else:
                spec = mlp_spec(int(rng.integers(1, 10)), int(rng.integers(1, 12)), int(rng.integers(2, 6)))
            model = init_model(spec, seed=i)
            again = deserialize_model(serialize_model(model))
            assert again == model

    def test_truncated_bytes(self):
        raw = serialize_model(init_model(lr_spec(), seed=0))
        with pytest.raises(DecodeError):
            deserialize_model(raw[: len(raw) // 2])
        with pytest.raises(DecodeError):
            deserialize_model(raw[:3])

    def test_version_mismatch(self):
        raw = bytearray(serialize_model(init_model(lr_spec(), seed=0)))
        raw[4:6] = (2).to_bytes(2, "big")
        with pytest.raises(DecodeError, match="version"):
            deserialize_model(bytes(raw))

    def test_bad_magic(self):
        raw = bytearray(serialize_model(init_model(lr_spec(), seed=0)))
        raw[:4] = b"NOPE"
        with pytest.raises(DecodeError, match="magic"):
            deserialize_model(bytes(raw))

    def test_trailing_garbage(self):
        raw = serialize_model(init_model(lr_spec(), seed=0)) + b"\x00"
        with pytest.raises(DecodeError, match="trailing"):
            deserialize_model(raw)


class TestTrainHp:
    def test_learning_rate_zero_allowed(self):
        TrainHp(learning_rate=0.0, batch_size=1, local_epochs=1)

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ConfigError):
            TrainHp(learning_rate=-0.1, batch_size=1, local_epochs=1)

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            TrainHp(learning_rate=0.1, batch_size=0, local_epochs=1)
