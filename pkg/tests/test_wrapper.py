import numpy as np
import pytest

from fedwrap.data import Dataset
from fedwrap.errors import (
    ConfigError,
    FederationError,
    InputError,
    LifecycleError,
    UnsupportedModelError,
)
from fedwrap.models import Model, ModelSpec, TrainHp, forward_batch, init_model
from fedwrap.wrapper import (
    BaggingState,
    FeatureMode,
    StackingState,
    WrapperConfig,
    aggregate_outputs,
    bagging_fit,
    bagging_init,
    bagging_predict,
    bagging_predict_batch,
    build_stacking_input,
    decide_labels,
    handle_from_model,
    init_stacking_state,
    load_final_params,
    stacking_predict,
    stacking_train_round,
    stacking_translator_spec,
    wrapper_infer,
)

from conftest import make_blobs, random_dataset


def zero_lr_model(in_dim, n_classes):
    spec = ModelSpec(kind="lr", in_dim=in_dim, n_classes=n_classes)
    return Model(spec=spec, params=[np.zeros((n_classes, in_dim)), np.zeros(n_classes)])


def make_cfg(dataset, local_model=None, translator_kind="lr", hidden=None, **kw):
    local_model = local_model or init_model(
        ModelSpec(kind="lr", in_dim=dataset.in_dim, n_classes=dataset.n_classes), seed=3
    )
    feature_mode = kw.pop("feature_mode", FeatureMode())
    translator = stacking_translator_spec(
        translator_kind, dataset.in_dim, dataset.n_classes, feature_mode, hidden
    )
    hp = kw.pop("hp", TrainHp(learning_rate=0.3, batch_size=8, local_epochs=5, seed=1))
    kw.setdefault("client_id", "0")
    kw.setdefault("clients", ["1"])
    return WrapperConfig(
        local_model=handle_from_model(local_model),
        train_dataset=dataset,
        translator=translator,
        hp=hp,
        feature_mode=feature_mode,
        **kw,
    )


class TestFeatureMode:
    def test_parse_round_trip(self):
        assert str(FeatureMode.parse("probs")) == "probs"
        assert str(FeatureMode.parse("hidden:16")) == "hidden:16"
        with pytest.raises(ConfigError):
            FeatureMode.parse("hidden:x")
        with pytest.raises(ConfigError):
            FeatureMode.parse("latent")


class TestStackingInput:
    def test_probs_mode_width(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        out = build_stacking_input(cfg, rng.normal(size=4))
        assert out.shape == (6,)
        assert cfg.stack_in_dim == 6

    def test_zero_local_model_appends_uniform(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds, local_model=zero_lr_model(4, 2))
        x = rng.normal(size=4)
        out = build_stacking_input(cfg, x)
        np.testing.assert_array_equal(out[:4], x)
        np.testing.assert_allclose(out[4:], [0.5, 0.5], atol=1e-12)

    def test_hidden_mode_pad_and_truncate(self, rng):
        ds = random_dataset(rng, 10, 5, 2)
        mlp18 = init_model(ModelSpec(kind="mlp3", in_dim=5, n_classes=2, hidden_dim=18), seed=1)
        cfg = make_cfg(ds, local_model=mlp18, feature_mode=FeatureMode.parse("hidden:16"))
        x = rng.normal(size=5)
        out = build_stacking_input(cfg, x)
        assert out.shape == (5 + 16,)
        feats = forward_batch(mlp18, x[None, :]).features[0]
        np.testing.assert_array_equal(out[5:], feats[:16])  # last 2 dropped

        mlp16 = init_model(ModelSpec(kind="mlp3", in_dim=5, n_classes=2, hidden_dim=16), seed=1)
        cfg16 = make_cfg(ds, local_model=mlp16, feature_mode=FeatureMode.parse("hidden:16"))
        out16 = build_stacking_input(cfg16, x)
        np.testing.assert_array_equal(out16[5:], forward_batch(mlp16, x[None, :]).features[0])

        mlp8 = init_model(ModelSpec(kind="mlp3", in_dim=5, n_classes=2, hidden_dim=8), seed=1)
        cfg8 = make_cfg(ds, local_model=mlp8, feature_mode=FeatureMode.parse("hidden:16"))
        out8 = build_stacking_input(cfg8, x)
        np.testing.assert_array_equal(out8[13:], np.zeros(8))  # zero padded

    def test_hidden_mode_requires_feature_vec(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds, feature_mode=FeatureMode.parse("hidden:8"))
        cfg.local_model.feature_vec = None  # non-parametric local model
        with pytest.raises(UnsupportedModelError):
            build_stacking_input(cfg, rng.normal(size=4))


class TestStackingRounds:
    def test_zero_learning_rate_returns_global(self, rng):
        ds = random_dataset(rng, 12, 3, 2)
        cfg = make_cfg(ds, hp=TrainHp(learning_rate=0.0, batch_size=4, local_epochs=2, seed=5))
        state = init_stacking_state(cfg)
        global_params = init_model(cfg.translator, seed=99).params
        params, n_samples, _ = stacking_train_round(state, cfg, global_params)
        assert n_samples == 12
        for a, b in zip(params, global_params):
            assert np.array_equal(a, b)

    def test_n_samples_is_dataset_size(self, rng):
        ds = random_dataset(rng, 17, 3, 2)
        cfg = make_cfg(ds)
        state = init_stacking_state(cfg)
        _, n_samples, _ = stacking_train_round(state, cfg, state.translator.params)
        assert n_samples == 17

    def test_shape_mismatch_is_federation_error(self, rng):
        ds = random_dataset(rng, 12, 3, 2)
        cfg = make_cfg(ds)
        state = init_stacking_state(cfg)
        wrong = [np.zeros((2, 99)), np.zeros(2)]
        with pytest.raises(FederationError, match="architecture-identical"):
            stacking_train_round(state, cfg, wrong)

    def test_separable_data_reaches_full_training_accuracy(self):
        ds = make_blobs(n_per_class=15)
        cfg = make_cfg(ds, hp=TrainHp(learning_rate=0.5, batch_size=8, local_epochs=30, seed=2))
        state = init_stacking_state(cfg)
        stacking_train_round(state, cfg, state.translator.params)
        pred = np.array([np.argmax(stacking_predict(state, cfg, x)) for x in ds.features])
        assert np.mean(pred == ds.labels) == 1.0

    def test_translator_width_must_match(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        bad_translator = ModelSpec(kind="lr", in_dim=99, n_classes=2)
        cfg = make_cfg(ds)
        cfg.translator = bad_translator
        with pytest.raises(ConfigError):
            init_stacking_state(cfg)


class TestStackingPredict:
    def test_zero_translator_uniform(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        state = StackingState(translator=zero_lr_model(6, 2), rounds_completed=1)
        probs = stacking_predict(state, cfg, rng.normal(size=4))
        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_deterministic(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        state = init_stacking_state(cfg)
        x = rng.normal(size=4)
        np.testing.assert_array_equal(
            stacking_predict(state, cfg, x), stacking_predict(state, cfg, x)
        )

    def test_translator_reading_only_prob_features_matches_local_ranking(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        # weights: zero on raw features, identity on the appended probabilities
        w = np.zeros((2, 6))
        w[0, 4] = w[1, 5] = 1.0
        state = StackingState(
            translator=Model(spec=cfg.translator, params=[w, np.zeros(2)]), rounds_completed=1
        )
        for _ in range(20):
            x = rng.normal(size=4)
            local = cfg.local_model.predict_proba(x[None, :])[0]
            stacked = stacking_predict(state, cfg, x)
            assert np.argmax(stacked) == np.argmax(local)


class TestBagging:
    def fusion_dataset(self, rng, n=30, d=3, k=2):
        return random_dataset(rng, n, d, k)

    def test_single_member_init_is_identity(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        model = init_model(ModelSpec(kind="lr", in_dim=3, n_classes=2), seed=8)
        state = bagging_init(cfg, {"0": model})
        for _ in range(20):
            x = rng.normal(size=3)
            np.testing.assert_allclose(
                bagging_predict(state, x), forward_batch(model, x[None, :]).probs[0], atol=1e-9
            )

    def test_two_identical_members_match_either(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        model = init_model(ModelSpec(kind="lr", in_dim=3, n_classes=2), seed=8)
        state = bagging_init(cfg, {"0": model, "1": model})
        x = rng.normal(size=3)
        np.testing.assert_allclose(
            bagging_predict(state, x), forward_batch(model, x[None, :]).probs[0], atol=1e-9
        )

    def test_untrained_equals_member_mean(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        members = {
            str(i): init_model(ModelSpec(kind="mlp3", in_dim=3, n_classes=2, hidden_dim=4), seed=i)
            for i in range(5)
        }
        state = bagging_init(cfg, members)
        x = rng.normal(size=(50, 3))
        mean = np.mean([forward_batch(m, x).probs for m in members.values()], axis=0)
        np.testing.assert_allclose(bagging_predict_batch(state, x), mean, atol=1e-9)

    def test_prediction_sums_to_one(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        members = {str(i): init_model(ModelSpec(kind="lr", in_dim=3, n_classes=2), seed=i) for i in range(3)}
        state = bagging_fit(cfg, members)
        probs = bagging_predict_batch(state, rng.normal(size=(40, 3)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(probs >= 0)

    def test_member_permutation_with_permuted_blocks(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        members = {str(i): init_model(ModelSpec(kind="lr", in_dim=3, n_classes=2), seed=i) for i in range(3)}
        state = bagging_fit(cfg, members)
        # permute member order and the corresponding fusion weight blocks
        perm = [2, 0, 1]
        ids = [state.member_ids[i] for i in perm]
        w, b = state.fusion.params
        k = state.n_classes
        blocks = [w[:, i * k : (i + 1) * k] for i in perm]
        permuted = BaggingState(
            member_ids=ids,
            peer_models={mid: state.peer_models[mid] for mid in ids},
            fusion=Model(spec=state.fusion.spec, params=[np.hstack(blocks), b]),
            trained=True,
        )
        # note: member order inside the state is re-sorted, so rebuild by hand
        permuted.member_ids = ids
        x = rng.normal(size=(25, 3))
        np.testing.assert_allclose(
            bagging_predict_batch(permuted, x), bagging_predict_batch(state, x), atol=1e-12
        )

    def test_fit_tracks_a_perfect_member(self):
        ds = make_blobs(n_per_class=25, seed=3)
        cfg = make_cfg(ds, hp=TrainHp(learning_rate=0.5, batch_size=8, local_epochs=40, seed=4))
        spec = ModelSpec(kind="lr", in_dim=2, n_classes=2)
        from fedwrap.models import sgd_train

        perfect = sgd_train(
            init_model(spec, 0), ds, TrainHp(learning_rate=0.5, batch_size=8, local_epochs=60, seed=0)
        )
        noise = Model(
            spec=spec,
            params=[np.random.default_rng(5).normal(size=(2, 2)), np.zeros(2)],
        )
        state = bagging_fit(cfg, {"good": perfect, "bad": noise})

        def acc(predict):
            pred = np.argmax(predict, axis=1)
            return float(np.mean(pred == ds.labels))

        acc_perfect = acc(forward_batch(perfect, ds.features).probs)
        acc_fused = acc(bagging_predict_batch(state, ds.features))
        assert acc_fused >= acc_perfect - 0.02

    def test_mismatched_classes_rejected(self, rng):
        ds = self.fusion_dataset(rng)
        cfg = make_cfg(ds)
        bad = init_model(ModelSpec(kind="lr", in_dim=3, n_classes=4), seed=0)
        with pytest.raises(FederationError, match="classes"):
            bagging_init(cfg, {"0": bad})


class TestAggregateOutputs:
    def test_endpoints_exact(self, rng):
        local = np.array([0.8, 0.2])
        fed = np.array([0.25, 0.75])
        np.testing.assert_array_equal(aggregate_outputs(local, fed, 0.0), local)
        np.testing.assert_array_equal(aggregate_outputs(local, fed, 1.0), fed)

    def test_hand_midpoint(self):
        out = aggregate_outputs(np.array([0.8, 0.2]), np.array([0.2, 0.8]), 0.5)
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            aggregate_outputs(np.array([1.0, 0.0]), np.array([0.2, 0.3, 0.5]), 0.5)

    def test_invalid_probability_vector(self):
        with pytest.raises(InputError):
            aggregate_outputs(np.array([0.9, 0.3]), np.array([0.5, 0.5]), 0.5)

    def test_output_stays_on_simplex(self, rng):
        for _ in range(50):
            local = rng.dirichlet(np.ones(4))
            fed = rng.dirichlet(np.ones(4))
            w = float(rng.random())
            out = aggregate_outputs(local, fed, w)
            assert np.all(out >= 0)
            assert abs(out.sum() - 1.0) < 1e-9


class TestWrapperInfer:
    def test_boundary_threshold_is_positive(self):
        assert decide_labels(np.array([[0.5, 0.5]]), 2, 0.5)[0] == 1

    def test_multiclass_argmax(self):
        assert decide_labels(np.array([[0.3, 0.3, 0.4]]), 3, 0.5)[0] == 2
        assert decide_labels(np.array([[0.4, 0.4, 0.2]]), 3, 0.5)[0] == 0  # tie: lowest index

    def test_weight_zero_matches_local_decision(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds, fusion_weight=0.0)
        state = StackingState(translator=init_model(cfg.translator, 1), rounds_completed=1)
        for _ in range(30):
            x = rng.normal(size=4)
            probs, label = wrapper_infer(cfg, state, x)
            local = cfg.local_model.predict_proba(x[None, :])[0]
            np.testing.assert_array_equal(probs, local)
            assert label == int(local[1] >= cfg.threshold)

    def test_untrained_stacking_rejected(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        state = init_stacking_state(cfg)
        with pytest.raises(LifecycleError):
            wrapper_infer(cfg, state, rng.normal(size=4))

    def test_untrained_bagging_rejected(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        member = init_model(ModelSpec(kind="lr", in_dim=4, n_classes=2), seed=0)
        state = bagging_init(cfg, {"0": member})
        with pytest.raises(LifecycleError):
            wrapper_infer(cfg, state, rng.normal(size=4))

    def test_finished_state_usable(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        cfg = make_cfg(ds)
        state = init_stacking_state(cfg)
        load_final_params(state, state.translator.params)
        probs, label = wrapper_infer(cfg, state, rng.normal(size=4))
        assert probs.shape == (2,)
        assert label in (0, 1)


class TestWrapperConfig:
    def test_client_id_not_in_clients(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        with pytest.raises(ConfigError, match="client_id"):
            make_cfg(ds, client_id="1")

    def test_translator_classes_must_match(self, rng):
        ds = random_dataset(rng, 10, 4, 2)
        translator = ModelSpec(kind="lr", in_dim=6, n_classes=3)
        local = init_model(ModelSpec(kind="lr", in_dim=4, n_classes=2), seed=3)
        with pytest.raises(ConfigError, match="n_classes"):
            WrapperConfig(
                local_model=handle_from_model(local),
                train_dataset=ds,
                translator=translator,
                client_id="0",
                clients=["1"],
                hp=TrainHp(learning_rate=0.1, batch_size=4, local_epochs=1),
            )

    def test_stack_width_identical_for_any_local_mix_in_probs_mode(self, rng):
        ds = random_dataset(rng, 10, 7, 3)
        widths = set()
        for spec in (
            ModelSpec(kind="lr", in_dim=7, n_classes=3),
            ModelSpec(kind="mlp3", in_dim=7, n_classes=3, hidden_dim=16),
            ModelSpec(kind="mlp3", in_dim=7, n_classes=3, hidden_dim=24),
        ):
            cfg = make_cfg(ds, local_model=init_model(spec, 0), translator_kind="lr")
            widths.add(cfg.stack_in_dim)
        assert widths == {10}
