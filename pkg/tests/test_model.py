import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feduv import model as mdl
from feduv.gradcheck import numeric_grad, rel_error, tiny_config
from feduv.objectives import cross_entropy
from feduv.numerics import NumericsError, RngStream


def _flat(grads):
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])


@pytest.fixture
def params():
    return mdl.init_params(tiny_config(), RngStream(0))


class TestConfig:
    def test_layer_shapes(self):
        cfg = mdl.MlpConfig(input_dim=5, encoder_dims=(7, 6), projector_dim=4, num_classes=3)
        assert cfg.layer_shapes() == [(7, 5), (6, 7), (4, 6), (4, 4), (3, 4)]

    @pytest.mark.parametrize("kw", [{"input_dim": 0}, {"input_dim": 3, "num_classes": 1},
                                    {"input_dim": 3, "encoder_dims": (0,)}, {"input_dim": 3, "activation": "tanh"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            mdl.MlpConfig(**kw)


class TestInit:
    def test_deterministic(self):
        a = mdl.init_params(tiny_config(), RngStream(4)).flatten()
        b = mdl.init_params(tiny_config(), RngStream(4)).flatten()
        assert a.tobytes() == b.tobytes()

    def test_biases_zero_and_unfrozen(self, params):
        assert all(not layer.bias.any() and not layer.frozen for layer in params.layers)

    def test_shapes(self, params):
        assert [l.weights.shape for l in params.layers] == params.config.layer_shapes()
        assert params.classifier.weights.shape == (4, 8)

    def test_he_scale(self):
        cfg = mdl.MlpConfig(input_dim=400, encoder_dims=(300,), projector_dim=200, num_classes=10)
        w = mdl.init_params(cfg, RngStream(1)).layers[0].weights
        assert w.std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)

    def test_slices(self, params):
        assert len(params.encoder) == 1 and len(params.projector) == 2
        assert params.classifier is params.layers[-1]
        assert params.reps_index == 2


class TestForward:
    def test_zero_network(self, params):
        for layer in params.layers:
            layer.weights[:] = 0
        x = np.random.default_rng(0).standard_normal((3, 6))
        assert not mdl.forward(params, x).logits.any()

    def test_identity_reproduces_input(self):
        # Positive inputs pass the ReLUs unchanged.
        cfg = mdl.MlpConfig(input_dim=3, encoder_dims=(3,), projector_dim=3, num_classes=3)
        p = mdl.init_params(cfg, RngStream(0))
        for layer in p.layers:
            layer.weights[:] = np.eye(3)
        x = np.abs(np.random.default_rng(1).standard_normal((4, 3)))
        cache = mdl.forward(p, x)
        np.testing.assert_array_equal(cache.logits, x)
        np.testing.assert_array_equal(cache.reps, x)

    def test_shapes(self, params):
        cache = mdl.forward(params, np.ones((5, 6)))
        assert cache.logits.shape == (5, 4) and cache.reps.shape == (5, 8)

    def test_logits_are_classifier_of_reps(self, params):
        cache = mdl.forward(params, np.random.default_rng(2).standard_normal((5, 6)))
        c = params.classifier
        np.testing.assert_array_equal(cache.logits, cache.reps @ c.weights.T + c.bias)

    def test_reps_not_rectified(self, params):
        cache = mdl.forward(params, np.random.default_rng(3).standard_normal((50, 6)))
        assert (cache.reps < 0).any()

    def test_pure(self, params):
        x = np.random.default_rng(3).standard_normal((5, 6))
        before = params.flatten().copy()
        a, b = mdl.forward(params, x), mdl.forward(params, x)
        assert a.logits.tobytes() == b.logits.tobytes()
        assert params.flatten().tobytes() == before.tobytes()

    def test_shape_mismatch(self, params):
        with pytest.raises(NumericsError):
            mdl.forward(params, np.ones((2, 5)))


class TestBackward:
    def test_zero_upstream(self, params):
        cache = mdl.forward(params, np.ones((3, 6)))
        grads = mdl.backward(params, cache, np.zeros((3, 4)), np.zeros((3, 8)))
        assert not _flat(grads).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        p = mdl.init_params(tiny_config(), RngStream(seed))
        for layer in p.layers:
            layer.bias[:] = gen.standard_normal(layer.bias.shape) * 0.1
        x = gen.standard_normal((5, 6))
        a = gen.standard_normal((5, 4))  # loss = <a, logits> + <r, reps>
        r = gen.standard_normal((5, 8))

        def loss(v):
            c = mdl.forward(p.unflatten(v), x)
            return float(np.sum(a * c.logits) + np.sum(r * c.reps))

        analytic = _flat(mdl.backward(p, mdl.forward(p, x), a, r))
        assert rel_error(analytic, numeric_grad(loss, p.flatten())) < 1e-4

    def test_frozen_gets_zero_but_propagates(self, params):
        params.layers[-1].frozen = True
        x = np.random.default_rng(0).standard_normal((4, 6))
        g = np.random.default_rng(1).standard_normal((4, 4))
        grads = mdl.backward(params, mdl.forward(params, x), g)
        assert not grads[-1][0].any() and not grads[-1][1].any()
        assert grads[0][0].any()

    def test_shape_mismatch(self, params):
        cache = mdl.forward(params, np.ones((3, 6)))
        with pytest.raises(NumericsError):
            mdl.backward(params, cache, np.zeros((2, 4)))
        with pytest.raises(NumericsError):
            mdl.backward(params, cache, np.zeros((3, 4)), np.zeros((3, 7)))


def _one_param_model(w):
    cfg = mdl.MlpConfig(input_dim=1, encoder_dims=(), projector_dim=1, num_classes=2)
    p = mdl.init_params(cfg, RngStream(0))
    for layer in p.layers:
        layer.weights[:] = w
    return p


class TestSgd:
    def test_fixed_point(self, params):
        state = mdl.SgdState.zeros_like(params, lr=0.1, momentum=0.9, weight_decay=0.0)
        zeros = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers]
        assert mdl.sgd_step(params, zeros, state).flatten().tobytes() == params.flatten().tobytes()

    def test_single_step(self):
        p = _one_param_model(1.0)
        state = mdl.SgdState.zeros_like(p, lr=0.1, momentum=0.0, weight_decay=0.0)
        grads = [(np.full_like(l.weights, 2.0), np.zeros_like(l.bias)) for l in p.layers]
        out = mdl.sgd_step(p, grads, state)
        assert out.layers[0].weights[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_momentum_accumulates(self):
        p = _one_param_model(1.0)
        state = mdl.SgdState.zeros_like(p, lr=0.1, momentum=0.9, weight_decay=0.0)
        g = 2.0
        grads = [(np.full_like(l.weights, g), np.zeros_like(l.bias)) for l in p.layers]
        p = mdl.sgd_step(p, grads, state)
        assert state.buffers[0][0][0, 0] == g
        p = mdl.sgd_step(p, grads, state)
        assert state.buffers[0][0][0, 0] == pytest.approx(0.9 * g + g, abs=1e-15)
        assert p.layers[0].weights[0, 0] == pytest.approx(1.0 - 0.1 * g - 0.1 * 1.9 * g, abs=1e-15)

    def test_weight_decay_coupled(self):
        p = _one_param_model(1.0)
        state = mdl.SgdState.zeros_like(p, lr=0.1, momentum=0.0, weight_decay=0.5)
        zeros = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in p.layers]
        assert mdl.sgd_step(p, zeros, state).layers[0].weights[0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_buffers_congruent(self, params):
        state = mdl.SgdState.zeros_like(params)
        assert all(bw.shape == l.weights.shape and bb.shape == l.bias.shape
                   for (bw, bb), l in zip(state.buffers, params.layers))

    def test_incongruent(self, params):
        with pytest.raises(NumericsError):
            mdl.sgd_step(params, [], mdl.SgdState.zeros_like(params))


class TestFreeze:
    def test_orthonormal_rows(self, params):
        p = mdl.freeze_classifier(params, RngStream(9))
        w = p.classifier.weights
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-10)
        assert p.classifier.frozen and not p.classifier.bias.any()

    def test_bit_identical_after_steps(self, params):
        p = mdl.freeze_classifier(params, RngStream(9))
        frozen = p.classifier.weights.tobytes()
        state = mdl.SgdState.zeros_like(p, lr=0.1, weight_decay=0.1)
        x = np.random.default_rng(0).standard_normal((5, 6))
        y = np.array([0, 1, 2, 3, 0])
        before_enc = p.layers[0].weights.copy()
        for _ in range(10):
            cache = mdl.forward(p, x)
            grads = mdl.backward(p, cache, cross_entropy(cache.logits, y)[1])
            p = mdl.sgd_step(p, grads, state)
        assert p.classifier.weights.tobytes() == frozen
        assert not np.array_equal(p.layers[0].weights, before_enc)

    def test_too_many_classes(self):
        cfg = mdl.MlpConfig(input_dim=3, encoder_dims=(4,), projector_dim=3, num_classes=5)
        with pytest.raises(NumericsError):
            mdl.freeze_classifier(mdl.init_params(cfg, RngStream(0)), RngStream(1))


class TestFlatten:
    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        p = mdl.init_params(tiny_config(), RngStream(seed))
        q = p.unflatten(p.flatten())
        assert q.flatten().tobytes() == p.flatten().tobytes()
        assert [l.weights.shape for l in q.layers] == [l.weights.shape for l in p.layers]

    def test_keeps_frozen_flags(self, params):
        params.layers[-1].frozen = True
        assert params.unflatten(params.flatten()).classifier.frozen

    def test_wrong_length(self, params):
        with pytest.raises(NumericsError):
            params.unflatten(np.zeros(params.size + 1))
