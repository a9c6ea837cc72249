import json

import numpy as np
import pytest

from pcagan.errors import InvalidArgumentError, NumericalFailureError
from pcagan.netcore import (
    AdamState,
    AffineGenerator,
    LinearDiscriminator,
    ParamLayout,
    ParamVector,
    adam_step,
    disc_forward,
    gen_forward,
    generator_layout,
    grad_of,
    load_checkpoint,
    save_checkpoint,
)
from pcagan.regularizers import GenRcLoss
from pcagan.rng import stream

from conftest import central_diff_check


class QuadraticLoss:
    """||p||^2 / 2, for exercising the gradient contract."""

    def value(self, p):
        return 0.5 * float(p.values @ p.values)

    def value_and_grad(self, p):
        return self.value(p), p.values.copy()

    def frozen_fn(self, p0):
        return self.value


class ConstantLoss:
    """All inputs behind a stop-gradient boundary."""

    def value(self, p):
        return 3.25

    def value_and_grad(self, p):
        return 3.25, np.zeros(p.size)

    def frozen_fn(self, p0):
        return self.value


class TestLayout:
    def test_slices_cover_and_disjoint(self):
        layout = generator_layout(3, 2)
        assert layout.total == 9 + 6 + 3
        sl, shape = layout.slice_of("B")
        assert (sl.start, sl.stop, shape) == (9, 15, (3, 2))

    def test_gap_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ParamLayout(entries=(("a", 0, (2,)), ("b", 3, (2,))))

    def test_duplicate_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ParamLayout(entries=(("a", 0, (2,)), ("a", 2, (2,))))

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ParamLayout(entries=())

    def test_param_vector_length_checked(self):
        layout = generator_layout(2, 2)
        with pytest.raises(InvalidArgumentError):
            ParamVector(values=np.zeros(3), layout=layout)


class TestForward:
    def test_constant_map(self):
        gen = AffineGenerator.init_random(3, 2, stream(0, "g"))
        gen.params.values[:] = 0.0
        gen.params.get("b")[:] = [1.0, -2.0, 0.5]
        for _ in range(3):
            z = np.random.randn(2)
            y = np.random.randn(3)
            assert np.array_equal(gen_forward(gen, z, y), [1.0, -2.0, 0.5])

    def test_identity_on_measurements(self):
        gen = AffineGenerator.init_random(3, 2, stream(0, "g"))
        gen.params.values[:] = 0.0
        gen.params.get("A")[:] = np.eye(3)
        y = np.array([0.3, -1.0, 2.0])
        assert np.allclose(gen_forward(gen, np.zeros(2), y), y)

    def test_matches_hand_computation(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        z = rng.standard_normal(2)
        y = rng.standard_normal(3)
        want = np.array(
            [
                sum(gen.A[i, j] * y[j] for j in range(3))
                + sum(gen.B[i, j] * z[j] for j in range(2))
                + gen.b[i]
                for i in range(3)
            ]
        )
        assert np.allclose(gen_forward(gen, z, y), want, atol=1e-12)

    def test_dim_mismatch(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        with pytest.raises(InvalidArgumentError):
            gen_forward(gen, np.zeros(3), np.zeros(3))

    def test_disc_constant(self, rng):
        disc = LinearDiscriminator.init_random(4, rng)
        disc.params.values[:] = 0.0
        disc.params.get("c")[...] = 5.0
        assert disc_forward(disc, np.random.randn(4), np.random.randn(4)) == 5.0

    def test_disc_picks_first_coordinate(self, rng):
        disc = LinearDiscriminator.init_random(4, rng)
        disc.params.values[:] = 0.0
        disc.params.get("w")[0] = 1.0
        x = np.array([2.5, 0.0, 1.0, -1.0])
        assert disc_forward(disc, x, np.zeros(4)) == 2.5

    def test_disc_matches_dot_product(self, rng):
        disc = LinearDiscriminator.init_random(4, rng)
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        want = float(disc.w @ np.concatenate([x, y]) + disc.c)
        assert disc_forward(disc, x, y) == pytest.approx(want, abs=1e-12)

    def test_init_scale(self):
        gen = AffineGenerator.init_random(50, 50, stream(5, "init"))
        assert gen.A.std() == pytest.approx(1 / np.sqrt(50), rel=0.15)
        assert np.array_equal(gen.b, np.zeros(50))


class TestGradOf:
    def test_quadratic(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        value, grad = grad_of(QuadraticLoss(), gen.params)
        assert value == pytest.approx(0.5 * gen.params.values @ gen.params.values)
        assert np.array_equal(grad, gen.params.values)

    def test_constant_stopgrad(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        value, grad = grad_of(ConstantLoss(), gen.params)
        assert value == 3.25
        assert np.array_equal(grad, np.zeros(gen.params.size))

    def test_l1_term_passes_central_differences(self):
        rng = stream(77, "l1-fd")
        d, dz = 3, 3
        gen = AffineGenerator.init_random(d, dz, rng)
        disc = LinearDiscriminator.init_random(d, rng)
        x = rng.standard_normal((2, d))
        y = rng.standard_normal((2, d))
        z = rng.standard_normal((2, 2, dz))
        loss = GenRcLoss(d, dz, disc, x, y, z, l1_weight=1.0)
        assert central_diff_check(loss, gen.params) < 1e-5

    def test_non_finite_value_raises(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)

        class BadLoss:
            def value(self, p):
                return float("nan")

            def value_and_grad(self, p):
                return float("nan"), np.zeros(p.size)

            def frozen_fn(self, p0):
                return self.value

        with pytest.raises(NumericalFailureError):
            grad_of(BadLoss(), gen.params)


class TestAdam:
    def test_zero_grad_leaves_params(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        state = AdamState.zeros(gen.params.size)
        p2, s2 = adam_step(gen.params, np.zeros(gen.params.size), state)
        assert np.array_equal(p2.values, gen.params.values)
        assert s2.step_count == 1

    def test_first_step_direction(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        g = rng.standard_normal(gen.params.size)
        lr, eps = 1e-3, 1e-8
        state = AdamState.zeros(gen.params.size, lr=lr, beta1=0.0, beta2=0.99, eps=eps)
        p2, _ = adam_step(gen.params, g, state)
        # beta1 = 0: m = g and m_hat = g; v_hat = g^2 after bias correction
        want = gen.params.values - lr * g / (np.abs(g) + eps)
        assert np.allclose(p2.values, want, atol=1e-12)

    def test_pure_function_bit_identical(self, rng):
        gen = AffineGenerator.init_random(4, 4, rng)
        g = rng.standard_normal(gen.params.size)
        state = AdamState.zeros(gen.params.size)
        a1, s1 = adam_step(gen.params, g, state)
        a2, s2 = adam_step(gen.params, g, state)
        assert np.array_equal(a1.values, a2.values)
        assert np.array_equal(s1.first_moment, s2.first_moment)
        assert np.array_equal(s1.second_moment, s2.second_moment)

    def test_converges_on_convex_quadratic(self, rng):
        layout = generator_layout(2, 2)
        target = rng.uniform(-0.5, 0.5, layout.total)
        lr = 1e-3
        p = ParamVector(values=np.zeros(layout.total), layout=layout)
        state = AdamState.zeros(layout.total, lr=lr, beta1=0.0, beta2=0.99)
        dist = [np.linalg.norm(p.values - target)]
        for _ in range(1000):
            p, state = adam_step(p, p.values - target, state)
            dist.append(np.linalg.norm(p.values - target))
        # monotone up to the lr-scale oscillation band Adam settles into
        burn = 100
        slack = np.sqrt(layout.total) * lr
        assert all(b <= a + slack for a, b in zip(dist[burn:], dist[burn + 1 :]))
        assert dist[-1] < 1e-2

    def test_non_finite_grad_rejected(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        g = np.full(gen.params.size, np.inf)
        with pytest.raises(NumericalFailureError):
            adam_step(gen.params, g, AdamState.zeros(gen.params.size))

    def test_length_mismatch(self, rng):
        gen = AffineGenerator.init_random(3, 2, rng)
        with pytest.raises(InvalidArgumentError):
            adam_step(gen.params, np.zeros(3), AdamState.zeros(gen.params.size))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        gen = AffineGenerator.init_random(4, 3, rng)
        state = AdamState.zeros(gen.params.size, lr=2e-3, beta1=0.1)
        state = adam_step(gen.params, rng.standard_normal(gen.params.size), state)[1]
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, gen.params, state, "deadbeef")
        p2, s2, h = load_checkpoint(path)
        assert h == "deadbeef"
        assert np.array_equal(p2.values, gen.params.values)
        assert p2.layout == gen.params.layout
        assert np.array_equal(s2.first_moment, state.first_moment)
        assert s2.step_count == state.step_count
        assert s2.lr == state.lr

    def test_rejects_foreign_document(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"kind": "something-else"}))
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(path)
