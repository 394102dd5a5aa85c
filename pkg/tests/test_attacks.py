import numpy as np
import pytest

from camabench.attacks import (
    IMAGE_BOX,
    AttackConfig,
    cama_attack_loss,
    fgsm,
    make_cama_scorer,
    measurement_mask,
    pgd,
)
from camabench.cama import CamaModel, ObjectiveWeights
from camabench.errors import ConfigError, NonFiniteError
from camabench.stochastics import RngStream

from tests.conftest import assert_gradient_close, numeric_gradient


def linear_scorer(weights):
    weights = np.asarray(weights, dtype=np.float64)

    def scorer(x, labels):
        return float(np.sum(x * weights)), np.broadcast_to(weights, x.shape).copy()

    return scorer


def quadratic_scorer(target):
    def scorer(x, labels):
        return float(np.sum((x - target) ** 2)), 2.0 * (x - target)

    return scorer


def test_fgsm_zero_epsilon_returns_input():
    x = np.array([[0.2, -0.4]])
    np.testing.assert_array_equal(fgsm(linear_scorer([1.0, -1.0]), x, np.zeros(1), AttackConfig(0.0)), x)


def test_fgsm_follows_gradient_sign():
    x = np.array([[0.5]])
    out = fgsm(linear_scorer([2.0]), x, np.zeros(1), AttackConfig(0.1))
    np.testing.assert_allclose(out, [[0.6]])


def test_fgsm_clamps_to_box():
    x = np.array([[0.95]])
    out = fgsm(linear_scorer([1.0]), x, np.zeros(1), AttackConfig(0.1, box=IMAGE_BOX))
    assert out[0, 0] == 1.0


def test_fgsm_respects_mask():
    x = np.zeros((2, 3))
    cfg = AttackConfig(0.5, mask=np.array([False, True, True]))
    out = fgsm(linear_scorer([1.0, 1.0, -1.0]), x, np.zeros(2), cfg)
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_allclose(out[:, 1:], [[0.5, -0.5], [0.5, -0.5]])


def test_fgsm_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteError):
        fgsm(linear_scorer([np.nan]), np.zeros((1, 1)), np.zeros(1), AttackConfig(0.1))


def test_empty_mask_is_rejected():
    with pytest.raises(ConfigError):
        AttackConfig(0.1, mask=np.zeros(3, dtype=bool))


def test_step_defaults_to_tenth_of_epsilon():
    assert AttackConfig(0.3).step == pytest.approx(0.03)


def test_single_step_pgd_equals_fgsm():
    x = RngStream(0).normal((4, 5))
    scorer = quadratic_scorer(RngStream(1).normal((4, 5)))
    cfg = AttackConfig(0.2, step_size=0.2, iterations=1)
    np.testing.assert_array_equal(pgd(scorer, x, np.zeros(4), cfg), fgsm(scorer, x, np.zeros(4), cfg))


@pytest.mark.parametrize('random_start', [False, True])
def test_pgd_stays_in_ball_and_box(random_start):
    rng = RngStream(2)
    x = rng.random((3, 6))
    mask = np.array([True, True, False, True, False, True])
    cfg = AttackConfig(0.15, step_size=0.05, iterations=12, random_start=random_start, box=IMAGE_BOX, mask=mask)
    out = pgd(quadratic_scorer(rng.random((3, 6)) - 5.0), x, np.zeros(3), cfg, rng=rng)
    assert np.max(np.abs(out - x)) <= 0.15 + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_array_equal(out[:, ~mask], x[:, ~mask])


def test_pgd_random_start_needs_rng():
    with pytest.raises(ConfigError):
        pgd(linear_scorer([1.0]), np.zeros((1, 1)), np.zeros(1), AttackConfig(0.1, random_start=True))


def test_measurement_mask_protects_parents():
    mask = measurement_mask(5, 5, 10)
    assert mask.shape == (20,)
    assert not mask[:5].any()
    assert mask[5:].all()


def test_cama_loss_is_deterministic_and_nonnegative(toy_single_spec, binary_batch):
    model = CamaModel.create(toy_single_spec, RngStream(0))
    weights, rng = ObjectiveWeights(K=3), RngStream(5)
    first = cama_attack_loss(model, binary_batch.x, binary_batch.y, weights, rng)
    second = cama_attack_loss(model, binary_batch.x, binary_batch.y, weights, rng)
    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])
    assert first[0] >= 0.0


def test_cama_loss_gradient_matches_finite_differences(toy_single_spec):
    model = CamaModel.create(toy_single_spec, RngStream(0))
    weights, rng = ObjectiveWeights(K=2), RngStream(5)
    x = RngStream(8).random((3, 4))
    labels = np.array([0, 1, 1])
    _, grad = cama_attack_loss(model, x, labels, weights, rng)
    numeric = numeric_gradient(lambda v: cama_attack_loss(model, v, labels, weights, rng)[0], x)
    assert_gradient_close(grad, numeric, rtol=1e-3, atol=1e-7)


def test_uniform_model_gives_zero_gradient(zero_model, binary_batch):
    loss, grad = cama_attack_loss(zero_model, binary_batch.x, binary_batch.y, ObjectiveWeights(K=2), RngStream(0))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_generic_scorer_never_moves_parents(toy_generic_spec, generic_batch):
    model = CamaModel.create(toy_generic_spec, RngStream(0))
    scorer = make_cama_scorer(model, ObjectiveWeights(K=2), RngStream(3))
    inputs = np.concatenate([generic_batch.a, generic_batch.c, generic_batch.x], axis=1)
    _, grad = scorer(inputs, generic_batch.y)
    np.testing.assert_array_equal(grad[:, :2], 0.0)
    assert np.any(grad[:, 2:] != 0.0)

    cfg = AttackConfig(0.3, mask=measurement_mask(2, 2, 4))
    out = fgsm(scorer, inputs, generic_batch.y, cfg)
    np.testing.assert_array_equal(out[:, :2], inputs[:, :2])
    assert np.max(np.abs(out - inputs)) <= 0.3 + 1e-12


def test_generic_attack_loss_needs_parents(toy_generic_spec, generic_batch):
    model = CamaModel.create(toy_generic_spec, RngStream(0))
    inputs = np.concatenate([generic_batch.c, generic_batch.x], axis=1)
    with pytest.raises(ConfigError):
        cama_attack_loss(model, inputs, generic_batch.y, ObjectiveWeights(K=2), RngStream(0))
