import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfat.attacks import AttackSpec, pgd
from hfat.auxiliary import compute_momentum_p, reverse_train_step, transform_T
from hfat.errors import ContractError
from hfat.model import MlpSpec, ce_loss, init_weights, param_grads

from oracles import central_fd, np_ce, np_mlp_logits, rel_err


def setup(seed=0):
    rng = np.random.default_rng(seed)
    w = init_weights(MlpSpec((2, 6, 3)), seed)
    x = rng.uniform(0.2, 0.8, (12, 2))
    y = rng.integers(0, 3, 12)
    x_adv = x + rng.uniform(-0.1, 0.1, x.shape)
    return w, x, y, x_adv


def test_endpoints_without_noise():
    _, x, _, x_adv = setup()
    np.testing.assert_array_equal(transform_T(x, x_adv, 0.0, 0.1, noise=False).x_probe, x)
    np.testing.assert_allclose(transform_T(x, x_adv, 1.0, 0.1, noise=False).x_probe, x_adv, atol=1e-15)
    mid = transform_T(x, x_adv, 0.5, 0.1, noise=False).x_probe
    np.testing.assert_allclose(mid, (x + x_adv) / 2, atol=1e-15)


def test_noise_is_bounded_by_a_tenth_of_eps():
    _, x, _, x_adv = setup()
    p = transform_T(x, x_adv, 0.0, 0.1, rng=np.random.default_rng(0))
    assert p.noise_scale == pytest.approx(0.01)
    assert 0 < np.abs(p.x_probe - x).max() <= 0.01


def test_transform_contract_errors():
    _, x, _, x_adv = setup()
    with pytest.raises(ContractError):
        transform_T(x, x_adv[:3], 0.5, 0.1, noise=False)
    with pytest.raises(ContractError):
        transform_T(x, x_adv, 0.5, 0.1, rng=None, noise=True)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2), st.floats(0.01, 0.5), st.integers(0, 100), st.booleans())
def test_probe_stays_in_ball_and_domain(r, eps, seed, bounded):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (5, 3))
    x_adv = np.clip(x + rng.uniform(-eps, eps, x.shape), 0, 1)
    bounds = (0.0, 1.0) if bounded else None
    p = transform_T(x, x_adv, r, eps, rng=rng, bounds=bounds).x_probe
    assert np.abs(p - x).max() <= eps + 1e-12
    if bounded:
        assert p.min() >= 0 and p.max() <= 1


def test_reverse_step_is_gradient_ascent():
    w, x, y, x_adv = setup(1)
    eta = 0.05
    hat = reverse_train_step(w, x_adv, y, eta)
    for k, p in enumerate(w.params):
        def f(v, k=k):
            ps = list(w.params)
            ps[k] = v
            return np_ce(np_mlp_logits(ps, x_adv), y)
        assert rel_err((hat.params[k] - p) / eta, central_fd(f, p)) < 1e-5


def test_reverse_step_raises_probe_loss_to_first_order():
    w, x, y, x_adv = setup(2)
    _, g = param_grads(w, x_adv, y)
    sq = sum(float((a * a).sum()) for a in g)
    eta = 1e-4
    gain = ce_loss(reverse_train_step(w, x_adv, y, eta), x_adv, y) - ce_loss(w, x_adv, y)
    assert gain == pytest.approx(eta * sq, rel=1e-2)


def test_reverse_step_leaves_theta_alone():
    w, x, y, x_adv = setup(3)
    before = [p.copy() for p in w.params]
    reverse_train_step(w, x_adv, y, 0.1, steps=3)
    assert all(np.array_equal(p, q) for p, q in zip(w.params, before))
    assert reverse_train_step(w, x_adv, y, 0.0) is w
    with pytest.raises(ContractError):
        reverse_train_step(w, x_adv, y, -0.1)


def test_momentum_is_auxiliary_adversarial_gradient():
    w, x, y, _ = setup(4)
    hat = reverse_train_step(w, x, y, 0.1)
    spec = AttackSpec("pgd", eps=0.1, steps=5, random_start=True)
    mom = compute_momentum_p(hat, x, y, spec, rng=np.random.default_rng(5), like=w)
    adv = pgd(hat, x, y, spec, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(mom.x_adv, adv.x_adv)
    loss, grads = param_grads(hat, adv.x_adv, y)
    assert mom.loss == loss
    assert all(np.array_equal(a, b) for a, b in zip(mom.grads, grads))


def test_momentum_contracts():
    w, x, y, _ = setup(5)
    with pytest.raises(ContractError):
        compute_momentum_p(w, x, y, AttackSpec("fgsm", eps=0.1))
    other = init_weights(MlpSpec((2, 4, 3)), 0)
    with pytest.raises(ContractError):
        compute_momentum_p(w, x, y, AttackSpec("pgd", eps=0.1), like=other)
