import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from combinfer import autodiff as ad
from combinfer.annealing import AnnealConfig, Annealer, RingTarget, build_annealer
from combinfer.combinators import compose, extend, propose, run
from combinfer.distributions import Bernoulli, Normal
from combinfer.errors import DegenerateWeights
from combinfer.evaluation import EvaluationContext, PrimitiveProgram
from combinfer.objectives import (
    ess,
    log_z_hat,
    normalized_weights,
    nvi_loss,
    rws_phi_loss,
    rws_theta_loss,
    svi_loss,
)
from combinfer.rng import RandomStream
from gradcheck import max_relative_error


def within(estimates, expected, sigmas=4.0):
    est = np.asarray(estimates)
    se = est.std(ddof=1) / math.sqrt(est.size)
    return abs(est.mean() - expected) <= sigmas * se, est.mean(), se


# -- weight diagnostics ----------------------------------------------------------------


def test_ess_examples():
    assert ess(np.zeros(1000)) == pytest.approx(1000.0)
    assert ess(np.log([1.0, 3.0])) == pytest.approx(1.6)
    assert ess(np.full(3, -np.inf)) == 0.0


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=50))
def test_ess_bounds(values):
    e = ess(np.array(values))
    assert 1.0 - 1e-9 <= e <= len(values) + 1e-9


def test_log_z_hat_of_exact_sampler_on_ring():
    ring = RingTarget()
    gen = np.random.default_rng(0)
    comp = gen.integers(8, size=4000)
    x = ring.means[comp] + math.sqrt(ring.variance) * gen.normal(size=(4000, 2))
    log_q = ring.log_density(x).data - math.log(8.0)
    log_w = ring.log_density(x).data - log_q
    assert log_z_hat(log_w) == pytest.approx(math.log(8.0), abs=1e-12)


def test_normalized_weights_rejects_all_zero():
    with pytest.raises(DegenerateWeights):
        normalized_weights(np.full(4, -np.inf))


# -- SVI on a Gaussian pair -----------------------------------------------------------


def gaussian_pair(mu):
    target = PrimitiveProgram(lambda s, c: s.sample("z", Normal(1.0, 1.0)), "p")
    proposal = PrimitiveProgram(lambda s, c: s.sample("z", Normal(mu, 1.0)), "q")
    return propose(target, proposal, loss_fn=svi_loss)


def test_svi_bound_and_gradient_closed_form():
    mu = ad.Parameter(np.array(0.0))
    rng = RandomStream(0)
    bounds, grads = [], []
    for _ in range(100):
        ctx = EvaluationContext(rng, (1000,))
        run(gaussian_pair(mu), None, ctx)
        bounds.append(-float(ctx.loss.data))
        mu.zero_grad()
        ad.backward(ctx.loss)
        grads.append(float(mu.grad))
    ok, mean, se = within(bounds, -0.5)
    assert ok, (mean, se)
    ok, mean, se = within(grads, -1.0)
    assert ok, (mean, se)


def test_perfect_proposal_has_zero_variance_bound():
    mu = ad.Parameter(np.array(1.0))
    ctx = EvaluationContext(RandomStream(1), (100,))
    out = run(gaussian_pair(mu), None, ctx)
    np.testing.assert_allclose(out.log_weight.data, 0.0, atol=1e-12)


# -- RWS against enumeration ---------------------------------------------------------


def coin_target(s, c):
    z = s.sample("z", Bernoulli(0.5))
    s.observe("x", Bernoulli(np.where(z.data == 1, 0.9, 0.2)), 1.0)
    return z


POSTERIOR_ONE = 0.45 / 0.55


def rws_phi_gradients(phi_value, chunks=100, particles=10_000, seed=0):
    # Self-normalization biases each chunk by O(1/particles), so chunks are wide.
    phi = ad.Parameter(np.array(phi_value))
    proposal = PrimitiveProgram(lambda s, c: s.sample("z", Bernoulli(ad.sigmoid(phi))), "q")
    q = propose(PrimitiveProgram(coin_target, "coin"), proposal, loss_fn=rws_phi_loss)
    rng = RandomStream(seed)
    grads = []
    for _ in range(chunks):
        ctx = EvaluationContext(rng, (particles,), reparameterize=False)
        run(q, None, ctx)
        phi.zero_grad()
        ad.backward(ctx.loss)
        grads.append(float(phi.grad))
    return grads


@pytest.mark.parametrize("phi_value", [0.0, -1.0, math.log(POSTERIOR_ONE / (1 - POSTERIOR_ONE))])
def test_rws_phi_gradient_matches_enumerated_kl_gradient(phi_value):
    # d/dphi KL(posterior || Bernoulli(sigmoid(phi))) = sigmoid(phi) - posterior(z=1).
    exact = 1.0 / (1.0 + math.exp(-phi_value)) - POSTERIOR_ONE
    ok, mean, se = within(rws_phi_gradients(phi_value), exact)
    assert ok, (mean, se, exact)


def test_rws_theta_gradient_on_conjugate_gaussian():
    theta = ad.Parameter(np.array(0.3))
    y = 2.0

    def model(s, c):
        z = s.sample("z", Normal(theta, 1.0))
        s.observe("y", Normal(z, 1.0), y)
        return z

    proposal = PrimitiveProgram(lambda s, c: s.sample("z", Normal(1.0, 1.5)), "q")
    q = propose(PrimitiveProgram(model, "m"), proposal, loss_fn=rws_theta_loss)
    rng = RandomStream(2)
    grads = []
    for _ in range(200):
        ctx = EvaluationContext(rng, (2000,), reparameterize=False)
        run(q, None, ctx)
        theta.zero_grad()
        ad.backward(ctx.loss)
        grads.append(-float(theta.grad))
    # log Z = log N(y; theta, sqrt 2), so its gradient is (y - theta) / 2.
    ok, mean, se = within(grads, (y - 0.3) / 2.0)
    assert ok, (mean, se)


# -- NVI ---------------------------------------------------------------------------------


def test_full_nvi_loss_matches_finite_differences_k2():
    annealer = Annealer(AnnealConfig(variant="nvi", K=2, budget=8, hidden=5, seed=3))
    gen = np.random.default_rng(0)
    for p in annealer.parameters():
        p.data = p.data + gen.normal(scale=0.1, size=p.shape)

    def loss():
        ctx = EvaluationContext(RandomStream(11), (annealer.config.samples,), detach_levels=True)
        run(annealer.sampler(), None, ctx)
        return ctx.loss

    assert max_relative_error(loss, annealer.parameters()) <= 1e-4


def _gauss_kl(mq, sq, mp, sp):
    inv = np.linalg.inv(sp)
    d = mp - mq
    return 0.5 * (np.trace(inv @ sq) + d @ inv @ d - len(mq) + math.log(np.linalg.det(sp) / np.linalg.det(sq)))


def test_nvi_reverse_loss_matches_gaussian_kl():
    a, m, c, d, sr = 0.4, 1.0, 0.6, -0.2, 0.8
    q1 = PrimitiveProgram(lambda s, _: s.sample("z1", Normal(0.0, 1.0)), "q1")
    fwd = PrimitiveProgram(lambda s, z1: s.sample("z2", Normal(z1 + a, 1.0)), "fwd")
    gamma = PrimitiveProgram(lambda s, _: s.sample("z2", Normal(m, 1.0)), "gamma")
    rev = PrimitiveProgram(lambda s, z2: s.sample("z1", Normal(c * z2 + d, sr)), "rev")
    q = propose(extend(gamma, rev), compose(fwd, q1), loss_fn=nvi_loss("reverse"))
    rng = RandomStream(4)
    losses = []
    for _ in range(100):
        ctx = EvaluationContext(rng, (1000,))
        run(q, None, ctx)
        losses.append(float(ctx.loss.data))
    mean_q, cov_q = np.array([0.0, a]), np.array([[1.0, 1.0], [1.0, 2.0]])
    mean_p = np.array([c * m + d, m])
    cov_p = np.array([[c * c + sr * sr, c], [c, 1.0]])
    ok, mean, se = within(losses, _gauss_kl(mean_q, cov_q, mean_p, cov_p))
    assert ok, (mean, se)


def test_detached_levels_give_no_gradient_to_earlier_kernels():
    annealer = Annealer(AnnealConfig(variant="nvi", K=3, budget=9, hidden=4, seed=1))
    zero = lambda *args: ad.Tensor(0.0)
    losses = [zero, annealer.losses[1]]
    q = build_annealer(annealer.path, annealer.forward, annealer.reverse, False, losses)
    ctx = EvaluationContext(RandomStream(0), (3,), detach_levels=True)
    run(q, None, ctx)
    ad.backward(ctx.loss)
    for p in annealer.forward_nets[0].parameters() + annealer.reverse_nets[0].parameters():
        assert p.grad is None or np.all(p.grad == 0)
    assert any(p.grad is not None and np.any(p.grad != 0) for p in annealer.forward_nets[1].parameters())


def test_nvi_rejects_unknown_divergence():
    with pytest.raises(ValueError):
        nvi_loss("sideways")


def test_forward_nvi_on_coin_moves_toward_posterior():
    phi = ad.Parameter(np.array(0.0))
    proposal = PrimitiveProgram(lambda s, c: s.sample("z", Bernoulli(ad.sigmoid(phi))), "q")
    q = propose(PrimitiveProgram(coin_target, "coin"), proposal, loss_fn=nvi_loss("forward"))
    ctx = EvaluationContext(RandomStream(0), (1000,), reparameterize=False)
    run(q, None, ctx)
    ad.backward(ctx.loss)
    # Posterior puts 0.82 on z=1, so increasing phi lowers the forward KL.
    assert float(phi.grad) < 0
