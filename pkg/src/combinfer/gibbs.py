"""Population Gibbs samplers built from combinators, with a conjugate toy model.

Toy model, per data point ``x``::

    z ~ Categorical(pi)              (5 components)
    v ~ Normal(m[z], s[z])
    x ~ Normal(c * v, sigma_x)       (observed)

Blocks are ``v`` and ``z``. Addresses carry a per-block suffix such as
``"v/2"``. Updating a block bumps only that block's suffix, so every kernel
draw lands on a fresh address while the other block keeps its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from combinfer import autodiff as ad
from combinfer.combinators import Propose, Resample, compose, count_nodes, extend, propose, resample, run
from combinfer.distributions import Categorical, Normal
from combinfer.evaluation import EvaluationContext, PrimitiveProgram
from combinfer.nn import Adam
from combinfer.objectives import ess, log_z_hat, nvi_loss
from combinfer.rng import RandomStream

BLOCKS = ("v", "z")


def block_address(block: str, suffix: dict) -> str:
    return f"{block}/{suffix[block]}"


@dataclass
class ToyModel:
    pi: np.ndarray = field(default_factory=lambda: np.full(5, 0.2))
    means: np.ndarray = field(default_factory=lambda: np.array([-4.0, -2.0, 0.0, 2.0, 4.0]))
    scales: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.7, 0.5, 0.7, 1.0]))
    coef: float = 1.5
    noise: float = 1.0

    def target(self, suffix: dict) -> PrimitiveProgram:
        """Joint ``p(x, v, z)`` with latents at the suffixed addresses; input is the data."""

        def body(s, x):
            z = s.sample(block_address("z", suffix), Categorical(self.pi))
            idx = z.data.astype(np.int64)
            v = s.sample(block_address("v", suffix), Normal(self.means[idx], self.scales[idx]))
            s.observe("x", Normal(self.coef * v, self.noise), x)
            return {"x": ad.as_tensor(x), "v": v, "z": z}

        return PrimitiveProgram(body, "target" + _tag(suffix))

    def prior_proposal(self, suffix: dict) -> PrimitiveProgram:
        """Draw ``(z, v)`` from the prior without scoring the data."""

        def body(s, x):
            z = s.sample(block_address("z", suffix), Categorical(self.pi))
            idx = z.data.astype(np.int64)
            v = s.sample(block_address("v", suffix), Normal(self.means[idx], self.scales[idx]))
            return {"x": ad.as_tensor(x), "v": v, "z": z}

        return PrimitiveProgram(body, "proposal" + _tag(suffix))

    def log_joint(self, x, v, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.int64)
        return (
            np.log(self.pi[z])
            + _normal_lp(v, self.means[z], self.scales[z])
            + _normal_lp(x, self.coef * np.asarray(v), self.noise)
        )

    def v_conditional(self, x, z):
        """Exact ``p(v | x, z)`` mean and scale."""
        z = np.asarray(z, dtype=np.int64)
        prec = 1.0 / self.scales[z] ** 2 + self.coef**2 / self.noise**2
        mean = (self.means[z] / self.scales[z] ** 2 + self.coef * np.asarray(x) / self.noise**2) / prec
        return mean, 1.0 / np.sqrt(prec)

    def z_conditional(self, v) -> np.ndarray:
        """Exact ``p(z | x, v)`` probabilities over the last axis."""
        v = np.asarray(v)[..., None]
        lp = np.log(self.pi) + _normal_lp(v, self.means, self.scales)
        lp = lp - lp.max(axis=-1, keepdims=True)
        p = np.exp(lp)
        return p / p.sum(axis=-1, keepdims=True)


def _normal_lp(x, loc, scale):
    return -0.5 * ((np.asarray(x) - loc) / scale) ** 2 - np.log(scale) - 0.5 * math.log(2 * math.pi)


def _tag(suffix: dict) -> str:
    return "[" + ",".join(f"{b}{suffix[b]}" for b in sorted(suffix)) + "]"


class VKernel:
    """``q(v | x, z) = Normal(a[z] x + b[z], softplus(c[z]))``."""

    block = "v"

    def __init__(self, n=5, name="kv"):
        self.a = ad.Parameter(np.zeros(n), f"{name}.a")
        self.b = ad.Parameter(np.zeros(n), f"{name}.b")
        self.c = ad.Parameter(np.full(n, math.log(math.e - 1.0)), f"{name}.c")

    def parameters(self):
        return [self.a, self.b, self.c]

    def dist(self, state):
        idx = state["z"].data.astype(np.int64)
        loc = ad.take_last(self.a, idx) * state["x"] + ad.take_last(self.b, idx)
        return Normal(loc, ad.softplus(ad.take_last(self.c, idx)) + 1e-6)

    def program(self, suffix: dict) -> PrimitiveProgram:
        def body(s, state):
            out = dict(state)
            out["v"] = s.sample(block_address("v", suffix), self.dist(state))
            return out

        return PrimitiveProgram(body, "kv" + _tag(suffix))


class ZKernel:
    """``q(z | x, v)`` with logits quadratic in ``v`` and linear in ``x``."""

    block = "z"

    def __init__(self, n=5, name="kz"):
        self.w0 = ad.Parameter(np.zeros(n), f"{name}.w0")
        self.w1 = ad.Parameter(np.zeros(n), f"{name}.w1")
        self.w2 = ad.Parameter(np.zeros(n), f"{name}.w2")
        self.w3 = ad.Parameter(np.zeros(n), f"{name}.w3")

    def parameters(self):
        return [self.w0, self.w1, self.w2, self.w3]

    def dist(self, state):
        v = ad.reshape(state["v"], state["v"].shape + (1,))
        x = ad.reshape(ad.broadcast_to(state["x"], state["v"].shape), state["v"].shape + (1,))
        logits = self.w0 + self.w1 * v + self.w2 * v * v + self.w3 * x
        return Categorical(logits=logits)

    def program(self, suffix: dict) -> PrimitiveProgram:
        def body(s, state):
            out = dict(state)
            out["z"] = s.sample(block_address("z", suffix), self.dist(state))
            return out

        return PrimitiveProgram(body, "kz" + _tag(suffix))


def pop_gibbs(target, proposal, kernels, sweeps: int, losses=None, suffixing=True):
    """Population Gibbs sampler as a combinator tree.

    ``target(suffix)`` and ``proposal(suffix)`` build primitive programs for a
    per-block suffix map. Each kernel has a ``block`` name and a
    ``program(suffix)`` factory. One propose node is added per kernel per
    sweep, each resampling the incoming population along dim 0. ``losses`` maps
    a kernel-step index to a loss hook.
    """
    if not kernels:
        raise ValueError("pop_gibbs needs at least one kernel")
    blocks = sorted({k.block for k in kernels})
    suffix = {b: 0 for b in blocks}
    losses = losses or {}
    q = propose(target(dict(suffix)), proposal(dict(suffix)), loss_fn=losses.get(0))
    step = 0
    for _ in range(sweeps):
        for kernel in kernels:
            step += 1
            old = dict(suffix)
            if suffixing:
                suffix[kernel.block] += 1
            new = dict(suffix)
            q = propose(
                extend(target(new), kernel.program(old)),
                compose(kernel.program(new), resample(q, dim=0)),
                loss_fn=losses.get(step),
            )
    return q


@dataclass
class GibbsConfig:
    sweeps: int = 2
    samples: int = 20
    batch: int = 10
    iters: int = 300
    lr: float = 5e-2
    seed: int = 0


def train_toy(config: GibbsConfig, model: ToyModel | None = None, sink=None) -> dict:
    """Fit both block kernels with the forward-KL nested objective on synthetic data."""
    import json

    model = model or ToyModel()
    kv, kz = VKernel(), ZKernel()
    kernels = [kv, kz]
    params = kv.parameters() + kz.parameters()
    opt = Adam(params, lr=config.lr)
    stream = RandomStream(config.seed)
    data_rng, run_rng = stream.split(2)
    n_steps = config.sweeps * len(kernels)
    losses = {i: nvi_loss("forward") for i in range(1, n_steps + 1)}
    q = pop_gibbs(model.target, model.prior_proposal, kernels, config.sweeps, losses)
    shape = (config.samples, config.batch)

    def data():
        z = data_rng.categorical(model.pi, (config.batch,))
        v = model.means[z] + model.scales[z] * data_rng.normal((config.batch,))
        return model.coef * v + model.noise * data_rng.normal((config.batch,))

    for it in range(config.iters):
        ctx = EvaluationContext(run_rng, shape, detach_levels=True, reparameterize=False)
        out = run(q, data(), ctx)
        ad.backward(ctx.loss)
        opt.step()
        if sink is not None:
            rec = {"iter": it, "loss": float(ctx.loss.data), "log_z_hat": log_z_hat(out.log_weight), "ess": ess(out.log_weight)}
            sink.write(json.dumps(rec) + "\n")
    with ad.no_grad():
        ctx = EvaluationContext(run_rng, shape, detach_levels=True, reparameterize=False)
        out = run(q, data(), ctx)
    summary = {
        "sweeps": config.sweeps,
        "L": config.samples,
        "log_z_hat": log_z_hat(out.log_weight),
        "ess": ess(out.log_weight),
        "seed": config.seed,
    }
    if sink is not None:
        sink.write(json.dumps(summary) + "\n")
    return summary


class _Recorder:
    """Wraps a block kernel and keeps the state going in and out of every forward draw."""

    def __init__(self, kernel):
        self.kernel = kernel
        self.block = kernel.block
        self.calls = {}

    def program(self, suffix: dict) -> PrimitiveProgram:
        inner = self.kernel.program(suffix)
        tag = _tag(suffix)

        def body(s, state):
            out = inner(s, state)
            if block_address(self.block, suffix) not in s.substitution:
                self.calls[tag] = ({k: np.array(t.data) for k, t in state.items()}, np.array(out[self.block].data))
            return out

        return PrimitiveProgram(body, inner.name)


def _kernel_log_prob(kernel, state: dict, value) -> np.ndarray:
    tensors = {k: ad.as_tensor(v) for k, v in state.items()}
    return kernel.dist(tensors).log_prob(value).data


def gibbs_weight_check(sweeps=2, samples=30, batch=4, seed=0):
    """Compare each incremental log weight with its closed form.

    For a ``v`` update the closed form is
    ``log p(x, v', z) + log q(v | x, z) - log q(v' | x, z) - log p(x, v, z)``
    and symmetrically for ``z``. Returns ``(max_abs_error, node_counts)``.
    """
    model = ToyModel()
    gen = np.random.default_rng(seed)
    kv, kz = VKernel(), ZKernel()
    for p in kv.parameters() + kz.parameters():
        p.data = gen.normal(scale=0.5, size=p.data.shape)
    kernels = [_Recorder(kv), _Recorder(kz)]
    captured = {}

    def hook(step):
        def loss(rho_q, rho_p, log_w, log_v):
            captured[step] = np.array(ad.as_tensor(log_v).data)
            return ad.Tensor(0.0)

        return loss

    n_steps = sweeps * len(kernels)
    q = pop_gibbs(model.target, model.prior_proposal, kernels, sweeps, {i: hook(i) for i in range(1, n_steps + 1)})
    counts = {"propose": count_nodes(q, Propose), "resample": count_nodes(q, Resample)}
    rng = RandomStream(seed)
    x = model.coef * model.means[rng.categorical(model.pi, (batch,))] + rng.normal((batch,))
    with ad.no_grad():
        run(q, x, EvaluationContext(rng, (samples, batch), reparameterize=False))

    worst = 0.0
    suffix = {b: 0 for b in BLOCKS}
    step = 0
    for _ in range(sweeps):
        for rec in kernels:
            step += 1
            suffix[rec.block] += 1
            state, new = rec.calls[_tag(suffix)]
            old = state[rec.block]
            moved = dict(state, **{rec.block: new})
            expected = (
                model.log_joint(moved["x"], moved["v"], moved["z"])
                + _kernel_log_prob(rec.kernel, moved, old)
                - _kernel_log_prob(rec.kernel, state, new)
                - model.log_joint(state["x"], state["v"], state["z"])
            )
            worst = max(worst, float(np.max(np.abs(captured[step] - expected))))
    return worst, counts
