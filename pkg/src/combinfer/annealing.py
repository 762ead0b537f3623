"""Annealed nested importance sampling on an eight-mode ring target.

The target is treated as a black box: it only enters the samplers through
``s.factor`` statements, so no kernel sees component identities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from combinfer import autodiff as ad
from combinfer.combinators import Propose, compose, extend, propose, resample, run
from combinfer.distributions import MultivariateNormalDiag
from combinfer.errors import ArityMismatch, ConfigError
from combinfer.evaluation import EvaluationContext, PrimitiveProgram
from combinfer.nn import Adam, Mlp
from combinfer.objectives import ess, log_z_hat, nvi_loss, rws_loss, svi_loss
from combinfer.rng import RandomStream

VARIANTS = ("avo", "nvi", "nvir", "nvi-star", "nvir-star")
OBJECTIVES = ("svi", "rws", "nvi")
LOG_8 = math.log(8.0)


class RingTarget:
    """Unnormalized density: sum of eight unit-mass Gaussians on a circle, so it integrates to 8."""

    def __init__(self, modes=8, radius=10.0, variance=0.5):
        angles = 2.0 * math.pi * np.arange(modes) / modes
        self.means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        self.variance = variance
        self._const = -math.log(2.0 * math.pi * variance)

    def log_density(self, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        diff = ad.reshape(x, x.shape[:-1] + (1, 2)) - self.means
        sq = ad.sum(diff * diff, axis=-1)
        return ad.logsumexp(-0.5 * sq / self.variance + self._const, axis=-1)

    def __call__(self, x):
        return self.log_density(x)


def initial_distribution() -> MultivariateNormalDiag:
    return MultivariateNormalDiag(np.zeros(2), np.full(2, 5.0))


def address(k: int) -> str:
    return f"x/{k}"


@dataclass
class AnnealingPath:
    """Geometric path from the initial proposal to the target over ``K`` densities.

    With ``learn_beta`` the interior inverse temperatures are sigmoids of
    ``K - 2`` free logits; the endpoints stay pinned at 0 and 1.
    """

    K: int
    target: RingTarget = field(default_factory=RingTarget)
    learn_beta: bool = False

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("an annealing path needs K >= 2")
        fixed = np.linspace(0.0, 1.0, self.K)
        self.logits = None
        if self.learn_beta and self.K > 2:
            inner = fixed[1:-1]
            self.logits = ad.Parameter(np.log(inner / (1.0 - inner)), "beta.logits")

    def beta(self, k: int):
        """Inverse temperature of density ``k`` (1-based), a tensor when learned."""
        if not 1 <= k <= self.K:
            raise IndexError(k)
        if k == 1:
            return 0.0
        if k == self.K:
            return 1.0
        if self.logits is None:
            return (k - 1) / (self.K - 1)
        return ad.sigmoid(self.logits[k - 2])

    def betas(self) -> list[float]:
        return [float(ad.as_tensor(self.beta(k)).data) for k in range(1, self.K + 1)]

    def parameters(self):
        return [] if self.logits is None else [self.logits]

    def heuristic(self, x) -> ad.Tensor:
        """``log gamma_K(x) - log q_1(x)``, the factor that is scaled by beta."""
        return self.target(x) - initial_distribution().log_prob(x)

    def program(self, k: int) -> PrimitiveProgram:
        """Primitive for density ``k``: draw from the initial proposal and add a tempered factor."""
        q0 = initial_distribution()
        path = self

        def body(s, c):
            x = s.sample(address(k), q0)
            if k > 1:
                s.factor(path.beta(k) * path.heuristic(x))
            return x

        return PrimitiveProgram(body, f"gamma{k}")


def annealed_log_density(path: AnnealingPath, k: int, x) -> ad.Tensor:
    """``(1 - beta_k) log q_1(x) + beta_k log gamma_K(x)``."""
    beta = path.beta(k)
    return (1.0 - beta) * initial_distribution().log_prob(x) + beta * path.target(x)


def kernel_program(net: Mlp, out_index: int, name: str) -> PrimitiveProgram:
    def body(s, c):
        return s.sample(address(out_index), net(c))

    return PrimitiveProgram(body, name)


def build_annealer(path: AnnealingPath, forward, reverse, resampling=False, losses=None):
    """Fold ``propose(extend(gamma_k, rev_k), compose(fwd_k, q'))`` over ``k = 2..K``.

    ``q'`` is ``resample(q)`` from the third level on when ``resampling`` is set,
    so the previous level's weighted samples are resampled before each kernel
    except the first.
    """
    n = path.K - 1
    if len(forward) != n or len(reverse) != n:
        raise ArityMismatch(f"K={path.K} needs {n} forward and {n} reverse kernels")
    if losses is not None and len(losses) != n:
        raise ArityMismatch(f"K={path.K} needs {n} per-level losses")
    q = path.program(1)
    for i, k in enumerate(range(2, path.K + 1)):
        fwd, rev = forward[i], reverse[i]
        incoming = resample(q, 0) if resampling and k >= 3 else q
        q = propose(
            extend(path.program(k), rev),
            compose(fwd, incoming),
            loss_fn=None if losses is None else losses[i],
        )
    return q


@dataclass
class AnnealConfig:
    variant: str = "nvir-star"
    K: int = 8
    budget: int = 288
    iters: int = 2000
    lr: float = 1e-2
    lr_final: float = 1e-4
    seed: int = 0
    eval_batches: int = 20
    eval_size: int = 500
    hidden: int = 50
    objective: str = "nvi"
    threads: int = 1

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.budget <= 0 or self.budget % self.K:
            raise ConfigError(f"budget {self.budget} is not divisible by K={self.K}")
        if self.budget // self.K < 2:
            raise ConfigError("each level needs at least two samples")
        if self.iters < 0 or self.eval_batches < 1 or self.eval_size < 1:
            raise ConfigError("iters must be >= 0 and evaluation sizes >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def samples(self) -> int:
        return self.budget // self.K

    @property
    def resampling(self) -> bool:
        return self.variant in ("nvir", "nvir-star")

    @property
    def learn_beta(self) -> bool:
        return self.variant.endswith("star")


class Annealer:
    """Kernels, path and optimizer for one training run."""

    def __init__(self, config: AnnealConfig):
        config.validate()
        self.config = config
        self.path = AnnealingPath(config.K, learn_beta=config.learn_beta)
        seeds = np.random.SeedSequence(config.seed).spawn(2 * (config.K - 1) + 1)
        self.forward_nets, self.reverse_nets = [], []
        self.forward, self.reverse = [], []
        for i, k in enumerate(range(2, config.K + 1)):
            fwd = Mlp(2, config.hidden, seeds[2 * i], f"fwd{k}")
            rev = Mlp(2, config.hidden, seeds[2 * i + 1], f"rev{k}")
            self.forward_nets.append(fwd)
            self.reverse_nets.append(rev)
            self.forward.append(kernel_program(fwd, k, f"fwd{k}"))
            self.reverse.append(kernel_program(rev, k - 1, f"rev{k}"))
        self.rng = RandomStream(seeds[-1])
        self.losses = [self._level_loss(k) for k in range(2, config.K + 1)]
        self.optimizer = Adam(self.parameters(), lr=config.lr)

    def parameters(self):
        params = [p for net in self.forward_nets + self.reverse_nets for p in net.parameters()]
        return params + self.path.parameters()

    def _level_loss(self, k: int):
        """Reverse-KL loss for level ``k``; learned schedules add normalizer terms.

        ``objective`` set to ``svi`` or ``rws`` swaps in that loss at every level
        and leaves the schedule fixed.
        """
        if self.config.objective == "svi":
            return svi_loss
        if self.config.objective == "rws":
            return rws_loss
        if self.config.variant == "avo":
            return nvi_loss("reverse", self_normalize=False)
        if not self.config.learn_beta:
            return nvi_loss("reverse")
        K = self.config.K
        out_norm = self._tempered_density(k) if 1 < k < K else None
        in_norm = self._tempered_density(k - 1) if 1 < k - 1 < K else None
        return nvi_loss(
            "reverse",
            learn_target=out_norm is not None,
            normalizer=out_norm,
            incoming_normalizer=in_norm,
        )

    def _tempered_density(self, k: int):
        path = self.path

        def density(rho):
            # The factor is linear in beta, so beta * detach(factor / beta) is the
            # tempered log density with the sample values held fixed.
            (entry,) = [v for a, v in rho.items() if a.startswith("factor/")]
            beta = path.beta(k)
            return beta * ad.detach(entry / beta)

        return density

    def sampler(self, training=True):
        losses = self.losses if training else None
        return build_annealer(self.path, self.forward, self.reverse, self.config.resampling, losses)

    def learning_rate(self, iteration: int) -> float:
        """Cosine decay from ``lr`` to ``lr_final`` over the configured iterations."""
        c = self.config
        frac = iteration / max(c.iters, 1)
        return c.lr_final + 0.5 * (c.lr - c.lr_final) * (1.0 + math.cos(math.pi * frac))

    def step(self, iteration: int) -> dict:
        self.optimizer.lr = self.learning_rate(iteration)
        ctx = EvaluationContext(self.rng, (self.config.samples,), detach_levels=True)
        out = run(self.sampler(), None, ctx)
        loss = ctx.loss
        ad.backward(loss)
        self.optimizer.step()
        return {
            "iter": iteration,
            "loss": float(loss.data),
            "log_z_hat": log_z_hat(out.log_weight),
            "ess": ess(out.log_weight),
            "beta": self.path.betas(),
        }

    def evaluate(self, batches=None, size=None) -> dict:
        """Average log Z-hat and ESS over fresh batches.

        Resampling variants keep their intermediate resampling steps; nothing is
        resampled after the final level, so both metrics see the last weights.
        """
        batches = batches or self.config.eval_batches
        size = size or self.config.eval_size
        program = self.sampler(training=False)
        streams = self.rng.split(batches)

        def one(stream):
            ctx = EvaluationContext(stream, (size,), detach_levels=True, reparameterize=False)
            out = run(program, None, ctx)
            return log_z_hat(out.log_weight), ess(out.log_weight)

        # Each batch owns a pre-split stream, so threading cannot change the numbers.
        with ad.no_grad():
            if self.config.threads > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(self.config.threads) as pool:
                    results = list(pool.map(one, streams))
            else:
                results = [one(s) for s in streams]
        lzs, esss = zip(*results)
        return {"log_z_hat": float(np.mean(lzs)), "ess": float(np.mean(esss))}

    def dump(self, samples=None):
        """One untrained-or-trained sampler run, as a JSON-ready dict."""
        ctx = EvaluationContext(self.rng, (samples or self.config.samples,), detach_levels=True, reparameterize=False)
        with ad.no_grad():
            out = run(self.sampler(training=False), None, ctx)
        return out.to_json()


def train(config: AnnealConfig, sink=None, trace_sink=None) -> dict:
    """Train one sampler, writing one JSON record per iteration to ``sink`` if given.

    ``trace_sink`` receives the trace and density map of a final sampler run.
    """
    annealer = Annealer(config)
    for it in range(config.iters):
        record = annealer.step(it)
        if sink is not None:
            sink.write(json.dumps(record) + "\n")
    metrics = annealer.evaluate()
    summary = {
        "variant": config.variant,
        "K": config.K,
        "L": config.samples,
        "log_z_hat": metrics["log_z_hat"],
        "ess": metrics["ess"],
        "seed": config.seed,
    }
    if sink is not None:
        sink.write(json.dumps(summary) + "\n")
    if trace_sink is not None:
        trace_sink.write(json.dumps(annealer.dump()) + "\n")
    return summary


def config_dict(config: AnnealConfig) -> dict:
    return asdict(config)


def is_propose(node) -> bool:
    return isinstance(node, Propose)
