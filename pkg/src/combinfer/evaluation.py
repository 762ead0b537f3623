"""Primitive programs and traced evaluation with likelihood weighting.

A primitive program is a Python function ``body(s, c)`` that receives an
inference state ``s`` and one input value ``c``. It may call
``s.sample(address, dist)``, ``s.observe(address, dist, value)`` and
``s.factor(log_weight)``, and returns its output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from combinfer import autodiff as ad
from combinfer.core import DensityMap, Trace, WeightedEvaluation, weight_conditioned
from combinfer.errors import DuplicateAddress, IncompleteTrace, ShapeMismatch
from combinfer.rng import RandomStream


class Program:
    """Base class of every node in an inference program tree."""

    def render(self) -> str:
        raise NotImplementedError

    def __repr__(self):
        return self.render()


class PrimitiveProgram(Program):
    def __init__(self, body: Callable, name: str | None = None):
        self.body = body
        self.name = name or getattr(body, "__name__", "f")

    def render(self) -> str:
        return self.name

    def __call__(self, s, c=None):
        return self.body(s, c)


def primitive(body=None, *, name=None):
    """Decorator turning ``body(s, c)`` into a :class:`PrimitiveProgram`."""
    if body is None:
        return lambda fn: PrimitiveProgram(fn, name)
    return PrimitiveProgram(body, name)


@dataclass
class EvaluationContext:
    """Per-run state: randomness, sample shape and the accumulated loss.

    ``objective`` is the default loss hook for propose nodes without their own.
    ``detach_levels`` cuts gradient paths between nested propose levels.
    ``reparameterize`` makes continuous draws differentiable.
    ``strict`` turns a missing substitution value into IncompleteTrace.
    """

    rng: Any = field(default_factory=lambda: RandomStream(0))
    sample_shape: tuple = ()
    objective: Callable | None = None
    detach_levels: bool = False
    reparameterize: bool = True
    strict: bool = False
    loss: ad.Tensor = field(default_factory=lambda: ad.Tensor(0.0))
    _factor_count: int = 0

    def __post_init__(self):
        self.sample_shape = tuple(self.sample_shape)

    def next_factor_address(self) -> str:
        address = f"factor/{self._factor_count}"
        self._factor_count += 1
        return address

    def add_loss(self, value):
        self.loss = self.loss + value

    def per_sample(self, log_density) -> ad.Tensor:
        """Reduce a log density to one entry per sample by summing trailing dims."""
        lp = ad.as_tensor(log_density)
        n = len(self.sample_shape)
        if lp.ndim > n:
            lp = ad.sum(lp, axis=tuple(range(n, lp.ndim)))
        return ad.broadcast_to(lp, self.sample_shape)


class ProgramState:
    """The ``s`` handle passed to primitive program bodies."""

    def __init__(self, ctx: EvaluationContext, substitution=None):
        self.ctx = ctx
        self.substitution = substitution if substitution is not None else {}
        self._trace: dict = {}
        self._densities: dict = {}

    @property
    def sample_shape(self):
        return self.ctx.sample_shape

    def _claim(self, address):
        if not isinstance(address, str) or not address:
            raise ValueError(f"addresses are non-empty strings, got {address!r}")
        if address in self._densities:
            raise DuplicateAddress(address)

    def _draw_shape(self, dist):
        shape = self.ctx.sample_shape
        if dist.batch_shape[: len(shape)] == shape:
            return ()
        return shape

    def sample(self, address: str, dist):
        self._claim(address)
        if address in self.substitution:
            value = ad.as_tensor(self.substitution[address])
        elif self.ctx.strict:
            raise IncompleteTrace(address)
        elif dist.reparameterizable and self.ctx.reparameterize:
            value = dist.rsample(self.ctx.rng, self._draw_shape(dist))
        else:
            value = dist.sample(self.ctx.rng, self._draw_shape(dist))
        self._trace[address] = value
        self._densities[address] = self.ctx.per_sample(dist.log_prob(value))
        return value

    def observe(self, address: str, dist, value):
        """Score ``value`` as data. Substitution is never consulted here."""
        self._claim(address)
        value = ad.as_tensor(value)
        self._densities[address] = self.ctx.per_sample(dist.log_prob(value))
        return value

    def factor(self, log_weight):
        address = self.ctx.next_factor_address()
        self._densities[address] = self.ctx.per_sample(log_weight)
        return address


def evaluate(f: PrimitiveProgram, inputs, ctx: EvaluationContext, substitution=None) -> WeightedEvaluation:
    """Run ``f`` once and return its output, trace, densities and log weight."""
    s = ProgramState(ctx, substitution)
    output = f(s, inputs)
    trace = Trace(s._trace)
    densities = DensityMap(s._densities)
    lw = weight_conditioned(densities, trace, s.substitution)
    try:
        lw = ad.broadcast_to(lw, ctx.sample_shape)
    except ShapeMismatch:
        raise ShapeMismatch(f"log weight shape {lw.shape} does not match {ctx.sample_shape}") from None
    return WeightedEvaluation(output, trace, densities, lw)


def _density_sum(densities: DensityMap, addresses=None) -> ad.Tensor:
    total = ad.Tensor(0.0)
    for address, lp in densities.items():
        if addresses is None or address in addresses:
            total = total + lp
    return total


def _fully_substituted(program, inputs, trace, sample_shape):
    from combinfer.combinators import run

    ctx = EvaluationContext(rng=RandomStream(0), sample_shape=sample_shape, strict=True)
    return run(program, inputs, ctx, substitution=trace)


def log_joint(program, inputs, trace, sample_shape=()) -> ad.Tensor:
    """Sum of every density entry when ``program`` replays ``trace`` exactly."""
    result = _fully_substituted(program, inputs, trace, tuple(sample_shape))
    return ad.broadcast_to(_density_sum(result.densities), tuple(sample_shape))


def log_prior(program, inputs, trace, sample_shape=()) -> ad.Tensor:
    """Sum of density entries over sampled addresses only."""
    result = _fully_substituted(program, inputs, trace, tuple(sample_shape))
    return ad.broadcast_to(_density_sum(result.densities, result.trace.domain()), tuple(sample_shape))


def self_normalized_expectation(log_weights, values) -> float:
    """Self-normalized estimate of E[h] from log weights and per-sample h values."""
    lw = np.asarray(ad.as_tensor(log_weights).data)
    m = lw.max()
    w = np.exp(lw - m)
    return float(np.sum(w * np.asarray(values)) / np.sum(w))
