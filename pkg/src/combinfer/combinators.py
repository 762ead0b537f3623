"""Inference combinators and their evaluation semantics.

Grammar::

    p ::= f | extend(p, f)
    q ::= p | resample(q) | compose(q2, q1) | propose(p, q)

``compose(q2, q1)`` runs ``q1`` first and feeds its output to ``q2``.
"""

from __future__ import annotations

import numpy as np

from combinfer import autodiff as ad
from combinfer.core import DensityMap, Trace, WeightedEvaluation, combine, log_mean_exp
from combinfer.errors import AllZeroWeights, GrammarError, KernelHasObserve
from combinfer.evaluation import EvaluationContext, PrimitiveProgram, Program, evaluate


def is_target_class(node) -> bool:
    return isinstance(node, (PrimitiveProgram, Extend))


def _require_program(node, role):
    if not isinstance(node, Program):
        raise GrammarError(f"{role} must be an inference program, got {type(node).__name__}")


class Extend(Program):
    def __init__(self, p, f):
        if not is_target_class(p):
            raise GrammarError(f"extend expects a target program first, got {type(p).__name__}")
        if not isinstance(f, PrimitiveProgram):
            raise GrammarError(f"extend expects a primitive kernel second, got {type(f).__name__}")
        self.p, self.f = p, f

    def render(self):
        return f"(extend {self.p.render()} {self.f.render()})"


class Compose(Program):
    def __init__(self, q2, q1):
        _require_program(q2, "compose q2")
        _require_program(q1, "compose q1")
        self.q2, self.q1 = q2, q1

    def render(self):
        return f"(compose {self.q2.render()} {self.q1.render()})"


class Resample(Program):
    def __init__(self, q, dim: int = 0):
        _require_program(q, "resample argument")
        self.q, self.dim = q, int(dim)

    def render(self):
        return f"(resample {self.q.render()} {self.dim})"


class Propose(Program):
    """Use ``q`` as an importance proposal for target ``p``.

    ``loss_fn(rho_q, rho_p, log_w, log_v)`` is called once per run and its value
    added to the context loss. Without one, the context objective is used.
    """

    def __init__(self, p, q, loss_fn=None):
        if not is_target_class(p):
            raise GrammarError(f"propose expects a target program first, got {type(p).__name__}")
        _require_program(q, "propose proposal")
        self.p, self.q, self.loss_fn = p, q, loss_fn

    def render(self):
        return f"(propose {self.p.render()} {self.q.render()})"


def extend(p, f):
    return Extend(p, f)


def compose(q2, q1):
    return Compose(q2, q1)


def resample(q, dim: int = 0):
    return Resample(q, dim)


def propose(p, q, loss_fn=None):
    return Propose(p, q, loss_fn)


# -- transforms ------------------------------------------------------------------


def marginal(p):
    """Strip every extend wrapper from a target program."""
    while isinstance(p, Extend):
        p = p.p
    if not isinstance(p, PrimitiveProgram):
        raise GrammarError("marginal is defined for target programs only")
    return p


def target(q):
    """The propose- and resample-free program whose density ``q`` samples."""
    if is_target_class(q):
        return q
    if isinstance(q, Propose):
        return q.p
    if isinstance(q, Resample):
        return target(q.q)
    if isinstance(q, Compose):
        return Compose(target(q.q2), target(q.q1))
    raise GrammarError(f"not an inference program: {q!r}")


def structurally_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, PrimitiveProgram):
        return a is b
    if isinstance(a, Extend):
        return structurally_equal(a.p, b.p) and structurally_equal(a.f, b.f)
    if isinstance(a, Compose):
        return structurally_equal(a.q2, b.q2) and structurally_equal(a.q1, b.q1)
    if isinstance(a, Resample):
        return a.dim == b.dim and structurally_equal(a.q, b.q)
    return structurally_equal(a.p, b.p) and structurally_equal(a.q, b.q)


def count_nodes(q, kind) -> int:
    own = 1 if isinstance(q, kind) else 0
    children = {
        Extend: lambda n: (n.p, n.f),
        Compose: lambda n: (n.q2, n.q1),
        Resample: lambda n: (n.q,),
        Propose: lambda n: (n.p, n.q),
    }.get(type(q), lambda n: ())
    return own + sum(count_nodes(c, kind) for c in children(q))


# -- evaluation ------------------------------------------------------------------


def run(q, inputs, ctx: EvaluationContext, substitution=None) -> WeightedEvaluation:
    """Evaluate an inference program; ``substitution`` is only valid for propose-free trees."""
    if isinstance(q, PrimitiveProgram):
        return evaluate(q, inputs, ctx, substitution)
    if isinstance(q, Extend):
        return _run_target(q, inputs, ctx, substitution)[0]
    if isinstance(q, Compose):
        return _run_compose(q, inputs, ctx, substitution)
    if substitution is not None:
        raise GrammarError(f"{type(q).__name__} nodes cannot run under substitution")
    if isinstance(q, Propose):
        return _run_propose(q, inputs, ctx)
    if isinstance(q, Resample):
        return _run_resample(q, inputs, ctx)
    raise GrammarError(f"not an inference program: {q!r}")


def _run_target(p, inputs, ctx, substitution):
    """Return the full evaluation of ``p`` and the evaluation of ``marginal(p)`` inside it."""
    if isinstance(p, PrimitiveProgram):
        result = evaluate(p, inputs, ctx, substitution)
        return result, result
    first, base = _run_target(p.p, inputs, ctx, substitution)
    kernel = evaluate(p.f, first.output, ctx, substitution)
    if kernel.densities.domain() != kernel.trace.domain():
        extra = sorted(kernel.densities.domain() - kernel.trace.domain())
        raise KernelHasObserve(f"kernel {p.f.name!r} scores non-sampled addresses {extra}")
    # Extend returns its target's output, so marginalizing never changes what flows downstream.
    full = WeightedEvaluation(
        first.output,
        combine(first.trace, kernel.trace),
        combine(first.densities, kernel.densities),
        first.log_weight + kernel.log_weight,
    )
    return full, base


def _run_compose(q, inputs, ctx, substitution):
    first = run(q.q1, inputs, ctx, substitution)
    second = run(q.q2, first.output, ctx, substitution)
    return WeightedEvaluation(
        second.output,
        combine(second.trace, first.trace),
        combine(second.densities, first.densities),
        second.log_weight + first.log_weight,
    )


def _detach_output(value):
    if isinstance(value, ad.Tensor):
        return ad.detach(value)
    if isinstance(value, tuple):
        return tuple(_detach_output(v) for v in value)
    if isinstance(value, list):
        return [_detach_output(v) for v in value]
    if isinstance(value, dict):
        return {k: _detach_output(v) for k, v in value.items()}
    return value


def _run_propose(node: Propose, inputs, ctx):
    proposal = run(node.q, inputs, ctx)
    full, base = _run_target(node.p, inputs, ctx, proposal.trace)
    superfluous = proposal.trace.domain() - full.trace.domain()
    log_u = ad.broadcast_to(
        _sum_over(proposal.densities, proposal.densities.domain() - superfluous), ctx.sample_shape
    )
    log_v = full.log_weight - log_u
    # Zero target density with zero proposal density still means a zero-weight sample.
    dead = np.isnan(log_v.data)
    if dead.any():
        log_v = ad.where(dead, -np.inf, log_v)
    loss_fn = node.loss_fn or ctx.objective
    if loss_fn is not None:
        ctx.add_loss(loss_fn(proposal.densities, full.densities, ad.detach(proposal.log_weight), log_v))
    log_w = proposal.log_weight + log_v
    result = WeightedEvaluation(base.output, base.trace, base.densities, log_w)
    if ctx.detach_levels:
        result = WeightedEvaluation(
            _detach_output(result.output),
            result.trace.map_values(ad.detach),
            result.densities.map_values(ad.detach),
            ad.detach(result.log_weight),
        )
    return result


def _sum_over(densities: DensityMap, addresses) -> ad.Tensor:
    total = ad.Tensor(0.0)
    for address, lp in densities.items():
        if address in addresses:
            total = total + lp
    return total


def _reindex_output(value, ancestors, dim, sample_shape):
    if isinstance(value, ad.Tensor):
        if value.shape[: len(sample_shape)] == sample_shape:
            return ad.reindex(value, ancestors, axis=dim)
        return value
    if isinstance(value, tuple):
        return tuple(_reindex_output(v, ancestors, dim, sample_shape) for v in value)
    if isinstance(value, list):
        return [_reindex_output(v, ancestors, dim, sample_shape) for v in value]
    if isinstance(value, dict):
        return {k: _reindex_output(v, ancestors, dim, sample_shape) for k, v in value.items()}
    return value


def resample_ancestors(log_weights: np.ndarray, dim: int, rng) -> np.ndarray:
    """Systematic ancestors along ``dim``; ``-inf`` entries never get offspring."""
    lw = np.moveaxis(np.asarray(log_weights, dtype=np.float64), dim, 0)
    m = lw.max(axis=0, keepdims=True)
    if np.any(np.isneginf(m)):
        raise AllZeroWeights("every incoming weight along the resampling dim is zero")
    w = np.exp(lw - m)
    w = w / w.sum(axis=0, keepdims=True)
    return np.moveaxis(rng.systematic_ancestors(w), 0, dim)


def _run_resample(node: Resample, inputs, ctx):
    inner = run(node.q, inputs, ctx)
    shape = ctx.sample_shape
    dim = node.dim
    if not 0 <= dim < len(shape):
        raise GrammarError(f"resample dim {dim} outside sample shape {shape}")
    ancestors = resample_ancestors(inner.log_weight.data, dim, ctx.rng)

    def move(x):
        return _reindex_output(x, ancestors, dim, shape)

    mean_lw = log_mean_exp(inner.log_weight, dim)
    log_w = ad.broadcast_to(ad.reshape(mean_lw, shape[:dim] + (1,) + shape[dim + 1 :]), shape)
    return WeightedEvaluation(
        _reindex_output(inner.output, ancestors, dim, shape),
        Trace(inner.trace.map_values(move)),
        DensityMap(inner.densities.map_values(move)),
        log_w,
    )
