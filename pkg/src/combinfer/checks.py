"""Exact-enumeration oracles for proper weighting and related property suites.

:class:`EnumeratingStream` stands in for a random stream and walks every joint
outcome of the discrete draws of a run, including the uniform offset used by
systematic resampling. For that offset it enumerates the intervals on which the
ancestor vector is constant, so expectations over the resampler are exact
rather than gridded.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from combinfer import autodiff as ad
from combinfer.combinators import (
    Compose,
    Extend,
    Propose,
    Resample,
    compose,
    extend,
    propose,
    resample,
    run,
    target,
)
from combinfer.distributions import Bernoulli, Categorical
from combinfer.evaluation import EvaluationContext, PrimitiveProgram, log_joint
from combinfer.rng import systematic_resample


class EnumeratingStream:
    """Replays a script of branch choices and records how many branches each draw had."""

    def __init__(self, script=()):
        self.script = list(script)
        self.arity: list[int] = []
        self.log_prob = 0.0
        self._pos = 0

    def _choose(self, probs) -> int:
        probs = list(probs)
        pos = self._pos
        self._pos += 1
        if pos >= len(self.script):
            self.script.append(0)
        self.arity.append(len(probs))
        choice = self.script[pos]
        self.log_prob += math.log(probs[choice])
        return choice

    def categorical(self, probs, shape) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        shape = tuple(shape)
        full = np.broadcast_to(probs, shape + probs.shape[-1:]).reshape(-1, probs.shape[-1])
        supports = [np.flatnonzero(row > 0) for row in full]
        combos = list(itertools.product(*supports))
        weights = [math.prod(full[e, c] for e, c in enumerate(combo)) for combo in combos]
        pick = combos[self._choose(weights)]
        return np.asarray(pick, dtype=np.int64).reshape(shape)

    def systematic_ancestors(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        n = w.shape[0]
        cols = w.reshape(n, -1)
        per_column = []
        for j in range(cols.shape[1]):
            cs = np.cumsum(cols[:, j])
            cs = cs / cs[-1]
            cuts = np.unique(np.concatenate([[0.0, 1.0], np.mod(n * cs, 1.0)]))
            spans = [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b - a > 0]
            per_column.append(spans)
        combos = list(itertools.product(*per_column))
        lengths = [math.prod(b - a for a, b in combo) for combo in combos]
        pick = combos[self._choose(lengths)]
        u = np.array([(a + b) / 2.0 for a, b in pick]).reshape(w.shape[1:])
        return systematic_resample(w, u)

    def normal(self, shape):
        raise TypeError("enumeration supports discrete programs only")

    uniform = normal

    def advance(self) -> bool:
        """Move the script to the next unexplored path; False when exhausted."""
        for i in range(len(self.arity) - 1, -1, -1):
            if self.script[i] + 1 < self.arity[i]:
                self.script = self.script[:i] + [self.script[i] + 1]
                return True
        return False


def enumerate_paths(fn):
    """Yield ``(probability, result)`` for every execution path of ``fn(stream)``."""
    script: list[int] = []
    while True:
        stream = EnumeratingStream(script)
        result = fn(stream)
        yield math.exp(stream.log_prob), result
        if not stream.advance():
            return
        script = stream.script


def expectation(fn) -> float:
    return math.fsum(p * value for p, value in enumerate_paths(fn))


# -- random discrete program corpus ------------------------------------------------


@dataclass
class Corpus:
    """Random conditional probability tables over a shared address pool."""

    seed: int
    pool: tuple = ("a", "b", "c", "d", "e", "f")
    floor: float = 0.05
    max_support: int = 2

    def __post_init__(self):
        self.gen = np.random.default_rng(self.seed)
        self.support = {a: int(self.gen.integers(2, self.max_support + 1)) for a in self.pool}
        self._count = itertools.count()

    def _cpt(self, k, contexts=6):
        raw = self.gen.dirichlet(np.ones(k), size=contexts)
        raw = raw + self.floor
        return raw / raw.sum(axis=1, keepdims=True)

    def primitive(self, addresses, observe=True, factor=False) -> PrimitiveProgram:
        """A program sampling ``addresses`` in order, each conditioned on the input and earlier draws."""
        uid = next(self._count)
        tables = {a: self._cpt(self.support[a]) for a in addresses}
        obs_p = self.gen.uniform(0.1, 0.9, size=6)
        fac = self.gen.normal(size=6)
        addresses = tuple(addresses)

        def body(s, c):
            ctx = np.zeros(s.sample_shape, dtype=np.int64) if c is None else np.asarray(c.data, dtype=np.int64)
            for a in addresses:
                x = s.sample(a, Categorical(tables[a][ctx % 6]))
                ctx = ctx + 1 + x.data.astype(np.int64)
            if observe:
                s.observe(f"obs/{uid}", Bernoulli(obs_p[ctx % 6]), 1.0)
            if factor:
                s.factor(fac[ctx % 6])
            return ad.Tensor(ctx.astype(np.float64))

        return PrimitiveProgram(body, f"f{uid}")

    def choose(self, available, lo=1, hi=2):
        k = int(self.gen.integers(lo, min(hi, len(available)) + 1))
        return tuple(self.gen.permutation(sorted(available))[:k])

    def split(self, available, need_left=1, need_right=1):
        items = list(self.gen.permutation(sorted(available)))
        if len(items) < need_left + need_right:
            raise ValueError("address pool too small for this shape")
        cut = int(self.gen.integers(need_left, len(items) - need_right + 1))
        return set(items[:cut]), set(items[cut:])

    def test_function(self):
        """A random bounded function of a single particle's trace."""
        table = {a: self.gen.normal(size=self.support[a]) for a in self.pool}
        bias = self.gen.normal()

        def h(trace_values: dict) -> float:
            return bias + sum(table[a][int(v)] for a, v in sorted(trace_values.items()))

        return h


# -- grammar shapes ----------------------------------------------------------------------


@lru_cache(None)
def target_shapes(n: int) -> tuple:
    if n == 0:
        return ("f",)
    return tuple(("extend", p) for p in target_shapes(n - 1))


@lru_cache(None)
def inference_shapes(n: int) -> tuple:
    """Shapes with exactly ``n`` combinator nodes."""
    out = list(target_shapes(n))
    if n >= 1:
        out += [("resample", q) for q in inference_shapes(n - 1)]
        for i in range(n):
            j = n - 1 - i
            out += [("compose", a, b) for a in inference_shapes(i) for b in inference_shapes(j)]
            out += [("propose", a, b) for a in target_shapes(i) for b in inference_shapes(j)]
    return tuple(out)


def all_shapes(max_nodes: int = 3) -> list:
    return [s for n in range(max_nodes + 1) for s in inference_shapes(n)]


def has_resample(shape) -> bool:
    return shape[0] == "resample" or any(has_resample(c) for c in shape[1:] if isinstance(c, tuple))


def addresses_needed(shape) -> int:
    if shape == "f":
        return 1
    kind = shape[0]
    if kind == "extend":
        return addresses_needed(shape[1]) + 1
    if kind == "compose":
        return addresses_needed(shape[1]) + addresses_needed(shape[2])
    return max(addresses_needed(c) for c in shape[1:])


def resample_admissible(shape, shared=True) -> bool:
    """True when every resample node receives the same input on all particles.

    The second stage of a compose gets per-particle outputs of the first
    stage. Resampling there would pair reindexed particles with first-stage
    traces and weights that were not reindexed.
    """
    if shape == "f":
        return True
    kind = shape[0]
    if kind == "resample":
        return shared and resample_admissible(shape[1], shared)
    if kind == "compose":
        return resample_admissible(shape[1], False) and resample_admissible(shape[2], shared)
    return all(resample_admissible(c, shared) for c in shape[1:])


def instantiate(shape, corpus: Corpus, available=None, kernel=False, width=2):
    """Build a program of ``shape`` whose compose and extend parts use disjoint addresses.

    Each primitive samples between one and ``width`` addresses.
    """
    available = set(corpus.pool) if available is None else available
    if shape == "f":
        return corpus.primitive(
            corpus.choose(available, 1, width),
            observe=not kernel,
            factor=not kernel and bool(corpus.gen.integers(2)),
        )
    kind = shape[0]
    if kind == "extend":
        left, right = corpus.split(available, addresses_needed(shape[1]), 1)
        return extend(
            instantiate(shape[1], corpus, left, width=width),
            instantiate("f", corpus, right, kernel=True, width=width),
        )
    if kind == "compose":
        left, right = corpus.split(available, addresses_needed(shape[1]), addresses_needed(shape[2]))
        return compose(
            instantiate(shape[1], corpus, left, width=width),
            instantiate(shape[2], corpus, right, width=width),
        )
    if kind == "propose":
        return propose(
            instantiate(shape[1], corpus, available, width=width),
            instantiate(shape[2], corpus, available, width=width),
        )
    if kind == "resample":
        return resample(instantiate(shape[1], corpus, available, width=width), 0)
    raise ValueError(shape)


def _particle_values(trace, index, domain=None):
    return {
        a: float(np.asarray(v.data)[index])
        for a, v in trace.items()
        if domain is None or a in domain
    }


def returned_domain(q) -> frozenset:
    """Addresses of the trace ``q`` returns, from one arbitrary execution."""
    stream = EnumeratingStream()
    return run(q, None, EvaluationContext(stream, (1,), reparameterize=False)).trace.domain()


def weighted_expectation(q, h, particles: int) -> float:
    """Exact ``E[(1/L) sum_l w_l h(tau_l)]`` over every random choice of ``q``."""

    def one(stream):
        ctx = EvaluationContext(stream, (particles,), reparameterize=False)
        out = run(q, None, ctx)
        w = np.exp(out.log_weight.data)
        terms = [w[l] * h(_particle_values(out.trace, l)) for l in range(particles) if w[l] > 0]
        return math.fsum(terms) / particles

    return expectation(one)


def denoted_expectation(q, h, domain=None) -> float:
    """``sum_tau gamma(tau) h(tau restricted to domain)`` with ``gamma`` from ``target(q)``."""
    p = target(q)
    total = []
    for _, trace in enumerate_paths(lambda stream: run(p, None, EvaluationContext(stream, (1,), reparameterize=False)).trace):
        gamma = math.exp(float(log_joint(p, None, trace, (1,)).data[0]))
        total.append(gamma * h(_particle_values(trace, 0, domain)))
    return math.fsum(total)


@dataclass
class CaseResult:
    shape: str
    seed: int
    implemented: float
    oracle: float

    @property
    def error(self) -> float:
        return abs(self.implemented - self.oracle)


def render_shape(shape) -> str:
    if shape == "f":
        return "f"
    return "(" + " ".join([shape[0]] + [render_shape(c) for c in shape[1:]]) + ")"


def admissible_shapes(max_nodes: int = 3) -> list:
    return [s for s in all_shapes(max_nodes) if resample_admissible(s)]


def check_shape(shape, corpus: Corpus) -> CaseResult:
    """Two particles and single-address primitives when resampling, to bound the enumeration."""
    particles = 2 if has_resample(shape) else 1
    q = instantiate(shape, corpus, width=3 - particles)
    h = corpus.test_function()
    return CaseResult(
        render_shape(shape),
        corpus.seed,
        weighted_expectation(q, h, particles),
        denoted_expectation(q, h, returned_domain(q)),
    )


def proper_weighting_suite(corpora=20, max_nodes=3, seed=0):
    """One CaseResult per admissible shape; shapes take corpus seeds round-robin."""
    for i, shape in enumerate(admissible_shapes(max_nodes)):
        yield check_shape(shape, Corpus(seed * 1000 + i % corpora))


# -- propose weight on the superfluous/missing construction ---------------------------


@dataclass
class LatticePoint:
    u: int
    z: int
    v: int
    implemented: float
    derived: float


def superfluous_missing_lattice(seed=0, n=3) -> list:
    """Every ``(u, z, v)`` path of ``propose(f, g)`` where ``g`` has a superfluous ``u`` and misses ``v``.

    The derived log weight is ``log p(x|v) + log p(z) - log q(z|u)``.
    """
    gen = np.random.default_rng(seed)
    p_z = gen.dirichlet(np.ones(n))
    p_v = gen.dirichlet(np.ones(n), size=n)
    p_x = gen.dirichlet(np.ones(n), size=n)
    q_u = gen.dirichlet(np.ones(n))
    q_z = gen.dirichlet(np.ones(n), size=n)
    x_obs = 1

    def f(s, c):
        z = s.sample("z", Categorical(p_z))
        v = s.sample("v", Categorical(p_v[z.data.astype(np.int64)]))
        s.observe("x", Categorical(p_x[v.data.astype(np.int64)]), float(x_obs))
        return v

    def g(s, c):
        u = s.sample("u", Categorical(q_u))
        return s.sample("z", Categorical(q_z[u.data.astype(np.int64)]))

    q = propose(PrimitiveProgram(f, "f"), PrimitiveProgram(g, "g"))
    points = []
    # Enumerate the joint (u, z, v) lattice by substitution so every point is visited exactly once.
    for u in range(n):
        for z in range(n):
            for v in range(n):
                stream = _FixedStream([u, z, v])
                out = run(q, None, EvaluationContext(stream, (), reparameterize=False))
                derived = math.log(p_x[v, x_obs]) + math.log(p_z[z]) - math.log(q_z[u, z])
                points.append(LatticePoint(u, z, v, float(out.log_weight.data), derived))
    return points


class _FixedStream:
    """Returns scripted category indices in call order."""

    def __init__(self, values):
        self.values = list(values)

    def categorical(self, probs, shape):
        return np.full(tuple(shape), self.values.pop(0), dtype=np.int64)


# -- resample invariants ------------------------------------------------------------------


def offspring_count_violations(vectors=1000, seed=0) -> int:
    """How many random weight vectors break ``|count_i - L w_i| < 1``."""
    gen = np.random.default_rng(seed)
    bad = 0
    for _ in range(vectors):
        n = int(gen.integers(2, 50))
        w = gen.dirichlet(np.full(n, float(gen.uniform(0.1, 2.0))))
        if gen.random() < 0.3:
            w[gen.integers(n)] = 0.0
            w = w / w.sum()
        anc = systematic_resample(w, gen.random())
        counts = np.bincount(anc, minlength=n)
        bad += int(np.any(np.abs(counts - n * w) >= 1.0))
    return bad


def coin_program():
    def body(s, c):
        z = s.sample("z", Bernoulli(0.5))
        s.observe("x", Bernoulli(np.where(z.data == 1, 0.9, 0.2)), 1.0)
        return z

    return PrimitiveProgram(body, "coin")


def resample_mc_check(replications=100_000, particles=4, seed=0):
    """Monte Carlo ``E[(1/L) sum w h(z)]`` after ``resample`` versus the exact value before.

    Returns ``(estimate, standard_error, exact, mean_weight_gap)``. The gap is the
    largest log-space difference between incoming and outgoing total weight per column.
    """
    from combinfer.rng import RandomStream

    h = np.array([0.3, 1.7])
    exact = 0.5 * 0.2 * h[0] + 0.5 * 0.9 * h[1]
    shape = (particles, replications)
    # Same seed, so the inner run reproduces the incoming population.
    before = run(coin_program(), None, EvaluationContext(RandomStream(seed), shape, reparameterize=False))
    after = run(resample(coin_program(), 0), None, EvaluationContext(RandomStream(seed), shape, reparameterize=False))
    lw_in, lw_out = before.log_weight.data, after.log_weight.data
    z = after.trace["z"].data.astype(np.int64)
    per_rep = np.mean(np.exp(lw_out) * h[z], axis=0)
    gap = np.max(np.abs(np.logaddexp.reduce(lw_out, axis=0) - np.logaddexp.reduce(lw_in, axis=0)))
    return float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(replications)), float(exact), float(gap)


# -- suite registry -----------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: dict


def _proper_weighting_suite() -> SuiteResult:
    cases = list(proper_weighting_suite())
    worst = max(cases, key=lambda c: c.error)
    return SuiteResult(
        "proper-weighting",
        all(c.error <= 1e-9 for c in cases),
        {"cases": len(cases), "max_error": worst.error, "worst_shape": worst.shape},
    )


def _propose_weight_suite() -> SuiteResult:
    points = superfluous_missing_lattice()
    err = max(abs(p.implemented - p.derived) for p in points)
    return SuiteResult("propose-weight", err <= 1e-12, {"points": len(points), "max_error": err})


def _resample_suite() -> SuiteResult:
    violations = offspring_count_violations()
    est, se, exact, gap = resample_mc_check()
    ok = violations == 0 and gap <= 1e-12 and abs(est - exact) <= 4 * se
    return SuiteResult(
        "resample",
        ok,
        {"count_violations": violations, "mean_weight_gap": gap, "estimate": est, "standard_error": se, "exact": exact},
    )


def _gibbs_suite() -> SuiteResult:
    from combinfer.gibbs import gibbs_weight_check

    err, counts = gibbs_weight_check(sweeps=1)
    ok = err <= 1e-9 and counts == {"propose": 3, "resample": 2}
    return SuiteResult("gibbs", ok, {"max_error": err, **counts})


SUITES = {
    "proper-weighting": _proper_weighting_suite,
    "propose-weight": _propose_weight_suite,
    "resample": _resample_suite,
    "gibbs": _gibbs_suite,
}
