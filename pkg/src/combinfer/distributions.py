"""Distributions with tractable log densities.

Parameters may be plain arrays or tape tensors. Shapes follow the usual
``sample_shape + batch_shape + event_shape`` layout. Parameter checks happen at
construction. Off-support values score ``-inf`` instead of raising.
"""

from __future__ import annotations

import math

import numpy as np

from combinfer import autodiff as ad
from combinfer.errors import NotReparameterizable, ShapeMismatch

_PROB_TOL = 1e-6


def _shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None


class Distribution:
    event_ndim = 0
    reparameterizable = False

    @property
    def batch_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def event_shape(self) -> tuple:
        return ()

    def log_prob(self, x) -> ad.Tensor:
        raise NotImplementedError

    def sample(self, rng, sample_shape=()) -> ad.Tensor:
        raise NotImplementedError

    def rsample(self, rng, sample_shape=()) -> ad.Tensor:
        raise NotReparameterizable(f"{type(self).__name__} has no reparameterized sampler")

    def _out_shape(self, sample_shape):
        return tuple(sample_shape) + self.batch_shape + self.event_shape

    def _value(self, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        ev = self.event_shape
        if ev and x.shape[x.ndim - len(ev):] != ev:
            raise ShapeMismatch(f"value shape {x.shape} does not end with event shape {ev}")
        return x


class Normal(Distribution):
    reparameterizable = True

    def __init__(self, loc, scale):
        self.loc = ad.as_tensor(loc)
        self.scale = ad.as_tensor(scale)
        if not np.all(self.scale.data > 0):
            raise ValueError("Normal scale must be positive")
        self._batch = _shape(self.loc.shape, self.scale.shape)

    @property
    def batch_shape(self):
        return self._batch

    def log_prob(self, x):
        x = self._value(x)
        z = (x - self.loc) / self.scale
        return -0.5 * z * z - ad.log(self.scale) - 0.5 * ad.LOG_2PI

    def sample(self, rng, sample_shape=()):
        eps = rng.normal(self._out_shape(sample_shape))
        return ad.Tensor(self.loc.data + self.scale.data * eps)

    def rsample(self, rng, sample_shape=()):
        eps = rng.normal(self._out_shape(sample_shape))
        return self.loc + self.scale * eps


class MultivariateNormalDiag(Normal):
    """Independent normals over the last axis, scored jointly."""

    event_ndim = 1

    def __init__(self, loc, scale):
        super().__init__(loc, scale)
        if len(self._batch) == 0:
            raise ShapeMismatch("MultivariateNormalDiag needs at least one dimension")

    @property
    def batch_shape(self):
        return self._batch[:-1]

    @property
    def event_shape(self):
        return self._batch[-1:]

    def log_prob(self, x):
        return ad.sum(super().log_prob(x), axis=-1)


def _check_probs(p):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > _PROB_TOL):
        raise ValueError("probabilities must be nonnegative and sum to 1")


class Bernoulli(Distribution):
    def __init__(self, probs):
        self.probs = ad.as_tensor(probs)
        if np.any((self.probs.data < 0) | (self.probs.data > 1)):
            raise ValueError("Bernoulli probability must lie in [0, 1]")

    @property
    def batch_shape(self):
        return self.probs.shape

    def log_prob(self, x):
        x = self._value(x)
        one = x.data == 1
        zero = x.data == 0
        lp = ad.where(one, ad.log(self.probs), ad.log(1.0 - self.probs))
        return ad.where(one | zero, lp, -np.inf)

    def sample(self, rng, sample_shape=()):
        p = self.probs.data
        table = np.stack([1.0 - p, p], axis=-1)
        return ad.Tensor(rng.categorical(table, self._out_shape(sample_shape)).astype(np.float64))


class Categorical(Distribution):
    """Index-valued categorical; give exactly one of ``probs`` or ``logits``."""

    def __init__(self, probs=None, logits=None):
        if (probs is None) == (logits is None):
            raise ValueError("give exactly one of probs or logits")
        if probs is not None:
            self.probs = ad.as_tensor(probs)
            if self.probs.ndim == 0:
                raise ShapeMismatch("probs need a category axis")
            _check_probs(self.probs.data)
            self.log_probs = ad.log(self.probs)
        else:
            logits = ad.as_tensor(logits)
            if logits.ndim == 0:
                raise ShapeMismatch("logits need a category axis")
            self.log_probs = ad.log_softmax(logits, axis=-1)
            self.probs = ad.exp(self.log_probs)
        self.num_categories = self.probs.shape[-1]

    @property
    def batch_shape(self):
        return self.probs.shape[:-1]

    def _index_log_prob(self, idx_data):
        k = self.num_categories
        valid = (idx_data == np.round(idx_data)) & (idx_data >= 0) & (idx_data < k)
        safe = np.where(valid, idx_data, 0).astype(np.int64)
        return ad.where(valid, ad.take_last(self.log_probs, safe), -np.inf)

    def log_prob(self, x):
        x = self._value(x)
        return self._index_log_prob(x.data)

    def sample(self, rng, sample_shape=()):
        idx = rng.categorical(self.probs.data, tuple(sample_shape) + self.batch_shape)
        return ad.Tensor(idx.astype(np.float64))


class OneHotCategorical(Categorical):
    """Single-draw multinomial: values are one-hot vectors over the last axis."""

    event_ndim = 1

    @property
    def event_shape(self):
        return (self.num_categories,)

    def log_prob(self, x):
        x = self._value(x)
        d = x.data
        is_onehot = np.all((d == 0) | (d == 1), axis=-1) & (d.sum(axis=-1) == 1)
        idx = np.where(is_onehot, np.argmax(d, axis=-1), -1).astype(np.float64)
        return self._index_log_prob(idx)

    def sample(self, rng, sample_shape=()):
        idx = rng.categorical(self.probs.data, tuple(sample_shape) + self.batch_shape)
        return ad.Tensor(np.eye(self.num_categories)[idx])


def normal_log_pdf(x, loc, scale) -> np.ndarray:
    """Plain-array Gaussian log density, for oracles and blackbox targets."""
    z = (np.asarray(x) - loc) / scale
    return -0.5 * z * z - np.log(scale) - 0.5 * math.log(2.0 * math.pi)
