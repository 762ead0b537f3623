"""Splittable counter-based random streams and systematic resampling.

Draw accounting (one stream position per scalar):
``normal(shape)`` and ``uniform(shape)`` consume ``prod(shape)`` variates;
``categorical(probs, shape)`` consumes one uniform per output element;
``systematic_ancestors`` consumes one uniform per batch column.
"""

from __future__ import annotations

import numpy as np


def systematic_resample(weights, u) -> np.ndarray:
    """Ancestor indices by systematic resampling along axis 0.

    ``weights`` has shape ``(L, *batch)`` and is normalized along axis 0. ``u`` is a
    scalar or has shape ``batch``. Entry ``l`` of a column is the smallest ``i``
    with a positive weight such that ``cumsum(w)[i] >= (l + u) / L``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        raise ValueError("weights need a leading sample dimension")
    n = w.shape[0]
    batch = w.shape[1:]
    cols = w.reshape(n, -1)
    m = cols.shape[1]
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), batch).reshape(m)
    cs = np.cumsum(cols, axis=0)
    cs = cs / cs[-1:]
    points = (np.arange(n)[:, None] + u[None, :]) / n
    if n * n * m <= 10_000_000:
        idx = (cs[None, :, :] < points[:, None, :]).sum(axis=1)
    else:
        idx = np.empty((n, m), dtype=np.int64)
        for j in range(m):
            idx[:, j] = np.searchsorted(cs[:, j], points[:, j], side="left")
    idx = np.minimum(idx, n - 1)
    # Ties at a zero-weight entry resolve to the next positive-weight index.
    positive = cols > 0
    nxt = np.where(positive, np.arange(n)[:, None], n)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    idx = np.take_along_axis(nxt, idx, axis=0)
    return idx.reshape((n,) + batch)


class RandomStream:
    """A seeded Philox stream that can be split into independent children."""

    def __init__(self, seed=0):
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, n: int) -> list["RandomStream"]:
        return [RandomStream(child) for child in self._seq.spawn(n)]

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def categorical(self, probs, shape) -> np.ndarray:
        """Category indices with the given output shape; ``probs`` broadcasts on leading dims."""
        probs = np.asarray(probs, dtype=np.float64)
        shape = tuple(shape)
        cdf = np.cumsum(probs, axis=-1)
        cdf = np.broadcast_to(cdf, shape + probs.shape[-1:])
        u = self._gen.random(shape) * cdf[..., -1]
        idx = (cdf <= u[..., None]).sum(axis=-1)
        return np.minimum(idx, probs.shape[-1] - 1)

    def systematic_ancestors(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        u = self._gen.random(w.shape[1:])
        return systematic_resample(w, u)
