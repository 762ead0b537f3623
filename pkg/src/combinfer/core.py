"""Addressed traces, log-density maps, disjoint union and log-weight helpers."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

from combinfer import autodiff as ad
from combinfer.errors import (  # noqa: F401  (re-exported)
    AddressCollision,
    AllZeroWeights,
    ArityMismatch,
    CombinferError,
    ConfigError,
    DegenerateWeights,
    DuplicateAddress,
    GrammarError,
    IncompleteTrace,
    KernelHasObserve,
    NonScalarRoot,
    NotReparameterizable,
    ShapeMismatch,
)


def _check_address(address) -> str:
    if not isinstance(address, str) or not address:
        raise ValueError(f"addresses are non-empty strings, got {address!r}")
    return address


class _AddressMap(Mapping):
    """Immutable insertion-ordered map from address to tensor."""

    __slots__ = ("_entries",)
    _field = "value"

    def __init__(self, entries=None):
        built = {}
        items = entries.items() if isinstance(entries, Mapping) else (entries or ())
        for address, value in items:
            _check_address(address)
            if address in built:
                raise DuplicateAddress(address)
            built[address] = ad.as_tensor(value)
        object.__setattr__(self, "_entries", built)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def __getitem__(self, address) -> ad.Tensor:
        return self._entries[address]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        body = ", ".join(f"{k!r}: {v.data!r}" for k, v in self._entries.items())
        return f"{type(self).__name__}({{{body}}})"

    def __eq__(self, other):
        if type(other) is not type(self) or set(self) != set(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)

    __hash__ = None

    def get(self, address, default=None):
        return self._entries.get(address, default)

    def domain(self) -> frozenset:
        return frozenset(self._entries)

    def restrict(self, addresses):
        keep = set(addresses)
        return type(self)((k, v) for k, v in self._entries.items() if k in keep)

    def map_values(self, fn):
        return type(self)((k, fn(v)) for k, v in self._entries.items())

    def to_json(self) -> dict:
        return {
            "entries": [
                {"address": k, self._field: v.data.tolist(), "shape": list(v.shape)}
                for k, v in self._entries.items()
            ]
        }

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        pairs = []
        for entry in obj["entries"]:
            data = np.asarray(entry[cls._field], dtype=np.float64).reshape(entry["shape"])
            pairs.append((entry["address"], data))
        return cls(pairs)


class Trace(_AddressMap):
    """Sampled values keyed by address; a missing address is ``None`` via ``get``."""


class DensityMap(_AddressMap):
    """Log conditional densities keyed by address. Entries may be ``-inf``."""

    _field = "log_density"


def combine(a, b):
    """Disjoint union ``a ⊕ b``. Raises AddressCollision on any shared address."""
    if type(a) is not type(b):
        raise TypeError(f"cannot combine {type(a).__name__} with {type(b).__name__}")
    for address in a:
        if address in b:
            raise AddressCollision(address)
    return type(a)(list(a.items()) + list(b.items()))


def _sum_entries(rho: DensityMap, addresses) -> ad.Tensor:
    total = ad.Tensor(0.0)
    for address in rho:
        if address in addresses:
            total = total + rho[address]
    return total


def weight_unconditioned(rho: DensityMap, tau: Trace) -> ad.Tensor:
    """Log weight from addresses in ``rho`` that were not sampled (observed terms)."""
    return _sum_entries(rho, rho.domain() - tau.domain())


def weight_conditioned(rho: DensityMap, tau: Trace, tau_sub: Mapping) -> ad.Tensor:
    """Log weight from observed addresses plus addresses reused from ``tau_sub``."""
    fresh = tau.domain() - frozenset(tau_sub)
    return _sum_entries(rho, rho.domain() - fresh)


def log_mean_exp(w, dim: int = 0) -> ad.Tensor:
    """Stable ``log(mean(exp(w)))`` along ``dim``; all ``-inf`` gives ``-inf``."""
    w = ad.as_tensor(w)
    n = w.shape[dim]
    if n == 0:
        raise ValueError("log_mean_exp needs a non-empty dimension")
    return ad.logsumexp(w, axis=dim) - math.log(n)


@dataclass(frozen=True)
class WeightedEvaluation:
    """Result tuple of one evaluation: output, trace, densities, log weight."""

    output: Any
    trace: Trace
    densities: DensityMap
    log_weight: ad.Tensor

    def __post_init__(self):
        missing = self.trace.domain() - self.densities.domain()
        if missing:
            raise ValueError(f"trace addresses without densities: {sorted(missing)}")

    def to_json(self) -> dict:
        return {
            "trace": self.trace.to_json(),
            "densities": self.densities.to_json(),
            "log_weight": np.asarray(self.log_weight.data).tolist(),
        }
