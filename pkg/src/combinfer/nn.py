"""Gaussian MLP kernels and the Adam optimizer."""

from __future__ import annotations

import json
import math

import numpy as np

from combinfer import autodiff as ad
from combinfer.distributions import MultivariateNormalDiag
from combinfer.errors import ShapeMismatch

# softplus(SCALE_BIAS) == 1, so a fresh kernel starts with unit scale.
SCALE_BIAS = math.log(math.e - 1.0)


class Linear:
    def __init__(self, fan_in, fan_out, rng: np.random.Generator | None, name: str, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        self.weight = ad.Parameter(w, f"{name}.weight")
        self.bias = ad.Parameter(b, f"{name}.bias")

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Mlp:
    """One hidden ReLU layer feeding a mean head with input skip and a softplus scale head.

    The hidden layer uses uniform fan-in initialization. Both heads start with
    zero weights, so a new kernel maps ``c`` to ``Normal(c, 1)`` exactly.
    """

    def __init__(self, dim=2, hidden=50, seed=0, name="kernel"):
        gen = np.random.default_rng(seed)
        self.dim = dim
        self.name = name
        self.hidden = Linear(dim, hidden, gen, f"{name}.hidden")
        self.mean_head = Linear(hidden, dim, None, f"{name}.mean", zero=True)
        self.scale_head = Linear(hidden, dim, None, f"{name}.scale", zero=True)
        self.scale_head.bias.data[:] = SCALE_BIAS

    def parameters(self):
        return self.hidden.parameters() + self.mean_head.parameters() + self.scale_head.parameters()

    def forward(self, c):
        c = ad.as_tensor(c)
        if c.ndim == 0 or c.shape[-1] != self.dim:
            raise ShapeMismatch(f"kernel expects trailing dim {self.dim}, got shape {c.shape}")
        h = ad.relu(self.hidden(c))
        mu = self.mean_head(h) + c
        sigma = ad.softplus(self.scale_head(h))
        return mu, sigma

    def __call__(self, c) -> MultivariateNormalDiag:
        return kernel_forward(self, c)


def kernel_forward(kernel: Mlp, c) -> MultivariateNormalDiag:
    mu, sigma = kernel.forward(c)
    # Softplus can underflow to 0 for very negative pre-activations.
    sigma = sigma + 1e-30 if np.any(sigma.data <= 0) else sigma
    return MultivariateNormalDiag(mu, sigma)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.99), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        """One bias-corrected update from the accumulated gradients, then zero them."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "step": self.step_count,
            "m": [m.ravel().tolist() for m in self.m],
            "v": [v.ravel().tolist() for v in self.v],
        }

    def load_state_dict(self, state: dict):
        self.lr = state["lr"]
        self.beta1, self.beta2 = state["betas"]
        self.eps = state["eps"]
        self.step_count = state["step"]
        self.m = [np.asarray(m).reshape(p.shape) for m, p in zip(state["m"], self.params)]
        self.v = [np.asarray(v).reshape(p.shape) for v, p in zip(state["v"], self.params)]


def save_checkpoint(path, params, optimizer: Adam | None = None):
    blob = {
        "params": [{"name": p.name, "shape": list(p.shape), "data": p.data.ravel().tolist()} for p in params],
        "optimizer": optimizer.state_dict() if optimizer else {},
        "step": optimizer.step_count if optimizer else 0,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path, params, optimizer: Adam | None = None) -> int:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    by_name = {entry["name"]: entry for entry in blob["params"]}
    for p in params:
        entry = by_name[p.name]
        p.data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    if optimizer is not None and blob["optimizer"]:
        optimizer.load_state_dict(blob["optimizer"])
    return blob["step"]
