"""Finite-difference gradient checking and naive reference implementations."""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from cbdes_moe.tensor import Tensor

H = 1e-5
REL_TOL = 1e-4
ZERO_FLOOR = 1e-8


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative error; falls back to the absolute error when both gradients are ~0.

    Some gradients are identically zero (e.g. the attention key bias, which
    shifts every score in a row equally); there only round-off remains.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff if denom < ZERO_FLOOR else diff / denom


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray], seed: int = 0) -> float:
    """Compare backward against central differences for ``sum(build(inputs) * R)``.

    Returns the worst relative error over all inputs.
    """
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(inputs)
    R = np.random.default_rng(seed).standard_normal(out.shape)

    def loss_value() -> float:
        return float(np.sum(build(inputs).data * R))

    loss = (build(inputs) * Tensor(R)).sum()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(loss_value, t.data)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# references


def conv2d_loops(x, w, b, stride, padding):
    B, Cin, Hh, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.zeros((B, Cin, Hh + 2 * padding, W + 2 * padding))
    xp[:, :, padding : padding + Hh, padding : padding + W] = x
    Ho = (Hh + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[co]
                    for ci in range(Cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[n, co, i, j] = acc
    return out


def maxpool_scan(x):
    B, C, Hh, W = x.shape
    out = np.empty((B, C, Hh // 2, W // 2))
    for n, c, i, j in itertools.product(range(B), range(C), range(Hh // 2), range(W // 2)):
        best = -np.inf
        for u in range(2):
            for v in range(2):
                best = max(best, x[n, c, 2 * i + u, 2 * j + v])
        out[n, c, i, j] = best
    return out


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def attention_reference(tokens, p, heads):
    """Explicit per-head attention matrix, one batch element at a time."""
    B, N, D = tokens.shape
    dh = D // heads
    out = np.zeros_like(tokens)
    for b in range(B):
        x = tokens[b]
        q = x @ p["wq"].T + p["bq"]
        k = x @ p["wk"].T + p["bk"]
        v = x @ p["wv"].T + p["bv"]
        ctx = np.zeros((N, D))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = np.array([[q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(N)] for i in range(N)])
            s = np.exp(s - s.max(axis=1, keepdims=True))
            a = s / s.sum(axis=1, keepdims=True)
            ctx[:, sl] = a @ v[:, sl]
        out[b] = ctx @ p["wo"].T + p["bo"]
    return out


def attention_params(rng, D, scale=None):
    scale = 1.0 / math.sqrt(D) if scale is None else scale
    names = ("wq", "wk", "wv", "wo")
    p = {n: rng.standard_normal((D, D)) * scale for n in names}
    p.update({"b" + n[1]: rng.standard_normal(D) * 0.1 for n in names})
    return p


def random_stochastic(rng, n, k):
    logits = rng.standard_normal((n, k)) * rng.uniform(0.1, 3.0)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
