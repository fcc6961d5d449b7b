"""Finite-difference verification of reverse-mode gradients.

Checks run in float64: perturb one input entry at a time by +/- h, difference
the scalar loss, and compare against the accumulated analytic gradient. The
relative error metric is |a - n| / max(|a|, |n|, floor).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numeric gradient of scalar-valued ``f`` w.r.t. every entry of ``x``.

    ``f`` receives a fresh array each call and must not mutate it.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-4) -> float:
    """Worst-case relative disagreement between analytic and numeric grads.

    The floor keeps near-zero entries from blowing up the ratio; disagreement
    below the floor counts as agreement.
    """
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_module_gradient(loss_fn, module, h: float = 1e-3, tol: float = 1e-4,
                          entries_per_param: int = 4,
                          rng: np.random.Generator | None = None) -> dict[str, float]:
    """Spot-check parameter gradients of a module against finite differences.

    ``loss_fn()`` recomputes a scalar Tensor from the module's current
    parameters (closing over fixed inputs). Parameters must already be
    float64. For each parameter a deterministic sample of entries is
    perturbed in place; probing every entry of real conv stacks would take
    minutes for no extra signal.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    module.zero_grads()
    loss = loss_fn()
    backward(loss)
    errs = {}
    for name, p in module.named_parameters():
        if p.data.dtype != np.float64:
            raise AssertionError(f"{name}: cast the module to float64 before checking")
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n = min(entries_per_param, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, rel_error(np.array([aflat[i]]), np.array([numeric])))
        errs[name] = worst
        if worst > tol:
            raise AssertionError(
                f"module gradient check failed for {name!r}: rel error {worst:.3e} > {tol:.0e}")
    return errs


def check_gradient(build_loss, inputs: dict[str, np.ndarray], h: float = 1e-3,
                   tol: float = 1e-4) -> dict[str, float]:
    """Compare analytic and numeric gradients for each named input.

    ``build_loss`` maps {name: Tensor} to a scalar Tensor; it is re-invoked
    for every probe so any internal caching must be deterministic. Returns
    {name: worst relative error} and raises AssertionError past ``tol``.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    backward(loss)
    analytic = {}
    for k, t in tensors.items():
        analytic[k] = np.zeros_like(arrays[k]) if t.grad is None else t.grad.copy()

    errs = {}
    for name in arrays:
        def f(perturbed, _name=name):
            local = {k: Tensor(perturbed.copy() if k == _name else v.copy())
                     for k, v in arrays.items()}
            return build_loss(local).data

        numeric = central_difference(f, arrays[name].copy(), h=h)
        errs[name] = rel_error(analytic[name], numeric)
        if errs[name] > tol:
            raise AssertionError(
                f"gradient check failed for {name!r}: rel error {errs[name]:.3e} > {tol:.0e}")
    return errs
