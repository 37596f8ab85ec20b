"""Shared test oracles: central finite differences, independent of the tape."""

import numpy as np

from rnvc import tensor as T


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0,
              floor)
    return num / den


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of the scalar-valued callable ``f``.

    ``f`` must re-evaluate from the (mutated in place) float64 array ``x``.
    """
    assert x.dtype == np.float64
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def fd_directional(f, arrays, directions, h: float = 1e-5) -> float:
    """Central difference of scalar ``f`` along one direction per input array."""
    for a, v in zip(arrays, directions):
        a += h * v
    fp = f()
    for a, v in zip(arrays, directions):
        a -= 2.0 * h * v
    fm = f()
    for a, v in zip(arrays, directions):
        a += h * v
    return (fp - fm) / (2.0 * h)


def tape_grads(build_loss, params):
    """Run ``build_loss`` under a fresh tape and return each param's gradient."""
    for p in params:
        p.zero_grad()
    with T.GradTape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_directional(build_loss, params, rng, h=1e-5, tol=1e-4, direction="random"):
    """Compare tape gradient against a directional FD probe; returns rel error.

    ``direction="grad"`` probes along the normalized gradient itself, which
    keeps the comparison well conditioned when the gradient is small
    relative to the loss scale (deep composite graphs).
    """
    grads = tape_grads(build_loss, params)
    if direction == "grad":
        norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if norm == 0.0:
            return 0.0
        dirs = [g / norm for g in grads]
    else:
        dirs = []
        for p in params:
            v = rng.standard_normal(p.shape)
            n = np.linalg.norm(v)
            dirs.append(v / n if n > 0 else v)
    analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, dirs))

    def f():
        return build_loss().item()

    numeric = fd_directional(f, [p.data for p in params], dirs, h=h)
    return rel_err(np.array([analytic]), np.array([numeric]))
