"""Shared numerical test utilities: finite differences and error norms."""

import numpy as np

FD_STEP = 1e-5
FD_TOL = 1e-4


def fd_grad(f, x, eps=FD_STEP):
    """Central-difference gradient of scalar-valued f() w.r.t. ndarray x.

    f must read x by reference; x is perturbed in place and restored.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    """Norm-relative difference, safe when both are tiny."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-10)
    return np.linalg.norm((a - b).ravel()) / denom


def check_param_grads(loss_fn, params, names=None, eps=FD_STEP, tol=FD_TOL):
    """Compare analytic gradients of loss_fn() against finite differences.

    loss_fn builds the graph from scratch on each call and returns a scalar
    Tensor.  Checks every parameter in `params` (or the named subset) and
    returns the worst relative error seen.
    """
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    worst = 0.0
    check = names if names is not None else params.names()
    for name in check:
        t = params[name]
        num = fd_grad(lambda: loss_fn().item(), t.data, eps=eps)
        err = rel_err(analytic[name], num)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
