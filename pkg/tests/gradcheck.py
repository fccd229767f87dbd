"""Central finite-difference gradient checking against the autodiff engine."""

import numpy as np

from docir_lab.autodiff import Tensor


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f w.r.t. array x, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def check_grads(build_loss, tensors, rtol=1e-4, h=1e-5):
    """build_loss() -> scalar Tensor built from ``tensors`` (requires_grad).

    Compares analytic grads against central differences; asserts the max
    relative error is within rtol.
    """
    loss = build_loss()
    for t in tensors:
        t.grad = None
    loss.backward()
    for t in tensors:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float(build_loss().data), t.data, h=h)
        # mixed tolerance: relative where the gradient is meaningful,
        # absolute floor for near-zero elements (rel err ill-conditioned there)
        scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-4)
        rel = np.abs(analytic - numeric) / scale
        assert rel.max() <= rtol, f"gradient mismatch: max rel err {rel.max():.2e}"


def make_param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)
