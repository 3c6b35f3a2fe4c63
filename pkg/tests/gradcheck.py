"""Central finite-difference gradient checking shared by the tensor and model tests."""

import numpy as np

from lmtrain.tensor import Tensor, mul


def numeric_grad(f, arr, eps=1e-5):
    """Central-difference gradient of scalar-valued ``f`` w.r.t. every element of ``arr``."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        h = eps * max(1.0, abs(keep))
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(build_loss, arrays, rel_tol=1e-6):
    """Compare reverse-mode gradients of ``build_loss(tensors)`` against FD.

    ``arrays`` maps name -> float64 ndarray. Returns the worst relative error
    seen; asserts every element satisfies |analytic - numeric| <= rel_tol *
    max(1, |numeric|).
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        def f(_t=t, _tensors=tensors):
            return float(build_loss(_tensors).data)

        numeric = numeric_grad(f, t.data)
        denom = np.maximum(1.0, np.abs(numeric))
        rel = np.abs(t.grad - numeric) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        assert (rel <= rel_tol).all(), (
            f"gradient mismatch for {name}: worst rel error {rel.max():.3e} "
            f"at {np.unravel_index(rel.argmax(), rel.shape)}"
        )
    return worst


def scalar_probe(out, rng):
    """Reduce a tensor op output to a scalar via a fixed random projection.

    A plain sum can hide sign or routing errors that cancel; projecting onto
    random coefficients makes the probe sensitive to every element.
    """
    proj = rng.standard_normal(out.shape)
    return mul(out, proj).sum()
