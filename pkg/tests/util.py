"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from meshflow import autodiff as ad


def finite_difference(build_loss, tensors, h=1e-5):
    """Central-difference gradients of build_loss() w.r.t. each tensor.

    build_loss must reread tensor.values on every call.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss()
            flat[i] = orig - h
            lo = build_loss()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss_tensor, tensors, rtol=1e-4, h=1e-5, subsample=None, rng=None):
    """Compare reverse-mode gradients against central differences.

    build_loss_tensor() must rebuild the computation from tensor.values
    and return a scalar Tensor. With subsample, only that many randomly
    chosen entries per tensor are checked (for big parameter arrays).
    """
    for t in tensors:
        t.grad = None
    with ad.Tape():
        loss = build_loss_tensor()
        ad.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]

    def value():
        with ad.no_grad():
            return build_loss_tensor().item()

    for t, g in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if subsample is not None and flat.size > subsample:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(flat.size, size=subsample, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            hi = value()
            flat[i] = orig - h
            lo = value()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            an = gflat[i]
            scale = max(1.0, abs(fd), abs(an))
            assert abs(an - fd) <= rtol * scale, (
                f"gradient mismatch at tensor shape {t.shape} entry {i}: "
                f"analytic {an}, finite-difference {fd}"
            )
