"""Finite-difference oracle shared by the gradient tests.

Kept independent of the tape: it only evaluates the forward function on
perturbed numpy inputs.
"""

import numpy as np

from dptomo import autodiff as ad


def random_like(rng, shape, complex_=False):
    x = rng.standard_normal(shape)
    if complex_:
        x = x + 1j * rng.standard_normal(shape)
    return x


def check_gradient(fn, inputs, rng, h=1e-5, n_dirs=3):
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    ``fn`` must return a real scalar Tensor. Returns the worst relative error
    over ``n_dirs`` random directions per input.
    """
    leaves = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with ad.Tape() as tape:
        loss = fn(*leaves)
    grads = tape.backward(loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        g = grads[leaves[i]]
        for _ in range(n_dirs):
            d = random_like(rng, x.shape, np.iscomplexobj(x))
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[i] = x + h * d
            minus[i] = x - h * d
            fd = (fn(*map(ad.Tensor, plus)).item() - fn(*map(ad.Tensor, minus)).item()) / (2 * h)
            an = float(np.sum(np.real(np.conj(g) * d)))
            err = abs(an - fd) / max(abs(fd), abs(an), 1e-12)
            worst = max(worst, err)
    return worst


def real_probe(y, c):
    """Real scalar ``sum(Re(c * y))`` used to reduce any output to a loss."""
    return ad.sum(ad.real(ad.mul(y, c)))


# criterion number -> one-line PASS/FAIL summary, printed by conftest.py
ACCEPTANCE = {}
