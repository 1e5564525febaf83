"""Pure numpy versions of the compiled kernels.  Signatures match ``_core``."""

import numpy as np

LOG_2PI = 1.8378770664093453
PROB_EPS = 1e-7


def decoder_potential(z, x, weights, biases, family):
    """U(z) = -log p(x|z) - log N(z; 0, I) and its gradient for a tanh MLP decoder.

    ``family`` is 0 for Bernoulli (clamped probabilities) and 1 for a unit-variance
    Gaussian.  Returns (energy of shape (B,), gradient of shape (B, d)).
    """
    hs = [z]
    h = z
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.tanh(h @ w + b)
        hs.append(h)
    a = h @ weights[-1] + biases[-1]
    if family == 0:
        p = 1.0 / (1.0 + np.exp(-a))
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        ll = np.sum(x * np.log(pc) + (1.0 - x) * np.log1p(-pc), axis=1)
        inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
        delta = (p - x) * inside
    else:
        r = x - a
        ll = np.sum(-0.5 * LOG_2PI - 0.5 * r * r, axis=1)
        delta = -r
    d = z.shape[1]
    energy = -ll + 0.5 * np.sum(z * z, axis=1) + 0.5 * d * LOG_2PI
    g = delta @ weights[-1].T
    for i in range(len(weights) - 2, -1, -1):
        h = hs[i + 1]
        g = (g * (1.0 - h * h)) @ weights[i].T
    return energy, g + z


def leapfrog(z, p, grad, x, weights, biases, family, eta, n_steps):
    """``n_steps`` leapfrog steps with per-row step sizes ``eta`` (shape (B,)).

    Returns (z, p, energy, grad) at the end of the trajectory; inputs are not modified.
    """
    z = z.copy()
    p = p.copy()
    half = (0.5 * eta)[:, None]
    step = eta[:, None]
    energy = None
    for _ in range(n_steps):
        p -= half * grad
        z += step * p
        energy, grad = decoder_potential(z, x, weights, biases, family)
        p -= half * grad
    if energy is None:
        energy, grad = decoder_potential(z, x, weights, biases, family)
    return z, p, energy, grad
