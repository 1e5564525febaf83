"""Latent-space Hamiltonian Monte Carlo started from the encoder.

The sampler targets p(x|z) p(z) for a fixed (possibly adversarial) input x.
Chains are batched: ``z`` has shape (B, d) and every chain keeps its own step
size, so one call defends many inputs at once.  A single input may also be
passed as a vector; results are then squeezed back to vectors.

Kinetic energy is K(p) = 0.5 * p.p with identity mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import LOG_2PI, Graph, NonFiniteError, backward
from .vae import (BERNOULLI, GAUSSIAN, VaeModel, decoder_hidden_graph, encode, log_likelihood,
                  log_likelihood_graph, param_nodes, reparameterize)

FAMILY_CODES = {BERNOULLI: 0, GAUSSIAN: 1}


@dataclass(frozen=True)
class HmcConfig:
    steps: int = 500
    step_size: float = 0.1
    leapfrog_steps: int = 20
    adaptive: bool = True
    target_acceptance: float = 0.9
    adapt_gain: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")


@dataclass
class HmcTrace:
    """Per-step history of a (batched) run.

    ``alpha`` and ``step_sizes`` have shape (T,) for a single chain and (T, B)
    for a batch; ``step_sizes[t]`` is the step size used at step t.
    """

    alpha: np.ndarray
    step_sizes: np.ndarray
    z_initial: np.ndarray
    z_final: np.ndarray
    accepted: np.ndarray
    snapshots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha.shape != self.step_sizes.shape:
            raise ValueError("alpha and step size histories differ in length")
        if np.any((self.alpha < 0.0) | (self.alpha > 1.0)):
            raise ValueError("acceptance probabilities must lie in [0, 1]")

    @property
    def steps(self) -> int:
        return self.alpha.shape[0]


# --- potentials -------------------------------------------------------------------

class Potential:
    """U(z) for a batch of chains.  Subclasses provide ``energy_grad``."""

    def energy_grad(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def leapfrog(self, z, p, grad, eta, n_steps):
        """``n_steps`` leapfrog steps; returns (z, p, energy, grad).  Inputs are not modified."""
        z = z.copy()
        p = p.copy()
        half = 0.5 * eta[:, None]
        step = eta[:, None]
        energy = None
        for _ in range(n_steps):
            p -= half * grad
            z += step * p
            energy, grad = self.energy_grad(z)
            p -= half * grad
        if energy is None:
            energy, grad = self.energy_grad(z)
        return z, p, energy, grad


class GaussianPotential(Potential):
    """Diagonal Gaussian target N(mean, diag(var)); the prior-only case by default."""

    def __init__(self, dim: int, mean=0.0, var=1.0):
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
        self.var = np.broadcast_to(np.asarray(var, dtype=np.float64), (dim,))
        self.dim = dim

    def energy_grad(self, z):
        r = z - self.mean
        energy = 0.5 * np.sum(r * r / self.var + np.log(self.var) + LOG_2PI, axis=-1)
        return energy, r / self.var


class FunctionPotential(Potential):
    """Wraps ``fn(z) -> (energy (B,), grad (B, d))``."""

    def __init__(self, fn):
        self.fn = fn

    def energy_grad(self, z):
        return self.fn(z)


class VaePotential(Potential):
    """U(z) = -log p(x|z) - log N(z; 0, I) for a trained decoder, one x per chain."""

    def __init__(self, model: VaeModel, x, backend: str | None = None):
        self.model = model
        self.x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        self.weights = [np.ascontiguousarray(w) for w, _ in model.decoder]
        self.biases = [np.ascontiguousarray(b) for _, b in model.decoder]
        self.family = FAMILY_CODES[model.decoder_family]
        self.kernel = kernels.get_backend(backend)

    def energy_grad(self, z):
        return self.kernel.decoder_potential(z, self.x, self.weights, self.biases, self.family)

    def leapfrog(self, z, p, grad, eta, n_steps):
        return self.kernel.leapfrog(z, p, grad, self.x, self.weights, self.biases,
                                    self.family, eta, n_steps)


def potential_energy(model: VaeModel, x, z):
    """U(z) = -log p(x|z) - log N(z; 0, I), evaluated with the plain numpy decoder."""
    z = np.asarray(z, dtype=np.float64)
    prior = -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI
    return -log_likelihood(model, x, z) - prior


def potential_gradient(model: VaeModel, x, z) -> np.ndarray:
    """grad_z U by reverse-mode differentiation of the decoder graph (reference path)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    g = Graph()
    p = param_nodes(g, model, requires_grad=False)
    zn = g.input("z", np.atleast_2d(z))
    logits = decoder_hidden_graph(g, model, p, zn)[-1]
    ll = log_likelihood_graph(g, model, g.const(np.atleast_2d(x)), logits)
    u = g.sum(0.5 * g.square(zn)) - g.sum(ll)
    g.output("U", u)
    grad = backward(g, 1.0)["z"]
    return grad[0] if single else grad


# --- sampler ----------------------------------------------------------------------

def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return np.atleast_2d(z), z.ndim == 1


def _as_eta(eta, b):
    eta = np.asarray(eta, dtype=np.float64)
    return np.broadcast_to(eta, (b,)).astype(np.float64) if eta.ndim == 0 else eta.astype(np.float64)


def leapfrog(potential: Potential, z, p, eta, n_steps: int):
    """Half-kick / drift / half-kick integration; returns (z', p').

    Raises NonFiniteError if the trajectory leaves the finite reals.
    """
    zb, single = _as_batch(z)
    pb, _ = _as_batch(p)
    if zb.shape != pb.shape:
        raise ValueError(f"z {zb.shape} and p {pb.shape} differ in shape")
    eta = _as_eta(eta, zb.shape[0])
    if np.any(eta < 0):
        raise ValueError("step size must be non-negative")
    _, grad = potential.energy_grad(zb)
    z1, p1, energy, _ = potential.leapfrog(zb, pb, grad, eta, n_steps)
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(p1)) and np.all(np.isfinite(energy))):
        raise NonFiniteError("leapfrog trajectory became non-finite")
    return (z1[0], p1[0]) if single else (z1, p1)


def _hmc_step(potential, z, energy, grad, eta, n_leapfrog, rng):
    """One batched HMC transition from a state whose energy and gradient are known."""
    p = rng.standard_normal(z.shape)
    u = rng.uniform(size=z.shape[0])
    h0 = energy + 0.5 * np.sum(p * p, axis=1)
    with np.errstate(all="ignore"):
        z1, p1, e1, g1 = potential.leapfrog(z, p, grad, eta, n_leapfrog)
        h1 = e1 + 0.5 * np.sum(p1 * p1, axis=1)
        finite = np.isfinite(h1) & np.all(np.isfinite(z1), axis=1) & np.all(np.isfinite(g1), axis=1)
        alpha = np.where(finite, np.minimum(1.0, np.exp(np.minimum(h0 - h1, 0.0))), 0.0)
    accept = finite & (u < alpha)
    z_new = np.where(accept[:, None], z1, z)
    e_new = np.where(accept, e1, energy)
    g_new = np.where(accept[:, None], g1, grad)
    return z_new, e_new, g_new, accept, alpha


def hmc_step(potential: Potential, z, eta, n_leapfrog: int, rng: np.random.Generator):
    """One step of HMC: fresh momentum, leapfrog, Metropolis correction.

    Returns (z', accepted, alpha).  Rejected chains keep ``z`` bit for bit;
    trajectories that turn non-finite are rejected with alpha = 0.
    """
    zb, single = _as_batch(z)
    eta = _as_eta(eta, zb.shape[0])
    energy, grad = potential.energy_grad(zb)
    z1, _, _, acc, alpha = _hmc_step(potential, zb, energy, grad, eta, n_leapfrog, rng)
    if single:
        return z1[0], bool(acc[0]), float(alpha[0])
    return z1, acc, alpha


def adapt_step_size(eta, alpha_prev, target: float = 0.9, gain: float = 0.01):
    """eta' = eta + gain * ((alpha - target) / target) * eta, elementwise."""
    return eta + gain * ((alpha_prev - target) / target) * eta


def run_chain(potential: Potential, z0, config: HmcConfig, rng: np.random.Generator,
              record_at=()) -> HmcTrace:
    """Run ``config.steps`` HMC steps from ``z0`` (vector or (B, d) batch)."""
    z, single = _as_batch(z0)
    z = z.copy()
    b = z.shape[0]
    eta = np.full(b, float(config.step_size))
    alphas = np.empty((config.steps, b))
    etas = np.empty((config.steps, b))
    accepted = np.zeros(b, dtype=np.int64)
    record = set(int(t) for t in record_at)
    snapshots = {0: z.copy()} if 0 in record else {}
    energy, grad = potential.energy_grad(z)
    for t in range(config.steps):
        etas[t] = eta
        z, energy, grad, acc, alpha = _hmc_step(potential, z, energy, grad, eta,
                                                config.leapfrog_steps, rng)
        alphas[t] = alpha
        accepted += acc
        if config.adaptive:
            eta = adapt_step_size(eta, alpha, config.target_acceptance, config.adapt_gain)
        if t + 1 in record:
            snapshots[t + 1] = z.copy()
    z0b = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if single:
        return HmcTrace(alphas[:, 0], etas[:, 0], z0b[0].copy(), z[0], accepted[0],
                        {k: v[0] for k, v in snapshots.items()})
    return HmcTrace(alphas, etas, z0b.copy(), z, accepted, snapshots)


def encoder_sample(model: VaeModel, x, rng: np.random.Generator) -> np.ndarray:
    """z_0 ~ q(z|x); draws exactly one normal vector per input from ``rng``."""
    q = encode(model, x)
    return reparameterize(q, rng.standard_normal(np.shape(q.mean)))


def defend(model: VaeModel, x_adv, config: HmcConfig, rng: np.random.Generator, *,
           record_at=(), backend: str | None = None):
    """Encoder sample followed by ``config.steps`` HMC steps targeting p(x|z)p(z).

    Returns (z_final, trace).  ``record_at`` lists step counts whose states are
    kept in ``trace.snapshots`` (0 is the encoder sample).  With ``steps == 0``
    the result is the encoder sample drawn from ``rng``.
    """
    x = np.asarray(x_adv, dtype=np.float64)
    z0 = encoder_sample(model, x, rng)
    trace = run_chain(VaePotential(model, x, backend), z0, config, rng, record_at)
    return trace.z_final, trace
