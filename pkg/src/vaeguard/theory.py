"""Numerical checks of the robustness bounds on a linear-Gaussian VAE.

With p(z) = N(0, I) and p(x|z) = N(Wz + b, s2 I) every posterior is Gaussian and
closed form, so KL terms are exact and total variation can be integrated
accurately in one or two dimensions.  The only sampled quantity is the law of
HMC-defended latents, q^(t)(z|x_a), which is compared against closed-form
densities through a shared histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .defence import HmcConfig, Potential, run_chain

MIN_SAMPLES = 1000


# --- model and Gaussians -----------------------------------------------------------

@dataclass(frozen=True)
class LinearGaussianVae:
    W: np.ndarray          # (D, latent_dim)
    b: np.ndarray          # (D,)
    obs_var: float = 1.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(W.shape[0]))
        if not self.obs_var > 0:
            raise ValueError("obs_var must be positive")

    @property
    def latent_dim(self) -> int:
        return self.W.shape[1]

    def check_rank(self) -> None:
        smin = np.linalg.svd(self.W, compute_uv=False).min()
        if smin <= 1e-8:
            raise ValueError(f"decoder matrix is rank deficient (smallest singular value {smin:.3g})")


@dataclass(frozen=True)
class FullGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance {cov.shape} does not match mean {mean.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        sol = np.linalg.solve(self._chol, (z - self.mean).T)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(sol * sol, axis=0) + logdet + self.dim * math.log(2 * math.pi))

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T


def exact_posterior(lgv: LinearGaussianVae, x) -> FullGaussian:
    """p(z|x) = N(mu, S) with S = (I + W'W/s2)^-1 and mu = S W'(x - b)/s2."""
    x = np.asarray(x, dtype=np.float64)
    prec = np.eye(lgv.latent_dim) + lgv.W.T @ lgv.W / lgv.obs_var
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise ValueError("posterior precision is not positive definite") from exc
    inv_chol = np.linalg.solve(chol, np.eye(lgv.latent_dim))
    cov = inv_chol.T @ inv_chol
    cov = 0.5 * (cov + cov.T)
    return FullGaussian(cov @ lgv.W.T @ (x - lgv.b) / lgv.obs_var, cov)


def kl_full_gaussians(a: FullGaussian, b: FullGaussian) -> float:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    try:
        lb = np.linalg.cholesky(b.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("second covariance is singular") from exc
    m = np.linalg.solve(lb, np.column_stack([a._chol, b.mean - a.mean]))
    trace = np.sum(m[:, :-1] ** 2)
    maha = np.sum(m[:, -1] ** 2)
    logdet = 2.0 * (np.sum(np.log(np.diag(lb))) - np.sum(np.log(np.diag(a._chol))))
    return float(max(0.5 * (trace + maha - a.dim + logdet), 0.0))


# --- total variation ---------------------------------------------------------------

@dataclass(frozen=True)
class TvEstimate:
    value: float
    stderr: float = 0.0
    method: str = "quad"


def _abs_diff_mass(c1, m1, s1, c2, m2, s2):
    """Integral over the line of |c1 N(y; m1, s1^2) - c2 N(y; m2, s2^2)|, exactly.

    The two scaled densities cross at the real roots of a quadratic; between
    crossings the sign is fixed, so the integral is a sum of normal CDF terms.
    """
    if c1 <= 0.0 or c2 <= 0.0:
        return abs(c1) + abs(c2)
    a = 0.5 / s2 ** 2 - 0.5 / s1 ** 2
    b = m1 / s1 ** 2 - m2 / s2 ** 2
    c = 0.5 * m2 ** 2 / s2 ** 2 - 0.5 * m1 ** 2 / s1 ** 2 + math.log(c1 * s2 / (c2 * s1))
    if abs(a) <= 1e-14 * (0.5 / s1 ** 2 + 0.5 / s2 ** 2):
        roots = [] if b == 0.0 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc <= 0.0:
            roots = []
        else:
            sq = math.sqrt(disc)
            q = -0.5 * (b + math.copysign(sq, b))
            roots = sorted([q / a, c / q])
    edges = [-math.inf, *roots, math.inf]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        p1 = ndtr((hi - m1) / s1) - ndtr((lo - m1) / s1)
        p2 = ndtr((hi - m2) / s2) - ndtr((lo - m2) / s2)
        total += abs(c1 * p1 - c2 * p2)
    return total


def _conditional(g: FullGaussian, x):
    """Marginal density of coordinate 0 at x and the conditional law of coordinate 1."""
    sxx, sxy, syy = g.cov[0, 0], g.cov[0, 1], g.cov[1, 1]
    marg = math.exp(-0.5 * (x - g.mean[0]) ** 2 / sxx) / math.sqrt(2 * math.pi * sxx)
    return marg, g.mean[1] + sxy / sxx * (x - g.mean[0]), math.sqrt(syy - sxy * sxy / sxx)


def _tv_quad(a: FullGaussian, b: FullGaussian) -> float:
    if a.dim == 1:
        return 0.5 * _abs_diff_mass(1.0, a.mean[0], math.sqrt(a.cov[0, 0]),
                                    1.0, b.mean[0], math.sqrt(b.cov[0, 0]))

    def inner(x):
        ca, ma, sa = _conditional(a, x)
        cb, mb, sb = _conditional(b, x)
        return _abs_diff_mass(ca, ma, sa, cb, mb, sb)

    sa, sb = math.sqrt(a.cov[0, 0]), math.sqrt(b.cov[0, 0])
    lo = min(a.mean[0] - 8 * sa, b.mean[0] - 8 * sb)
    hi = max(a.mean[0] + 8 * sa, b.mean[0] + 8 * sb)
    val, _ = integrate.quad(inner, lo, hi, limit=400, epsabs=1e-13, epsrel=1e-11,
                            points=[a.mean[0], b.mean[0]])
    return min(max(0.5 * val, 0.0), 1.0)


def _tv_monte_carlo(a, b, n_samples, rng):
    """TV = E_m[|a - b| / (a + b)] under the even mixture m, sampled half from each."""
    half = max(n_samples // 2, 1)
    parts = []
    for src in (a, b):
        z = src.sample(half, rng)
        parts.append(np.abs(np.tanh(0.5 * (a.logpdf(z) - b.logpdf(z)))))
    value = 0.5 * (parts[0].mean() + parts[1].mean())
    stderr = 0.5 * math.sqrt(parts[0].var(ddof=1) / half + parts[1].var(ddof=1) / half) if half > 1 else math.inf
    return value, stderr


def tv_gaussians(a: FullGaussian, b: FullGaussian, method: str = "quad", *,
                 n_samples: int = 100_000, rng=None) -> TvEstimate:
    """Total variation distance between two Gaussians.

    ``quad`` (alias ``grid``): exact crossing-point integral in 1-D; in 2-D the
    inner coordinate is integrated exactly and the outer one by adaptive
    quadrature over +-8 standard deviations.  ``mc``: Monte Carlo in any
    dimension, with a standard error.
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if method in ("quad", "grid"):
        if a.dim > 2:
            raise ValueError("quadrature TV supports at most 2 dimensions; use method='mc'")
        return TvEstimate(_tv_quad(a, b), 0.0, "quad")
    if method == "mc":
        rng = np.random.default_rng(0) if rng is None else rng
        value, stderr = _tv_monte_carlo(a, b, n_samples, rng)
        return TvEstimate(value, stderr, "mc")
    raise ValueError(f"unknown TV method {method!r}")


# --- histogram TV against closed-form densities ---------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


@dataclass
class Binning:
    """Regular bins over a box, plus one implicit bin for everything outside it."""

    edges: list  # one edge array per dimension

    @classmethod
    def covering(cls, gaussians, dim, half_width=6.0):
        counts = {1: 512, 2: 64}
        if dim not in counts:
            raise ValueError("histogram TV supports 1 or 2 dimensions")
        edges = []
        for k in range(dim):
            lo = min(g.mean[k] - half_width * math.sqrt(g.cov[k, k]) for g in gaussians)
            hi = max(g.mean[k] + half_width * math.sqrt(g.cov[k, k]) for g in gaussians)
            edges.append(np.linspace(lo, hi, counts[dim] + 1))
        return cls(edges)

    def empirical(self, samples) -> np.ndarray:
        """Bin frequencies; the last entry is the share of samples outside the box."""
        samples = np.atleast_2d(samples)
        if samples.shape[0] == 1 and len(self.edges) == 1:
            samples = samples.T
        counts, _ = np.histogramdd(samples, bins=self.edges)
        inside = counts.reshape(-1) / samples.shape[0]
        return np.append(inside, max(1.0 - inside.sum(), 0.0))

    def exact(self, g: FullGaussian) -> np.ndarray:
        """Bin probabilities of a Gaussian (product Gauss-Legendre rule inside each bin)."""
        if len(self.edges) == 1:
            e = self.edges[0]
            cdf = ndtr((e - g.mean[0]) / math.sqrt(g.cov[0, 0]))
            inside = np.diff(cdf)
        else:
            inside = self._exact_2d(g)
        return np.append(inside, max(1.0 - inside.sum(), 0.0))

    def _exact_2d(self, g):
        ex, ey = self.edges
        hx, hy = np.diff(ex)[0], np.diff(ey)[0]
        cx = 0.5 * (ex[:-1] + ex[1:])
        cy = 0.5 * (ey[:-1] + ey[1:])
        px = (cx[:, None] + 0.5 * hx * _GL_NODES[None, :]).reshape(-1)
        py = (cy[:, None] + 0.5 * hy * _GL_NODES[None, :]).reshape(-1)
        zz = np.stack(np.meshgrid(px, py, indexing="ij"), axis=-1).reshape(-1, 2)
        dens = np.exp(g.logpdf(zz)).reshape(cx.size, _GL_NODES.size, cy.size, _GL_NODES.size)
        w = _GL_WEIGHTS
        return (0.25 * hx * hy * np.einsum("ajbk,j,k->ab", dens, w, w)).reshape(-1)


def histogram_tv(p_hat: np.ndarray, q: np.ndarray, n_samples: int) -> TvEstimate:
    """TV between binned distributions; ``p_hat`` is empirical from ``n_samples`` draws.

    The standard error is the first-order bound 1/2 sum sqrt(p(1-p)/n).
    """
    value = 0.5 * float(np.sum(np.abs(p_hat - q)))
    se = 0.5 * float(np.sum(np.sqrt(p_hat * (1.0 - p_hat) / n_samples)))
    return TvEstimate(value, se, "histogram")


# --- checks ------------------------------------------------------------------------

@dataclass
class Lemma1Result:
    radii: np.ndarray
    kls: np.ndarray
    slope: float
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        """KL = o(r) on a power law means a fitted exponent above 1."""
        return not self.degenerate and self.slope > 1.0


def lemma1_scaling_check(lgv: LinearGaussianVae, x, direction, radii) -> Lemma1Result:
    """Fit the log-log slope of KL[p(z|x) || p(z|x + r d)] against r."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    base = exact_posterior(lgv, x)
    if norm == 0.0:
        return Lemma1Result(radii, np.zeros_like(radii), math.nan, True, ["zero direction: no perturbation"])
    direction = direction / norm
    kls = np.array([kl_full_gaussians(base, exact_posterior(lgv, x + r * direction)) for r in radii])
    notes = []
    keep = kls > 1e-300
    if not np.all(keep):
        notes.append(f"excluded radii with KL below 1e-300: {radii[~keep].tolist()}")
    if keep.sum() < 2:
        return Lemma1Result(radii, kls, math.nan, True, notes + ["fewer than two usable radii"])
    slope = float(np.polyfit(np.log(radii[keep]), np.log(kls[keep]), 1)[0])
    return Lemma1Result(radii, kls, slope, False, notes)


@dataclass
class PinskerReport:
    tv: np.ndarray
    bound: np.ndarray

    @property
    def slack(self) -> np.ndarray:
        return self.bound - self.tv

    @property
    def min_slack(self) -> float:
        return float(np.min(self.slack))

    def passed(self, tolerance: float = 1e-9) -> bool:
        return self.min_slack >= -tolerance


def pinsker_check(pairs, method: str = "quad") -> PinskerReport:
    """TV(a, b) against sqrt(KL(a||b) / 2) for each pair."""
    tv, bound = [], []
    for a, b in pairs:
        tv.append(tv_gaussians(a, b, method).value)
        bound.append(math.sqrt(0.5 * kl_full_gaussians(a, b)))
    return PinskerReport(np.array(tv), np.array(bound))


def random_gaussian_pair(dim: int, rng) -> tuple[FullGaussian, FullGaussian]:
    def one():
        a = rng.normal(size=(dim, dim))
        cov = a @ a.T / dim + rng.uniform(0.1, 1.0) * np.eye(dim)
        return FullGaussian(rng.normal(scale=1.5, size=dim), 0.5 * (cov + cov.T))
    return one(), one()


# --- Theorem 1 --------------------------------------------------------------------

@dataclass(frozen=True)
class LinearEncoder:
    """q(z|x) = N(A x + c, cov): an amortised Gaussian encoder, possibly mis-specified."""

    A: np.ndarray
    c: np.ndarray
    cov: np.ndarray

    def __call__(self, x) -> FullGaussian:
        return FullGaussian(self.A @ np.asarray(x, dtype=np.float64) + self.c, self.cov)


def exact_encoder(lgv: LinearGaussianVae) -> LinearEncoder:
    post = exact_posterior(lgv, lgv.b)  # covariance does not depend on x
    gain = post.cov @ lgv.W.T / lgv.obs_var
    return LinearEncoder(gain, -gain @ lgv.b, post.cov)


class GaussianTarget(Potential):
    """U(z) = -log N(z; mean, cov) for batched chains."""

    def __init__(self, g: FullGaussian):
        self.g = g
        self.prec = np.linalg.inv(g.cov)
        self.prec = 0.5 * (self.prec + self.prec.T)

    def energy_grad(self, z):
        r = z - self.g.mean
        pr = r @ self.prec
        return 0.5 * np.sum(pr * r, axis=1), pr


@dataclass
class Theorem1Row:
    t: int
    lhs: float                  # TV[q^t(.|x_a), q(.|x_r)]
    mcmc_gap: float             # TV[q^t(.|x_a), p(.|x_a)]
    attack_term: float          # sqrt(KL[p(.|x_r) || p(.|x_a)] / 2)
    approx_gap: float           # sqrt(KL[q(.|x_r) || p(.|x_r)] / 2)
    stderr: float               # combined standard error of the two sampled terms

    @property
    def rhs(self) -> float:
        return self.mcmc_gap + self.attack_term + self.approx_gap

    def holds(self, n_se: float = 3.0) -> bool:
        return self.lhs <= self.rhs + n_se * self.stderr


def theorem1_decomposition(lgv: LinearGaussianVae, encoder: LinearEncoder, x_r, x_a,
                           hmc: HmcConfig, n_samples: int = 100_000, t_values=None,
                           rng=None) -> list[Theorem1Row]:
    """Evaluate both sides of the bound for each chain length in ``t_values``.

    ``n_samples`` independent chains start from q(z|x_a) and run HMC on the
    exact posterior p(z|x_a); their states after t steps are samples of
    q^(t)(z|x_a).  Both TV terms involving q^(t) are measured on one shared
    binning against exact bin probabilities, so the binned triangle inequality
    behind the bound holds sample by sample.
    """
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"sample budget {n_samples} is below the minimum of {MIN_SAMPLES}")
    if lgv.latent_dim > 2:
        raise ValueError("the decomposition is estimated for 1- or 2-dimensional latents only")
    rng = np.random.default_rng(0) if rng is None else rng
    t_values = sorted(set(int(t) for t in (t_values if t_values is not None else [hmc.steps])))
    p_a, p_r = exact_posterior(lgv, x_a), exact_posterior(lgv, x_r)
    q_a, q_r = encoder(x_a), encoder(x_r)
    attack_term = math.sqrt(0.5 * kl_full_gaussians(p_r, p_a))
    approx_gap = math.sqrt(0.5 * kl_full_gaussians(q_r, p_r))
    bins = Binning.covering([p_a, p_r, q_a, q_r], lgv.latent_dim)
    prob_qr, prob_pa = bins.exact(q_r), bins.exact(p_a)

    z0 = q_a.sample(n_samples, rng)
    cfg = HmcConfig(max(t_values), hmc.step_size, hmc.leapfrog_steps, hmc.adaptive,
                    hmc.target_acceptance, hmc.adapt_gain)
    trace = run_chain(GaussianTarget(p_a), z0, cfg, rng, record_at=t_values)
    rows = []
    for t in t_values:
        emp = bins.empirical(trace.snapshots[t])
        lhs = histogram_tv(emp, prob_qr, n_samples)
        gap = histogram_tv(emp, prob_pa, n_samples)
        rows.append(Theorem1Row(t, lhs.value, gap.value, attack_term, approx_gap,
                                math.hypot(lhs.stderr, gap.stderr)))
    return rows


@dataclass(frozen=True)
class Theorem1Fixture:
    name: str
    lgv: LinearGaussianVae
    encoder: LinearEncoder
    x_r: np.ndarray
    x_a: np.ndarray


def default_fixtures(radius: float = 0.1) -> list[Theorem1Fixture]:
    """Built-in 1-D and 2-D linear models with a deliberately imperfect encoder."""
    out = []
    for dim, data_dim, seed in ((1, 4, 11), (2, 6, 12)):
        rng = np.random.default_rng(seed)
        lgv = LinearGaussianVae(rng.normal(size=(data_dim, dim)), rng.normal(size=data_dim), 1.0)
        lgv.check_rank()
        exact = exact_encoder(lgv)
        # shrunken gain, shifted offset and inflated diagonal variance
        enc = LinearEncoder(0.8 * exact.A, exact.c + 0.3, np.diag(2.0 * np.diag(exact.cov)))
        x_r = lgv.W @ rng.normal(size=dim) + lgv.b + rng.normal(size=data_dim)
        x_a = x_r + radius * np.sign(rng.normal(size=data_dim))
        out.append(Theorem1Fixture(f"linear-{dim}d", lgv, enc, x_r, x_a))
    return out
