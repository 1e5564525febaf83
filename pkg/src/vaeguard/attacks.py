"""Additive L-infinity attacks on the encoder, found by projected gradient ascent.

Objectives compare the posterior of the perturbed input A = q(z|x_ref + eps)
against a fixed B (the reference posterior, or a target's posterior for the
supervised variant):

    skl            KL(A||B) + KL(B||A)
    kl-forward     KL(A||B)
    kl-reverse     KL(B||A)
    l2-mean        ||mean_A - mean_B||^2
    classifier-ce  cross-entropy of a latent classifier on mean_A against the
                   class it predicts for the reference
    supervised-kl  -KL(A||q(z|x_target))
    mcmc-aware     ||z_a - z_r||^2 with both latents pushed through the HMC defence

All restarts (and, in :func:`pgd_attack_many`, all references) run as one batch.
Rows never interact, so the summed objective's gradient is the per-row gradient.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .defence import HmcConfig, VaePotential, adapt_step_size, encoder_sample, run_chain
from .numerics import Graph, Node, backward, forward_eval
from .vae import (BERNOULLI, PROB_EPS, GaussianParams, VaeModel, encode,
                  encode_graph, param_nodes, reparameterize_graph)

OBJECTIVES = ("skl", "kl-forward", "kl-reverse", "l2-mean", "classifier-ce",
              "supervised-kl", "mcmc-aware")

ARCHIVE_MAGIC = b"ATK1"
ARCHIVE_VERSION = 1
_RECORD_HEAD = struct.Struct("<IIBBBxIIddd")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    radius: float
    steps: int = 50
    step_size: float = 1.0
    init_std: float = 0.2
    restarts: int = 10
    objective: str = "skl"
    box: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if not self.step_size > 0 or self.init_std < 0:
            raise ValueError("step_size must be positive and init_std non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.norm != "linf":
            raise ValueError("only the L-infinity norm is supported")


@dataclass
class AdversarialExample:
    """One attack outcome.  ``epsilon`` is the effective perturbation x_adv - x_ref."""

    x_ref: np.ndarray
    epsilon: np.ndarray
    x_adv: np.ndarray
    objective_trace: list
    config: AttackConfig
    objective: float = float("nan")
    restart: int = 0
    reference_index: int = -1
    best: bool = True

    def __post_init__(self):
        if np.max(np.abs(self.epsilon), initial=0.0) > self.config.radius + 1e-9:
            raise ValueError("perturbation exceeds the attack radius")
        if np.any(self.x_adv < 0.0) or np.any(self.x_adv > 1.0):
            raise ValueError("adversarial input leaves [0, 1]")
        if not np.allclose(self.x_adv, np.clip(self.x_ref + self.epsilon, 0.0, 1.0), rtol=0, atol=1e-12):
            raise ValueError("x_adv disagrees with x_ref + epsilon")


def _make_example(x_ref, eps, trace, config, objective, restart, ref_index, best):
    x_adv = np.clip(x_ref + eps, 0.0, 1.0)
    return AdversarialExample(x_ref.copy(), x_adv - x_ref, x_adv, list(trace), config,
                              float(objective), restart, ref_index, best)


# --- objectives ------------------------------------------------------------------

def gaussian_kl(a: GaussianParams, b: GaussianParams):
    """KL(a||b) between diagonal Gaussians; one value per row."""
    d = a.log_var - b.log_var
    return 0.5 * np.sum(np.expm1(d) - d + (a.mean - b.mean) ** 2 / np.exp(b.log_var), axis=-1)


def symmetric_kl(a: GaussianParams, b: GaussianParams):
    if np.shape(a.mean) != np.shape(b.mean):
        raise ValueError("posteriors differ in dimension")
    return gaussian_kl(a, b) + gaussian_kl(b, a)


def _kl_graph(g: Graph, ma, lva, mb, lvb) -> Node:
    """Per-row KL(a||b); any argument may be a Node or a constant array."""
    def node(v):
        return v if isinstance(v, Node) else g.const(v)
    ma, lva, mb, lvb = node(ma), node(lva), node(mb), node(lvb)
    ratio = g.mul(g.exp(lva) + g.square(ma - mb), g.exp(-1.0 * lvb))
    return 0.5 * g.sum(lvb - lva + ratio - 1.0, axis=1)


def _log_softmax_at(g: Graph, logits: Node, labels: np.ndarray) -> Node:
    shift = g.const(np.repeat(logits.value.max(axis=1, keepdims=True), logits.shape[1], axis=1))
    lse = g.log(g.sum(g.exp(logits - shift), axis=1)) + g.const(shift.value[:, 0])
    onehot = g.const(np.eye(logits.shape[1])[labels])
    return g.sum(g.mul(onehot, logits), axis=1) - lse


def classifier_logits(classifier, z):
    return np.asarray(z) @ classifier.weight.T + classifier.bias


def _objective_graph(kind, model, x_ref, eps_value, classifier=None, x_target=None, box=True):
    """Graph whose output "obj" holds the per-row objective; input "eps" is differentiable."""
    if kind == "classifier-ce" and classifier is None:
        raise ValueError("classifier-ce needs a classifier")
    if kind == "supervised-kl" and x_target is None:
        raise ValueError("supervised-kl needs x_target")
    if kind == "mcmc-aware":
        raise ValueError("use mcmc_aware_attack for the mcmc-aware objective")
    g = Graph()
    p = param_nodes(g, model, requires_grad=False)
    eps = g.input("eps", eps_value)
    x = g.const(x_ref) + eps
    if box:
        # already feasible after projection; clip keeps the objective defined off the box too
        x = g.clip(x, 0.0, 1.0)
    ma, lva = encode_graph(g, model, p, x)
    ref = encode(model, x_ref)
    if kind == "skl":
        obj = _kl_graph(g, ma, lva, ref.mean, ref.log_var) + _kl_graph(g, ref.mean, ref.log_var, ma, lva)
    elif kind == "kl-forward":
        obj = _kl_graph(g, ma, lva, ref.mean, ref.log_var)
    elif kind == "kl-reverse":
        obj = _kl_graph(g, ref.mean, ref.log_var, ma, lva)
    elif kind == "l2-mean":
        obj = g.sum(g.square(ma - g.const(ref.mean)), axis=1)
    elif kind == "classifier-ce":
        labels = np.argmax(classifier_logits(classifier, ref.mean), axis=1)
        logits = g.bias_add(g.matmul(ma, g.const(classifier.weight.T)), g.const(classifier.bias))
        obj = -1.0 * _log_softmax_at(g, logits, labels)
    elif kind == "supervised-kl":
        tgt = encode(model, np.broadcast_to(x_target, np.shape(x_ref)))
        obj = -1.0 * _kl_graph(g, ma, lva, tgt.mean, tgt.log_var)
    else:
        raise ValueError(f"unknown objective {kind!r}")
    g.output("obj", obj)
    return g


def attack_objective(kind: str, model: VaeModel, x_ref, epsilon, classifier=None, x_target=None,
                     box: bool = True):
    """Objective value (to be maximised); batched inputs give one value per row."""
    x_ref = np.asarray(x_ref, dtype=np.float64)
    single = x_ref.ndim == 1
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), x_ref.shape)
    g = _objective_graph(kind, model, np.atleast_2d(x_ref), np.atleast_2d(eps), classifier,
                         None if x_target is None else np.atleast_2d(x_target), box)
    out = g.outputs["obj"].value
    return float(out[0]) if single else out.copy()


def objective_gradient(kind, model, x_ref, epsilon, classifier=None, x_target=None, box=True):
    """(objective per row, d objective / d epsilon) for a batch."""
    g = _objective_graph(kind, model, np.atleast_2d(x_ref), np.atleast_2d(epsilon), classifier,
                         None if x_target is None else np.atleast_2d(x_target), box)
    obj = g.outputs["obj"].value.copy()
    return obj, backward(g, np.ones_like(obj))["eps"]


def project(epsilon, radius: float, x_ref, box: bool = True):
    """Clamp to the L-infinity ball, then (optionally) so that x_ref + eps lies in [0, 1]."""
    eps = np.clip(epsilon, -radius, radius)
    if box:
        eps = np.clip(eps, -x_ref, 1.0 - x_ref)
    return eps


# --- PGD ---------------------------------------------------------------------------

def _pgd_batch(grad_fn, x_rows, eps0, config):
    """Projected gradient ascent on independent rows; keeps each row's best iterate."""
    eps = project(eps0, config.radius, x_rows, config.box)
    n = x_rows.shape[0]
    traces = np.empty((n, config.steps + 1))
    best = np.full(n, -np.inf)
    best_eps = eps.copy()
    for step in range(config.steps + 1):
        try:
            obj, grad = grad_fn(eps, step)
        except FloatingPointError as exc:
            raise AttackError(f"non-finite objective or gradient at step {step}") from exc
        if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(grad))):
            raise AttackError(f"non-finite objective or gradient at step {step}")
        traces[:, step] = obj
        better = obj > best
        best = np.where(better, obj, best)
        best_eps[better] = eps[better]
        if step < config.steps:
            eps = project(eps + config.step_size * grad, config.radius, x_rows, config.box)
    return best_eps, best, traces


def _init_noise(config, dim, seed):
    return np.random.default_rng(seed).normal(0.0, config.init_std, (config.restarts, dim)) \
        if config.init_std > 0 else np.zeros((config.restarts, dim))


def _select(x_refs, eps, best, traces, config, ref_indices):
    """Split batched rows back into per-reference restart lists; mark the best restart."""
    r = config.restarts
    out = []
    for i, x_ref in enumerate(x_refs):
        rows = slice(i * r, (i + 1) * r)
        winner = int(np.argmax(best[rows]))  # first maximum: lowest restart index wins ties
        out.append([_make_example(x_ref, eps[rows][k], traces[rows][k], config, best[rows][k],
                                  k, ref_indices[i], k == winner) for k in range(r)])
    return out


def pgd_attack_many(model: VaeModel, x_refs, config: AttackConfig, seeds, *, classifier=None,
                    x_targets=None, ref_indices=None) -> list[list[AdversarialExample]]:
    """Attack every row of ``x_refs``; returns, per reference, all restarts in order.

    Reference i draws its initial perturbations from ``default_rng(seeds[i])``.
    Exactly one example per reference has ``best=True``.
    """
    x_refs = np.atleast_2d(np.asarray(x_refs, dtype=np.float64))
    n, dim = x_refs.shape
    r = config.restarts
    ref_indices = list(range(n)) if ref_indices is None else list(ref_indices)
    x_rows = np.repeat(x_refs, r, axis=0)
    t_rows = None if x_targets is None else np.repeat(np.atleast_2d(x_targets), r, axis=0)
    eps0 = np.concatenate([_init_noise(config, dim, s) for s in seeds])
    graph = _objective_graph(config.objective, model, x_rows, eps0, classifier, t_rows, config.box)

    def grad_fn(eps, step):
        obj = forward_eval(graph, {"eps": eps})["obj"].copy()
        return obj, backward(graph, np.ones_like(obj))["eps"]

    eps, best, traces = _pgd_batch(grad_fn, x_rows, eps0, config)
    return _select(x_refs, eps, best, traces, config, ref_indices)


def pgd_attack(model: VaeModel, x_ref, config: AttackConfig, seed, *, classifier=None,
               x_target=None, return_all=False):
    """PGD with random restarts on one reference; returns the best restart."""
    runs = pgd_attack_many(model, x_ref, config, [seed], classifier=classifier,
                           x_targets=x_target)[0]
    best = next(ex for ex in runs if ex.best)
    return (best, runs) if return_all else best


# --- attacking through the defence ------------------------------------------------

def _grad_u_graph(g: Graph, model: VaeModel, z: Node, x: Node) -> tuple[Node, np.ndarray]:
    """grad_z U(z; x) written out in primitives, so it can itself be differentiated.

    Returns the gradient node and the per-row potential value (a constant).
    """
    ws = [w for w, _ in model.decoder]
    hs = []
    h = z
    for w, b in model.decoder[:-1]:
        h = g.tanh(g.bias_add(g.matmul(h, g.const(w)), g.const(b)))
        hs.append(h)
    w, b = model.decoder[-1]
    logits = g.bias_add(g.matmul(h, g.const(w)), g.const(b))
    if model.decoder_family == BERNOULLI:
        prob = g.sigmoid(logits)
        pv = prob.value
        inside = g.const(((pv >= PROB_EPS) & (pv <= 1.0 - PROB_EPS)).astype(np.float64))
        delta = g.mul(prob - x, inside)
        pc = np.clip(pv, PROB_EPS, 1.0 - PROB_EPS)
        ll = np.sum(x.value * np.log(pc) + (1.0 - x.value) * np.log1p(-pc), axis=1)
    else:
        delta = logits - x
        ll = np.sum(-0.5 * np.log(2 * np.pi) - 0.5 * (x.value - logits.value) ** 2, axis=1)
    energy = -ll + 0.5 * np.sum(z.value ** 2, axis=1) + 0.5 * z.shape[1] * np.log(2 * np.pi)
    grad = g.matmul(delta, g.const(ws[-1].T))
    for i in range(len(ws) - 2, -1, -1):
        grad = g.matmul(g.mul(grad, 1.0 - g.square(hs[i])), g.const(ws[i].T))
    return grad + z, energy


def _hmc_graph(g, model, z, x, config: HmcConfig, rng, straight_through=True):
    """Unrolled HMC chain inside the graph.  The Metropolis decision is evaluated
    on the forward values and enters as a constant 0/1 mask."""
    b = z.shape[0]
    eta = np.full(b, float(config.step_size))
    grad, energy = _grad_u_graph(g, model, z, x)
    for _ in range(config.steps):
        p0 = rng.standard_normal(z.shape)
        u = rng.uniform(size=b)
        half = g.const(np.repeat(0.5 * eta[:, None], z.shape[1], axis=1))
        full = g.const(np.repeat(eta[:, None], z.shape[1], axis=1))
        p = g.const(p0)
        zc, gc = z, grad
        for _ in range(config.leapfrog_steps):
            p = p - g.mul(half, gc)
            zc = zc + g.mul(full, p)
            gc, e1 = _grad_u_graph(g, model, zc, x)
            p = p - g.mul(half, gc)
        with np.errstate(all="ignore"):
            h0 = energy + 0.5 * np.sum(p0 * p0, axis=1)
            h1 = e1 + 0.5 * np.sum(p.value * p.value, axis=1)
            alpha = np.where(np.isfinite(h1), np.minimum(1.0, np.exp(np.minimum(h0 - h1, 0.0))), 0.0)
        accept = np.ones(b, dtype=bool) if not straight_through else (u < alpha)
        mask = g.const(np.repeat(accept[:, None].astype(np.float64), z.shape[1], axis=1))
        z = g.mul(mask, zc) + g.mul(1.0 - mask, z)
        grad = g.mul(mask, gc) + g.mul(1.0 - mask, grad)
        energy = np.where(accept, e1, energy)
        if config.adaptive:
            eta = adapt_step_size(eta, alpha, config.target_acceptance, config.adapt_gain)
    return z


def _defended_reference(model, x_rows, config, rng):
    """z_r: the defence applied to the clean inputs (no gradient needed)."""
    z0 = encoder_sample(model, x_rows, rng)
    if config.steps == 0:
        return z0
    return run_chain(VaePotential(model, x_rows), z0, config, rng).z_final


def mcmc_aware_attack_many(model: VaeModel, hmc_config: HmcConfig, x_refs, config: AttackConfig,
                           seeds, *, straight_through: bool = True, ref_indices=None):
    """Maximise ||z_a - z_r||^2 where both latents come from encoder + HMC chain.

    Fresh chain noise is drawn at every PGD step.  ``straight_through`` treats the
    Metropolis outcome as a constant mask on the chosen path; with it off every
    proposal is accepted while attacking.
    """
    x_refs = np.atleast_2d(np.asarray(x_refs, dtype=np.float64))
    n, dim = x_refs.shape
    r = config.restarts
    ref_indices = list(range(n)) if ref_indices is None else list(ref_indices)
    x_rows = np.repeat(x_refs, r, axis=0)
    eps0 = np.concatenate([_init_noise(config, dim, s) for s in seeds])
    chain_rng = np.random.default_rng([int(s) for s in seeds] + [0x4D43])

    def grad_fn(eps, step):
        z_r = _defended_reference(model, x_rows, hmc_config, chain_rng)
        g = Graph()
        p = param_nodes(g, model, requires_grad=False)
        e = g.input("eps", eps)
        x = g.const(x_rows) + e
        if config.box:
            x = g.clip(x, 0.0, 1.0)
        mean, log_var = encode_graph(g, model, p, x)
        z0 = reparameterize_graph(g, mean, log_var, chain_rng.standard_normal(mean.shape))
        z_a = _hmc_graph(g, model, z0, x, hmc_config, chain_rng, straight_through)
        obj = g.sum(g.square(z_a - g.const(z_r)), axis=1)
        g.output("obj", obj)
        return obj.value.copy(), backward(g, np.ones(obj.shape))["eps"]

    mcfg = replace(config, objective="mcmc-aware")
    eps, best, traces = _pgd_batch(grad_fn, x_rows, eps0, mcfg)
    return _select(x_refs, eps, best, traces, mcfg, ref_indices)


def mcmc_aware_attack(model: VaeModel, hmc_config: HmcConfig, x_ref, config: AttackConfig, seed,
                      *, straight_through: bool = True, return_all=False):
    runs = mcmc_aware_attack_many(model, hmc_config, x_ref, config, [seed],
                                  straight_through=straight_through)[0]
    best = next(ex for ex in runs if ex.best)
    return (best, runs) if return_all else best


# --- archive -----------------------------------------------------------------------

def write_archive(path, examples, config_hash: str = "") -> None:
    """Fixed-layout little-endian ATK1 archive.

    Header: magic, u32 version, u32 record count, u32 dimension, 64 bytes of
    ASCII config hash (zero padded).  Record: u32 reference index, u32 restart,
    u8 best flag, u8 objective code, u8 box flag, pad byte, u32 steps,
    u32 restarts, f64 radius, f64 step size, f64 init std, then the perturbation
    as f64 values and the final objective as f64.
    """
    examples = list(examples)
    dim = examples[0].epsilon.size if examples else 0
    tag = config_hash.encode("ascii")
    if len(tag) > 64:
        raise ValueError("config hash longer than 64 characters")
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<III", ARCHIVE_VERSION, len(examples), dim))
    buf.write(tag.ljust(64, b"\0"))
    for ex in examples:
        c = ex.config
        if ex.epsilon.size != dim:
            raise ValueError("all records in an archive must share one dimension")
        buf.write(_RECORD_HEAD.pack(ex.reference_index, ex.restart, int(ex.best),
                                    OBJECTIVES.index(c.objective), int(c.box), c.steps,
                                    c.restarts, c.radius, c.step_size, c.init_std))
        buf.write(np.ascontiguousarray(ex.epsilon, dtype="<f8").tobytes())
        buf.write(struct.pack("<d", ex.objective))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class ArchiveRecord:
    reference_index: int
    restart: int
    best: bool
    config: AttackConfig
    epsilon: np.ndarray
    objective: float


@dataclass
class Archive:
    config_hash: str
    records: list = field(default_factory=list)

    def best(self) -> list[ArchiveRecord]:
        return [r for r in self.records if r.best]


def read_archive(path) -> Archive:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not an ATK1 archive")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    if version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    tag = raw[16:80].rstrip(b"\0").decode("ascii")
    off = 80
    size = _RECORD_HEAD.size + 8 * dim + 8
    if len(raw) != off + count * size:
        raise ValueError(f"{path}: archive length does not match its header")
    out = Archive(tag)
    for _ in range(count):
        ref, restart, best, code, box, steps, restarts, radius, lr, std = \
            _RECORD_HEAD.unpack_from(raw, off)
        off += _RECORD_HEAD.size
        eps = np.frombuffer(raw, "<f8", dim, off).astype(np.float64)
        off += 8 * dim
        (obj,) = struct.unpack_from("<d", raw, off)
        off += 8
        cfg = AttackConfig(radius, steps, lr, std, restarts, OBJECTIVES[code], bool(box))
        out.records.append(ArchiveRecord(ref, restart, bool(best), cfg, eps, obj))
    return out


def example_from_record(record: ArchiveRecord, x_ref) -> AdversarialExample:
    x_ref = np.asarray(x_ref, dtype=np.float64)
    return _make_example(x_ref, record.epsilon, [], record.config, record.objective,
                         record.restart, record.reference_index, record.best)
