"""Gaussian-encoder VAE with a beta-weighted ELBO and an optional total-correlation penalty.

Networks are dense tanh MLPs.  Every evaluation has a plain numpy path (used
for inference and metrics) and a graph path built on
:mod:`vaeguard.numerics` (used wherever gradients are needed).
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .datasets import Dataset, batch_indices
from .numerics import LOG_2PI, Graph, Node, ShapeError, backward, check_finite

logger = logging.getLogger(__name__)

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
FAMILIES = (BERNOULLI, GAUSSIAN)
OBJECTIVES = ("elbo", "tcvae")
PROB_EPS = 1e-7

CHECKPOINT_MAGIC = b"VAEC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian; arrays are (latent_dim,) or batched (B, latent_dim)."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.log_var):
            raise ShapeError(f"mean {np.shape(self.mean)} vs log_var {np.shape(self.log_var)}")
        check_finite(np.asarray(self.log_var), "log_var")

    def __getitem__(self, rows):
        return GaussianParams(self.mean[rows], self.log_var[rows])


Layer = tuple  # (W of shape (in, out), b of shape (out,))


@dataclass
class VaeModel:
    encoder: list
    mean_head: Layer
    logvar_head: Layer
    decoder: list
    beta: float = 1.0
    decoder_family: str = BERNOULLI
    objective: str = "elbo"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.decoder_family not in FAMILIES:
            raise ValueError(f"decoder_family must be one of {FAMILIES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.input_dim != self.decoder[-1][0].shape[1]:
            raise ShapeError("encoder input width differs from decoder output width")

    @property
    def latent_dim(self) -> int:
        return self.mean_head[0].shape[1]

    @property
    def input_dim(self) -> int:
        layers = self.encoder or [self.mean_head]
        return layers[0][0].shape[0]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.encoder):
            out[f"enc{i}.W"], out[f"enc{i}.b"] = w, b
        out["mean.W"], out["mean.b"] = self.mean_head
        out["logvar.W"], out["logvar.b"] = self.logvar_head
        for i, (w, b) in enumerate(self.decoder):
            out[f"dec{i}.W"], out[f"dec{i}.b"] = w, b
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "VaeModel":
        return replace(
            self,
            encoder=[(params[f"enc{i}.W"], params[f"enc{i}.b"]) for i in range(len(self.encoder))],
            mean_head=(params["mean.W"], params["mean.b"]),
            logvar_head=(params["logvar.W"], params["logvar.b"]),
            decoder=[(params[f"dec{i}.W"], params[f"dec{i}.b"]) for i in range(len(self.decoder))],
        )

    def copy(self) -> "VaeModel":
        return self.with_params({k: v.copy() for k, v in self.named_params().items()})


def _dense(rng, n_in, n_out, gain=1.0):
    limit = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, (n_in, n_out)), np.zeros(n_out)


def init_model(input_dim: int, latent_dim: int = 16, hidden=(256, 128), *, beta=1.0,
               decoder_family=BERNOULLI, objective="elbo", seed=0) -> VaeModel:
    """Glorot-uniform initialised model: D -> hidden... -> 2 heads, decoder mirrored."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden]
    encoder = [_dense(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    mean_head = _dense(rng, widths[-1], latent_dim)
    w, b = _dense(rng, widths[-1], latent_dim, gain=0.1)
    dec_widths = [latent_dim, *reversed(hidden), input_dim]
    decoder = [_dense(rng, a, b) for a, b in zip(dec_widths[:-1], dec_widths[1:])]
    return VaeModel(encoder, mean_head, (w, b), decoder, beta, decoder_family, objective)


# --- numpy path ----------------------------------------------------------------

def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"input has width {x.shape[-1]}, model expects {model.input_dim}")
    return x


def encode(model: VaeModel, x) -> GaussianParams:
    h = _check_input(model, x)
    for w, b in model.encoder:
        h = np.tanh(h @ w + b)
    return GaussianParams(h @ model.mean_head[0] + model.mean_head[1],
                          h @ model.logvar_head[0] + model.logvar_head[1])


def reparameterize(params: GaussianParams, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != np.shape(params.mean):
        raise ShapeError(f"noise {noise.shape} vs mean {np.shape(params.mean)}")
    return params.mean + np.exp(0.5 * params.log_var) * noise


def decoder_logits(model: VaeModel, z) -> np.ndarray:
    h = np.asarray(z, dtype=np.float64)
    if h.shape[-1] != model.latent_dim:
        raise ShapeError(f"latent has width {h.shape[-1]}, model expects {model.latent_dim}")
    for w, b in model.decoder[:-1]:
        h = np.tanh(h @ w + b)
    w, b = model.decoder[-1]
    return h @ w + b


def decode(model: VaeModel, z) -> np.ndarray:
    """Per-pixel Bernoulli probabilities, or the Gaussian mean for the gaussian family."""
    a = decoder_logits(model, z)
    if model.decoder_family == BERNOULLI:
        return expit(a)
    return a


def _ll_from_output(family, x, out):
    if family == BERNOULLI:
        p = np.clip(out, PROB_EPS, 1.0 - PROB_EPS)
        return np.sum(x * np.log(p) + (1.0 - x) * np.log1p(-p), axis=-1)
    return np.sum(-0.5 * LOG_2PI - 0.5 * (x - out) ** 2, axis=-1)


def log_likelihood(model: VaeModel, x, z):
    """log p(x|z); summed over pixels, one value per row for batched input."""
    x = _check_input(model, x)
    return _ll_from_output(model.decoder_family, x, decode(model, z))


def kl_to_standard_normal(params: GaussianParams):
    # expm1 keeps exp(v) - 1 - v non-negative when v is tiny
    return 0.5 * np.sum(np.expm1(params.log_var) - params.log_var + params.mean ** 2, axis=-1)


def elbo(model: VaeModel, x, noise):
    q = encode(model, x)
    z = reparameterize(q, noise)
    return log_likelihood(model, x, z) - model.beta * kl_to_standard_normal(q)


def _diag_log_density(z, mean, log_var):
    return -0.5 * (LOG_2PI + log_var + (z - mean) ** 2 / np.exp(log_var))


def tc_penalty(batch_params: GaussianParams, batch_z, dataset_size: int,
               estimator: str = "mws") -> float:
    """Total-correlation estimate from a minibatch of posteriors and their samples.

    ``mws`` is minibatch-weighted sampling; its value carries a constant
    offset of (latent_dim - 1) * log(dataset_size) that does not affect
    gradients.  ``mss`` is minibatch-stratified sampling, which has no such
    offset.
    """
    z = np.asarray(batch_z, dtype=np.float64)
    m = z.shape[0]
    if m < 2:
        raise ValueError("tc_penalty needs a batch of at least 2 samples")
    # [i, j, d] = log q(z_i,d | x_j)
    logq = _diag_log_density(z[:, None, :], batch_params.mean[None], batch_params.log_var[None])
    logw = _log_weights(m, dataset_size, estimator)
    log_qz = logsumexp(logq.sum(axis=2) + logw, axis=1)
    log_prod = logsumexp(logq + logw[:, :, None], axis=1).sum(axis=1)
    return float(np.mean(log_qz - log_prod))


def _log_weights(m, n, estimator):
    if estimator == "mws":
        return np.full((m, m), -math.log(n * m))
    if estimator == "mss":
        if n <= 1 or m <= 1:
            return np.full((m, m), -math.log(m))
        w = np.full((m, m), math.log(n - 1) - math.log(n * (m - 1)))
        np.fill_diagonal(w, -math.log(n))
        return w
    raise ValueError(f"unknown TC estimator {estimator!r}")


# --- graph path -----------------------------------------------------------------

def param_nodes(g: Graph, model: VaeModel, requires_grad=True, prefix="") -> dict[str, Node]:
    return {name: g.input(prefix + name, value, requires_grad=requires_grad)
            for name, value in model.named_params().items()}


def _dense_node(g, h, p, name, act=True):
    out = g.bias_add(g.matmul(h, p[name + ".W"]), p[name + ".b"])
    return g.tanh(out) if act else out


def encode_graph(g: Graph, model: VaeModel, p: dict, x: Node) -> tuple[Node, Node]:
    h = x
    for i in range(len(model.encoder)):
        h = _dense_node(g, h, p, f"enc{i}")
    return _dense_node(g, h, p, "mean", act=False), _dense_node(g, h, p, "logvar", act=False)


def decoder_hidden_graph(g: Graph, model: VaeModel, p: dict, z: Node) -> list[Node]:
    """Hidden activations of the decoder; the last entry is the output pre-activation."""
    hs = []
    h = z
    for i in range(len(model.decoder) - 1):
        h = _dense_node(g, h, p, f"dec{i}")
        hs.append(h)
    hs.append(_dense_node(g, h, p, f"dec{len(model.decoder) - 1}", act=False))
    return hs


def log_likelihood_graph(g: Graph, model: VaeModel, x: Node, logits: Node) -> Node:
    """Per-row log p(x|z) from decoder pre-activations."""
    if model.decoder_family == BERNOULLI:
        prob = g.clip(g.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
        terms = x * g.log(prob) + (1.0 - x) * g.log(1.0 - prob)
    else:
        terms = -0.5 * g.square(x - logits) - 0.5 * LOG_2PI
    return g.sum(terms, axis=-1)


def kl_graph(g: Graph, mean: Node, log_var: Node) -> Node:
    return 0.5 * g.sum(g.exp(log_var) + g.square(mean) - 1.0 - log_var, axis=-1)


def reparameterize_graph(g: Graph, mean: Node, log_var: Node, noise) -> Node:
    return mean + g.mul(g.exp(0.5 * log_var), g.const(noise))


def tc_graph(g: Graph, mean: Node, log_var: Node, z: Node, dataset_size: int,
             estimator="mws") -> Node:
    """Graph form of :func:`tc_penalty` built from selection matmuls (no broadcasting)."""
    m, d = z.shape
    # rows of pair space: (i, j) -> i * m + j
    sel_i = g.const(np.kron(np.eye(m), np.ones((m, 1))))   # picks z_i
    sel_j = g.const(np.kron(np.ones((m, 1)), np.eye(m)))   # picks x_j
    zi = g.matmul(sel_i, z)
    mj = g.matmul(sel_j, mean)
    lvj = g.matmul(sel_j, log_var)
    logq = -0.5 * (LOG_2PI + lvj + g.mul(g.square(zi - mj), g.exp(-1.0 * lvj)))  # (m*m, d)
    logw = _log_weights(m, dataset_size, estimator).reshape(-1)
    joint = g.sum(logq, axis=1) + g.const(logw)                      # (m*m,)
    marg = logq + g.const(np.repeat(logw[:, None], d, axis=1))       # (m*m, d)
    gather = np.kron(np.eye(m), np.ones((1, m)))                     # (m, m*m) sums over j
    log_qz = _lse_rows(g, joint, gather)                              # (m,)
    log_prod = None
    for k in range(d):
        col = _lse_rows(g, g.matmul(marg, g.const(np.eye(d)[:, k])), gather)
        log_prod = col if log_prod is None else log_prod + col
    return g.sum(log_qz - log_prod) * (1.0 / m)


def _lse_rows(g, flat: Node, gather: np.ndarray) -> Node:
    """log sum_j exp(flat[i*m + j]) for every i, stabilised by a constant shift."""
    m = gather.shape[0]
    vals = flat.value.reshape(m, -1)
    shift = vals.max(axis=1)
    shifted = flat - g.const(np.repeat(shift, vals.shape[1]))
    return g.log(g.matmul(g.const(gather), g.exp(shifted))) + g.const(shift)


def loss_graph(model: VaeModel, x: np.ndarray, noise: np.ndarray, dataset_size: int | None = None,
               estimator="mws"):
    """Mean training loss over a batch, as a graph with every parameter as an input."""
    g = Graph()
    p = param_nodes(g, model)
    xn = g.const(x)
    mean, log_var = encode_graph(g, model, p, xn)
    z = reparameterize_graph(g, mean, log_var, noise)
    ll = log_likelihood_graph(g, model, xn, decoder_hidden_graph(g, model, p, z)[-1])
    kl = kl_graph(g, mean, log_var)
    b = x.shape[0]
    if model.objective == "tcvae":
        loss = g.sum(kl - ll) * (1.0 / b)
        if model.beta != 1.0:
            tc = tc_graph(g, mean, log_var, z, dataset_size or b, estimator)
            loss = loss + (model.beta - 1.0) * tc
    else:
        loss = g.sum(model.beta * kl - ll) * (1.0 / b)
    g.output("loss", loss)
    return g


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 5e-4
    lr_decay_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.lr_decay_patience < 1:
            raise ValueError(f"invalid training configuration: {self}")


@dataclass
class TrainResult:
    model: VaeModel
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)


class Adam:
    def __init__(self, params: dict, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def mean_loss(model: VaeModel, dataset: Dataset, seed: int) -> float:
    """Mean negative beta-ELBO over a dataset with fixed reparameterisation noise."""
    noise = np.random.default_rng(seed).standard_normal((len(dataset), model.latent_dim))
    return float(-np.mean(elbo(model, dataset.images, noise)))


def train(model: VaeModel, dataset: Dataset, config: TrainConfig,
          validation: Dataset | None = None) -> TrainResult:
    """Adam on the (beta-)ELBO or beta-TCVAE loss.  The input model is not modified.

    The learning rate halves when the validation loss (training loss if no
    validation set is given) has not improved for ``lr_decay_patience`` epochs.
    """
    params = {k: v.copy() for k, v in model.named_params().items()}
    opt = Adam(params, config.learning_rate)
    result = TrainResult(model.with_params(params))
    best, stale = math.inf, 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        noise_rng = np.random.default_rng([config.seed, 7, epoch])
        for b, rows in enumerate(batch_indices(len(dataset), config.batch_size, config.seed, epoch)):
            x = dataset.images[rows]
            noise = noise_rng.standard_normal((len(rows), model.latent_dim))
            current = model.with_params(params)
            g = loss_graph(current, x, noise, dataset_size=len(dataset))
            loss = float(g.outputs["loss"].value)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                grads = backward(g, 1.0)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}") from exc
            opt.step(params, grads)
            total += loss * len(rows)
            count += len(rows)
        trained = model.with_params(params)
        result.losses.append(total / count)
        monitor = mean_loss(trained, validation, config.seed) if validation is not None else total / count
        if validation is not None:
            result.val_losses.append(monitor)
        if monitor < best - 1e-12:
            best, stale = monitor, 0
        else:
            stale += 1
            if stale >= config.lr_decay_patience:
                opt.lr *= 0.5
                stale = 0
        result.learning_rates.append(opt.lr)
        logger.info("epoch %d loss %.4f lr %.2e", epoch, result.losses[-1], opt.lr)
    result.model = model.with_params(params)
    return result


# --- likelihood estimation ------------------------------------------------------

def iwae_nll(model: VaeModel, x, k: int, seed: int):
    """Importance-weighted estimate of -log p(x) with ``k`` samples per input."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = _check_input(model, x)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    q = encode(model, x2)
    rng = np.random.default_rng(seed)
    out = np.empty(x2.shape[0])
    for i in range(x2.shape[0]):
        eps = rng.standard_normal((k, model.latent_dim))
        std = np.exp(0.5 * q.log_var[i])
        z = q.mean[i] + std * eps
        log_px_z = log_likelihood(model, np.broadcast_to(x2[i], (k, x2.shape[1])), z)
        log_pz = np.sum(-0.5 * LOG_2PI - 0.5 * z * z, axis=1)
        log_qz = np.sum(_diag_log_density(z, q.mean[i], q.log_var[i]), axis=1)
        out[i] = -(logsumexp(log_px_z + log_pz - log_qz) - math.log(k))
    return float(out[0]) if single else out


# --- checkpoints ----------------------------------------------------------------

def _layers(model):
    return [*model.encoder, model.mean_head, model.logvar_head, *model.decoder]


def save_checkpoint(model: VaeModel, path) -> None:
    """Write the little-endian VAEC checkpoint format."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IId", CHECKPOINT_VERSION, model.latent_dim, float(model.beta)))
    buf.write(struct.pack("<II", FAMILIES.index(model.decoder_family), OBJECTIVES.index(model.objective)))
    layers = _layers(model)
    buf.write(struct.pack("<II", len(model.encoder), len(layers)))
    for w, b in layers:
        rows, cols = w.shape
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a VAEC checkpoint")
    off = 4
    version, latent_dim, beta = struct.unpack_from("<IId", raw, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fam, obj, n_enc, n_layers = struct.unpack_from("<IIII", raw, off)
    off += 16
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        w = np.frombuffer(raw, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64)
        off += 8 * rows * cols
        b = np.frombuffer(raw, "<f8", cols, off).astype(np.float64)
        off += 8 * cols
        layers.append((w, b))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model = VaeModel(layers[:n_enc], layers[n_enc], layers[n_enc + 1], layers[n_enc + 2:],
                     beta, FAMILIES[fam], OBJECTIVES[obj])
    if model.latent_dim != latent_dim:
        raise ValueError(f"{path}: latent_dim header {latent_dim} disagrees with layers")
    return model
