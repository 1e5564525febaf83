"""Robustness measurements: (MS-)SSIM, reconstruction error, latent classifier accuracy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .defence import HmcConfig, defend, encoder_sample
from .vae import VaeModel, decode, encode

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03
MIN_SCALE_SIDE = 7


# --- image similarity --------------------------------------------------------------

def _as_images(x, side=None):
    """Return a float array of shape (N, s, s) and whether the input was a single image.

    Without ``side``: a vector is one flattened image, a square 2-D array is one
    image, any other 2-D array is a batch of flattened images, 3-D is a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if side is not None:
        x = x.reshape(*x.shape[:-1], side, side)
    elif x.ndim == 1 or (x.ndim == 2 and x.shape[0] != x.shape[1]):
        s = math.isqrt(x.shape[-1])
        if s * s != x.shape[-1]:
            raise ValueError(f"cannot infer a square image side from width {x.shape[-1]}")
        x = x.reshape(*x.shape[:-1], s, s)
    single = x.ndim == 2
    return (x[None] if single else x), single


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def _filter(img, w):
    """Separable 'valid' correlation over the last two axes."""
    rows = sliding_window_view(img, w.size, axis=-1) @ w
    return sliding_window_view(rows, w.size, axis=-2) @ w


def _window_for(side, window_size):
    size = min(window_size, side if side % 2 else side - 1)
    if size < 1:
        raise ValueError(f"image side {side} is too small for SSIM")
    return size


def _ssim_terms(x, y, w, c1, c2):
    mx, my = _filter(x, w), _filter(y, w)
    sxx = _filter(x * x, w) - mx * mx
    syy = _filter(y * y, w) - my * my
    sxy = _filter(x * y, w) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim(x, y, window_size: int = 11, sigma: float = 1.5, constants=(K1, K2), side=None):
    """Mean local SSIM for images in [0, 1]; the window shrinks to fit small images."""
    xs, single = _as_images(x, side)
    ys, _ = _as_images(y, side)
    if xs.shape != ys.shape:
        raise ValueError(f"image shapes differ: {xs.shape} vs {ys.shape}")
    w = gaussian_window(_window_for(xs.shape[-1], window_size), sigma)
    lum, cs = _ssim_terms(xs, ys, w, constants[0] ** 2, constants[1] ** 2)
    out = np.mean(lum * cs, axis=(-2, -1))
    return float(out[0]) if single else out


def msssim_levels(side: int, levels: int = 5) -> int:
    """Largest level count (<= ``levels``) whose coarsest scale keeps MIN_SCALE_SIDE pixels."""
    n = 1
    while n < levels and side // 2 ** n >= MIN_SCALE_SIDE:
        n += 1
    return n


def _pool2(img):
    s = img.shape[-1] // 2 * 2
    img = img[..., :s, :s]
    return 0.25 * (img[..., ::2, ::2] + img[..., 1::2, ::2] + img[..., ::2, 1::2] + img[..., 1::2, 1::2])


def msssim(x, y, levels: int = 5, window_size: int = 11, sigma: float = 1.5,
           constants=(K1, K2), side=None):
    """Multi-scale SSIM with the standard exponents, renormalised over the usable scales.

    Contrast-structure terms are clamped at zero so the product stays in [0, 1].
    """
    xs, single = _as_images(x, side)
    ys, _ = _as_images(y, side)
    if xs.shape != ys.shape:
        raise ValueError(f"image shapes differ: {xs.shape} vs {ys.shape}")
    n = msssim_levels(xs.shape[-1], levels)
    weights = np.asarray(MSSSIM_WEIGHTS[:n])
    weights = weights / weights.sum()
    coarsest = xs.shape[-1] // 2 ** (n - 1)
    w = gaussian_window(_window_for(coarsest, window_size), sigma)
    c1, c2 = constants[0] ** 2, constants[1] ** 2
    out = np.ones(xs.shape[0])
    for level in range(n):
        lum, cs = _ssim_terms(xs, ys, w, c1, c2)
        cs = np.maximum(np.mean(cs, axis=(-2, -1)), 0.0)
        out *= cs ** weights[level]
        if level == n - 1:
            out *= np.maximum(np.mean(lum, axis=(-2, -1)), 0.0) ** weights[level]
        else:
            xs, ys = _pool2(xs), _pool2(ys)
    out = np.minimum(out, 1.0)
    return float(out[0]) if single else out


def mse(x, y) -> float:
    """Sum of squared differences per image, averaged over images."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean(np.sum((x - y) ** 2, axis=1)))


# --- latent classifier -------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    iterations: int = 2000
    tolerance: float = 1e-7
    l2: float = 1e-4


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (classes, latent_dim)
    bias: np.ndarray    # (classes,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("classifier weight/bias shapes are inconsistent")

    def logits(self, z):
        return np.asarray(z) @ self.weight.T + self.bias

    def predict(self, z):
        return np.argmax(self.logits(z), axis=-1)


def _softmax(a):
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_classifier(latent_means, labels, config: ClassifierConfig = ClassifierConfig(),
                          class_count: int | None = None) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    The step is 1/L with L a bound on the Lipschitz constant of the gradient, so
    the run is deterministic and monotone.  Stops when the gradient's max-norm
    falls below ``config.tolerance``.
    """
    z = np.asarray(latent_means, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to fit a classifier")
    c = int(class_count or y.max() + 1)
    n, d = z.shape
    feats = np.hstack([z, np.ones((n, 1))])
    lip = 0.5 * np.linalg.eigvalsh(feats.T @ feats / n)[-1] + config.l2
    lr = 1.0 / lip
    theta = np.zeros((d + 1, c))
    onehot = np.eye(c)[y]
    for _ in range(config.iterations):
        grad = feats.T @ (_softmax(feats @ theta) - onehot) / n
        grad[:d] += config.l2 * theta[:d]
        if np.max(np.abs(grad)) < config.tolerance:
            break
        theta -= lr * grad
    return LinearClassifier(theta[:d].T.copy(), theta[d].copy())


# --- robustness ---------------------------------------------------------------------

def adversarial_latents(model: VaeModel, x_adv, defence: HmcConfig | None = None, rng=None,
                        sample: bool = False, backend=None):
    """Latents used for the adversarial side: encoder mean, encoder sample, or defended sample."""
    if defence is not None:
        return defend(model, x_adv, defence, rng, backend=backend)[0]
    if sample:
        return encoder_sample(model, x_adv, rng)
    return encode(model, x_adv).mean


def adversarial_accuracy(model: VaeModel, classifier: LinearClassifier, x_refs, x_advs,
                         defence: HmcConfig | None = None, rng=None, *, latents=None,
                         sample: bool = False) -> float:
    """Share of pairs whose adversarial latent gets the class predicted for the reference."""
    x_refs = np.atleast_2d(x_refs)
    x_advs = np.atleast_2d(x_advs)
    if x_refs.shape[0] == 0:
        raise ValueError("no pairs to evaluate")
    if latents is None:
        latents = adversarial_latents(model, x_advs, defence, rng, sample)
    anchor = classifier.predict(encode(model, x_refs).mean)
    return float(np.mean(classifier.predict(latents) == anchor))


@dataclass
class RobustnessReport:
    setting: str
    reference_indices: np.ndarray
    msssim: np.ndarray          # reconstruction similarity per pair
    input_msssim: np.ndarray    # similarity of the raw inputs per pair
    sq_error: np.ndarray        # per-pair sum of squared reconstruction differences
    same_class: np.ndarray      # per-pair classifier agreement
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any((self.msssim < 0) | (self.msssim > 1)):
            raise ValueError("MS-SSIM values must lie in [0, 1]")

    @property
    def msssim_mean(self) -> float:
        return float(np.mean(self.msssim))

    @property
    def msssim_std(self) -> float:
        return float(np.std(self.msssim))

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.same_class))

    @property
    def mse(self) -> float:
        return float(np.mean(self.sq_error))

    def summary(self) -> str:
        return f"{self.msssim_mean:.2f} ({self.msssim_std:.2f})"


def robustness_report(model: VaeModel, classifier: LinearClassifier, x_refs, x_advs, *,
                      defence: HmcConfig | None = None, rng=None, sample_latents: bool = False,
                      reference_indices=None, setting: str | None = None, latents=None,
                      config: dict | None = None) -> RobustnessReport:
    """Compare reconstructions of references (encoder mean) with those of adversarial inputs.

    The adversarial latent is the encoder mean, an encoder sample when
    ``sample_latents`` is set, or the defended latent when ``defence`` is given
    (``latents`` overrides all three).
    """
    x_refs = np.atleast_2d(np.asarray(x_refs, dtype=np.float64))
    x_advs = np.atleast_2d(np.asarray(x_advs, dtype=np.float64))
    if x_refs.shape != x_advs.shape or x_refs.shape[0] == 0:
        raise ValueError("need matching, non-empty reference and adversarial sets")
    if latents is None:
        latents = adversarial_latents(model, x_advs, defence, rng, sample_latents)
    ref_mean = encode(model, x_refs).mean
    rec_ref = decode(model, ref_mean)
    rec_adv = decode(model, latents)
    same = classifier.predict(latents) == classifier.predict(ref_mean)
    if setting is None:
        setting = "none" if defence is None else f"hmc-{defence.steps}"
    idx = np.arange(len(x_refs)) if reference_indices is None else np.asarray(reference_indices)
    side = math.isqrt(x_refs.shape[1])
    return RobustnessReport(setting, idx, msssim(rec_ref, rec_adv, side=side),
                            msssim(x_refs, x_advs, side=side),
                            np.sum((rec_ref - rec_adv) ** 2, axis=1), same, dict(config or {}))


REPORT_COLUMNS = ("setting", "row", "reference_index", "msssim", "input_msssim", "mse",
                  "same_class", "msssim_std", "formatted")


def report_rows(report: RobustnessReport):
    """Pair rows followed by one summary row; floats are written with repr (lossless)."""
    for i, ref in enumerate(report.reference_indices):
        yield {"setting": report.setting, "row": str(i), "reference_index": str(int(ref)),
               "msssim": repr(float(report.msssim[i])),
               "input_msssim": repr(float(report.input_msssim[i])),
               "mse": repr(float(report.sq_error[i])),
               "same_class": str(int(report.same_class[i])), "msssim_std": "", "formatted": ""}
    yield {"setting": report.setting, "row": "summary", "reference_index": "",
           "msssim": repr(report.msssim_mean), "input_msssim": repr(float(np.mean(report.input_msssim))),
           "mse": repr(report.mse), "same_class": repr(report.accuracy),
           "msssim_std": repr(report.msssim_std), "formatted": report.summary()}


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerows(report_rows(rep))


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
