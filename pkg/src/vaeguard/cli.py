"""vaeguard command line: train -> attack -> defend-eval, radius sweeps and theory checks.

Configuration is plain text, one ``section.key = value`` per line, ``#`` starts
a comment.  ``dataset.kind`` is the only required key; everything else has a
default (see ``SCHEMA``).  Command-line overrides go through the same parser.

Seeds.  A single root seed (``seed``) feeds every random stream.  Stage ``s``
with counter ``i`` uses ``numpy.random.default_rng([root, s, i])``; where a
library call wants an integer seed it gets the first 32-bit word of
``SeedSequence([root, s, i])``.  Stage numbers are listed in ``STAGES``.

Every stage writes ``manifest.json`` in its output directory before it starts
and again when it finishes.  Downstream stages refuse artifacts whose recorded
config hash differs from the hash of the current configuration.

Exit codes: 0 success, 1 validation error (bad config, missing or inconsistent
artifacts, failed theory check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import struct
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (OBJECTIVES, AttackConfig, example_from_record, mcmc_aware_attack_many,
                      pgd_attack_many, read_archive, write_archive)
from .datasets import Dataset, generate_synthetic, load_idx, stratified_sample, train_test_split
from .defence import HmcConfig, defend
from .metrics import (ClassifierConfig, LinearClassifier, fit_linear_classifier, robustness_report,
                      write_report_csv)
from .svg import bar_chart, line_chart
from .theory import (default_fixtures, lemma1_scaling_check, pinsker_check, random_gaussian_pair,
                     theorem1_decomposition)
from .vae import FAMILIES, TrainConfig, encode, init_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("vaeguard")

STAGES = {"train": 1, "classifier": 2, "references": 3, "attack": 4, "defence": 5,
          "sweep": 6, "theory": 7, "model-init": 8}

CHECKPOINT = "model.vaec"
CLASSIFIER = "classifier.lcl"
LOSS_CSV = "train_loss.csv"
ARCHIVE = "attacks.atk"
REPORT_CSV = "report.csv"
REPORT_SVG = "report.svg"
SWEEP_CSV = "radius_sweep.csv"
SWEEP_SVG = "radius_sweep.svg"
THEORY_CSV = "theory.csv"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid configuration or inconsistent artifacts (exit status 1)."""


# --- config -----------------------------------------------------------------------

def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _list(parse):
    def inner(s):
        items = [t.strip() for t in s.split(",") if t.strip()]
        if not items:
            raise ValueError("expected a comma-separated list")
        return tuple(parse(t) for t in items)
    return inner


def _choice(*options):
    def inner(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return inner


def _positive(v):
    return all(x > 0 for x in (v if isinstance(v, tuple) else (v,)))


def _nonneg(v):
    return all(x >= 0 for x in (v if isinstance(v, tuple) else (v,)))


def _unit(v):
    return all(0 <= x <= 1 for x in (v if isinstance(v, tuple) else (v,)))


REQUIRED = object()
PATH = "path"

# key: (parser, default, check or None)
SCHEMA = {
    "seed": (int, 0, _nonneg),
    "dataset.kind": (_choice("synthetic", "idx"), REQUIRED, None),
    "dataset.seed": (int, 0, _nonneg),
    "dataset.per_class": (int, 2600, _positive),
    "dataset.classes": (int, 4, lambda v: 2 <= v <= 4),
    "dataset.image_side": (int, 14, lambda v: v >= 8),
    "dataset.test_fraction": (float, 0.04, lambda v: 0 < v < 1),
    "dataset.train_images": (str, "", PATH),
    "dataset.train_labels": (str, "", PATH),
    "dataset.test_images": (str, "", PATH),
    "dataset.test_labels": (str, "", PATH),
    "dataset.idx_classes": (int, 10, lambda v: v >= 2),
    "dataset.pool": (int, 2, _positive),
    "model.latent_dim": (int, 16, _positive),
    "model.hidden": (_list(int), (256, 128), _positive),
    "model.beta": (float, 1.0, _positive),
    "model.objective": (_choice("elbo", "tcvae"), "elbo", None),
    "model.decoder_family": (_choice(*FAMILIES), "bernoulli", None),
    "train.epochs": (int, 20, _positive),
    "train.batch_size": (int, 64, _positive),
    "train.learning_rate": (float, 5e-4, _positive),
    "train.lr_decay_patience": (int, 10, _positive),
    "classifier.iterations": (int, 2000, _nonneg),
    "classifier.l2": (float, 1e-4, _nonneg),
    "attack.radius": (float, 0.1, _positive),
    "attack.steps": (int, 50, _positive),
    "attack.step_size": (float, 1.0, _positive),
    "attack.init_std": (float, 0.2, _nonneg),
    "attack.restarts": (int, 10, _positive),
    "attack.objective": (_choice(*OBJECTIVES), "skl", None),
    "attack.box": (_bool, True, None),
    "attack.chain_steps": (int, 10, _nonneg),
    "attack.chain_leapfrog": (int, 5, _positive),
    "attack.chain_step_size": (float, 0.1, _positive),
    "attack.straight_through": (_bool, True, None),
    "hmc.steps": (_list(int), (500,), _nonneg),
    "hmc.step_size": (float, 0.1, _positive),
    "hmc.leapfrog": (int, 20, _positive),
    "hmc.adaptive": (_bool, True, None),
    "hmc.target_acceptance": (float, 0.9, lambda v: 0 < v < 1),
    "hmc.adapt_gain": (float, 0.01, _nonneg),
    "eval.per_class": (int, 5, _positive),
    "eval.sample_latents": (_bool, False, None),
    "eval.radii": (_list(float), (0.0, 0.01, 0.05, 0.1, 0.2, 0.5), _unit),
    "theory.samples": (int, 100_000, lambda v: v >= 1000),
    "theory.pairs": (int, 200, _positive),
    "theory.radius": (float, 0.1, _positive),
    "theory.steps": (_list(int), (0, 10, 100), _nonneg),
    "theory.step_size": (float, 0.2, _positive),
    "theory.leapfrog": (int, 10, _positive),
    "output.dir": (str, "runs/default", None),
}

# sections of the config that determine each stage's artifacts
HASH_SCOPE = {
    "train": ("seed", "dataset.", "model.", "train.", "classifier."),
    "attack": ("seed", "dataset.", "model.", "train.", "classifier.", "attack.", "eval.per_class"),
    "defend-eval": ("seed", "dataset.", "model.", "train.", "classifier.", "attack.", "eval.", "hmc."),
    "radius-sweep": ("seed", "dataset.", "model.", "train.", "classifier.", "attack.", "eval."),
    "theory": ("seed", "theory."),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str, where: str = ""):
    if key not in SCHEMA:
        raise ConfigError(f"{where}unknown key {key!r}")
    parser, _, check = SCHEMA[key]
    try:
        value = parser(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}{key}: {exc}") from None
    if callable(check) and not check(value):
        raise ConfigError(f"{where}{key}: value {text.strip()!r} out of range")
    return value


@dataclass
class ExperimentConfig:
    values: dict
    source: str = "<memory>"

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        values = dict(self.values)
        for key, text in overrides.items():
            values[key] = parse_value(key, text, "override: ")
        cfg = ExperimentConfig(values, self.source)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        if v["dataset.kind"] == "idx":
            for key in ("dataset.train_images", "dataset.train_labels",
                        "dataset.test_images", "dataset.test_labels"):
                if not v[key]:
                    raise ConfigError(f"{self.source}: {key} is required when dataset.kind = idx")
                if not Path(v[key]).is_file():
                    raise ConfigError(f"{self.source}: {key}: no such file {v[key]!r}")
        if max(v["eval.radii"]) > 1.0:
            raise ConfigError("eval.radii must lie in [0, 1]")

    def stage_hash(self, stage: str) -> str:
        scope = HASH_SCOPE[stage]
        lines = [f"{k}={_format(v)}" for k, v in sorted(self.values.items())
                 if any(k == s or (s.endswith(".") and k.startswith(s)) for s in scope)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def hmc(self, steps: int) -> HmcConfig:
        v = self.values
        return HmcConfig(steps, v["hmc.step_size"], v["hmc.leapfrog"], v["hmc.adaptive"],
                         v["hmc.target_acceptance"], v["hmc.adapt_gain"])

    def attack(self, radius: float | None = None) -> AttackConfig:
        v = self.values
        return AttackConfig(v["attack.radius"] if radius is None else radius, v["attack.steps"],
                            v["attack.step_size"], v["attack.init_std"], v["attack.restarts"],
                            v["attack.objective"], v["attack.box"])

    def output_dir(self) -> Path:
        return Path(self.values["output.dir"])


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse key=value text; errors carry the line number and key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}: "
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{where}duplicate key {key!r}")
        values[key] = parse_value(key, value, where)
    missing = [k for k, (_, d, _) in SCHEMA.items() if d is REQUIRED and k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key {missing[0]!r}")
    for key, (_, default, _) in SCHEMA.items():
        values.setdefault(key, default)
    cfg = ExperimentConfig(values, source)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# --- seeds -----------------------------------------------------------------------

def stage_rng(root: int, stage: str, *index: int) -> np.random.Generator:
    return np.random.default_rng([root, STAGES[stage], *index])


def stage_seed(root: int, stage: str, *index: int) -> int:
    return int(np.random.SeedSequence([root, STAGES[stage], *index]).generate_state(1)[0])


# --- manifest ---------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Per-directory record of the stages run there."""

    path: Path
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, directory) -> "RunManifest":
        path = Path(directory) / MANIFEST
        if path.is_file():
            data = json.loads(path.read_text())
            return cls(path, data.get("stages", {}))
        return cls(path)

    def save(self):
        data = {"tool": "vaeguard", "version": __version__, "stages": self.stages}
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def begin(self, stage: str, config_hash: str, seeds: dict):
        self.stages[stage] = {"config_hash": config_hash, "seeds": seeds, "artifacts": [],
                              "started": _now(), "finished": None, "status": "running",
                              "version": __version__}
        self.save()

    def finish(self, stage: str, artifacts, status: str = "complete"):
        entry = self.stages[stage]
        entry["artifacts"] = sorted(str(a) for a in artifacts)
        entry["finished"] = _now()
        entry["status"] = status
        self.save()


def require_stage(directory, stage: str, expected_hash: str, what: str):
    """Refuse artifacts from ``directory`` unless ``stage`` completed under ``expected_hash``."""
    entry = RunManifest.load(directory).stages.get(stage)
    if entry is None or entry.get("status") != "complete":
        raise ConfigError(f"{what}: no completed '{stage}' stage recorded in {Path(directory) / MANIFEST}")
    if entry["config_hash"] != expected_hash:
        raise ConfigError(f"{what} was produced under config hash {entry['config_hash'][:12]}..., "
                          f"but the current configuration hashes to {expected_hash[:12]}...; "
                          f"rerun '{stage}' with this configuration")


# --- classifier file --------------------------------------------------------------

_CLF_MAGIC = b"LCL1"


def save_classifier(clf: LinearClassifier, path) -> None:
    """Little-endian: magic, u32 classes, u32 latent dim, f64 weights (row-major), f64 bias."""
    c, d = clf.weight.shape
    with open(path, "wb") as fh:
        fh.write(_CLF_MAGIC + struct.pack("<II", c, d))
        fh.write(np.ascontiguousarray(clf.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(clf.bias, dtype="<f8").tobytes())


def load_classifier(path) -> LinearClassifier:
    raw = Path(path).read_bytes()
    if raw[:4] != _CLF_MAGIC:
        raise ConfigError(f"{path}: not a classifier file")
    c, d = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 8 * (c * d + c):
        raise ConfigError(f"{path}: truncated classifier file")
    w = np.frombuffer(raw, "<f8", c * d, 12).reshape(c, d).astype(np.float64)
    b = np.frombuffer(raw, "<f8", c, 12 + 8 * c * d).astype(np.float64)
    return LinearClassifier(w, b)


# --- data -------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    v = cfg.values
    if v["dataset.kind"] == "synthetic":
        data = generate_synthetic(v["dataset.seed"], v["dataset.per_class"], v["dataset.classes"],
                                  v["dataset.image_side"])
        return train_test_split(data, v["dataset.test_fraction"], v["dataset.seed"])
    k, pool = v["dataset.idx_classes"], v["dataset.pool"]
    return (load_idx(v["dataset.train_images"], v["dataset.train_labels"], class_count=k, pool=pool),
            load_idx(v["dataset.test_images"], v["dataset.test_labels"], class_count=k, pool=pool))


def references(cfg: ExperimentConfig, test: Dataset) -> Dataset:
    return stratified_sample(test, cfg["eval.per_class"], stage_seed(cfg["seed"], "references"))


def _targets(refs: Dataset) -> np.ndarray:
    """supervised-kl target for each reference: the first reference of the next class."""
    out = np.empty_like(refs.images)
    for i, y in enumerate(refs.labels):
        for shift in range(1, refs.class_count):
            rows = np.flatnonzero(refs.labels == (y + shift) % refs.class_count)
            if rows.size:
                out[i] = refs.images[rows[0]]
                break
        else:
            raise ConfigError("supervised-kl needs references from at least two classes")
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- commands ------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    root = cfg["seed"]
    h = cfg.stage_hash("train")
    man = RunManifest.load(out)
    seeds = {"model-init": stage_seed(root, "model-init"), "train": stage_seed(root, "train")}
    man.begin("train", h, seeds)
    train_set, _ = load_data(cfg)
    model = init_model(train_set.dim, cfg["model.latent_dim"], cfg["model.hidden"],
                       beta=cfg["model.beta"], decoder_family=cfg["model.decoder_family"],
                       objective=cfg["model.objective"], seed=seeds["model-init"])
    tc = TrainConfig(cfg["train.epochs"], cfg["train.batch_size"], cfg["train.learning_rate"],
                     cfg["train.lr_decay_patience"], seeds["train"])
    result = train(model, train_set, tc)
    save_checkpoint(result.model, out / CHECKPOINT)
    _write_csv(out / LOSS_CSV, ["epoch", "loss", "learning_rate"],
               [[i, repr(l), repr(lr)] for i, (l, lr) in
                enumerate(zip(result.losses, result.learning_rates))])
    means = encode(result.model, train_set.images).mean
    clf = fit_linear_classifier(means, train_set.labels,
                                ClassifierConfig(cfg["classifier.iterations"], l2=cfg["classifier.l2"]),
                                train_set.class_count)
    save_classifier(clf, out / CLASSIFIER)
    man.finish("train", [CHECKPOINT, LOSS_CSV, CLASSIFIER])
    log.info("train: final loss %.4f, wrote %s", result.losses[-1] if result.losses else math.nan,
             out / CHECKPOINT)
    return 0


def _load_trained(cfg, checkpoint: Path):
    require_stage(checkpoint.parent, "train", cfg.stage_hash("train"), f"checkpoint {checkpoint}")
    model = load_checkpoint(checkpoint)
    clf_path = checkpoint.parent / CLASSIFIER
    clf = load_classifier(clf_path) if clf_path.is_file() else None
    return model, clf


def _run_attacks(cfg, model, clf, refs: Dataset, attack: AttackConfig, stage_index=()):
    root = cfg["seed"]
    seeds = [stage_seed(root, "attack", *stage_index, i) for i in range(len(refs))]
    ref_ids = refs.indices.tolist()
    if attack.objective == "classifier-ce" and clf is None:
        raise ConfigError(f"attack.objective = classifier-ce needs {CLASSIFIER} next to the checkpoint")
    if attack.objective == "mcmc-aware":
        chain = HmcConfig(cfg["attack.chain_steps"], cfg["attack.chain_step_size"],
                          cfg["attack.chain_leapfrog"], cfg["hmc.adaptive"])
        runs = mcmc_aware_attack_many(model, chain, refs.images, attack, seeds,
                                      straight_through=cfg["attack.straight_through"],
                                      ref_indices=ref_ids)
    else:
        targets = _targets(refs) if attack.objective == "supervised-kl" else None
        runs = pgd_attack_many(model, refs.images, attack, seeds, classifier=clf,
                               x_targets=targets, ref_indices=ref_ids)
    return runs, seeds


def cmd_attack(cfg: ExperimentConfig, out: Path, checkpoint: Path) -> int:
    model, clf = _load_trained(cfg, checkpoint)
    h = cfg.stage_hash("attack")
    man = RunManifest.load(out)
    _, test = load_data(cfg)
    refs = references(cfg, test)
    man.begin("attack", h, {"references": stage_seed(cfg["seed"], "references")})
    runs, seeds = _run_attacks(cfg, model, clf, refs, cfg.attack())
    man.stages["attack"]["seeds"]["attack"] = seeds
    write_archive(out / ARCHIVE, [ex for run in runs for ex in run], h)
    man.finish("attack", [ARCHIVE])
    log.info("attack: %d references x %d restarts -> %s", len(refs), cfg["attack.restarts"],
             out / ARCHIVE)
    return 0


def cmd_defend_eval(cfg: ExperimentConfig, out: Path, checkpoint: Path, archive: Path) -> int:
    model, clf = _load_trained(cfg, checkpoint)
    if clf is None:
        raise ConfigError(f"{CLASSIFIER} missing next to {checkpoint}")
    arch = read_archive(archive)
    expected = cfg.stage_hash("attack")
    if arch.config_hash != expected:
        raise ConfigError(f"archive {archive} was produced under config hash {arch.config_hash[:12]}..., "
                          f"but the current configuration hashes to {expected[:12]}...; "
                          f"rerun 'attack' with this configuration")
    _, test = load_data(cfg)
    refs = references(cfg, test)
    by_index = {int(r): i for i, r in enumerate(refs.indices)}
    best = sorted(arch.best(), key=lambda r: by_index.get(r.reference_index, -1))
    if sorted(r.reference_index for r in best) != sorted(by_index):
        raise ConfigError(f"archive {archive} does not cover the configured references")
    x_refs = np.stack([refs.images[by_index[r.reference_index]] for r in best])
    x_advs = np.stack([example_from_record(r, x_refs[i]).x_adv for i, r in enumerate(best)])
    ids = [r.reference_index for r in best]

    root = cfg["seed"]
    man = RunManifest.load(out)
    man.begin("defend-eval", cfg.stage_hash("defend-eval"),
              {"defence": [root, STAGES["defence"], 0]})
    echo = {k: _format(v) for k, v in cfg.values.items() if k.startswith(("hmc.", "attack."))}
    reports = []
    none_rng = stage_rng(root, "defence", 0)
    reports.append(robustness_report(model, clf, x_refs, x_advs, rng=none_rng,
                                     sample_latents=cfg["eval.sample_latents"],
                                     reference_indices=ids, setting="none", config=echo))
    steps = sorted(set(cfg["hmc.steps"]))
    # one chain, snapshots at every requested T: identical to separate runs of length T
    _, trace = defend(model, x_advs, cfg.hmc(max(steps)), stage_rng(root, "defence", 0),
                      record_at=steps)
    for t in steps:
        reports.append(robustness_report(model, clf, x_refs, x_advs, latents=trace.snapshots[t],
                                         reference_indices=ids, setting=f"hmc-{t}", config=echo))
    write_report_csv(out / REPORT_CSV, reports)
    labels = [r.setting for r in reports]
    svg = bar_chart(labels, {"MS-SSIM": [r.msssim_mean for r in reports],
                             "accuracy": [r.accuracy for r in reports]},
                    f"Reconstruction similarity, radius {cfg['attack.radius']:g}", "value",
                    errors={"MS-SSIM": [r.msssim_std for r in reports]})
    (out / REPORT_SVG).write_text(svg)
    man.finish("defend-eval", [REPORT_CSV, REPORT_SVG])
    for r in reports:
        print(f"{r.setting:>10}  msssim {r.summary()}  accuracy {r.accuracy:.2f}  mse {r.mse:.3f}")
    return 0


def cmd_radius_sweep(cfg: ExperimentConfig, out: Path, checkpoint: Path) -> int:
    model, clf = _load_trained(cfg, checkpoint)
    if clf is None:
        raise ConfigError(f"{CLASSIFIER} missing next to {checkpoint}")
    _, test = load_data(cfg)
    refs = references(cfg, test)
    man = RunManifest.load(out)
    man.begin("radius-sweep", cfg.stage_hash("radius-sweep"), {"sweep": [cfg["seed"], STAGES["attack"]]})
    rows, input_means, recon_means = [], [], []
    radii = list(cfg["eval.radii"])
    for k, radius in enumerate(radii):
        if radius == 0.0:
            x_advs = refs.images
        else:
            runs, _ = _run_attacks(cfg, model, clf, refs, cfg.attack(radius), (STAGES["sweep"], k))
            x_advs = np.stack([next(ex for ex in run if ex.best).x_adv for run in runs])
        rep = robustness_report(model, clf, refs.images, x_advs, reference_indices=refs.indices,
                                setting=f"radius-{radius!r}")
        inp = float(np.mean(rep.input_msssim))
        rows.append([repr(radius), repr(inp), repr(rep.msssim_mean), repr(rep.msssim_std),
                     repr(rep.accuracy)])
        input_means.append(inp)
        recon_means.append(rep.msssim_mean)
    _write_csv(out / SWEEP_CSV, ["radius", "input_msssim", "msssim", "msssim_std", "accuracy"], rows)
    svg = line_chart(radii, {"input": input_means, "reconstruction": recon_means},
                     "Similarity against attack radius", "radius", "MS-SSIM")
    (out / SWEEP_SVG).write_text(svg)
    man.finish("radius-sweep", [SWEEP_CSV, SWEEP_SVG])
    for r in rows:
        print(",".join(r))
    return 0


THEORY_CHECKS = ("lemma1", "pinsker", "theorem1")


def theory_rows(cfg: ExperimentConfig, checks=THEORY_CHECKS):
    """(check, quantity, bound, pass) rows for the selected suites."""
    root = cfg["seed"]
    fixtures = default_fixtures(cfg["theory.radius"])
    rows = []
    if "lemma1" in checks:
        radii = np.logspace(-3, -1, 9)
        for i, fx in enumerate(fixtures):
            direction = stage_rng(root, "theory", 1, i).normal(size=fx.x_r.size)
            res = lemma1_scaling_check(fx.lgv, fx.x_r, direction, radii)
            ok = not res.degenerate and 1.8 <= res.slope <= 2.2
            rows.append((f"lemma1:{fx.name}:slope", res.slope, "[1.8, 2.2]", ok))
    if "pinsker" in checks:
        rng = stage_rng(root, "theory", 2)
        pairs = [random_gaussian_pair(1 + i % 2, rng) for i in range(cfg["theory.pairs"])]
        rep = pinsker_check(pairs, "grid")
        for i, (tv, b) in enumerate(zip(rep.tv, rep.bound)):
            rows.append((f"pinsker:pair-{i:03d}:tv", float(tv), float(b), bool(tv <= b + 1e-9)))
    if "theorem1" in checks:
        hmc = HmcConfig(max(cfg["theory.steps"]), cfg["theory.step_size"], cfg["theory.leapfrog"],
                        True)
        for i, fx in enumerate(fixtures):
            res = theorem1_decomposition(fx.lgv, fx.encoder, fx.x_r, fx.x_a, hmc,
                                         cfg["theory.samples"], cfg["theory.steps"],
                                         stage_rng(root, "theory", 3, i))
            for r in res:
                bound = r.rhs + 3.0 * r.stderr
                rows.append((f"theorem1:{fx.name}:t={r.t}", r.lhs, bound, r.holds(3.0)))
            if len(res) > 1 and res[0].t == 0:
                first, last = res[0].mcmc_gap, res[-1].mcmc_gap
                rows.append((f"theorem1:{fx.name}:mcmc-gap-decay", last, 0.5 * first,
                             last < 0.5 * first))
    return rows


def cmd_theory(cfg: ExperimentConfig, out: Path, checks=THEORY_CHECKS) -> int:
    man = RunManifest.load(out)
    man.begin("theory", cfg.stage_hash("theory"), {"theory": [cfg["seed"], STAGES["theory"]]})
    rows = theory_rows(cfg, checks)
    _write_csv(out / THEORY_CSV, ["check", "quantity", "bound", "pass"],
               [[c, repr(float(q)), b if isinstance(b, str) else repr(float(b)), str(ok).lower()]
                for c, q, b, ok in rows])
    failed = [r for r in rows if not r[3]]
    man.finish("theory", [THEORY_CSV], "complete" if not failed else "failed")
    print(f"theory: {len(rows) - len(failed)}/{len(rows)} checks passed")
    for c, q, b, _ in failed:
        print(f"FAILED {c}: quantity {q!r} bound {b!r}", file=sys.stderr)
    return 1 if failed else 0


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vaeguard", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"vaeguard {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value configuration file")
        p.add_argument("--seed", type=str, help="root seed")
        p.add_argument("--out", help="output directory (default: output.dir)")
        p.add_argument("-v", "--verbose", action="store_true")

    def hmc_flags(p):
        p.add_argument("--hmc-steps", help="HMC steps T, or a comma-separated list")
        p.add_argument("--step-size", help="initial leapfrog step size")
        p.add_argument("--leapfrog", help="leapfrog steps per HMC step")
        p.add_argument("--adaptive", help="adapt the step size (true/false)")

    p = sub.add_parser("train", help="train the VAE and its latent classifier")
    common(p)
    p = sub.add_parser("attack", help="run PGD attacks on the reference set")
    common(p)
    p.add_argument("--radius", help="L-infinity radius")
    p.add_argument("--checkpoint", help=f"checkpoint (default: OUT/{CHECKPOINT})")
    hmc_flags(p)
    p = sub.add_parser("defend-eval", help="defend the attacked inputs and report metrics")
    common(p)
    p.add_argument("--radius", help="L-infinity radius the archive was produced with")
    p.add_argument("--checkpoint", help=f"checkpoint (default: OUT/{CHECKPOINT})")
    p.add_argument("--archive", help=f"attack archive (default: OUT/{ARCHIVE})")
    hmc_flags(p)
    p = sub.add_parser("radius-sweep", help="similarity against attack radius")
    common(p)
    p.add_argument("--radius", help="comma-separated radii (default: eval.radii)")
    p.add_argument("--checkpoint", help=f"checkpoint (default: OUT/{CHECKPOINT})")
    p = sub.add_parser("theory", help="numerical checks of the bound on the linear-Gaussian model")
    common(p)
    p.add_argument("--check", action="append", choices=THEORY_CHECKS,
                   help="run only this suite (repeatable)")
    hmc_flags(p)
    return ap


def _overrides(args) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "radius", None) is not None:
        o["eval.radii" if args.command == "radius-sweep" else "attack.radius"] = args.radius
    if args.command == "theory":
        if getattr(args, "hmc_steps", None) is not None:
            o["theory.steps"] = args.hmc_steps
        if getattr(args, "step_size", None) is not None:
            o["theory.step_size"] = args.step_size
        if getattr(args, "leapfrog", None) is not None:
            o["theory.leapfrog"] = args.leapfrog
        return o
    for flag, key in (("hmc_steps", "hmc.steps"), ("step_size", "hmc.step_size"),
                      ("leapfrog", "hmc.leapfrog"), ("adaptive", "hmc.adaptive")):
        if getattr(args, flag, None) is not None:
            o[key] = getattr(args, flag)
    return o


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(_overrides(args))
        out = Path(args.out) if args.out else cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        checkpoint = Path(getattr(args, "checkpoint", None) or out / CHECKPOINT)
        if args.command != "train" and args.command != "theory" and not checkpoint.is_file():
            raise ConfigError(f"checkpoint {checkpoint} not found; run 'train' first")
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "attack":
            return cmd_attack(cfg, out, checkpoint)
        if args.command == "defend-eval":
            archive = Path(args.archive or out / ARCHIVE)
            if not archive.is_file():
                raise ConfigError(f"archive {archive} not found; run 'attack' first")
            return cmd_defend_eval(cfg, out, checkpoint, archive)
        if args.command == "radius-sweep":
            return cmd_radius_sweep(cfg, out, checkpoint)
        return cmd_theory(cfg, out, tuple(args.check) if args.check else THEORY_CHECKS)
    except ConfigError as exc:
        print(f"vaeguard: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime-failure status
        log.debug("failure", exc_info=True)
        print(f"vaeguard: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
