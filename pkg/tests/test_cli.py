import csv
import json
import re
import shutil

import numpy as np
import pytest

from vaeguard.attacks import read_archive
from vaeguard.cli import (SCHEMA, ConfigError, parse_config, run, stage_rng, stage_seed, theory_rows)

TINY = """\
# tiny pipeline
dataset.kind = synthetic
dataset.per_class = 60
dataset.test_fraction = 0.2
model.hidden = 32,16
model.latent_dim = 4
train.epochs = 2
attack.steps = 5
attack.restarts = 3
eval.per_class = 2
eval.radii = 0, 0.1, 0.3
hmc.steps = 0, 5, 10
hmc.leapfrog = 3
eval.sample_latents = true
theory.samples = 2000
theory.pairs = 6
theory.steps = 0, 10, 100
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    codes = {}
    for cmd in ("train", "attack", "defend-eval", "radius-sweep"):
        codes[cmd] = run([cmd, "--config", str(cfg), "--out", str(out)])
    return cfg, out, codes


# --- configuration ------------------------------------------------------------------

def test_missing_required_key():
    with pytest.raises(ConfigError, match="dataset.kind"):
        parse_config("model.beta = 2\n")


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"cfg:3: unknown key 'model.betta'"):
        parse_config("dataset.kind = synthetic\n# comment\nmodel.betta = 2\n", "cfg")


def test_bad_values_report_key_and_line():
    with pytest.raises(ConfigError, match=r"cfg:2: model.latent_dim"):
        parse_config("dataset.kind = synthetic\nmodel.latent_dim = -3\n", "cfg")
    with pytest.raises(ConfigError, match=r"cfg:2: duplicate"):
        parse_config("dataset.kind = synthetic\ndataset.kind = synthetic\n", "cfg")
    with pytest.raises(ConfigError, match=r"cfg:1: expected"):
        parse_config("dataset.kind synthetic\n", "cfg")


@pytest.mark.parametrize("beta", ["1", "2", "5", "10"])
def test_beta_sweep_values(beta):
    cfg = parse_config(f"dataset.kind = synthetic\nmodel.beta = {beta}\n")
    assert cfg["model.beta"] == float(beta)


def test_idx_paths_must_exist(tmp_path):
    with pytest.raises(ConfigError, match="dataset.train_images"):
        parse_config("dataset.kind = idx\n")
    text = "dataset.kind = idx\n" + "".join(
        f"dataset.{k} = {tmp_path / k}\n" for k in ("train_images", "train_labels", "test_images", "test_labels"))
    with pytest.raises(ConfigError, match="no such file"):
        parse_config(text)


def test_defaults_follow_schema():
    cfg = parse_config("dataset.kind = synthetic")
    assert cfg["attack.restarts"] == 10 and cfg["hmc.steps"] == (500,) and cfg["hmc.step_size"] == 0.1
    assert cfg["hmc.leapfrog"] == 20 and cfg["hmc.adaptive"] is True
    assert set(cfg.values) == set(SCHEMA)


def test_stage_hash_scopes():
    base = parse_config(TINY)
    hmc = base.with_overrides({"hmc.steps": "7"})
    assert hmc.stage_hash("train") == base.stage_hash("train")
    assert hmc.stage_hash("attack") == base.stage_hash("attack")
    assert hmc.stage_hash("defend-eval") != base.stage_hash("defend-eval")
    radius = base.with_overrides({"attack.radius": "0.2"})
    assert radius.stage_hash("attack") != base.stage_hash("attack")
    assert radius.stage_hash("train") == base.stage_hash("train")


def test_seed_streams():
    a = stage_rng(0, "attack", 3).standard_normal(4)
    assert np.array_equal(a, stage_rng(0, "attack", 3).standard_normal(4))
    assert not np.array_equal(a, stage_rng(0, "attack", 4).standard_normal(4))
    assert not np.array_equal(a, stage_rng(1, "attack", 3).standard_normal(4))
    assert stage_seed(0, "references") == stage_seed(0, "references") != stage_seed(0, "train")


# --- pipeline -----------------------------------------------------------------------

def test_pipeline_succeeds(pipeline):
    _, out, codes = pipeline
    assert codes == {"train": 0, "attack": 0, "defend-eval": 0, "radius-sweep": 0}
    for name in ("model.vaec", "classifier.lcl", "train_loss.csv", "attacks.atk", "report.csv",
                 "report.svg", "radius_sweep.csv", "radius_sweep.svg", "manifest.json"):
        assert (out / name).is_file(), name


def test_manifest_contents(pipeline):
    _, out, _ = pipeline
    man = json.loads((out / "manifest.json").read_text())
    assert man["tool"] == "vaeguard"
    for stage in ("train", "attack", "defend-eval", "radius-sweep"):
        entry = man["stages"][stage]
        assert entry["status"] == "complete" and entry["finished"] and entry["started"]
        assert re.fullmatch(r"[0-9a-f]{64}", entry["config_hash"]) and entry["artifacts"]
        assert entry["seeds"]


def test_loss_csv(pipeline):
    _, out, _ = pipeline
    rows = read_csv(out / "train_loss.csv")
    assert len(rows) == 2 and list(rows[0]) == ["epoch", "loss", "learning_rate"]
    assert all(np.isfinite(float(r["loss"])) for r in rows)


def test_attack_archive(pipeline):
    _, out, _ = pipeline
    arch = read_archive(out / "attacks.atk")
    assert len(arch.records) == 3 * 4 * 2  # restarts x (classes x per_class)
    assert all(r.config.radius == 0.1 for r in arch.records)
    assert len(arch.best()) == 8
    for r in arch.records:
        assert np.max(np.abs(r.epsilon)) <= 0.1 + 1e-9


def test_report_csv(pipeline):
    _, out, _ = pipeline
    rows = read_csv(out / "report.csv")
    settings = [r["setting"] for r in rows if r["row"] == "summary"]
    assert settings == ["none", "hmc-0", "hmc-5", "hmc-10"]
    by = {s: [r for r in rows if r["setting"] == s and r["row"] != "summary"] for s in settings}
    # a disabled chain reproduces the no-defence column (sampled latents, matched stream)
    assert [r["msssim"] for r in by["none"]] == [r["msssim"] for r in by["hmc-0"]]
    assert [r["same_class"] for r in by["none"]] == [r["same_class"] for r in by["hmc-0"]]
    for r in rows:
        if r["row"] == "summary":
            assert re.fullmatch(r"\d\.\d\d \(\d\.\d\d\)", r["formatted"])
        else:
            assert 0.0 <= float(r["msssim"]) <= 1.0


def test_svg_matches_csv(pipeline):
    _, out, _ = pipeline
    rows = [r for r in read_csv(out / "report.csv") if r["row"] == "summary"]
    svg = (out / "report.svg").read_text()
    values = [float(v) for v in re.findall(r'<rect [^>]*data-value="([^"]+)"', svg)]
    expected = [float(r["msssim"]) for r in rows] + [float(r["same_class"]) for r in rows]
    assert sorted(values) == sorted(expected)
    sweep = read_csv(out / "radius_sweep.csv")
    svg = (out / "radius_sweep.svg").read_text()
    points = {(float(x), float(v)) for x, v in re.findall(r'data-x="([^"]+)" data-value="([^"]+)"', svg)}
    for r in sweep:
        assert (float(r["radius"]), float(r["msssim"])) in points
        assert (float(r["radius"]), float(r["input_msssim"])) in points


def test_radius_sweep(pipeline):
    _, out, _ = pipeline
    rows = read_csv(out / "radius_sweep.csv")
    assert [float(r["radius"]) for r in rows] == [0.0, 0.1, 0.3]
    assert float(rows[0]["input_msssim"]) == 1.0 and float(rows[0]["msssim"]) == 1.0
    assert float(rows[0]["accuracy"]) == 1.0
    inputs = [float(r["input_msssim"]) for r in rows]
    assert inputs[0] >= inputs[1] >= inputs[2]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    cfg, out, _ = pipeline
    other = tmp_path / "again"
    for cmd in ("train", "attack", "defend-eval", "radius-sweep"):
        assert run([cmd, "--config", str(cfg), "--out", str(other)]) == 0
    for name in ("model.vaec", "classifier.lcl", "train_loss.csv", "attacks.atk", "report.csv",
                 "report.svg", "radius_sweep.csv", "radius_sweep.svg"):
        assert (out / name).read_bytes() == (other / name).read_bytes(), name


def test_hash_mismatch_refused(pipeline, tmp_path, capsys):
    cfg, out, _ = pipeline
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    code = run(["defend-eval", "--config", str(cfg), "--out", str(copy), "--radius", "0.2"])
    assert code == 1
    assert "config hash" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY)
    assert run(["attack", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 1
    assert "run 'train' first" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("dataset.kind = synthetic\nbogus = 1\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "c.cfg:2" in capsys.readouterr().err
    assert run(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exit_code(tmp_path, capsys):
    # a Gaussian decoder whose loss overflows makes training fail at run time
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "model.decoder_family = gaussian\ntrain.learning_rate = 1e300\n")
    code = run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "train failed" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["stages"]["train"]["status"] != "complete"


def test_theory_filter_and_schema(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY)
    assert run(["theory", "--config", str(cfg), "--out", str(tmp_path), "--check", "pinsker"]) == 0
    with open(tmp_path / "theory.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["check", "quantity", "bound", "pass"]
    rows = read_csv(tmp_path / "theory.csv")
    assert len(rows) == 6 and all(r["check"].startswith("pinsker:") for r in rows)
    assert all(r["pass"] == "true" for r in rows)
    assert all(float(r["quantity"]) <= float(r["bound"]) + 1e-9 for r in rows)


def test_theory_rows_all_suites():
    # 2000 samples leave too much histogram noise to resolve the chain's convergence
    cfg = parse_config(TINY).with_overrides({"theory.samples": "20000"})
    rows = theory_rows(cfg)
    names = [r[0] for r in rows]
    assert sum(n.startswith("lemma1:") for n in names) == 2
    assert sum(n.startswith("theorem1:") and "t=" in n for n in names) == 6
    assert sum(n.endswith("mcmc-gap-decay") for n in names) == 2
    assert all(r[3] for r in rows), [r for r in rows if not r[3]]


def test_theory_failure_exit_code(tmp_path, capsys, monkeypatch):
    import vaeguard.cli as cli
    monkeypatch.setattr(cli, "theory_rows", lambda cfg, checks: [("fake:row", 2.0, 1.0, False)])
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY)
    assert run(["theory", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "FAILED fake:row" in capsys.readouterr().err


def test_cli_overrides(tmp_path):
    from vaeguard.cli import _overrides, build_parser
    args = build_parser().parse_args(["theory", "--config", "x", "--hmc-steps", "0,5", "--step-size", "0.3"])
    assert _overrides(args) == {"theory.steps": "0,5", "theory.step_size": "0.3"}
    args = build_parser().parse_args(["defend-eval", "--config", "x", "--hmc-steps", "0,100,500",
                                      "--adaptive", "false", "--seed", "4"])
    assert _overrides(args) == {"hmc.steps": "0,100,500", "hmc.adaptive": "false", "seed": "4"}
    args = build_parser().parse_args(["radius-sweep", "--config", "x", "--radius", "0,0.1"])
    assert _overrides(args) == {"eval.radii": "0,0.1"}
