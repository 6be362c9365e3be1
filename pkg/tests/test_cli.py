import json

import numpy as np
import pytest
import yaml

from adsplace import __version__
from adsplace.cli import EXIT_CONFIG, EXIT_OK, main, substream_seed
from adsplace.config import load_config
from adsplace.structure_io import parse_structure_file, read_frames

TINY = {
    "seed": 1,
    "benchmark": {"n_systems": 2, "family": "three_well", "n_placements": 4, "grid": 16, "n_orientations": 2},
    "training": {"steps": 6, "batch_size": 4, "warmup_steps": 2, "val_every": 3, "val_draws": 2},
    "model": {"hidden_dim": 8, "n_rbf": 6, "n_message_rounds": 1, "n_freq": 2},
    "table": {"n_sigma": 64, "n_omega": 512, "l_max": 600},
    "sampler": {"n_steps": 8},
    "evaluate": {"nsites": [1, 2], "diversity_samples": 2},
}


def write_config(path, **extra):
    data = {**TINY, **extra}
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """benchmark -> train -> sample -> evaluate in one output directory."""
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out.parent / f"{out.name}.yaml")
    codes = {}
    base = ["--config", cfg, "--out", str(out)]
    codes["benchmark"] = main(["benchmark", *base])
    codes["train"] = main(["train", *base])
    codes["sample"] = main(["sample", *base, "--checkpoint", str(out / "best.npz"), "--benchmark",
                            str(out / "benchmark.jsonl"), "-n", "2"])
    codes["evaluate"] = main(["evaluate", *base, "--checkpoint", str(out / "best.npz")])
    codes["relax"] = main(["relax", *base])
    codes["oracle"] = main(["oracle", *base])
    return out, codes


def manifest(out, cmd):
    return json.loads((out / f"manifest-{cmd}.json").read_text())


def test_all_subcommands_succeed(run):
    _, codes = run
    assert codes == {k: EXIT_OK for k in codes}


@pytest.mark.parametrize("cmd", ["benchmark", "train", "sample", "evaluate", "relax", "oracle"])
def test_manifest_contents(run, cmd):
    out, _ = run
    m = manifest(out, cmd)
    cfg = load_config(out / "config.yaml")
    assert m["command"] == cmd and m["version"] == __version__
    assert m["config_hash"] == cfg.config_hash()
    assert m["seed"] == 1 and m["seeds"]["sample"] == substream_seed(1, "sample")
    for rel in m["outputs"].values():
        assert (out / rel).exists(), rel


def test_no_orphan_outputs(run):
    out, _ = run
    listed = set()
    for m in out.glob("manifest-*.json"):
        listed.add(m.name)
        data = json.loads(m.read_text())
        listed |= set(data["outputs"].values())
        listed |= {p.split("/")[-1] for p in data["inputs"].values() if p.startswith(str(out))}
    assert {p.name for p in out.iterdir()} <= listed


def test_evaluate_outputs(run, capsys):
    out, _ = run
    series = (out / "series.tsv").read_text().splitlines()
    assert series[0].split("\t")[:2] == ["method", "nsites"]
    assert len(series) == 1 + 2 * 2
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["site_diversity"]) == {"diffusion", "random_baseline"}
    for png in ("success_vs_nsites.png", "anomaly_vs_nsites.png", "loss_curve.png"):
        assert (out / png).read_bytes()[:4] == b"\x89PNG"
    recs = [json.loads(line) for line in (out / "records.jsonl").read_text().splitlines()]
    assert len(recs) == 2 * 2 * 2


def test_sample_outputs(run):
    out, _ = run
    frames = read_frames(out / "samples.xyz")
    assert len(frames) == 4
    assert len((out / "sites.tsv").read_text().splitlines()) == 5


def test_relax_and_oracle_outputs(run):
    out, _ = run
    res = json.loads((out / "relax_result.json").read_text())
    assert np.isfinite(res["energy"]) and not res["failed"]
    parse_structure_file(out / "relaxed.xyz")
    oracle = json.loads((out / "oracle_minima.json").read_text())
    assert oracle["energy"] == min(m["energy"] for m in oracle["local_minima"])


def test_relax_from_structure(run, tmp_path):
    out, _ = run
    code = main(["relax", "--config", str(out / "config.yaml"), "--out", str(tmp_path),
                 "--structure", str(out / "oracle.xyz")])
    assert code == EXIT_OK
    assert json.loads((tmp_path / "relax_result.json").read_text())["converged"]


def test_print_config(tmp_path, capsys):
    assert main(["oracle", "--print-config", "--seed", "7", "--out", str(tmp_path / "x")]) == EXIT_OK
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["seed"] == 7
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["nosuch"],
    ["train", "--bogus"],
    ["sample", "-n", "many"],
])
def test_bad_arguments(argv, capsys):
    assert main(argv) == EXIT_CONFIG


def test_config_errors(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["train", "--out", out]) == EXIT_CONFIG
    assert "benchmark subcommand" in capsys.readouterr().err
    assert main(["evaluate", "--out", out]) == EXIT_CONFIG
    assert main(["sample", "--out", out]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["oracle", "--config", str(bad), "--out", out]) == EXIT_CONFIG
    assert main(["relax", "--out", out, "--structure", str(tmp_path / "missing.xyz")]) == EXIT_CONFIG


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == __version__
