import json
import os
from pathlib import Path

import numpy as np
import pytest

from polar_denoise import cli
from polar_denoise.experiments import (
    left_noise_corrupt,
    parse_experiment_spec,
    run_experiment,
    synthetic_digit_grids,
)
from polar_denoise.prior import ImageGrid


def write_spec(tmp_path: Path, text: str, name="spec.ini") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


CONC_SPEC = """
[experiment]
name = conc
kind = concentration_table
seed = 5

[model]
sigma = 1.0

[prior]
kind = sphere_shell
n = 30
radius = 1.2

[concentration_table]
dims = 10,50,100,200
delta = 0.1
obs_distance = 1.0
"""

SAMPLER_SPEC = """
[experiment]
name = sampler
kind = sampler_vs_oracle
seed = 9

[model]
sigma = 1.0
max_steps = 200000
dt_max = 0.01

[prior]
kind = two_point
n = 2
separation = 2.0

[sampler_vs_oracle]
dim = 8
trajectories = 600
tv_bound = 0.08
obs_distance = 0.9
"""


def test_version_command(capsys):
    assert cli.main(["version"]) == 0
    out = capsys.readouterr().out
    assert "polar-denoise 0.1.0" in out
    assert "backend" in out


def test_audit_command(capsys, tmp_path):
    assert cli.main(["audit-specfun", "--out", str(tmp_path / "audit")]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert (tmp_path / "audit" / "audit.csv").is_file()
    summary = json.loads((tmp_path / "audit" / "audit.json").read_text())
    assert summary["pass"] is True
    assert summary["max_rel_err_log_k"] <= 1e-10


def test_malformed_spec_exits_1_without_artifacts(tmp_path, capsys):
    spec = write_spec(tmp_path, "not an ini file [[[")
    rc = cli.main(["run", str(spec), "--out", str(tmp_path / "out")])
    assert rc == 1
    assert not (tmp_path / "out").exists()
    assert "error" in capsys.readouterr().err


def test_unknown_kind_exits_1(tmp_path):
    spec = write_spec(tmp_path, "[experiment]\nname = x\nkind = bogus\n")
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 1


def test_missing_spec_exits_1(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.ini")]) == 1


def test_concentration_run(tmp_path, capsys):
    spec = write_spec(tmp_path, CONC_SPEC)
    rc = cli.main(["run", str(spec), "--out", str(tmp_path / "out")])
    assert rc == 0
    rundir = tmp_path / "out" / "conc"
    table = (rundir / "table.csv").read_text().splitlines()
    assert table[0] == "d,sigma,epsilon,delta,lhs_mass,rhs_bound,margin"
    assert len(table) == 5
    for line in table[1:]:
        margin = float(line.split(",")[-1])
        assert margin >= -1e-12
    manifest = json.loads((rundir / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"table.csv", "table.gp"}
    assert manifest["seed"] == 5
    assert len(manifest["spec_sha256"]) == 64
    assert (rundir / "table.gp").is_file()


def test_existing_run_dir_exits_1(tmp_path):
    spec = write_spec(tmp_path, CONC_SPEC)
    out = tmp_path / "out"
    assert cli.main(["run", str(spec), "--out", str(out)]) == 0
    assert cli.main(["run", str(spec), "--out", str(out)]) == 1


def test_sampler_run_and_jobs_determinism(tmp_path):
    spec = write_spec(tmp_path, SAMPLER_SPEC)
    rc = cli.main(["run", str(spec), "--out", str(tmp_path / "o1"), "--jobs", "1"])
    assert rc == 0
    rc = cli.main(["run", str(spec), "--out", str(tmp_path / "o2"), "--jobs", "3"])
    assert rc == 0
    os.environ["POLAR_DENOISE_JOBS"] = "2"
    try:
        rc = cli.main(["run", str(spec), "--out", str(tmp_path / "o3")])
    finally:
        del os.environ["POLAR_DENOISE_JOBS"]
    assert rc == 0
    files = ["histogram.csv", "result.json", "manifest.json"]
    for f in files:
        b1 = (tmp_path / "o1" / "sampler" / f).read_bytes()
        b2 = (tmp_path / "o2" / "sampler" / f).read_bytes()
        b3 = (tmp_path / "o3" / "sampler" / f).read_bytes()
        assert b1 == b2 == b3
    result = json.loads((tmp_path / "o1" / "sampler" / "result.json").read_text())
    assert result["tv_distance"] <= 0.08


def test_seed_override_changes_artifacts(tmp_path):
    spec = write_spec(tmp_path, SAMPLER_SPEC)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "b"), "--seed", "77"]) == 0
    h1 = (tmp_path / "a" / "sampler" / "histogram.csv").read_bytes()
    h2 = (tmp_path / "b" / "sampler" / "histogram.csv").read_bytes()
    assert h1 != h2
    m2 = json.loads((tmp_path / "b" / "sampler" / "manifest.json").read_text())
    assert m2["seed"] == 77


def test_failed_assertion_exits_2_and_cleans_up(tmp_path, capsys):
    text = SAMPLER_SPEC.replace("tv_bound = 0.08", "tv_bound = 0.0000001")
    spec = write_spec(tmp_path, text)
    rc = cli.main(["run", str(spec), "--out", str(tmp_path / "out")])
    assert rc == 2
    assert not (tmp_path / "out" / "sampler").exists()
    assert "assertion" in capsys.readouterr().err


def test_drift_profile_run(tmp_path):
    text = """
[experiment]
name = prof
kind = drift_profile
seed = 3

[model]
sigma = 1.0

[prior]
kind = sphere_shell
n = 5
radius = 1.0

[drift_profile]
dim = 400
probes = 20
shell_radius = 2.0
rel_err_bound = 0.05
"""
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "prof" / "summary.json").read_text())
    assert summary["max_rel_error"] <= 0.05


def test_specfun_audit_kind(tmp_path):
    text = """
[experiment]
name = audit
kind = specfun_audit
seed = 0
"""
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "audit" / "audit.json").read_text())
    assert summary["pass"] is True


def test_robustness_smoke(tmp_path):
    text = """
[experiment]
name = robust
kind = robustness_theorem2
seed = 4

[model]
sigma = 1.0
stop_threshold = 24.0
max_steps = 200000
dt_max = 0.01
dt_scale = 0.1
snap_radius = 1e-3

[robustness_theorem2]
dim = 50
runs = 40
delta = 0.2
pert_fraction = 0.05
success_bound = 0.8

[prior]
kind = two_point
n = 2
separation = 2.5
"""
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    result = json.loads((tmp_path / "out" / "robust" / "result.json").read_text())
    assert result["success_fraction"] >= 0.8
    assert result["runs"] == 40


IMAGE_SPEC_TEMPLATE = """
[experiment]
name = recon
kind = image_reconstruction
seed = 12
repetitions = {reps}

[model]
sigma = 1.0
stop_threshold = 2000.0
max_steps = 400000
dt_max = 0.01
dt_scale = 0.5
snap_radius = 1e-4

[image_reconstruction]
resolution_log2 = 3
per_class = {per_class}
classes = {classes}
jitter = {jitter}
snapshots = {snapshots}
corruption = left_noise
"""


def test_image_reconstruction_copies_snap(tmp_path):
    # prior of 10 copies of one image: the endpoint snaps to that image
    text = IMAGE_SPEC_TEMPLATE.format(reps=2, per_class=10, classes=1, jitter=0.0, snapshots=3)
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    rundir = tmp_path / "out" / "recon"
    summary = json.loads((rundir / "summary.json").read_text())
    grids0, _ = synthetic_digit_grids(3, 10, 12, classes=1, jitter=0.0)
    template = grids0[0].pixels
    for rep in summary["repetitions"]:
        assert rep["snapped_atom"] >= 0
        endpoint = np.loadtxt(
            rundir / f"rep{rep['rep']:03d}_endpoint.csv", delimiter=",", skiprows=1
        )
        assert np.max(np.abs(endpoint - template)) <= 1e-3
    # snapshots emitted
    assert (rundir / "rep000_snapshot_01.csv").is_file()
    assert (rundir / "rep000_snapshot_03.csv").is_file()


def test_image_reconstruction_zero_snapshots(tmp_path):
    text = IMAGE_SPEC_TEMPLATE.format(reps=1, per_class=3, classes=1, jitter=0.0, snapshots=0)
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    rundir = tmp_path / "out" / "recon"
    assert (rundir / "rep000_endpoint.csv").is_file()
    assert not list(rundir.glob("*snapshot*"))


def test_image_reconstruction_two_class_accuracy(tmp_path):
    # two-class prior with the class-distinguishing structure in the right
    # half (preserved by the corruption): the endpoint's nearest atom is in
    # the correct class in >= 90% of 100 seeded runs at d=64
    text = IMAGE_SPEC_TEMPLATE.format(reps=100, per_class=20, classes=2, jitter=0.05, snapshots=0)
    spec = write_spec(tmp_path, text)
    assert cli.main(["run", str(spec), "--out", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "recon" / "summary.json").read_text())
    reps = summary["repetitions"]
    assert len(reps) == 100
    correct = sum(1 for r in reps if r["label_correct"]) / len(reps)
    assert correct >= 0.90


def test_left_noise_corrupt_only_touches_left_half():
    grid = ImageGrid(3, np.zeros((8, 8)))
    rng = np.random.default_rng(0)
    out = left_noise_corrupt(grid, rng)
    assert np.all(out.pixels[:, 4:] == 0.0)
    assert np.all((out.pixels[:, :4] >= 0) & (out.pixels[:, :4] <= 1))
    assert np.any(out.pixels[:, :4] > 0)


def test_spec_parse_round(tmp_path):
    spec_path = write_spec(tmp_path, CONC_SPEC)
    spec = parse_experiment_spec(spec_path)
    assert spec.name == "conc"
    assert spec.kind == "concentration_table"
    assert spec.seed == 5
    assert spec.prior["kind"] == "sphere_shell"
    assert spec.params["dims"] == "10,50,100,200"
