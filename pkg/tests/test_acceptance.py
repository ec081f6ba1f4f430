"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion.  Monte Carlo checks are heavier than the unit tests; the whole
module is budgeted to finish well inside its stated per-criterion runtimes.
"""

import json
import math
import time
from importlib.resources import files

import mpmath as mp
import numpy as np
import pytest

import polar_denoise as pd
from polar_denoise import dynamics as dyn
from polar_denoise import posterior as post
from polar_denoise import prior as pmod
from polar_denoise import scorematch as sm
from polar_denoise import specfun
from polar_denoise.cli import main as cli_main
from polar_denoise.util import spawned_rng

from conftest import rel_err
from oracles import oracle_posterior_log_weights


def _report(num, label, t0=None, budget=None):
    note = ""
    if t0 is not None:
        elapsed = time.perf_counter() - t0
        note = f" [{elapsed:.1f}s / budget {budget:.0f}s]"
        assert elapsed <= budget, f"criterion {num} exceeded its runtime budget: {elapsed:.1f}s > {budget}s"
    print(f"\n[acceptance] criterion {num:02d} ({label}): PASS{note}")


# -----------------------------------------------------------------------------


def test_criterion_01_specfun_audit():
    t0 = time.perf_counter()
    # half-integer closed forms to 1e-12
    for nu in (0.5, 1.5, 2.5, 3.5):
        for z in (0.1, 1.0, 10.0, 100.0):
            poly = {
                0.5: 1.0,
                1.5: 1.0 + 1.0 / z,
                2.5: 1.0 + 3.0 / z + 3.0 / z**2,
                3.5: 1.0 + 6.0 / z + 15.0 / z**2 + 15.0 / z**3,
            }[nu]
            closed = 0.5 * math.log(math.pi / (2.0 * z)) - z + math.log(poly)
            assert rel_err(specfun.log_bessel_k(nu, z), closed) <= 1e-12
    # 50 seeded random points against the high-precision oracle, to 1e-10
    table = json.loads(files("polar_denoise.data").joinpath("bessel_audit.json").read_text())
    assert len(table["points"]) == 50
    for p in table["points"]:
        assert rel_err(specfun.log_bessel_k(p["order"], p["argument"]), p["log_k"]) <= 1e-10
    _report(1, "specfun audit", t0, 10.0)


def test_criterion_02_posterior_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for trial in range(20):
        d = int(rng.integers(3, 11))
        n = int(rng.integers(1, 11))
        atoms = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0)
        sigma = float(rng.uniform(0.4, 1.8))
        y = rng.standard_normal(d) * 0.8
        prior = pd.EmpiricalPrior(dim=d, atoms=atoms)
        kp = pd.KernelParams(d, sigma)
        w = post.posterior_weights(prior, kp, y)
        lw_oracle = oracle_posterior_log_weights(atoms, sigma, y)
        # relative weight error <= 1e-8 means log-weight gaps at the same scale
        assert np.max(np.abs(w.log_weights - lw_oracle)) <= 1e-8
    _report(2, "posterior oracle equivalence", t0, 30.0)


def _tv_for_fixture(prior, y0, seed, count=10_000):
    kp = pd.KernelParams(prior.dim, 1.0)
    cfg = pd.ModelConfig(
        kernel=kp,
        stop_threshold=pd.default_stop_threshold(prior.dim),
        max_steps=500_000,
        dt_max=0.01,
        seed=seed,
    )
    field = pd.exact_drift(prior, kp, snap_radius=cfg.snap_radius)
    res = pd.reverse_sample_batch(field, y0, cfg, count)
    counts = res.atom_histogram(prior.n)
    freqs = counts / counts.sum()
    w = post.posterior_weights(prior, kp, y0)
    return 0.5 * float(np.abs(freqs - w.weights).sum())


def test_criterion_03_sampler_vs_oracle():
    t0 = time.perf_counter()
    d = 8
    two_point = pd.generate_synthetic("two_point", d, 2, 0, {"separation": 2.0})
    y0 = two_point.atoms[0] + np.full(d, 0.45)
    tv1 = _tv_for_fixture(two_point, y0, seed=301)
    assert tv1 <= 0.05
    rng = np.random.default_rng(302)
    five = pd.EmpiricalPrior(dim=d, atoms=rng.standard_normal((5, d)))
    y0 = rng.standard_normal(d) * 0.5
    tv2 = _tv_for_fixture(five, y0, seed=303)
    assert tv2 <= 0.05
    _report(3, f"sampler vs closed-form posterior (tv={tv1:.4f}, {tv2:.4f})", t0, 300.0)


def _near_far_prior(d, n_near, n_far, r_near, r_far, seed=0):
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_near + n_far, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.concatenate([np.full(n_near, r_near), np.full(n_far, r_far)])
    return pd.EmpiricalPrior(dim=d, atoms=dirs * radii[:, None])


def test_criterion_04_concentration_bound():
    t0 = time.perf_counter()
    for d in (10, 50, 100, 200):
        prior = _near_far_prior(d, 1, 9, 1.0, 1.25, seed=d)
        kp = pd.KernelParams(d, 1.0)
        report = post.concentration_certificate(prior, kp, np.zeros(d), r=1.0, delta=0.1)
        assert report.epsilon_used == pytest.approx(0.1)
        assert report.margin >= -1e-12
        if d == 200:
            off_mass = 1.0 - report.lhs_mass
            assert off_mass <= 1e-6
            with mp.workdps(40):
                want_rhs = float(1 - 10 * mp.mpf("1.1") ** (-198))
            assert rel_err(report.rhs_bound, want_rhs) <= 1e-12
    _report(4, "concentration certificate margins and d=200 off-ball mass", t0, 60.0)


def test_criterion_05_monotone_domination_sweep():
    t0 = time.perf_counter()
    checked = 0
    for d in (3, 10, 50):
        rng = np.random.default_rng(500 + d)
        while checked < (100 * ((3, 10, 50).index(d) + 1)):
            n = int(rng.integers(2, 51))
            atoms = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0)
            prior = pd.EmpiricalPrior(dim=d, atoms=atoms)
            kp = pd.KernelParams(d, float(rng.uniform(0.3, 2.0)))
            y = rng.standard_normal(d) * 0.7
            radius = float(
                np.quantile(np.linalg.norm(atoms - y, axis=1), rng.uniform(0.05, 0.95))
            )
            rep = post.monotone_domination_check(prior, kp, y, radius)
            assert rep.holds, f"violation at d={d}, instance {checked}"
            checked += 1
    assert checked == 300
    _report(5, "monotone domination on 300 randomized instances", t0, 60.0)


def test_criterion_06_leading_order_drift():
    t0 = time.perf_counter()
    d = 1000
    rng = np.random.default_rng(600)
    prior = pd.EmpiricalPrior(dim=d, atoms=rng.standard_normal((5, d)))
    kp = pd.KernelParams(d, 1.0)
    exact = pd.exact_drift(prior, kp)
    lead = pd.leading_order_drift(prior, kp)
    probes = rng.standard_normal((100, d)) * 0.8
    b_e = exact.evaluate_batch(probes).drift
    b_l = lead.evaluate_batch(probes).drift
    rel = np.linalg.norm(b_e - b_l, axis=1) / np.linalg.norm(b_e, axis=1)
    assert float(rel.max()) <= 0.01
    # single-atom magnitude law at d=400
    d = 400
    prior1 = pd.EmpiricalPrior(dim=d, atoms=rng.standard_normal((1, d)))
    kp = pd.KernelParams(d, 1.0)
    field = pd.exact_drift(prior1, kp)
    for rho in (0.5, 2.0, 5.0):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        mag = float(np.linalg.norm(field.evaluate(prior1.atoms[0] + rho * u).drift))
        assert abs(mag - (d - 2) / rho) / ((d - 2) / rho) <= 0.01
    _report(6, f"leading-order drift agreement (max rel {float(rel.max()):.2e})", t0, 60.0)


def test_criterion_07_score_matching_minimiser():
    t0 = time.perf_counter()
    d = 10
    rng = np.random.default_rng(700)
    prior = pd.EmpiricalPrior(dim=d, atoms=rng.standard_normal((4, d)))
    kp = pd.KernelParams(d, 1.0)
    pairs = sm.make_training_pairs(prior, kp, sm.default_truncation(kp), 100_000, seed=701)
    exact = pd.exact_drift(prior, kp, snap_radius=0.0)
    pert = pd.perturb_drift(exact, "additive_gaussian_field", 1.0, seed=702)
    kept = pairs.keep
    t = pairs.targets[kept]
    e = exact.evaluate_batch(pairs.inputs[kept]).drift
    p = pert.evaluate_batch(pairs.inputs[kept]).drift
    gap = np.einsum("md,md->m", p - t, p - t) - np.einsum("md,md->m", e - t, e - t)
    mean_gap = float(np.mean(gap))
    se = float(np.std(gap, ddof=1) / math.sqrt(len(gap)))
    assert mean_gap >= 3.0 * se
    _report(7, f"score-matching minimiser (margin {mean_gap / se:.1f} paired SEs)", t0, 120.0)


def test_criterion_08_estimated_drift_robustness():
    t0 = time.perf_counter()
    d = 50
    atoms = np.zeros((2, d))
    atoms[0, 0] = 1.25
    atoms[1, 0] = -1.25
    prior = pd.EmpiricalPrior(dim=d, atoms=atoms)
    kp = pd.KernelParams(d, 1.0)
    y0 = np.zeros(d)
    y0[0] = 0.25  # distance 1.0 to atom 0, 1.5 to atom 1
    r, delta = 1.0, 0.2
    snap = 1e-3
    cfg = pd.ModelConfig(
        kernel=kp,
        stop_threshold=math.sqrt(570.0),  # fires inside the 10*snap arrival band
        max_steps=500_000,
        dt_max=0.01,
        dt_scale=0.1,
        snap_radius=snap,
        seed=800,
    )
    base = pd.exact_drift(prior, kp, snap_radius=snap)
    magnitude = 0.05 * (d - 2) / r  # <= 5% of the drift scale on the shell
    field = pd.perturb_drift(base, "additive_gaussian_field", magnitude, seed=801)
    res = pd.reverse_sample_batch(field, y0, cfg, 1000)
    threshold_fraction = float((res.stop_codes == 0).mean())
    delta_tilde = 10.0 * snap
    near = res.nearest_distance <= delta_tilde
    in_ball = np.linalg.norm(res.endpoints - y0, axis=1) <= (1 + delta) * r
    success = float((near & in_ball).mean())
    assert success >= 0.90
    assert threshold_fraction >= 0.5  # the stop is threshold-driven, not snap-driven
    _report(8, f"perturbed-drift concentration (success {success:.3f}, "
               f"threshold stops {threshold_fraction:.2f})", t0, 600.0)


def test_criterion_09_forward_law_and_exponential_identity():
    t0 = time.perf_counter()
    d, sigma = 100, 1.0
    rng = np.random.default_rng(900)
    prior = pd.EmpiricalPrior(dim=d, atoms=rng.standard_normal((3, d)))
    kp = pd.KernelParams(d, sigma)
    cfg = pd.ModelConfig(
        kernel=kp, stop_threshold=1.0, max_steps=1, dt_max=1.0, seed=901
    )
    batch = pd.forward_corrupt(prior, cfg, 100_000)
    sq = np.sum((batch.noisy - batch.clean) ** 2, axis=1)
    se = float(np.std(sq, ddof=1) / math.sqrt(len(sq)))
    assert abs(float(np.mean(sq)) - sigma**2 * d) <= 3.0 * se

    def sampler(rng_, ts, count):
        dts = np.diff(ts)
        steps = rng_.standard_normal((count, len(dts), 3)) * np.sqrt(dts)[None, :, None]
        w = np.concatenate([np.zeros((count, 1, 3)), np.cumsum(steps, axis=1)], axis=1)
        return np.sum(w**2, axis=2)

    report = dyn.exp_time_identity_check(sampler, lam=2.0, count=6000, seed=902, grid_steps=800)
    assert report.consistent
    _report(9, "forward second moment and exponential-time identity", t0, 60.0)


def test_criterion_10_block_average_operator():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1000)
    img = rng.standard_normal((32, 32)) * 10.0
    for k in range(5):
        staged = pmod.discretize(pmod.discretize(img, min(k + 1, 5)), k)
        assert np.array_equal(pmod.discretize(img, k).pixels, staged.pixels)
    for _ in range(100):
        z = rng.standard_normal((16, 16))
        y = rng.standard_normal((16, 16))
        k = int(rng.integers(0, 5))
        dflat = 2 ** (2 * k)
        lhs = np.linalg.norm(pmod.discretize(z, k).pixels - pmod.discretize(y, k).pixels)
        rhs = math.sqrt(dflat) * math.sqrt(np.mean((z - y) ** 2))
        assert lhs <= rhs + 1e-12
    _report(10, "block-average refinement consistency and norm bound", t0, 10.0)


DETERMINISM_SPEC = """
[experiment]
name = det
kind = sampler_vs_oracle
seed = 13

[model]
sigma = 1.0

[prior]
kind = two_point
n = 2
separation = 2.0

[sampler_vs_oracle]
dim = 8
trajectories = 500
tv_bound = 0.1
obs_distance = 0.8
"""


def test_criterion_11_artifact_determinism(tmp_path):
    spec = tmp_path / "det.ini"
    spec.write_text(DETERMINISM_SPEC)
    assert cli_main(["run", str(spec), "--out", str(tmp_path / "j1"), "--jobs", "1"]) == 0
    assert cli_main(["run", str(spec), "--out", str(tmp_path / "j4"), "--jobs", "4"]) == 0
    d1 = sorted((tmp_path / "j1" / "det").iterdir())
    d4 = sorted((tmp_path / "j4" / "det").iterdir())
    assert [p.name for p in d1] == [p.name for p in d4]
    for p1, p4 in zip(d1, d4):
        assert p1.read_bytes() == p4.read_bytes(), p1.name
    _report(11, "byte-identical artifacts across worker counts")
