"""Experiment orchestration behind the command-line runner.

Experiment specs are flat ``key = value`` text files with section headers
(INI syntax).  Common sections:

    [experiment]   name, kind, seed, repetitions, outputs
    [model]        sigma, stop_threshold, max_steps, dt_max, dt_scale, snap_radius
    [prior]        kind + generator parameters, or file= / idx= sources
    [<kind>]       parameters specific to the experiment kind

Artifacts are CSV and JSON only (plus gnuplot helper scripts, emitted but
never executed), written into ``<outputs>/<name>/`` together with a manifest
recording the spec hash, seed and library version.  Runs are deterministic:
identical spec and seed give byte-identical artifacts for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import shutil
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import active_backend
from .errors import InvalidParameterError, PolarDenoiseError
from .kernel import KernelParams
from .prior import (
    EmpiricalPrior,
    ImageGrid,
    generate_synthetic,
    grid_from_atom,
    load_idx,
    load_prior,
    prior_from_grids,
)
from .dynamics import (
    ModelConfig,
    StopReason,
    default_stop_threshold,
    exact_drift,
    leading_order_drift,
    perturb_drift,
    reverse_sample,
    reverse_sample_batch,
)
from .posterior import concentration_certificate, posterior_weights
from .specfun import bessel_eval, log_bessel_k
from .util import spawned_rng

EXPERIMENT_KINDS = (
    "concentration_table",
    "sampler_vs_oracle",
    "drift_profile",
    "robustness_theorem2",
    "image_reconstruction",
    "specfun_audit",
)


class UsageError(PolarDenoiseError):
    """Bad invocation or unusable spec file (CLI exit code 1)."""


class ExperimentAssertionError(PolarDenoiseError):
    """An internal experiment assertion failed (CLI exit code 2)."""


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    seed: int
    repetitions: int
    outputs: Path
    model: dict
    prior: dict
    params: dict
    raw_text: str

    @property
    def spec_sha256(self) -> str:
        return hashlib.sha256(self.raw_text.encode("utf-8")).hexdigest()


def parse_experiment_spec(path, *, out_override=None, seed_override=None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"spec file not found: {path}")
    text = path.read_text(encoding="utf-8")
    cp = ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except ConfigParserError as exc:
        raise UsageError(f"cannot parse spec file {path}: {exc}") from exc
    if "experiment" not in cp:
        raise UsageError(f"spec file {path} is missing the [experiment] section")
    exp = cp["experiment"]
    name = exp.get("name", "").strip()
    kind = exp.get("kind", "").strip()
    if not name:
        raise UsageError("experiment name must be nonempty")
    if kind not in EXPERIMENT_KINDS:
        raise UsageError(f"unknown experiment kind {kind!r}; choose from {EXPERIMENT_KINDS}")
    try:
        seed = int(exp.get("seed", "0"))
        repetitions = int(exp.get("repetitions", "1"))
    except ValueError as exc:
        raise UsageError(f"bad integer in [experiment]: {exc}") from exc
    if repetitions < 1:
        raise UsageError(f"repetitions must be >= 1, got {repetitions}")
    if seed_override is not None:
        seed = int(seed_override)
    outputs = Path(out_override) if out_override else Path(exp.get("outputs", "out"))
    model = dict(cp["model"]) if "model" in cp else {}
    prior = dict(cp["prior"]) if "prior" in cp else {}
    params = dict(cp[kind]) if kind in cp else {}
    return ExperimentSpec(
        name=name,
        kind=kind,
        seed=seed,
        repetitions=repetitions,
        outputs=outputs,
        model=model,
        prior=prior,
        params=params,
        raw_text=text,
    )


def _fget(d: dict, key: str, default: float) -> float:
    try:
        return float(d.get(key, default))
    except ValueError as exc:
        raise UsageError(f"bad float for {key!r}: {d.get(key)!r}") from exc


def _iget(d: dict, key: str, default: int) -> int:
    try:
        return int(d.get(key, default))
    except ValueError as exc:
        raise UsageError(f"bad integer for {key!r}: {d.get(key)!r}") from exc


def _model_config(spec: ExperimentSpec, dim: int) -> ModelConfig:
    m = spec.model
    sigma = _fget(m, "sigma", 1.0)
    kernel = KernelParams(dim, sigma)
    stop = _fget(m, "stop_threshold", default_stop_threshold(dim))
    snap = m.get("snap_radius")
    return ModelConfig(
        kernel=kernel,
        stop_threshold=stop,
        max_steps=_iget(m, "max_steps", 500_000),
        dt_max=_fget(m, "dt_max", 0.01),
        dt_scale=_fget(m, "dt_scale", 0.1),
        snap_radius=float(snap) if snap is not None else None,
        seed=spec.seed,
    )


_GEN_PARAM_KEYS = ("separation", "radius", "spread", "offset", "centers", "center_scale")


def _build_prior(spec: ExperimentSpec, dim: int) -> EmpiricalPrior:
    p = spec.prior
    if "file" in p:
        return load_prior(p["file"])
    if "idx" in p:
        grids = load_idx(p["idx"], crop_to_pow2=p.get("idx_crop", "").lower() in ("1", "true"))
        limit = _iget(p, "max_images", 2000)
        return prior_from_grids(grids[:limit], source=f"idx:{p['idx']}")
    kind = p.get("kind", "two_point")
    n = _iget(p, "n", 2)
    shape = {}
    for key in _GEN_PARAM_KEYS:
        if key in p:
            shape[key] = int(p[key]) if key == "centers" else float(p[key])
    return generate_synthetic(kind, dim, n, spec.seed, shape)


def _place_observation(spec: ExperimentSpec, prior: EmpiricalPrior, params: dict) -> np.ndarray:
    if "observation" in params:
        vals = [float(v) for v in params["observation"].split(",")]
        if len(vals) != prior.dim:
            raise UsageError(
                f"observation has {len(vals)} components, prior dim is {prior.dim}"
            )
        return np.asarray(vals)
    dist = _fget(params, "obs_distance", 1.0)
    rng = spawned_rng(spec.seed, 11)
    direction = rng.standard_normal(prior.dim)
    direction /= np.linalg.norm(direction)
    return prior.atoms[0] + dist * direction


# --- deterministic writers ----------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="ascii")


def _write_grid_csv(path: Path, grid: ImageGrid) -> None:
    _write_csv(
        path,
        [f"c{j}" for j in range(grid.pixels.shape[1])],
        grid.pixels.tolist(),
    )


def _write_gnuplot(path: Path, csv_name: str, xlabel: str, ylabel: str, ycol: int) -> None:
    path.write_text(
        "set datafile separator ','\n"
        f"set xlabel '{xlabel}'\n"
        f"set ylabel '{ylabel}'\n"
        "set key off\n"
        f"plot '{csv_name}' using 1:{ycol} skip 1 with linespoints\n",
        encoding="ascii",
    )


# --- experiment kinds -----------------------------------------------------------


def _run_concentration_table(spec: ExperimentSpec, outdir: Path, jobs: int) -> list[str]:
    dims = [int(v) for v in spec.params.get("dims", "10,50,100,200").split(",")]
    delta = _fget(spec.params, "delta", 0.1)
    rows = []
    for d in dims:
        prior = _build_prior(spec, d)
        kernel = KernelParams(d, _fget(spec.model, "sigma", 1.0))
        y = _place_observation(spec, prior, spec.params)
        # ball radius = realized distance to the nearest atom, computed with
        # the same arithmetic the certificate uses, so the ball is guaranteed
        # nonempty regardless of rounding in the placement
        diff = prior.atoms - y
        r = float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).min())
        report = concentration_certificate(prior, kernel, y, r, delta)
        rows.append(
            [d, kernel.sigma, report.epsilon_used, delta, report.lhs_mass, report.rhs_bound, report.margin]
        )
    _write_csv(outdir / "table.csv", ["d", "sigma", "epsilon", "delta", "lhs_mass", "rhs_bound", "margin"], rows)
    _write_gnuplot(outdir / "table.gp", "table.csv", "d", "margin", 7)
    bad = [row for row in rows if row[6] < -1e-12]
    if bad:
        raise ExperimentAssertionError(f"certificate margin below -1e-12 for d={bad[0][0]}")
    return ["table.csv", "table.gp"]


def _run_sampler_vs_oracle(spec: ExperimentSpec, outdir: Path, jobs: int) -> list[str]:
    dim = _iget(spec.params, "dim", 8)
    count = _iget(spec.params, "trajectories", 10_000)
    tv_bound = _fget(spec.params, "tv_bound", 0.05)
    prior = _build_prior(spec, dim)
    config = _model_config(spec, dim)
    field = exact_drift(prior, config.kernel, snap_radius=config.snap_radius)
    y0 = _place_observation(spec, prior, spec.params)
    result = reverse_sample_batch(field, y0, config, count, jobs=jobs)
    counts = result.atom_histogram(prior.n)
    freqs = counts / counts.sum()
    w = posterior_weights(prior, config.kernel, y0)
    tv = 0.5 * float(np.abs(freqs - w.weights).sum())
    rows = [
        [i, int(counts[i]), float(freqs[i]), float(w.weights[i])]
        for i in range(prior.n)
    ]
    _write_csv(outdir / "histogram.csv", ["atom", "count", "frequency", "posterior"], rows)
    _write_json(
        outdir / "result.json",
        {
            "tv_distance": tv,
            "tv_bound": tv_bound,
            "trajectories": count,
            "unsnapped": int((result.snapped < 0).sum()),
        },
    )
    if tv > tv_bound:
        raise ExperimentAssertionError(f"TV distance {tv} exceeds bound {tv_bound}")
    return ["histogram.csv", "result.json"]


def _run_drift_profile(spec: ExperimentSpec, outdir: Path, jobs: int) -> list[str]:
    dim = _iget(spec.params, "dim", 1000)
    n_probe = _iget(spec.params, "probes", 100)
    shell = _fget(spec.params, "shell_radius", 2.0)
    prior = _build_prior(spec, dim)
    kernel = KernelParams(dim, _fget(spec.model, "sigma", 1.0))
    exact = exact_drift(prior, kernel)
    lead = leading_order_drift(prior, kernel)
    rng = spawned_rng(spec.seed, 23)
    dirs = rng.standard_normal((n_probe, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    probes = prior.atoms.mean(axis=0) + shell * dirs
    ev_e = exact.evaluate_batch(probes)
    ev_l = lead.evaluate_batch(probes)
    diff = np.linalg.norm(ev_e.drift - ev_l.drift, axis=1)
    mag_e = np.linalg.norm(ev_e.drift, axis=1)
    mag_l = np.linalg.norm(ev_l.drift, axis=1)
    rel = diff / mag_e
    rows = [
        [i, float(rel[i]), float(mag_e[i]), float(mag_l[i]), float(dim / mag_e[i]), float(ev_e.nearest_distance[i])]
        for i in range(n_probe)
    ]
    _write_csv(
        outdir / "profile.csv",
        ["probe", "rel_error", "mag_exact", "mag_leading", "distance_estimate", "nearest_distance"],
        rows,
    )
    _write_gnuplot(outdir / "profile.gp", "profile.csv", "probe", "rel_error", 2)
    summary = {"max_rel_error": float(rel.max()), "probes": n_probe, "dim": dim}
    _write_json(outdir / "summary.json", summary)
    bound = spec.params.get("rel_err_bound")
    if bound is not None and rel.max() > float(bound):
        raise ExperimentAssertionError(
            f"leading-order drift error {rel.max()} exceeds bound {bound}"
        )
    return ["profile.csv", "profile.gp", "summary.json"]


def _run_robustness(spec: ExperimentSpec, outdir: Path, jobs: int) -> list[str]:
    dim = _iget(spec.params, "dim", 50)
    runs = _iget(spec.params, "runs", 1000)
    delta = _fget(spec.params, "delta", 0.2)
    pert_fraction = _fget(spec.params, "pert_fraction", 0.05)
    success_bound = _fget(spec.params, "success_bound", 0.9)
    prior = _build_prior(spec, dim)
    config = _model_config(spec, dim)
    y0 = _place_observation(spec, prior, spec.params)
    dists = np.linalg.norm(prior.atoms - y0, axis=1)
    r = float(dists.min())
    # perturbation magnitude: the stated fraction of the drift scale on the
    # shell at radius r, |b| ~ (d-2)/r
    magnitude = pert_fraction * (dim - 2) / r
    base = exact_drift(prior, config.kernel, snap_radius=config.snap_radius)
    field = perturb_drift(base, "additive_gaussian_field", magnitude, spec.seed)
    result = reverse_sample_batch(field, y0, config, runs, jobs=jobs)
    delta_tilde = 10.0 * config.snap_radius
    near_manifold = result.nearest_distance <= delta_tilde
    in_ball = np.linalg.norm(result.endpoints - y0, axis=1) <= (1.0 + delta) * r
    success = near_manifold & in_ball
    frac = float(success.mean())
    _write_json(
        outdir / "result.json",
        {
            "success_fraction": frac,
            "success_bound": success_bound,
            "runs": runs,
            "perturbation_magnitude": magnitude,
            "near_manifold_fraction": float(near_manifold.mean()),
            "in_ball_fraction": float(in_ball.mean()),
            "stop_threshold": config.stop_threshold,
            "delta_tilde": delta_tilde,
            "radius": r,
        },
    )
    if frac < success_bound:
        raise ExperimentAssertionError(
            f"robust success fraction {frac} below bound {success_bound}"
        )
    return ["result.json"]


def synthetic_digit_grids(
    resolution_log2: int, per_class: int, seed: int, *, classes: int = 2, jitter: float = 0.05
) -> tuple[list[ImageGrid], list[int]]:
    """Two-class glyph images whose classes differ on the right half.

    Class 0 carries a bright vertical stripe in the right half; class 1 a
    bright horizontal stripe plus a dark right-bottom block.  Atoms jitter
    around the glyphs by seeded pixel noise, so the prior is a finite cloud
    near two well-separated templates.
    """
    side = 2**resolution_log2
    if side < 4:
        raise InvalidParameterError("resolution_log2: need at least a 4x4 grid")
    if classes not in (1, 2):
        raise InvalidParameterError(f"classes: must be 1 or 2, got {classes}")
    base0 = np.zeros((side, side))
    base0[:, 3 * side // 4] = 1.0
    base1 = np.zeros((side, side))
    base1[side // 2, :] = 1.0
    bases = [base0, base1][:classes]
    rng = np.random.default_rng(seed)
    grids, labels = [], []
    for c, base in enumerate(bases):
        for _ in range(per_class):
            pix = base + jitter * rng.standard_normal((side, side))
            grids.append(ImageGrid(resolution_log2=resolution_log2, pixels=pix))
            labels.append(c)
    return grids, labels


def left_noise_corrupt(grid: ImageGrid, rng: np.random.Generator) -> ImageGrid:
    """Replace the left half of the image with uniform noise."""
    pix = grid.pixels.copy()
    side = pix.shape[0]
    pix[:, : side // 2] = rng.random((side, side // 2))
    return ImageGrid(resolution_log2=grid.resolution_log2, pixels=pix)


def _run_image_reconstruction(spec: ExperimentSpec, outdir: Path, jobs: int) -> list[str]:
    k = _iget(spec.params, "resolution_log2", 3)
    snapshots = _iget(spec.params, "snapshots", 4)
    corruption = spec.params.get("corruption", "left_noise")
    if corruption not in ("left_noise", "forward"):
        raise UsageError(f"corruption must be left_noise or forward, got {corruption!r}")
    if "idx" in spec.prior:
        grids = load_idx(
            spec.prior["idx"],
            crop_to_pow2=spec.prior.get("idx_crop", "").lower() in ("1", "true"),
        )
        limit = _iget(spec.prior, "max_images", 2000)
        grids = grids[:limit]
        labels = list(range(len(grids)))
        k = grids[0].resolution_log2
    else:
        per_class = _iget(spec.params, "per_class", 20)
        classes = _iget(spec.params, "classes", 2)
        jitter = _fget(spec.params, "jitter", 0.05)
        grids, labels = synthetic_digit_grids(
            k, per_class, spec.seed, classes=classes, jitter=jitter
        )
    prior = prior_from_grids(grids, labels=labels, source="image_experiment")
    dim = prior.dim
    config = _model_config(spec, dim)
    field = exact_drift(prior, config.kernel, snap_radius=config.snap_radius)

    artifacts: list[str] = []
    summary_rows = []
    store_every = _iget(spec.params, "store_every", 16)
    for rep in range(spec.repetitions):
        rng = spawned_rng(spec.seed, 31, rep)
        pick = int(rng.integers(0, prior.n))
        clean_grid = grid_from_atom(prior.atoms[pick], k)
        if corruption == "left_noise":
            corrupted = left_noise_corrupt(clean_grid, rng)
        else:
            u = rng.standard_exponential()
            v = rng.standard_normal(dim)
            corrupted = grid_from_atom(
                prior.atoms[pick] + config.kernel.sigma * math.sqrt(u) * v, k
            )
        y0 = corrupted.pixels.reshape(-1)
        rep_cfg = ModelConfig(
            kernel=config.kernel,
            stop_threshold=config.stop_threshold,
            max_steps=config.max_steps,
            dt_max=config.dt_max,
            dt_scale=config.dt_scale,
            snap_radius=config.snap_radius,
            seed=int(spawned_rng(spec.seed, 37, rep).integers(0, 2**62)),
        )
        traj = reverse_sample(field, y0, rep_cfg, store_every=store_every)
        prefix = f"rep{rep:03d}_"
        _write_grid_csv(outdir / f"{prefix}clean.csv", clean_grid)
        _write_grid_csv(outdir / f"{prefix}corrupted.csv", corrupted)
        artifacts += [f"{prefix}clean.csv", f"{prefix}corrupted.csv"]
        final_acc = traj.final_accumulated
        for j in range(1, snapshots + 1):
            target = final_acc * j / (snapshots + 1)
            idx = int(np.searchsorted(traj.accumulated_l2sq, target))
            idx = min(idx, traj.states.shape[0] - 1)
            name = f"{prefix}snapshot_{j:02d}.csv"
            _write_grid_csv(outdir / name, grid_from_atom(traj.states[idx], k))
            artifacts.append(name)
        endpoint_grid = grid_from_atom(traj.endpoint, k)
        _write_grid_csv(outdir / f"{prefix}endpoint.csv", endpoint_grid)
        artifacts.append(f"{prefix}endpoint.csv")
        snapped = traj.endpoint_snapped
        nearest = int(np.argmin(np.linalg.norm(prior.atoms - traj.endpoint, axis=1)))
        summary_rows.append(
            {
                "rep": rep,
                "source_atom": pick,
                "source_label": labels[pick],
                "stop_reason": traj.stop_reason.value,
                "snapped_atom": -1 if snapped is None else snapped,
                "nearest_atom": nearest,
                "nearest_label": labels[nearest],
                "label_correct": labels[nearest] == labels[pick],
                "steps": traj.n_steps,
            }
        )
    _write_json(outdir / "summary.json", {"repetitions": summary_rows})
    artifacts.append("summary.json")
    return artifacts


def _run_specfun_audit(spec_or_none, outdir: Path | None, jobs: int = 1) -> tuple[list[str], dict]:
    """Shared by the experiment kind and the `audit-specfun` subcommand."""
    from importlib.resources import files

    table = json.loads(files("polar_denoise.data").joinpath("bessel_audit.json").read_text())
    rows = []
    worst_logk = worst_ratio = 0.0
    for p in table["points"]:
        ev = bessel_eval(p["order"], p["argument"])
        e_logk = abs(ev.log_k - p["log_k"]) / max(1e-300, abs(p["log_k"]))
        e_ratio = abs(ev.ratio_up - p["ratio_up"]) / abs(p["ratio_up"])
        worst_logk = max(worst_logk, e_logk)
        worst_ratio = max(worst_ratio, e_ratio)
        rows.append([p["order"], p["argument"], ev.log_k, p["log_k"], e_logk, e_ratio])
    # half-integer closed forms
    worst_closed = 0.0
    for twice in (1, 3, 5, 7):
        nu = twice / 2.0
        for z in (0.1, 1.0, 10.0, 100.0):
            poly = {0.5: 1.0, 1.5: 1.0 + 1.0 / z, 2.5: 1.0 + 3.0 / z + 3.0 / z**2,
                    3.5: 1.0 + 6.0 / z + 15.0 / z**2 + 15.0 / z**3}[nu]
            closed = 0.5 * math.log(math.pi / (2.0 * z)) - z + math.log(poly)
            err = abs(log_bessel_k(nu, z) - closed) / abs(closed)
            worst_closed = max(worst_closed, err)
    summary = {
        "points": len(rows),
        "max_rel_err_log_k": worst_logk,
        "max_rel_err_ratio": worst_ratio,
        "max_rel_err_closed_form": worst_closed,
        "tol_log_k": 1e-10,
        "tol_ratio": 1e-8,
        "tol_closed_form": 1e-12,
        "pass": bool(worst_logk <= 1e-10 and worst_ratio <= 1e-8 and worst_closed <= 1e-12),
    }
    artifacts: list[str] = []
    if outdir is not None:
        _write_csv(
            outdir / "audit.csv",
            ["order", "argument", "log_k", "log_k_oracle", "rel_err_log_k", "rel_err_ratio"],
            rows,
        )
        _write_json(outdir / "audit.json", summary)
        artifacts = ["audit.csv", "audit.json"]
    if not summary["pass"]:
        raise ExperimentAssertionError(f"specfun audit failed: {summary}")
    return artifacts, summary


_RUNNERS = {
    "concentration_table": _run_concentration_table,
    "sampler_vs_oracle": _run_sampler_vs_oracle,
    "drift_profile": _run_drift_profile,
    "robustness_theorem2": _run_robustness,
    "image_reconstruction": _run_image_reconstruction,
}


def run_experiment(spec: ExperimentSpec, *, jobs: int = 1) -> Path:
    """Execute one experiment spec; returns the run directory.

    Creates ``<outputs>/<name>/``; on any failure the partially written run
    directory is removed before the error propagates.
    """
    outdir = spec.outputs / spec.name
    if outdir.exists():
        raise UsageError(f"run directory already exists: {outdir}")
    outdir.mkdir(parents=True)
    try:
        if spec.kind == "specfun_audit":
            artifacts, _ = _run_specfun_audit(spec, outdir, jobs)
        else:
            artifacts = _RUNNERS[spec.kind](spec, outdir, jobs)
        manifest = {
            "name": spec.name,
            "kind": spec.kind,
            "seed": spec.seed,
            "version": __version__,
            "backend": active_backend(),
            "spec_sha256": spec.spec_sha256,
            "artifacts": sorted(artifacts),
        }
        _write_json(outdir / "manifest.json", manifest)
    except BaseException:
        shutil.rmtree(outdir, ignore_errors=True)
        raise
    return outdir
