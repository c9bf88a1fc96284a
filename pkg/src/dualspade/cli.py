"""Command-line surface: reproducible workflows over the library modules.

Every subcommand resolves its configuration, runs one operation, writes its
outputs plus a manifest JSON (resolved config, seed, package version, sha256
digests of the inputs) so each output file is regenerable from its manifest.

Exit codes: 0 ok, 2 validation/parse failure, 3 numerical failure.
"""
from __future__ import annotations

import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .calibration import (
    CalibrationScan,
    IllConditionedError,
    InsufficientPointsError,
    SourceResponseModel,
    fit_scan,
    read_scan_csv,
    write_scan_csv,
)
from .core import DemuxLayout, DualSpadeError, PhotonBudget, Scene, validate_scene
from .estimator import (
    NoConvergenceError,
    NoiseCovariance,
    SingularCovarianceError,
    TooFewConvergedError,
    estimate_series,
    scene_statistics,
    write_statistics_csv,
)
from .fisher import crb_sweep, fig1_grid, write_sweep_csv, write_sweep_summary_json
from .forward import ForwardModel
from .optics import IdealResponse
from .synth import (
    NoiseSpec,
    generate_table1_ensemble,
    read_observation_csv,
    read_timeseries_csv,
    emulate_indistinguishable,
    simulate_bins,
    simulate_single_source,
    write_observation_csv,
    write_timeseries_csv,
)

WAIST_UM = 320.0  # physical waist of the modeled hardware

NUMERICAL_ERRORS = (
    NoConvergenceError,
    SingularCovarianceError,
    TooFewConvergedError,
    IllConditionedError,
    InsufficientPointsError,
    np.linalg.LinAlgError,
)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, name, config, inputs, outputs):
    doc = {
        "subcommand": name,
        "version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(out_dir) / f"{name}_manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return path


def _run(fn):
    """Map typed library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NUMERICAL_ERRORS as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
        except (DualSpadeError, OSError, ValueError, KeyError) as exc:
            click.echo(f"validation failure: {exc}", err=True)
            sys.exit(2)

    return wrapper


class _Units:
    """Length-unit conversion applied only at the CLI boundary."""

    def __init__(self, units):
        self.units = units
        self.scale = WAIST_UM if units == "um" else 1.0

    def to_w0(self, value):
        return value / self.scale

    @property
    def length_scale(self):
        return self.scale


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Master RNG seed.")
@click.option(
    "--out-dir", type=click.Path(file_okay=False), default=".", show_default=True,
    help="Directory receiving all outputs and manifests.",
)
@click.option("--threads", type=int, default=1, show_default=True, help="Worker threads for per-bin estimation.")
@click.option(
    "--units", type=click.Choice(["w0", "um"]), default="w0", show_default=True,
    help="Length unit of CLI inputs/outputs (w0 = 320 um).",
)
@click.version_option(version=__version__)
@click.pass_context
def main(ctx, seed, out_dir, threads, units):
    """Mode-demultiplexed two-source scene simulation and estimation."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    ctx.obj = {
        "seed": seed,
        "out_dir": Path(out_dir),
        "threads": threads,
        "units": _Units(units),
    }


def _layout_from_flags(dual, shift2, split1, symmetric):
    if dual:
        return DemuxLayout(shift2=shift2, split1=split1, symmetric=symmetric)
    return DemuxLayout.single(symmetric=symmetric)


def _ideal_response(layout, distinguishable, offset, gain_amplitude):
    if distinguishable:
        return IdealResponse.perturbed_twin(layout, offset=offset, gain_amplitude=gain_amplitude)
    return IdealResponse(layout)


def _load_model(path):
    with open(path) as fh:
        return SourceResponseModel.from_json(fh.read())


@main.command("ideal-calib")
@click.option("--dual/--no-dual", default=True, show_default=True)
@click.option("--shift2", type=float, default=0.3, show_default=True)
@click.option("--split1", type=float, default=0.5, show_default=True)
@click.option("--distinguishable", is_flag=True, help="Make source 2 a displaced, perturbed copy of source 1.")
@click.option("--offset", type=float, default=-0.01, show_default=True, help="Source 2 displacement (w0).")
@click.option("--gain-amplitude", type=float, default=0.02, show_default=True, help="Source 2 per-mode gain ripple.")
@click.option("--points", type=int, default=61, show_default=True)
@click.option("--out", "out_name", default="calibration.csv", show_default=True)
@click.pass_obj
@_run
def cmd_ideal_calib(obj, dual, shift2, split1, distinguishable, offset, gain_amplitude, points, out_name):
    """Write an ideal single-source calibration scan CSV."""
    layout = _layout_from_flags(dual, shift2, split1, symmetric=False)
    response = _ideal_response(layout, distinguishable, offset, gain_amplitude)
    positions = np.linspace(-0.35, 0.35, points)
    scans = []
    for sid in (1, 2):
        fractions = np.array([response.fractions(sid, x) for x in positions])
        scans.append(CalibrationScan(sid, positions, fractions, layout.active_modes))
    out = obj["out_dir"] / out_name
    write_scan_csv(out, scans)
    config = {
        "dual": dual, "shift2": shift2, "split1": split1,
        "distinguishable": distinguishable, "offset": offset,
        "gain_amplitude": gain_amplitude, "points": points,
        "seed": obj["seed"], "units": obj["units"].units,
    }
    _write_manifest(obj["out_dir"], "ideal_calib", config, [], [out])
    click.echo(f"wrote {out}")


@main.command("fit")
@click.option("--scans", "scans_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--degree", type=int, default=12, show_default=True)
@click.option("--alias", is_flag=True, help="Alias source 2 to source 1 (indistinguishable model).")
@click.option("--out", "out_name", default="model.json", show_default=True)
@click.pass_obj
@_run
def cmd_fit(obj, scans_path, degree, alias, out_name):
    """Fit polynomial response curves to a calibration scan CSV."""
    scans = read_scan_csv(scans_path)
    models = [fit_scan(scan, degree=degree) for scan in scans]
    model = models[0]
    for other in models[1:]:
        model = model.merge(other)
    if alias:
        model = model.aliased()
    out = obj["out_dir"] / out_name
    with open(out, "w") as fh:
        fh.write(model.to_json())
    flagged = {s: f for s, f in model.flagged.items() if f}
    if flagged:
        click.echo(f"flagged high-residual curves: {flagged}", err=True)
    config = {"scans": str(scans_path), "degree": degree, "alias": alias, "seed": obj["seed"]}
    _write_manifest(obj["out_dir"], "fit", config, [scans_path], [out])
    click.echo(f"wrote {out}")


def _parse_layout_json(path):
    with open(path) as fh:
        return DemuxLayout.from_dict(json.load(fh))


@main.command("simulate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dual/--no-dual", default=True, show_default=True)
@click.option("--shift2", type=float, default=0.3, show_default=True)
@click.option("--split1", type=float, default=0.5, show_default=True)
@click.option("--d", "d_val", type=float, default=None)
@click.option("--c", "c_val", type=float, default=None)
@click.option("--p", "p_val", type=float, default=None)
@click.option("--noise", type=click.Choice(["shot", "gaussian", "combined"]), default="shot", show_default=True)
@click.option("--sigma", type=float, default=0.0, show_default=True, help="Additive Gaussian std per mode.")
@click.option("--bins", type=int, default=100, show_default=True)
@click.option("--photons", type=float, default=1e11, show_default=True)
@click.option(
    "--single-position", "single_positions", type=float, multiple=True,
    help="Instead of a scene, write single-source time series parked at these positions.",
)
@click.option("--out", "out_name", default="observations.csv", show_default=True)
@click.pass_obj
@_run
def cmd_simulate(obj, model_path, dual, shift2, split1, d_val, c_val, p_val, noise, sigma, bins, photons, single_positions, out_name):
    """Simulate time-binned observations of one scene (or single-source series)."""
    units = obj["units"]
    layout = _layout_from_flags(dual, shift2, split1, symmetric=False)
    out = obj["out_dir"] / out_name
    response = _load_model(model_path)
    if single_positions:
        series_list = []
        for i, pos in enumerate(single_positions):
            spec = NoiseSpec(kind=noise, sigma=sigma, seed=obj["seed"], bins=bins, photons=photons, stream=i)
            series_list.append(simulate_single_source(response, 1, units.to_w0(pos), spec))
        write_timeseries_csv(out, series_list, layout.active_modes)
    else:
        if d_val is None or c_val is None or p_val is None:
            raise DualSpadeError("--d, --c, --p are required unless --single-position is used")
        scene = validate_scene((units.to_w0(d_val), units.to_w0(c_val), p_val), layout)
        model = ForwardModel(response, layout)
        spec = NoiseSpec(kind=noise, sigma=sigma, seed=obj["seed"], bins=bins, photons=photons)
        series = simulate_bins(model, scene, spec)
        write_observation_csv(out, series, scene, layout.active_modes)
    config = {
        "model": str(model_path), "dual": dual, "shift2": shift2, "split1": split1,
        "d": d_val, "c": c_val, "p": p_val, "noise": noise, "sigma": sigma,
        "bins": bins, "photons": photons, "seed": obj["seed"], "units": units.units,
    }
    _write_manifest(obj["out_dir"], "simulate", config, [model_path], [out])
    click.echo(f"wrote {out}")


@main.command("emulate")
@click.option("--timeseries", "ts_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--x1", type=float, required=True, help="Position of the first series.")
@click.option("--x2", type=float, required=True, help="Position of the second series.")
@click.option("--p", "p_val", type=float, required=True)
@click.option("--out", "out_name", default="emulated.csv", show_default=True)
@click.pass_obj
@_run
def cmd_emulate(obj, ts_path, x1, x2, p_val, out_name):
    """Emulate an indistinguishable two-source scene from single-source series."""
    units = obj["units"]
    x1, x2 = units.to_w0(x1), units.to_w0(x2)
    series_list, modes = read_timeseries_csv(ts_path)
    by_pos = {ts.position: ts for ts in series_list}

    def pick(x):
        pos = min(by_pos, key=lambda q: abs(q - x))
        if abs(pos - x) > 1e-9:
            raise DualSpadeError(f"no series at position {x} in {ts_path} (closest: {pos})")
        return by_pos[pos]

    series, scene = emulate_indistinguishable(pick(x1), pick(x2), p_val)
    out = obj["out_dir"] / out_name
    write_observation_csv(out, series, scene, modes)
    config = {"timeseries": str(ts_path), "x1": x1, "x2": x2, "p": p_val, "seed": obj["seed"]}
    _write_manifest(obj["out_dir"], "emulate", config, [ts_path], [out])
    click.echo(f"wrote {out}")


def _estimate_preset(obj, model, layout, which, bins, photons, limit_scenes):
    scenes = generate_table1_ensemble(which)
    if which == "indistinguishable":
        layout = layout.with_symmetric()
    if limit_scenes:
        scenes = scenes[:limit_scenes]
    fwd = ForwardModel(model, layout)
    stats = []
    for i, scene in enumerate(scenes):
        spec = NoiseSpec(kind="shot", seed=obj["seed"], bins=bins, photons=photons, stream=i)
        series = simulate_bins(fwd, scene, spec)
        mu = fwd.mu(scene)
        n_eff = photons * (0.5 if layout.dual else layout.split1)
        cov = NoiseCovariance.fixed(np.diag(np.maximum(mu, 1e-15)) / n_eff)
        results, _ = estimate_series(fwd, series, cov=cov, threads=obj["threads"])
        stats.append(scene_statistics(results, scene))
    return stats


@main.command("estimate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--obs", "obs_path", type=click.Path(exists=True, dir_okay=False), help="Observation CSV to estimate from.")
@click.option(
    "--preset", type=click.Choice(["table-a", "fig3", "fig4"]),
    help="Simulate-and-estimate a reference ensemble instead of reading observations.",
)
@click.option("--dual/--no-dual", default=True, show_default=True)
@click.option("--shift2", type=float, default=0.3, show_default=True)
@click.option("--split1", type=float, default=0.5, show_default=True)
@click.option("--bins", type=int, default=100, show_default=True, help="Bins per scene for presets.")
@click.option("--photons", type=float, default=1e11, show_default=True)
@click.option("--limit-scenes", type=int, default=0, show_default=True, help="Truncate preset ensembles (0 = all).")
@click.option("--out", "out_name", default="estimates.csv", show_default=True)
@click.pass_obj
@_run
def cmd_estimate(obj, model_path, obs_path, preset, dual, shift2, split1, bins, photons, limit_scenes, out_name):
    """Estimate scene parameters per time bin; write a bias/sensitivity table."""
    if (obs_path is None) == (preset is None):
        raise DualSpadeError("exactly one of --obs or --preset is required")
    units = obj["units"]
    model = _load_model(model_path)
    layout = _layout_from_flags(dual, shift2, split1, symmetric=False)
    out = obj["out_dir"] / out_name
    inputs = [model_path]
    if preset:
        which = "indistinguishable" if preset == "fig4" else "distinguishable"
        stats = _estimate_preset(obj, model, layout, which, bins, photons, limit_scenes)
    else:
        series, scene_ref, _ = read_observation_csv(obs_path)
        fwd = ForwardModel(model, layout)
        results, _ = estimate_series(fwd, series, threads=obj["threads"])
        stats = [scene_statistics(results, scene_ref)]
        inputs.append(obs_path)
    write_statistics_csv(out, stats)
    config = {
        "model": str(model_path), "obs": str(obs_path) if obs_path else None,
        "preset": preset, "dual": dual, "shift2": shift2, "split1": split1,
        "bins": bins, "photons": photons, "limit_scenes": limit_scenes,
        "seed": obj["seed"], "units": units.units,
    }
    _write_manifest(obj["out_dir"], "estimate", config, inputs, [out])
    click.echo(f"wrote {out}")


@main.command("crb-sweep")
@click.option("--preset", type=click.Choice(["fig1"]), default="fig1", show_default=True)
@click.option(
    "--sources", type=click.Choice(["distinguishable", "indistinguishable", "both"]),
    default="both", show_default=True,
)
@click.option(
    "--config", "configs", type=click.Choice(["1mplc", "2mplc", "both"]),
    default="both", show_default=True,
)
@click.option("--photons", type=float, default=1e11, show_default=True)
@click.option("--n-d", type=int, default=30, show_default=True)
@click.option("--n-c", type=int, default=6, show_default=True)
@click.pass_obj
@_run
def cmd_crb_sweep(obj, preset, sources, configs, photons, n_d, n_c):
    """Cramer-Rao bound sweep over the separation/centroid grid."""
    units = obj["units"]
    scenes = fig1_grid(n_d=n_d, n_c=n_c)
    source_list = ["distinguishable", "indistinguishable"] if sources == "both" else [sources]
    config_list = ["1mplc", "2mplc"] if configs == "both" else [configs]
    sweeps = {}
    outputs = []
    for src in source_list:
        for cfg in config_list:
            layout = DemuxLayout.dual_default() if cfg == "2mplc" else DemuxLayout.single()
            response = _ideal_response(layout, src == "distinguishable", -0.01, 0.02)
            fwd = ForwardModel(response, layout)
            sweep = crb_sweep(fwd, scenes, noise_model="shot_noise", n=PhotonBudget(photons))
            label = f"{src}_{cfg}"
            sweeps[label] = sweep
            out = obj["out_dir"] / f"crb_sweep_{label}.csv"
            write_sweep_csv(out, sweep, config_label=label, length_scale=units.length_scale)
            outputs.append(out)
    summary = obj["out_dir"] / "crb_sweep_summary.json"
    write_sweep_summary_json(summary, sweeps, length_scale=units.length_scale)
    outputs.append(summary)
    config = {
        "preset": preset, "sources": sources, "config": configs, "photons": photons,
        "n_d": n_d, "n_c": n_c, "seed": obj["seed"], "units": units.units,
    }
    _write_manifest(obj["out_dir"], "crb_sweep", config, [], outputs)
    for out in outputs:
        click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
