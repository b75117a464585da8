"""Batch front end: orbits, manifold grids, connection searches, figures.

Every command reads one YAML run file, validates it, and stamps each
output with the resolved configuration's hash, so any CSV, JSON, or
SVG can be traced back to the exact request that produced it. Outputs
are sorted and reruns with an unchanged configuration reproduce the
delimited files byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import sys

import click
import numpy as np

from . import __version__, pcrtbp
from .config import RunConfig, config_hash, config_to_dict, load_config
from .connections import search_connections, solution_to_dict
from .exceptions import ApsidalError, NonHyperbolicError
from .frames import build_adapted_frame
from .integrate import Tolerances, configure_workers
from .manifolds import (choose_scale, compute_parameterization,
                        eval_Wp_global, fundamental_domain, globalize,
                        read_grid_csv, series_from_dict, series_to_dict,
                        write_grid_csv)
from .orbits import (build_orbit_data, floquet_decomposition,
                     orbit_to_dict, refine_periodic_orbit,
                     rescale_eigenvectors, seed_resonant_orbit)
from .pcrtbp import SystemModel, make_section

#: energies differing by more than this cannot share a connection
JACOBI_MATCH_TOL = 1e-9


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _tolerances(cfg: RunConfig) -> Tolerances:
    return Tolerances(abs=cfg.tolerances.ode_abs,
                      rel=cfg.tolerances.ode_rel)


def _out_dir(cfg: RunConfig, override: str | None) -> pathlib.Path:
    out = pathlib.Path(override if override is not None
                       else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _orbit_id(cfg: RunConfig, jacobi: float) -> str:
    r = cfg.resonance
    side = "i" if r.interior else "e"
    # families seeded from the non-default apsis get their own id so
    # sibling runs do not overwrite each other
    apsis = f"-{r.apsis[:3]}" if r.apsis is not None else ""
    return f"{cfg.model.name}_{r.m}-{r.n}{side}{apsis}_C{jacobi:.9g}"


def _write_json(path: pathlib.Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


config_option = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="YAML run file.")
out_option = click.option(
    "--out", "out_override", default=None,
    type=click.Path(file_okay=False),
    help="Output directory (overrides the run file's output_dir).")


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Resonant-orbit manifolds and their connections on apsidal
    sections of the planar restricted three-body problem."""
    configure_workers()


@main.command()
@config_option
@out_option
def orbit(config_path: str, out_override: str | None) -> None:
    """Refine the configured resonant orbit, one record per energy."""
    try:
        cfg = load_config(config_path)
        out = _out_dir(cfg, out_override)
        digest = config_hash(cfg)
        model = SystemModel(mu=cfg.model.mu, name=cfg.model.name)
        tol = _tolerances(cfg)
        for jacobi in cfg.jacobi:
            seed, period_guess = seed_resonant_orbit(
                model, cfg.resonance.m, cfg.resonance.n,
                cfg.resonance.interior, jacobi=jacobi,
                apsis=cfg.resonance.apsis)
            data = refine_periodic_orbit(
                model, seed, period_guess, cfg.section,
                target=("jacobi", jacobi),
                newton_tol=cfg.tolerances.newton, tol=tol)
            try:
                data, floquet = floquet_decomposition(data, tol=tol)
            except NonHyperbolicError:
                floquet = None
            record = orbit_to_dict(data, floquet)
            record["id"] = _orbit_id(cfg, jacobi)
            record["config_hash"] = digest
            record["resonance"] = config_to_dict(cfg)["resonance"]
            path = out / f"orbit_{record['id']}.json"
            _write_json(path, record)
            if "lambda_u_tilde" in record:
                stability = f"lambda={record['lambda_u_tilde']:.6g}"
            else:
                stability = "elliptic"
            click.echo(f"wrote {path} (m={data.m}, "
                       f"T={data.period:.12g}, {stability})")
    except ApsidalError as exc:
        _fail(str(exc))


@main.command()
@click.argument("orbit_file", type=click.Path(exists=True,
                                              dir_okay=False))
@config_option
@click.option("--kind", type=click.Choice(["stable", "unstable"]),
              required=True, help="Which manifold branch to expand.")
@out_option
def manifold(orbit_file: str, config_path: str, kind: str,
             out_override: str | None) -> None:
    """Expand, validate, and globalize one manifold of an orbit."""
    try:
        cfg = load_config(config_path)
        out = _out_dir(cfg, out_override)
        digest = config_hash(cfg)
        record = _read_json(orbit_file)
        if abs(record["mu"] - cfg.model.mu) > 1e-15:
            _fail(f"orbit file {orbit_file} was produced at "
                  f"mu={record['mu']!r}, config has {cfg.model.mu!r}")
        model = SystemModel(mu=float(record["mu"]),
                            name=str(record.get("model", "crtbp")))
        tol = _tolerances(cfg)
        data = build_orbit_data(model, np.asarray(record["x0"]),
                                float(record["T"]), record["section"],
                                tol=tol)
        try:
            data, floquet = floquet_decomposition(data, tol=tol)
        except NonHyperbolicError as exc:
            _fail(f"orbit {record.get('id', orbit_file)} is not "
                  f"hyperbolic, no manifold to expand ({exc})")
        frame = build_adapted_frame(data, rescale_eigenvectors(floquet))
        alpha = choose_scale(frame, data, kind, tol=tol)
        series = compute_parameterization(frame, data, kind,
                                          cfg.degree, scale=alpha,
                                          tol=tol)
        series = dataclasses.replace(series, e_tol=cfg.e_tol)
        domain = fundamental_domain(series, data, tol=tol)
        series = dataclasses.replace(series, domain=domain)
        domain_1 = fundamental_domain(series.truncated(1), data,
                                      e_tol=cfg.e_tol, tol=tol)
        section = make_section(model, record["section"])
        grid = globalize(series, model, section,
                         m_grid=cfg.grid.m_grid,
                         n_max=cfg.grid.n_max, tol=tol,
                         section_name=record["section"],
                         provenance=record.get("id", ""))
        orbit_id = record.get("id", pathlib.Path(orbit_file).stem)
        stem = f"manifold_{orbit_id}_{kind}"
        csv_path = out / f"{stem}.csv"
        write_grid_csv(grid, model, csv_path, config_hash=digest)
        manifest = {
            "orbit_id": orbit_id,
            "kind": kind,
            "degree": cfg.degree,
            "lambda": series.multiplier,
            "alpha": series.scale,
            "D": domain,
            "D_degree1": domain_1,
            "domain_ratio": domain / domain_1,
            "E_tol": cfg.e_tol,
            "M_grid": cfg.grid.m_grid,
            "N_max": cfg.grid.n_max,
            "section": record["section"],
            "model": {"mu": model.mu, "name": model.name},
            "csv": csv_path.name,
            "config_hash": digest,
            "series": series_to_dict(series),
            "orbit": record,
        }
        manifest_path = out / f"{stem}.manifest.json"
        _write_json(manifest_path, manifest)
        click.echo(f"wrote {csv_path} ({len(grid)} rows, "
                   f"{int(np.sum(grid.valid))} valid)")
        click.echo(f"wrote {manifest_path} (D={domain:.6g}, "
                   f"D/D1={domain / domain_1:.4g})")
    except ApsidalError as exc:
        _fail(str(exc))


def _load_manifest(path: str) -> tuple[dict, "np.ndarray"]:
    manifest = _read_json(path)
    csv_path = pathlib.Path(path).parent / manifest["csv"]
    grid = read_grid_csv(csv_path, kind=manifest["kind"],
                         section=manifest["section"],
                         provenance=manifest["orbit_id"])
    return manifest, grid


@main.command()
@click.argument("source_manifest",
                type=click.Path(exists=True, dir_okay=False))
@click.argument("target_manifest",
                type=click.Path(exists=True, dir_okay=False))
@config_option
@out_option
def hetero(source_manifest: str, target_manifest: str,
           config_path: str, out_override: str | None) -> None:
    """Search for connections from an unstable grid to a stable one.

    Passing two manifolds of the same orbit runs the homoclinic case;
    nothing else changes.
    """
    try:
        cfg = load_config(config_path)
        out = _out_dir(cfg, out_override)
        digest = config_hash(cfg)
        src, src_grid = _load_manifest(source_manifest)
        tgt, tgt_grid = _load_manifest(target_manifest)
        if src["kind"] != "unstable" or tgt["kind"] != "stable":
            _fail("the source manifest must be an unstable manifold "
                  "and the target a stable one (got "
                  f"{src['kind']!r} -> {tgt['kind']!r})")
        if (src["model"]["mu"] != tgt["model"]["mu"]
                or src["section"] != tgt["section"]):
            _fail("source and target grids live in different models "
                  "or sections")
        c_src = float(src["orbit"]["C"])
        c_tgt = float(tgt["orbit"]["C"])
        if abs(c_src - c_tgt) > JACOBI_MATCH_TOL:
            _fail(f"Jacobi constants differ by {abs(c_src - c_tgt):.3g}"
                  f" (limit {JACOBI_MATCH_TOL:g}); manifolds at "
                  "different energies cannot intersect")
        model = SystemModel(mu=float(src["model"]["mu"]),
                            name=str(src["model"]["name"]))
        section = make_section(model, src["section"])
        tol = _tolerances(cfg)
        src_series = series_from_dict(src["series"])
        tgt_series = series_from_dict(tgt["series"])

        def eval_source(k: int, s: float) -> np.ndarray:
            return eval_Wp_global(src_series, model, section, k, s,
                                  tol=tol)

        def eval_target(k: int, s: float) -> np.ndarray:
            return eval_Wp_global(tgt_series, model, section, k, s,
                                  tol=tol)

        solutions, report = search_connections(
            src_grid, tgt_grid, eval_source, eval_target,
            src_series.domain, src_series.multiplier,
            tgt_series.domain, tgt_series.multiplier,
            n_max=cfg.grid.n_max, tol_s=cfg.tolerances.bisection,
            include_fundamental=cfg.connections.include_fundamental)
        payload = {
            "config_hash": digest,
            "source": {"orbit_id": src["orbit_id"],
                       "kind": src["kind"]},
            "target": {"orbit_id": tgt["orbit_id"],
                       "kind": tgt["kind"]},
            "jacobi": c_src,
            "report": report,
            "solutions": [solution_to_dict(sol) for sol in solutions],
        }
        path = out / (f"hetero_{src['orbit_id']}"
                      f"_to_{tgt['orbit_id']}.json")
        _write_json(path, payload)
        click.echo(f"wrote {path} ({len(solutions)} solutions from "
                   f"{report['hits']} hits, {report['lost']} lost)")
    except ApsidalError as exc:
        _fail(str(exc))


@main.command()
@click.argument("files", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--coords", type=click.Choice(["xy", "Lg"]),
              default="xy", show_default=True,
              help="Projection for the figure.")
@click.option("--out", "out_override", default=None,
              type=click.Path(file_okay=False),
              help="Output directory (defaults beside the inputs).")
def plot(files: tuple[str, ...], coords: str,
         out_override: str | None) -> None:
    """Render manifold manifests and solution files into one SVG.

    Grids draw as per-crossing polylines with the same breaks the
    segment scan applies; solution records add markers.
    """
    from .plotting import render_figure

    try:
        grids = []
        solutions: list[dict] = []
        digest = ""
        for name in files:
            if name.endswith(".manifest.json"):
                manifest, grid = _load_manifest(name)
                model = SystemModel(mu=float(manifest["model"]["mu"]),
                                    name=str(manifest["model"]["name"]))
                label = f"{manifest['orbit_id']} {manifest['kind']}"
                grids.append((grid, model, label))
                digest = digest or manifest.get("config_hash", "")
            else:
                payload = _read_json(name)
                if "solutions" not in payload:
                    _fail(f"{name} is neither a manifold manifest nor "
                          "a solutions file")
                solutions.extend(payload["solutions"])
                digest = digest or payload.get("config_hash", "")
        if not grids:
            _fail("need at least one manifold manifest to set the "
                  "model context")
        out = pathlib.Path(out_override if out_override is not None
                           else pathlib.Path(files[0]).parent)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for f in files:
            name = pathlib.Path(f).name
            for suffix in (".manifest.json", ".json", ".csv"):
                if name.endswith(suffix):
                    name = name[:-len(suffix)]
                    break
            names.append(name)
        path = out / f"plot_{coords}_{'+'.join(names)}.svg"
        render_figure(grids, path, coords=coords,
                      solutions=solutions or None, config_hash=digest)
        click.echo(f"wrote {path}")
    except ApsidalError as exc:
        _fail(str(exc))


if __name__ == "__main__":
    main()
