"""Command-line interface: ``planarion <command> [options]``.

Every command that writes files takes ``--out``; derived files share its
stem and a ``<stem>.manifest.json`` run record is written alongside.
``planarion replay <manifest>`` re-runs a recorded command. Exit status
is 0 on success, 1 on a domain error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import json
import math
import os
import re
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import equilibrium as eq
from . import imaging, modes, potfit, rfdynamics, trapmath, voltages
from .trapmath import TWO_PI, PotentialSpec

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        m = re.search(r"invalid choice: '([^']*)'", message)
        if m:
            choices = [a for act in self._actions if isinstance(act, argparse._SubParsersAction) for a in act.choices]
            close = difflib.get_close_matches(m.group(1), choices, n=1)
            if close:
                message += f" (did you mean {close[0]!r}?)"
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _suggest(parser: argparse.ArgumentParser, token: str) -> str:
    opts = [o for o in parser._option_string_actions if o.startswith("--")]
    close = difflib.get_close_matches(token.split("=")[0], opts, n=1)
    return f" (did you mean {close[0]}?)" if close else ""


# run bookkeeping

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Outputs:
    """Collects files in a scratch directory and moves them into place on success."""

    def __init__(self, out: Path | None):
        self.out = Path(out) if out is not None else None
        self.dest = self.out.parent if self.out else None
        self.tmp = None
        if self.out is not None:
            self.dest.mkdir(parents=True, exist_ok=True)
            self.tmp = Path(tempfile.mkdtemp(prefix=".planarion-", dir=self.dest))
        self.names: list[str] = []

    @property
    def stem(self) -> str:
        return self.out.name[: -len("".join(self.out.suffixes))] if self.out.suffixes else self.out.name

    def path(self, name: str | None = None) -> Path:
        name = self.out.name if name is None else name
        if name not in self.names:
            self.names.append(name)
        return self.tmp / name

    def derived(self, suffix: str) -> Path:
        return self.path(self.stem + suffix)

    def commit(self) -> list[Path]:
        final = []
        for name in sorted(os.listdir(self.tmp)):
            os.replace(self.tmp / name, self.dest / name)
            final.append(self.dest / name)
        self.tmp.rmdir()
        return final

    def abort(self) -> None:
        if self.tmp is not None and self.tmp.exists():
            shutil.rmtree(self.tmp)


def _write_manifest(path: Path, record: dict) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    if t is None:
        t = int(os.environ.get("PLANARION_THREADS", "1"))
    if t < 1:
        raise UsageError("--threads must be >= 1")
    return t


def _load_potential(args) -> PotentialSpec:
    if getattr(args, "freqs_hz", None):
        return PotentialSpec.from_hz(*args.freqs_hz)
    if getattr(args, "spec", None):
        spec = trapmath.load_spec(args.spec)
        if not isinstance(spec, PotentialSpec):
            raise ValueError(f"{args.spec} holds a Mathieu spec; a potential spec is required")
        return spec
    raise UsageError("give --spec FILE or --freqs-hz FX FY FZ")


def _schedule(args) -> eq.AnnealSchedule:
    return eq.AnnealSchedule(args.start_temp, args.end_temp, args.sweeps, args.step_scale, args.seed)


def _write_table(path, header, rows, fmt: str) -> None:
    if fmt == "json":
        Path(path).write_text(json.dumps([dict(zip(header, r)) for r in rows], indent=2) + "\n")
    else:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _ext(fmt: str) -> str:
    return ".json" if fmt == "json" else ".csv"


# commands

def cmd_anneal(args, out: Outputs) -> dict:
    spec = _load_potential(args)
    sched = _schedule(args)
    if args.runs == 1:
        cfg = eq.anneal(args.n, spec, sched)
        classes = None
    else:
        classes = eq.enumerate_configurations(args.n, spec, args.runs, sched, threads=_threads(args))
        cfg = classes[0].representative
    energy = eq.total_energy(cfg, spec)
    print(f"energy_e0 {energy:.10f}")
    if args.n >= 2:
        d = np.linalg.norm(cfg.positions[:, None] - cfg.positions[None], axis=-1)
        print(f"min_separation_l0 {d[np.triu_indices(args.n, 1)].min():.10f}")
    if args.n >= 3:
        planar, exc = eq.is_planar(cfg)
        print(f"planar {'yes' if planar else 'no'} max_abs_x_l0 {exc:.3e}")
        if planar:
            print(f"aspect_ratio {eq.aspect_ratio_measured(cfg):.4f}")
    if classes is not None:
        kelvin = spec.units().energy_scale / trapmath.K_B
        print(f"classes {len(classes)}")
    if out.out is not None:
        if args.format == "json":
            doc = {"n_ions": args.n, "seed": args.seed, "spec": spec.to_dict(), "energy_e0": energy,
                   "positions": cfg.positions.tolist()}
            out.path().write_text(json.dumps(doc, indent=2) + "\n")
        else:
            eq.save_configuration(out.path(), cfg, spec, seed=args.seed)
            out.names.append(out.out.name + ".json")
        if classes is not None:
            e0 = classes[0].energy
            rows = [(k, c.energy, 1e3 * kelvin * (c.energy - e0), c.multiplicity, c.occurrences)
                    for k, c in enumerate(classes)]
            _write_table(out.derived("_classes" + _ext(args.format)),
                         ["class_id", "energy_e0", "gap_mK", "multiplicity", "occurrences"], rows, args.format)
    return {"spec": spec.to_dict()}


def cmd_sweep(args, out: Outputs) -> dict:
    spec = _load_potential(args)
    xis = [float(v) for v in args.xi.split(",")]
    warm = eq.WARM_SCHEDULE.with_seed(args.seed)
    curve = eq.anisotropy_sweep(args.n, spec, xis, args.runs, _schedule(args), warm,
                                warm_classes=args.warm_classes, threads=_threads(args))
    gaps = curve.ground_gap_mK()
    for i, xi in enumerate(xis):
        print(f"xi {xi:.4f} gap_mK {gaps[i]:.1f} classes {len(curve.classes[i])}")
    if np.any(np.isfinite(gaps)):
        print(f"max_gap_xi {xis[int(np.nanargmax(gaps))]:.4f}")
    else:
        print("max_gap_xi nan (no excited configuration found)")
    if out.out is not None:
        if args.format == "json":
            out.path().write_text(json.dumps(list(curve.rows()), indent=2) + "\n")
        else:
            eq.save_gap_curve(out.path(), curve)
        from . import plots

        plots.gap_curve(out.derived(".svg"), xis, gaps)
    return {"xi": xis}


def cmd_modes(args, out: Outputs) -> dict:
    spec = _load_potential(args)
    cfg = eq.load_configuration(args.config)
    spec_m = modes.mode_spectrum(cfg, spec)
    f = spec_m.frequencies / TWO_PI
    print(f"modes {len(f)} min_hz {f.min():.1f} max_hz {f.max():.1f}")
    if eq.is_planar(cfg)[0]:
        _, fx = modes.out_of_plane_block(cfg, spec)
        print(f"out_of_plane_hz {fx.min() / TWO_PI:.1f} .. {fx.max() / TWO_PI:.1f}")
    lines = modes.sideband_positions(spec_m, args.tol_hz)
    print(f"sideband_lines {len(lines)}")
    if out.out is not None:
        if args.format == "json":
            doc = {"modes": [{"mode": m, "freq_hz": float(v), "polarization": lab}
                             for m, (v, lab) in enumerate(zip(f, spec_m.labels))],
                   "sidebands": [{"detuning_hz": d, "multiplicity": k} for d, k in lines]}
            out.path().write_text(json.dumps(doc, indent=2) + "\n")
        else:
            modes.save_spectrum(out.path(), spec_m)
        if args.k is not None:
            modes.save_couplings(out.derived("_eta.csv"), modes.lamb_dicke(spec_m, args.k, spec))
        from . import plots

        plots.sideband_lines(out.derived("_sidebands.svg"), lines)
    return {}


def cmd_rfcheck(args, out: Outputs) -> dict:
    spec = _load_potential(args)
    axis = "xyz".index(args.axis)
    if args.config:
        cfg = eq.load_configuration(args.config)
    else:
        cfg = eq.IonConfiguration(np.zeros((1, 3)))
    n = cfg.n_ions
    drive = TWO_PI * args.drive_hz if args.drive_hz else None
    mathieu = trapmath.MathieuSpec.from_potential(spec, args.q, drive)
    units = spec.units()
    pos0 = cfg.positions.copy()
    stray = None
    if args.offset is not None:
        if n != 1:
            raise ValueError("--offset applies to single-ion runs only")
        pos0 = np.array([args.offset], dtype=float)
        stray = rfdynamics.stray_accel_for_offset(mathieu, args.offset)
        predicted = np.array([])
    if n > 1:
        spectrum = modes.mode_spectrum(cfg, spec)
        weight = np.sum(spectrum.eigenvectors[axis::3] ** 2, axis=0)
        sel = weight > 0.5
        predicted = spectrum.frequencies[sel] / TWO_PI
        vecs = spectrum.eigenvectors[axis::3][:, sel]
    else:
        predicted = np.array([spec.omegas[axis] / TWO_PI]) if args.offset is None else predicted
        vecs = np.ones((1, 1))
    if args.kick == "modes":
        kick = rfdynamics.mode_kick(vecs, axis, args.kick_size)
    elif args.kick == "random":
        kick = rfdynamics.make_kick(n, axis, args.kick_size, seed=args.seed)
    elif args.kick == "uniform":
        kick = rfdynamics.make_kick(n, axis, args.kick_size, seed=None)
    else:
        kick = None
    period = TWO_PI / mathieu.drive_freq
    dt = period / args.steps_per_period
    traj = rfdynamics.integrate(pos0, mathieu, units, dt=dt, n_steps=args.periods * args.steps_per_period,
                                initial_kick=kick if args.offset is None else None,
                                stray_accel=stray, record_every=args.record_every)
    print(f"drive_hz {mathieu.drive_freq / TWO_PI:.1f} samples {len(traj.times)}")
    peaks = rfdynamics.extract_frequencies_fft(traj, axis, threshold=args.threshold,
                                               dynamic_range=args.dynamic_range)
    measured = rfdynamics.dominant_frequencies(peaks, f_max=mathieu.drive_freq / TWO_PI / 2)
    if len(predicted):
        err = rfdynamics.match_frequencies(measured, predicted)
        for p, e in zip(np.sort(predicted), err[np.argsort(predicted)]):
            print(f"predicted_hz {p:.1f} rel_err {e:.2e}")
        print(f"max_rel_err {err.max():.2e}")
    mm = rfdynamics.micromotion_amplitude(traj, mathieu.drive_freq)
    print(f"micromotion_l0 max {mm.max():.4e} mean {mm.mean():.4e}")
    if out.out is not None:
        if args.format == "json":
            out.path().write_text(json.dumps([p.__dict__ for p in peaks], indent=2) + "\n")
        else:
            rfdynamics.save_peaks(out.path(), peaks)
        if args.trajectory:
            rfdynamics.save_trajectory(out.derived(".traj"), traj)
    return {"mathieu": mathieu.to_dict()}


def cmd_render(args, out: Outputs) -> dict:
    confs = [eq.load_configuration(c) for c in args.config]
    shape = tuple(args.shape) if args.shape else tuple(
        int(v) for v in np.max([imaging.frame_shape_for(c, args.psf, args.scale) for c in confs], axis=0))
    frames = []
    for j in range(args.frames):
        seed = None if args.no_noise else args.seed + j
        frames.append(imaging.render(confs[j % len(confs)], args.psf, args.scale, args.peak, args.background,
                                     seed, shape, exposure_id=j))
    print(f"frames {len(frames)} shape {shape[0]}x{shape[1]}")
    if out.out is not None:
        if args.frames == 1 and out.out.suffix == ".pgm":
            imaging.save_pgm(out.path(), frames[0])
        else:
            params = {"psf_sigma_px": args.psf, "scale_px_per_l0": args.scale, "peak_counts": args.peak,
                      "background": args.background, "seed": args.seed, "noise": not args.no_noise,
                      "configs": [str(c) for c in args.config]}
            imaging.save_series(out.tmp, frames, params, manifest_name=out.out.name)
    return {"shape": list(shape)}


def cmd_classify(args, out: Outputs) -> dict:
    frames = imaging.load_series(args.series)
    basis = imaging.eigenpictures(frames, args.n_basis, center=args.center, normalize=args.normalize)
    coef = imaging.project_all(frames, basis)
    lab = imaging.cluster(coef, args.eps, args.min_pts, scale=not args.no_standardize)
    p = imaging.configuration_probabilities(lab)
    print(f"frames {len(frames)} clusters {lab.n_clusters} noise_fraction {lab.noise_fraction:.4f}")
    for k, v in enumerate(p):
        print(f"cluster {k} p {v:.4f}")
    if len(p):
        print(f"max_p {p.max():.4f}")
    if out.out is not None:
        if args.format == "json":
            doc = {"labels": lab.labels.tolist(), "p": p.tolist(), "eps": lab.eps, "min_pts": lab.min_pts}
            out.path().write_text(json.dumps(doc, indent=2) + "\n")
        else:
            imaging.save_cluster_report(out.path(), lab)
        from . import plots

        plots.cluster_scatter(out.derived(".svg"), coef, lab.labels)
    return {"eps": lab.eps}


def cmd_fitpot(args, out: Outputs) -> dict:
    pos, unit = potfit.load_positions(args.positions)
    forces = potfit.coulomb_force_field(pos)
    fit = potfit.fit_quadratic(pos, forces)
    res = potfit.residuals(pos, forces, fit)
    scale = None
    if args.omega_z_hz:
        spec = _load_potential(args) if (args.spec or args.freqs_hz) else PotentialSpec.from_hz(1, 1, 1)
        s = potfit.calibrate_scale(pos, TWO_PI * args.omega_z_hz, spec)
        scale = s * 1e6 if unit == "px" else None
        if unit == "um":
            print(f"calibration_factor {s * 1e6:.6f}")
    report = potfit.fit_report(fit, res, scale)
    print(f"xi_inv {report['xi_inv']:.4f} phi {fit.phi:.5f} rms_residual {res.rms:.3e}")
    if scale is not None:
        print(f"scale_um_per_px {scale:.6f}")
    if out.out is not None:
        if args.format == "csv":
            _write_table(out.path(), list(report), [list(report.values())], "csv")
        else:
            potfit.save_report(out.path(), report)
        from . import plots

        plots.force_field(out.derived(".svg"), pos, forces)
    return {}


def _parse_terms(text: str) -> dict:
    terms = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"target term {part!r} is not NAME=VALUE")
        k, v = part.split("=", 1)
        terms[k.strip()] = float(v)
    return terms


def cmd_volts(args, out: Outputs) -> dict:
    basis = voltages.build_basis(args.basis) if args.basis else voltages.build_basis()
    target = voltages.TargetAction.from_terms(**_parse_terms(args.target))
    sol = voltages.solve_tikhonov(basis, target, args.lam, args.compliance)
    for name, v in zip(sol.names, sol.voltages):
        print(f"{name} {v:+.6e}")
    print(f"residual {sol.residual:.3e} lambda {sol.lam:.3e}")
    if out.out is not None:
        if args.format == "csv":
            _write_table(out.path(), ["electrode", "voltage"], list(zip(sol.names, map(float, sol.voltages))), "csv")
        else:
            voltages.save_solution(out.path(), sol)
        if args.write_basis:
            voltages.save_basis(out.derived("_basis.csv"), basis)
    return {}


def cmd_aspect(args, out: Outputs) -> dict:
    zeta = eq.aspect_ratio_theory(args.xi_inv)
    print(f"zeta {zeta:.3f}")
    doc = {"xi_inv": args.xi_inv, "zeta": zeta}
    if args.config:
        doc["zeta_measured"] = eq.aspect_ratio_measured(eq.load_configuration(args.config))
        print(f"zeta_measured {doc['zeta_measured']:.3f}")
    if out.out is not None:
        _write_table(out.path(), list(doc), [list(doc.values())], args.format)
    return {}


def cmd_trapcalc(args, out: Outputs) -> dict:
    spec = _load_potential(args)
    om = trapmath.min_drive_frequency(spec, args.qmax)
    mathieu = trapmath.MathieuSpec.from_potential(spec, args.qmax, om)
    sens = trapmath.freq_sensitivity(mathieu)
    dxi = trapmath.anisotropy_sensitivity(spec, args.dv)
    doc = {"omega_min_hz": om / TWO_PI, "q": list(mathieu.q), "a": list(mathieu.a),
           "domega_dq_hz": list(sens / TWO_PI), "xi": trapmath.anisotropy(spec), "dxi_over_xi": dxi}
    print(f"Omega_min = 2pi x {om / TWO_PI / 1e6:.2f} MHz")
    print("a = " + ", ".join(f"{v:.5f}" for v in mathieu.a))
    print("domega/dq = 2pi x (" + ", ".join(f"{v / TWO_PI / 1e6:.3f}" for v in sens) + ") MHz")
    print(f"xi {doc['xi']:.4f} dxi/xi {dxi:.3e} for dV/V {args.dv:g}")
    if args.n:
        pl = trapmath.planarity_criterion(spec, args.n)
        doc["planarity"] = {"ratio": pl.ratio, "threshold": pl.threshold, "planar": pl.planar}
        print(f"planarity ratio {pl.ratio:.4f} threshold {pl.threshold:.4f} {'planar' if pl.planar else 'not planar'}")
    if out.out is not None:
        out.path().write_text(json.dumps(doc, indent=2) + "\n")
    return {}


# validation

SPEC_KEYS = ("omega_x_hz", "omega_y_hz", "omega_z_hz")


def validate_config(path) -> list[str]:
    """Schema problems of a spec JSON, configuration/positions CSV or coefficient CSV."""
    p = Path(path)
    text = p.read_text()
    problems = []
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            return [f"line {err.lineno}: invalid JSON ({err.msg})"]
        if not isinstance(doc, dict):
            return ["top level must be an object"]
        keys = SPEC_KEYS if any(k in doc for k in SPEC_KEYS) or "drive_hz" not in doc else ("drive_hz",)
        for k in keys + tuple(k for k in ("mass_amu", "charge_e") if k in doc):
            if k not in doc:
                problems.append(f"missing key {k}")
                continue
            v = doc[k]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                problems.append(f"{k}: not a finite number")
            elif k != "charge_e" and v <= 0:
                problems.append(f"{k}: must be > 0, got {v}")
            elif k == "charge_e" and v == 0:
                problems.append("charge_e: must be nonzero")
        return problems
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        return ["empty file"]
    header = rows[0]
    if header == ["electrode", "term", "value"]:
        try:
            voltages.load_basis(p)
        except ValueError as err:
            problems.append(str(err))
        return problems
    layouts = (["ion", "x", "y", "z"], ["ion", "y_px", "z_px"], ["ion", "y_um", "z_um"])
    if header not in layouts:
        return [f"row 1: unknown header {','.join(header)}"]
    seen = {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            problems.append(f"row {r}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            ion = int(row[0])
        except ValueError:
            problems.append(f"row {r}: ion index {row[0]!r} is not an integer")
            continue
        if ion in seen:
            problems.append(f"row {r}: duplicate ion index {ion} (first at row {seen[ion]})")
        seen.setdefault(ion, r)
        for name, val in zip(header[1:], row[1:]):
            try:
                if not math.isfinite(float(val)):
                    raise ValueError
            except ValueError:
                problems.append(f"row {r}: {name} = {val!r} is not a finite number")
    return problems


# parser

def _common(p, seed=True, fmt=True, threads=False, out=True, default_format="csv"):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    if out:
        p.add_argument("--out", type=Path, help="primary output file; derived files share its stem")
    if fmt:
        p.add_argument("--format", choices=("csv", "json"), default=default_format, help="tabular output format")
    if threads:
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $PLANARION_THREADS or 1)")


def _potential_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=False)
    g.add_argument("--spec", type=Path, help="potential spec JSON (omega_x_hz, omega_y_hz, omega_z_hz, ...)")
    g.add_argument("--freqs-hz", type=float, nargs=3, metavar=("FX", "FY", "FZ"),
                   help="secular frequencies in Hz (Ca-40)")


def _anneal_args(p):
    p.add_argument("--sweeps", type=int, default=2000)
    p.add_argument("--start-temp", type=float, default=0.1, help="initial temperature (E0)")
    p.add_argument("--end-temp", type=float, default=1e-6, help="final temperature (E0)")
    p.add_argument("--step-scale", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="planarion", description="Planar ion Coulomb crystal toolkit.")
    ap.add_argument("--version", action="version", version=f"planarion {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("anneal", help="anneal and relax an N-ion crystal")
    p.add_argument("--n", type=int, required=True, help="number of ions")
    _potential_args(p)
    p.add_argument("--runs", type=int, default=1, help="independent runs; > 1 also writes a class census")
    _anneal_args(p)
    _common(p, threads=True)

    p = sub.add_parser("sweep", help="ground-configuration gap versus anisotropy")
    p.add_argument("--n", type=int, required=True)
    _potential_args(p)
    p.add_argument("--xi", required=True, help="comma-separated anisotropies omega_y/omega_z")
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--warm-classes", type=int, default=10)
    _anneal_args(p)
    _common(p, threads=True)

    p = sub.add_parser("modes", help="normal modes, sidebands and Lamb-Dicke factors")
    p.add_argument("--config", type=Path, required=True, help="configuration CSV (ion,x,y,z in l0)")
    _potential_args(p)
    p.add_argument("--k", type=float, nargs=3, metavar=("KX", "KY", "KZ"), help="probe wavevector (1/m)")
    p.add_argument("--tol-hz", type=float, default=10.0, help="merge sideband lines closer than this")
    _common(p, seed=False)

    p = sub.add_parser("rfcheck", help="full rf dynamics versus pseudopotential modes")
    p.add_argument("--config", type=Path, help="configuration CSV (default: one ion at the centre)")
    _potential_args(p)
    p.add_argument("--q", type=float, default=0.1, help="Mathieu q of the rf axes")
    p.add_argument("--drive-hz", type=float, help="drive frequency (default: lowest allowed by q)")
    p.add_argument("--axis", choices=("x", "y", "z"), default="x")
    p.add_argument("--kick", choices=("modes", "random", "uniform", "none"), default="modes")
    p.add_argument("--kick-size", type=float, default=1e-3, help="largest displacement (l0)")
    p.add_argument("--offset", type=float, nargs=3, metavar=("X", "Y", "Z"),
                   help="hold a single ion here (l0) with a uniform stray field")
    p.add_argument("--periods", type=int, default=25000, help="rf periods to integrate")
    p.add_argument("--steps-per-period", type=int, default=100)
    p.add_argument("--record-every", type=int, default=10)
    p.add_argument("--threshold", type=float, default=10.0, help="peak threshold over the median magnitude")
    p.add_argument("--dynamic-range", type=float, default=1e-3, help="peak floor relative to the strongest")
    p.add_argument("--trajectory", action="store_true", help="also write the binary trajectory")
    _common(p)

    p = sub.add_parser("render", help="synthetic camera frames of configurations")
    p.add_argument("--config", type=Path, nargs="+", required=True, help="configurations, used cyclically")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--psf", type=float, default=1.5, help="PSF sigma (px)")
    p.add_argument("--scale", type=float, default=4.0, help="pixels per l0")
    p.add_argument("--peak", type=float, default=200.0, help="spot peak counts")
    p.add_argument("--background", type=float, default=5.0)
    p.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--no-noise", action="store_true")
    _common(p, fmt=False)

    p = sub.add_parser("classify", help="eigenpicture + DBSCAN configuration statistics")
    p.add_argument("--series", type=Path, required=True, help="series manifest JSON")
    p.add_argument("--n-basis", type=int, default=8)
    p.add_argument("--eps", type=float, help="DBSCAN radius (default 0.1 x RMS pairwise distance)")
    p.add_argument("--min-pts", type=int, default=5)
    p.add_argument("--center", action="store_true", help="subtract the mean frame before PCA")
    p.add_argument("--normalize", action="store_true", help="scale frames to unit total counts")
    p.add_argument("--no-standardize", action="store_true",
                   help="cluster raw coefficients instead of RMS-standardized ones")
    _common(p, seed=False)

    p = sub.add_parser("fitpot", help="trap potential from ion positions")
    p.add_argument("--positions", type=Path, required=True, help="CSV ion,y_px,z_px or ion,y_um,z_um")
    p.add_argument("--omega-z-hz", type=float, help="known axial frequency for scale calibration")
    _potential_args(p, required=False)
    _common(p, seed=False, default_format="json")

    p = sub.add_parser("volts", help="electrode voltages for a multipole change")
    p.add_argument("--target", required=True, help="e.g. Ey=100,U1=1e6 (V/m, V/m^2)")
    p.add_argument("--basis", type=Path, help="coefficient CSV (default: synthetic 12-electrode trap)")
    p.add_argument("--lam", type=float, help="Tikhonov lambda (default 1e-3 x largest singular value)")
    p.add_argument("--compliance", type=float, help="voltage limit (V)")
    p.add_argument("--write-basis", action="store_true", help="also write the basis CSV")
    _common(p, seed=False, default_format="json")

    p = sub.add_parser("aspect", help="fluid-model aspect ratio for an anisotropy")
    p.add_argument("--xi-inv", type=float, required=True, help="omega_z / omega_y")
    p.add_argument("--config", type=Path, help="also report the measured aspect ratio")
    _common(p, seed=False)

    p = sub.add_parser("trapcalc", help="drive-frequency bound and sensitivities")
    _potential_args(p)
    p.add_argument("--qmax", type=float, default=0.1)
    p.add_argument("--dv", type=float, default=1e-3, help="relative rf voltage change")
    p.add_argument("--n", type=int, help="ion number for the planarity check")
    _common(p, seed=False, fmt=False)

    p = sub.add_parser("validate", help="schema check of an input file")
    p.add_argument("path", type=Path)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    return ap


COMMANDS = {
    "anneal": cmd_anneal, "sweep": cmd_sweep, "modes": cmd_modes, "rfcheck": cmd_rfcheck,
    "render": cmd_render, "classify": cmd_classify, "fitpot": cmd_fitpot, "volts": cmd_volts,
    "aspect": cmd_aspect, "trapcalc": cmd_trapcalc,
}


def _input_paths(args) -> list[Path]:
    paths = []
    for key in ("spec", "config", "series", "positions", "basis"):
        v = getattr(args, key, None)
        for item in (v if isinstance(v, list) else [v]):
            if isinstance(item, Path):
                paths.append(item)
    return paths


def _params(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) and v
                and isinstance(v[0], Path) else v) for k, v in vars(args).items() if k != "command"}


@contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def _replay(manifest: Path) -> int:
    rec = json.loads(manifest.read_text())
    with _cwd(rec.get("cwd", ".")):
        for p, digest in rec.get("inputs", {}).items():
            if Path(p).exists() and _sha256(p) != digest:
                print(f"warning: input {p} changed since the recorded run", file=sys.stderr)
        return main(rec["argv"])


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            sub = parser._subparsers._group_actions[0].choices.get(args.command) if args.command else parser
            hint = _suggest(sub or parser, extra[0]) if extra[0].startswith("-") else ""
            (sub or parser).error(f"unrecognized arguments: {' '.join(extra)}{hint}")
    except SystemExit as stop:
        return int(stop.code or 0)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        if args.command == "validate":
            problems = validate_config(args.path)
            for msg in problems:
                print(msg)
            return EXIT_OK if not problems else EXIT_DOMAIN
        if args.command == "replay":
            return _replay(args.manifest)
        out = Outputs(getattr(args, "out", None))
        t0 = time.perf_counter()
        try:
            extra_params = COMMANDS[args.command](args, out)
        except BaseException:
            out.abort()
            raise
        if out.out is not None:
            final = out.commit()
            record = {
                "command": args.command,
                "argv": argv,
                "cwd": os.getcwd(),
                "inputs": {str(p): _sha256(p) for p in _input_paths(args) if p.exists()},
                "outputs": {str(p): _sha256(p) for p in final},
                "parameters": {**_params(args), **(extra_params or {})},
                "seed": getattr(args, "seed", None),
                "version": __version__,
                "duration_s": time.perf_counter() - t0,
            }
            if hasattr(args, "threads"):
                record["parameters"]["threads"] = _threads(args)
            _write_manifest(out.dest / f"{out.stem}.manifest.json", record)
        return EXIT_OK
    except UsageError as err:
        print(f"planarion {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, RuntimeError, OSError, KeyError) as err:
        print(f"planarion {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DOMAIN


run = main

if __name__ == "__main__":
    sys.exit(main())
