"""Command line front end.

Every subcommand reads a configuration file, runs one pipeline and writes
CSV tables, a gnuplot script per table and ``manifest.json`` into ``--out``.
Exit status: 0 on success, 1 for configuration errors, 2 when a
self-consistent loop does not converge (outputs are still written).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, units
from .config import DEFAULT_CONFIG, parse_config, parse_config_text, parse_etas
from .errors import ConfigurationError, ConvergenceError, VibpolError
from .lattice import KGrid, harmonic_gf, phonon_basis
from .md import estimate_gf, run_trajectories, write_trajectory_dump
from .scp import scp_basis, scp_solve
from .spectra import (
    SpectrumResult,
    find_peaks,
    lifetime_fs,
    matter_gamma_peak,
    rabi_scan,
    spectral_function,
    write_dispersion_csv,
    write_rabi_csv,
    write_spectrum_csv,
)
from .vdmft import SelfEnergy, _probe_spectra, assemble_polariton_gf, vdmft_loop

log = logging.getLogger("vibpol")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2


# ----------------------------------------------------------------- run record


class Run:
    """Collects outputs, timings and summaries for the manifest."""

    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.stages = {}
        self.summary = {}
        self.notes = []
        self.converged = True

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()
                log.info("stage %s", name)

            def __exit__(self, *exc):
                run.stages[name] = round(time.perf_counter() - self.t0, 3)

        return _Timer()

    def gnuplot(self, name, csv_name, body):
        with open(self.path(name), "w") as fh:
            fh.write(f"# gnuplot script for {csv_name}\n")
            fh.write("set datafile separator ','\nset key autotitle columnhead\n")
            fh.write(body.rstrip() + "\n")

    def write_manifest(self):
        outputs = []
        for name in sorted(set(self.files)):
            data = (self.out / name).read_bytes()
            outputs.append(
                {"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
            )
        manifest = {
            "program": "vibpol",
            "version": __version__,
            "command": self.args.command,
            "argv": self.args.argv,
            "seed": self.cfg.md.seed,
            "threads": self.cfg.md.threads,
            "config_path": self.cfg.path,
            "config": self.cfg.resolved,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "stages_seconds": self.stages,
            "outputs": outputs,
            "convergence": self.summary,
            "converged": self.converged,
            "notes": self.notes,
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _peak_dicts(peaks):
    return [
        {
            "position_meV": p.position_mev,
            "fwhm_meV": p.fwhm_mev,
            "height": p.height,
            "fitted": p.fitted,
            "lifetime_fs": lifetime_fs(p.fwhm),
        }
        for p in peaks
    ]


def _spectrum_script(csv_name, title):
    return (
        f"set title '{title}'\nset xlabel 'omega (meV)'\nset ylabel 'k (1/bohr)'\n"
        "set view map\nset palette rgb 33,13,10\n"
        f"splot '{csv_name}' using 2:1:3 with points pt 5 ps 0.3 palette notitle\n"
    )


def _display_kpoints(params, stride):
    """Commensurate k from Gamma to the zone edge, every ``stride``-th one."""
    n = params.n_sites
    m = np.arange(0, n // 2 + 1, max(1, stride))
    if m[-1] != n // 2:
        m = np.append(m, n // 2)
    return 2.0 * np.pi * m / (n * params.a)


# ---------------------------------------------------------------- subcommands


def cmd_dispersion(run):
    cfg = run.cfg
    orders = [int(x) for x in run.args.stencil_orders.split(",")] if run.args.stencil_orders else [
        cfg.params.stencil_order
    ]
    n = cfg.grid["n_k_path"]
    for order in orders:
        params = cfg.params.with_(stencil_order=order)
        with run.stage(f"dispersion_order{order}"):
            if run.args.near_gamma:
                kgrid = KGrid.near_gamma(params, n)
            else:
                kgrid = KGrid.full_zone(params.a, n)
            basis = phonon_basis(params, kgrid)
        name = f"dispersion_order{order}.csv"
        write_dispersion_csv(run.path(name), basis)
        run.gnuplot(
            f"dispersion_order{order}.gp",
            name,
            "set xlabel 'k (1/bohr)'\nset ylabel 'omega (meV)'\n"
            f"plot for [b=0:{basis.n_bands - 1}] '{name}' using 1:($2==b ? $3 : 1/0) "
            "with lines title sprintf('band %d', b)\n",
        )
        run.summary[f"order{order}"] = {
            "zone_edge_meV": units.hartree_to_mev(basis.frequencies[-1]).tolist()
            if not run.args.near_gamma
            else None,
            "gamma_meV": units.hartree_to_mev(basis.frequencies[0]).tolist(),
        }
    return EXIT_OK


def cmd_scp(run):
    cfg = run.cfg
    params = cfg.params if run.args.coupled else cfg.params.isolated_matter()
    kgrid = KGrid.uniform(params.a, params.n_sites)
    with run.stage("scp_solve"):
        try:
            res = scp_solve(params, kgrid, **cfg.scp)
        except ConvergenceError as exc:
            run.converged = False
            run.summary["error"] = str(exc)
            run.summary["history"] = exc.history[-5:]
            return EXIT_CONVERGENCE
    path = KGrid.full_zone(params.a, cfg.grid["n_k_path"])
    harm = phonon_basis(params, path)
    ren = scp_basis(res, path)
    write_dispersion_csv(run.path("dispersion_harmonic.csv"), harm)
    write_dispersion_csv(run.path("dispersion_scp.csv"), ren)
    run.gnuplot(
        "dispersion_scp.gp",
        "dispersion_scp.csv",
        "set xlabel 'k (1/bohr)'\nset ylabel 'omega (meV)'\n"
        "plot 'dispersion_harmonic.csv' using 1:3 with points pt 7 ps 0.3 title 'harmonic', \\\n"
        "     'dispersion_scp.csv' using 1:3 with points pt 7 ps 0.3 title 'SCP'\n",
    )
    # matter-dominated band at Gamma
    b = int(np.argmin(ren.light_fraction[0])) if ren.n_bands > 1 else 0
    shift = units.hartree_to_mev(ren.frequencies[0, b] - harm.frequencies[0, b])
    run.summary.update(
        {
            "iterations": len(res.history),
            "converged": res.converged,
            "mean_square_au": res.mean_square,
            "static_shift_au": res.static_shift,
            "gamma_shift_meV": shift,
            "gamma_scp_meV": units.hartree_to_mev(ren.frequencies[0]).tolist(),
        }
    )
    return EXIT_OK


def cmd_md_spectrum(run):
    cfg = run.cfg
    params = cfg.params if run.args.coupled else cfg.params.isolated_matter()
    kind = "coupled-chain" if run.args.coupled else "matter-chain"
    opts = cfg.md
    kpts = _display_kpoints(params, cfg.grid["k_stride"])
    omega = cfg.vdmft.omega(params)
    delta = cfg.grid["delta"]
    with run.stage("md"):
        trajs = run_trajectories(params, kind, opts)
        if run.args.dump:
            trajs = list(trajs)
            write_trajectory_dump(run.path("trajectories.bin"), trajs)
        gf, _ = estimate_gf(trajs, params, kpts, omega, opts, delta)
    spec = spectral_function(gf, "MD", peak_options={"smoothing": (61, 3), "refine": True})
    write_spectrum_csv(run.path("spectrum_md.csv"), spec)
    run.gnuplot("spectrum_md.gp", "spectrum_md.csv", _spectrum_script("spectrum_md.csv", "MD"))
    run.summary.update(
        {
            "n_trajectories": gf.meta["n_trajectories"],
            "max_energy_drift": gf.meta["max_energy_drift"],
            "first_moment": spec.first_moment(),
            "peaks": {f"{k:.6g}": _peak_dicts(p) for k, p in zip(spec.k, spec.peaks)},
        }
    )
    if gf.meta["max_energy_drift"] > 1e-4:
        run.notes.append("energy drift above 1e-4; consider a smaller time step")
    return EXIT_OK


def _write_sigma(run, name, sigma):
    noise = sigma.noise if sigma.noise is not None else np.zeros(len(sigma.omega))
    with open(run.path(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("omega_au", "omega_meV", "sigma_re_au", "sigma_im_au", "noise_au"))
        for i, om in enumerate(sigma.omega):
            v = sigma.values[i]
            w.writerow(
                [repr(float(x)) for x in (om, units.hartree_to_mev(om), v.real, v.imag, noise[i])]
            )


def read_sigma(path):
    """Reload a self-energy written by the ``vdmft`` subcommand."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read self-energy table {path}: {exc}") from None
    if data.shape[1] < 4:
        raise ConfigurationError(f"{path}: expected at least 4 columns")
    return SelfEnergy(omega=data[:, 0], values=data[:, 2] + 1j * data[:, 3], noise=data[:, 4])


def _run_vdmft(run):
    cfg = run.cfg
    params = cfg.params.isolated_matter()
    probe = _display_kpoints(params, cfg.grid["k_stride"])
    with run.stage("vdmft"):
        res = vdmft_loop(params, cfg.vdmft, probe_k=probe)
    _write_sigma(run, "sigma.csv", res.sigma)
    with open(run.path("hybridization.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("omega_au", "omega_meV", "delta_re_au", "delta_im_au"))
        for om, v in zip(res.hybridization.omega, res.hybridization.values):
            w.writerow([repr(float(x)) for x in (om, units.hartree_to_mev(om), v.real, v.imag)])
    with open(run.path("iterations.json"), "w") as fh:
        json.dump(_jsonable(res.log), fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.gnuplot(
        "sigma.gp",
        "sigma.csv",
        "set xlabel 'omega (meV)'\nset ylabel 'Sigma (a.u.)'\n"
        "plot 'sigma.csv' using 2:3 with lines title 'Re', '' using 2:4 with lines title 'Im'\n",
    )
    run.summary["vdmft"] = {
        "iterations": res.n_iterations,
        "converged": res.converged,
        "final": res.log[-1] if res.log else None,
        "noise_floor_au": res.sigma.noise_floor,
    }
    if not res.converged:
        run.converged = False
    if params.g == 0:
        run.notes.append(
            "harmonic limit: the self-energy is zero up to its estimator noise floor "
            f"({res.sigma.noise_floor:.3e} a.u.)"
        )
    return res


def cmd_vdmft(run):
    res = _run_vdmft(run)
    spec = _matter_spectrum(res.probe_k, res.omega, res.spectra[-1])
    write_spectrum_csv(run.path("spectrum_vdmft.csv"), spec)
    run.gnuplot(
        "spectrum_vdmft.gp", "spectrum_vdmft.csv", _spectrum_script("spectrum_vdmft.csv", "VDMFT")
    )
    harm = phonon_basis(res.params, [0.0]).frequencies[0, -1]
    peak = spec.peaks[0][0].position if spec.peaks[0] else np.nan
    run.summary["vdmft"].update(
        {
            "peaks": {f"{k:.6g}": _peak_dicts(p) for k, p in zip(spec.k, spec.peaks)},
            "gamma_shift_meV": units.hartree_to_mev(peak - harm),
            "first_moment": spec.first_moment(),
        }
    )
    return EXIT_OK if res.converged else EXIT_CONVERGENCE


def _matter_spectrum(k, omega, values):
    values = np.asarray(values)
    spec = SpectrumResult(
        k=np.asarray(k), omega=omega, values=values, components=values[..., None], method="VDMFT"
    )
    spec.peaks = [find_peaks(omega, a, refine=True) for a in values]
    return spec


def _sigma_source(run):
    """Self-energy and, for VDMFT tuning, the matter Gamma peak."""
    cfg = run.cfg
    matter = cfg.params.isolated_matter()
    delta = cfg.grid["delta"]
    if run.args.sigma:
        with run.stage("read_sigma"):
            sigma = read_sigma(run.args.sigma)
        run.summary["sigma_source"] = str(run.args.sigma)
        status = EXIT_OK
    else:
        res = _run_vdmft(run)
        sigma = res.sigma
        status = EXIT_OK if res.converged else EXIT_CONVERGENCE
    gamma = _probe_spectra(matter, np.array([0.0]), sigma, sigma.omega, delta)[0]
    w_vdmft = matter_gamma_peak(sigma.omega, gamma)
    run.summary["omega_m_vdmft_meV"] = units.hartree_to_mev(w_vdmft)
    return sigma, w_vdmft, status


def _tuned_omega0(run, w_vdmft):
    cfg = run.cfg
    tuning = run.args.tuning
    if tuning == "config":
        return cfg.params.omega_0
    if tuning == "bare":
        return cfg.params.omega_m
    if tuning == "vdmft":
        return w_vdmft
    scp = scp_solve(cfg.params.isolated_matter(), **cfg.scp)
    return float(scp_basis(scp, [0.0]).frequencies[0, -1])


def cmd_polariton(run):
    cfg = run.cfg
    if cfg.params.matter_only:
        raise ConfigurationError("polariton needs the coupled model", key="model.matter_only")
    sigma, w_vdmft, status = _sigma_source(run)
    params = cfg.params.with_(omega_0=_tuned_omega0(run, w_vdmft))
    delta = cfg.grid["delta"]
    kgrid = KGrid.near_gamma(params, cfg.grid["n_k_path"] // 4 + 1)
    with run.stage("polariton"):
        gf = assemble_polariton_gf(params, sigma, kgrid.points, sigma.omega, delta)
        spec = spectral_function(gf, "VDMFT", with_peaks=False)
        spec.peaks = [find_peaks(spec.omega, a, prominence=5e-3) for a in spec.values]
        hgf = harmonic_gf(phonon_basis(params, [0.0]), sigma.omega, delta, params)
    write_spectrum_csv(run.path("spectrum_polariton.csv"), spec)
    run.gnuplot(
        "spectrum_polariton.gp",
        "spectrum_polariton.csv",
        _spectrum_script("spectrum_polariton.csv", "polariton VDMFT"),
    )
    matter = _probe_spectra(cfg.params.isolated_matter(), np.array([0.0]), sigma, sigma.omega, delta)
    matter_peaks = find_peaks(sigma.omega, matter[0], refine=True)
    run.summary.update(
        {
            "omega_0_meV": units.hartree_to_mev(params.omega_0),
            "eta": params.eta,
            "gamma_peaks": _peak_dicts(spec.peaks[0]),
            "matter_gamma_peaks": _peak_dicts(matter_peaks),
            "harmonic_gamma_area": float(
                np.trapezoid(-np.trace(hgf.values[0], axis1=-2, axis2=-1).imag / np.pi, sigma.omega)
            ),
        }
    )
    if status != EXIT_OK:
        run.converged = False
    return status


def cmd_rabi_scan(run):
    cfg = run.cfg
    if cfg.params.matter_only:
        raise ConfigurationError("rabi-scan needs the coupled model", key="model.matter_only")
    etas = parse_etas(run.args.etas) if run.args.etas else cfg.rabi["etas"]
    tuning = run.args.tuning or cfg.rabi["tuning"]
    status = EXIT_OK
    sigma = w_vdmft = None
    if not run.args.no_vdmft:
        sigma, w_vdmft, status = _sigma_source(run)
    elif tuning == "vdmft":
        raise ConfigurationError("vdmft tuning needs a self-energy", key="rabi.tuning")
    with run.stage("rabi_scan"):
        scp = scp_solve(cfg.params.isolated_matter(), **cfg.scp) if tuning == "scp" else None
        scan = rabi_scan(
            cfg.params,
            etas,
            tuning,
            sigma=sigma,
            delta=cfg.grid["delta"],
            scp=scp,
            workers=cfg.md.threads,
            omega_0=w_vdmft if tuning == "vdmft" else None,
        )
    write_rabi_csv(run.path("rabi.csv"), scan)
    run.gnuplot(
        "rabi.gp",
        "rabi.csv",
        "set xlabel 'eta'\nset ylabel 'Rabi splitting (meV)'\n"
        "plot 'rabi.csv' using 1:3 with linespoints title 'harmonic', \\\n"
        "     '' using 1:4 with linespoints title 'SCP', \\\n"
        "     '' using 1:5 with linespoints title 'VDMFT'\n",
    )
    run.summary.update({"tuning": tuning, "omega_0_meV": units.hartree_to_mev(scan.omega_0)})
    if status != EXIT_OK:
        run.converged = False
    return status


# ------------------------------------------------------------------- argparse

COMMANDS = {
    "dispersion": cmd_dispersion,
    "scp": cmd_scp,
    "md-spectrum": cmd_md_spectrum,
    "vdmft": cmd_vdmft,
    "polariton": cmd_polariton,
    "rabi-scan": cmd_rabi_scan,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI configuration file (built-in defaults if omitted)")
    common.add_argument("--out", "-o", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="master seed, overrides [md] seed")
    common.add_argument(
        "--threads", type=int, help="worker threads (env VIBPOL_THREADS overrides the config)"
    )
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="vibpol", description="Anharmonic vibrational polaritons on a 1D cavity/matter chain."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("dispersion", parents=[common], help="harmonic band structure")
    p.add_argument("--stencil-orders", help="comma-separated photon stencil orders, e.g. 2,4,6,8")
    p.add_argument("--near-gamma", action="store_true", help="dense path near Gamma")

    p = sub.add_parser("scp", parents=[common], help="self-consistent phonon bands")
    p.add_argument("--coupled", action="store_true", help="coupled model instead of the matter chain")

    p = sub.add_parser("md-spectrum", parents=[common], help="classical MD spectral function")
    p.add_argument("--dump", action="store_true", help="also write the binary trajectory dump")
    p.add_argument("--coupled", action="store_true", help="coupled model (needs a tiny time step)")

    sub.add_parser("vdmft", parents=[common], help="matter-chain VDMFT loop")

    for name, helptext in (
        ("polariton", "polariton spectra dressed with the matter self-energy"),
        ("rabi-scan", "Rabi splitting versus coupling"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--sigma", help="reuse sigma.csv from a previous vdmft run")
        choices = ("config", "bare", "scp", "vdmft") if name == "polariton" else ("bare", "scp", "vdmft")
        p.add_argument("--tuning", choices=choices, default="config" if name == "polariton" else None)
        if name == "rabi-scan":
            p.add_argument("--etas", help="start:stop:step (inclusive) or a comma list")
            p.add_argument("--no-vdmft", action="store_true", help="skip the VDMFT column")
    return parser


def load_config(args):
    cfg = parse_config(args.config) if args.config else parse_config_text(DEFAULT_CONFIG, "<defaults>")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    threads = os.environ.get("VIBPOL_THREADS", args.threads)
    if threads is not None:
        try:
            threads = int(threads)
        except ValueError:
            raise ConfigurationError(f"bad thread count {threads!r}", key="threads") from None
        if threads < 1:
            raise ConfigurationError("thread count must be at least 1", key="threads")
        cfg = cfg.with_threads(threads)
    return cfg


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args)
        run = Run(args, cfg)
        status = COMMANDS[args.command](run)
    except ConfigurationError as exc:
        print(f"vibpol: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"vibpol: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except VibpolError as exc:
        print(f"vibpol: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    run.write_manifest()
    if status == EXIT_CONVERGENCE:
        print("vibpol: self-consistency not reached; see manifest.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
