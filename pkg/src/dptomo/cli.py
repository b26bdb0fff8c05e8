"""Command-line interface: ``dptomo simulate | reconstruct | analyze``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure (divergence guard abort).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import PRIORS, ConfigError, RunConfig, load_config
from .forward import scattering_potential_from_ri, spectrum
from .geometry import compute_sbp, missing_cone_half_angle, synthesize_transfer_function
from .io import ContainerError, LedStack, read_tensor, write_tensor
from .optim import DivergenceError, reconstruct
from .simkit import axial_trace, bead_phantom, error_histogram, rmse, simulate_stack, ssim

log = logging.getLogger("dptomo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _prior_kind(s: str) -> str:
    if not set(s.split("+")) <= set(PRIORS):
        raise argparse.ArgumentTypeError(f"prior must combine {', '.join(PRIORS)} with '+'")
    return s


def _float_list(s: str) -> list:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dptomo", description="Diffraction tomography with a deep image prior.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp, data: bool):
        sp.add_argument("--config", required=True, type=Path, help="run configuration (INI or JSON)")
        if data:
            sp.add_argument("--data", required=True, type=Path, help="LED stack directory")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--model", choices=("born", "rytov", "multislice"))
        sp.add_argument("--phase-sensitive", action="store_true", default=None)
        sp.add_argument("--plots", action="store_true")

    sim = sub.add_parser("simulate", help="phantom -> forward model -> noise -> LED stack")
    run_flags(sim, data=False)

    rec = sub.add_parser("reconstruct", help="recover the RI volume from an LED stack")
    run_flags(rec, data=True)
    rec.add_argument("--prior", type=_prior_kind, help="none, dip, tv, positivity, or a '+' combination")
    rec.add_argument("--lambda-tv", type=float)
    rec.add_argument("--lambda-pos", type=float)
    rec.add_argument("--batch-leds", type=int)
    rec.add_argument("--patch", type=int)
    rec.add_argument("--iters", type=int)
    rec.add_argument("--init", type=Path, help="initial RI volume container")

    ana = sub.add_parser("analyze", help="transfer functions, SBP tables, metrics and traces")
    asub = ana.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    tf = asub.add_parser("transfer-function", help="binary transfer function and missing-cone summary")
    tf.add_argument("--config", required=True, type=Path)
    tf.add_argument("--out", required=True, type=Path)
    tf.add_argument("--conjugate", action="store_true", help="include the conjugate (reflected) support")
    tf.add_argument("--filter", type=Path, help="RI volume to low-pass through the transfer function")
    tf.add_argument("--plots", action="store_true")
    sb = asub.add_parser("sbp", help="space-bandwidth products over an NA grid")
    sb.add_argument("--config", required=True, type=Path)
    sb.add_argument("--out", required=True, type=Path)
    sb.add_argument("--na-ill", type=_float_list, default=[0.2, 0.3, 0.4])
    sb.add_argument("--na-img", type=_float_list, default=[0.3, 0.4, 0.5])
    sb.add_argument("--fov", type=float, help="lateral field of view in µm² (default: grid extent)")
    sb.add_argument("--axial", type=float, help="axial range in µm (default: grid thickness)")
    sb.add_argument("--plots", action="store_true")
    for name, helptext in (("metrics", "RMSE and SSIM against ground truth"),
                           ("traces", "1D axial RI traces")):
        a = asub.add_parser(name, help=helptext)
        a.add_argument("--volume", required=True, type=Path, action="append",
                       help="reconstructed RI container (repeatable)")
        a.add_argument("--truth", required=True, type=Path)
        a.add_argument("--out", required=True, type=Path)
        a.add_argument("--plots", action="store_true")
        if name == "traces":
            a.add_argument("--xy", type=int, nargs=2, help="lateral voxel (default: peak of the truth)")
    return p


# ---------------------------------------------------------------- helpers

def _overrides(args) -> dict:
    table = {"seed": "run.seed", "model": "model.name", "phase_sensitive": "model.phase_sensitive",
             "prior": "prior.kind", "lambda_tv": "prior.lambda_tv", "lambda_pos": "prior.lambda_pos",
             "batch_leds": "optimizer.batch_leds", "patch": "optimizer.patch", "iters": "optimizer.iterations"}
    return {dotted: getattr(args, a) for a, dotted in table.items() if getattr(args, a, None) is not None}


def _manifest(cfg: RunConfig, command: str, extra: dict) -> dict:
    return {"command": command, "version": __version__, "numpy": np.__version__,
            "seed": cfg.run.seed, "config": cfg.to_dict(), **extra}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _phantom(cfg: RunConfig, geom) -> np.ndarray:
    if cfg.phantom.file:
        vol = read_tensor(cfg.phantom.file)
        if vol.shape != geom.shape:
            raise ValueError(f"phantom {vol.shape} does not match grid {geom.shape}")
        return vol.astype(complex)
    return bead_phantom(cfg.phantom.spec(geom.n0), geom)


def _read_volume(path: Path) -> np.ndarray:
    if path.is_dir():
        path = path / "volume.dpt"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return read_tensor(path)


def _plot(enabled: bool, fn, *args) -> None:
    if not enabled:
        return
    try:
        fn(*args)
    except RuntimeError as e:
        log.warning("%s", e)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    geom = cfg.geometry_obj()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ri = _phantom(cfg, geom)
    rng = np.random.default_rng(cfg.run.seed)
    noise = cfg.noise.spec()
    stack = simulate_stack(ri, geom, cfg.model.name, noise, rng, cfg.model.phase_sensitive)
    stack.save(out)
    write_tensor(out / "truth.dpt", ri, "RI")
    _write_json(out / "manifest.json", _manifest(cfg, "simulate", {"n_leds": stack.n_leds}))
    log.info("simulated %d LED images of %s into %s", stack.n_leds, geom.shape[:2], out)
    if args.plots:
        from . import plots
        _plot(True, plots.xz_slices, {"truth": ri}, out / "truth_xz.png")
    return EXIT_OK


def _initial_variables(ri: np.ndarray, geom, model: str) -> np.ndarray:
    if model == "multislice":
        return ri - geom.n0
    return spectrum(scattering_potential_from_ri(ri.astype(complex), geom.n0, geom.wavelength)).data


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    geom = cfg.geometry_obj()
    data = LedStack.load(args.data)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    extra = {}
    if args.init is not None:
        ri0 = read_tensor(args.init)
        if ri0.shape != geom.shape:
            raise ValueError(f"initial volume {ri0.shape} does not match grid {geom.shape}")
        extra["init_volume"] = _initial_variables(ri0, geom, cfg.model.name)
        if "u0" in data.meta:
            extra["init_u0"] = np.asarray(data.meta["u0"], dtype=float)
    if cfg.optimizer.snapshots:
        extra["checkpoint_dir"] = str(out / "snapshots")
    t0 = time.perf_counter()
    res = reconstruct(data, geom, cfg.loss_config(), cfg.schedule(**extra))
    elapsed = time.perf_counter() - t0
    write_tensor(out / "volume.dpt", res.ri, "RI")
    trace = res.trace or [{"iteration": 0, "loss": float("nan"), "lr": 0.0, "restored": False}]
    _write_csv(out / "loss_trace.csv", [{k: (repr(v) if isinstance(v, float) else v) for k, v in t.items()}
                                        for t in trace])
    report = {"final_loss": res.trace[-1]["loss"] if res.trace else None, "restores": res.restores,
              "iterations": len(res.trace)}
    truth_path = args.data / "truth.dpt"
    if truth_path.exists():
        truth = read_tensor(truth_path)
        if truth.shape == res.ri.shape:
            report.update(rmse=rmse(res.ri, truth), ssim=ssim(res.ri, truth))
    _write_json(out / "report.json", report)
    _write_json(out / "manifest.json", _manifest(cfg, "reconstruct", {
        "data": str(args.data), "init": str(args.init) if args.init else None}))
    log.info("reconstructed in %.1f s; final loss %s", elapsed, report["final_loss"])
    if args.plots:
        from . import plots
        _plot(bool(res.trace), plots.loss_trace, res.trace, out / "loss_trace.png")
        _plot(True, plots.xz_slices, {"reconstruction": res.ri}, out / "volume_xz.png")
    return EXIT_OK


def cmd_transfer_function(args) -> int:
    cfg = load_config(args.config)
    geom = cfg.geometry_obj()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    H = synthesize_transfer_function(geom, conjugate=args.conjugate)
    write_tensor(out / "transfer_function.dpt", H.astype(float), "", {"order": "fft", "conjugate": args.conjugate})
    kz_axis = H[0, 0, 1:]
    _write_csv(out / "transfer_function.csv", [{
        "na_ill": geom.na_ill, "na_img": geom.na_img, "n_leds": geom.n_leds,
        "support_fraction": float(H.mean()),
        "cone_half_angle_deg": float(np.degrees(missing_cone_half_angle(geom))),
        "kz_axis_empty": bool(not kz_axis.any())}])
    if args.filter is not None:
        vol = read_tensor(args.filter)
        if vol.shape != geom.shape:
            raise ValueError(f"volume {vol.shape} does not match grid {geom.shape}")
        V = scattering_potential_from_ri(vol.astype(complex), geom.n0, geom.wavelength)
        Vf = np.fft.ifftn(np.fft.fftn(V) * H)
        write_tensor(out / "filtered.dpt", Vf, "potential")
    if args.plots:
        from . import plots
        _plot(True, plots.transfer_function_sections, H, geom, out / "transfer_function.png")
    return EXIT_OK


def cmd_sbp(args) -> int:
    cfg = load_config(args.config)
    geom = cfg.geometry_obj()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    fov = args.fov if args.fov is not None else geom.nx * geom.dx * geom.ny * geom.dy
    axial = args.axial if args.axial is not None else geom.thickness
    rows = []
    for na_img in args.na_img:
        for na_ill in args.na_ill:
            g = replace(cfg.geometry, na_ill=na_ill, na_img=na_img).build()
            sbp = compute_sbp(g, fov, axial)
            rows.append({"na_ill": na_ill, "na_img": na_img, "n_leds": g.n_leds,
                         "sbp_voxels": sbp, "sbp_gigavoxels": sbp / 1e9})
    _write_csv(out / "sbp.csv", rows)
    if args.plots:
        from . import plots
        _plot(True, plots.sbp_curves, rows, out / "sbp.png")
    return EXIT_OK


def _load_compare(args):
    truth = read_tensor(args.truth)
    vols = {}
    for p in args.volume:
        v = _read_volume(p)
        if v.shape != truth.shape:
            raise ValueError(f"{p}: shape {v.shape} differs from truth {truth.shape}")
        name = p.stem if p.is_file() else p.name
        vols[name if name not in vols else str(p)] = v
    args.out.mkdir(parents=True, exist_ok=True)
    return truth, vols


def cmd_metrics(args) -> int:
    truth, vols = _load_compare(args)
    rows = [{"volume": k, "rmse": rmse(v, truth), "ssim": ssim(v, truth)} for k, v in vols.items()]
    _write_csv(args.out / "metrics.csv", rows)
    if args.plots:
        from . import plots
        lo, hi = float(np.real(truth).min()), float(np.real(truth).max())
        pad = 0.5 * (hi - lo) or 0.01
        hists = {k: error_histogram(v, truth, 64, [[lo - pad, hi + pad]] * 2) for k, v in vols.items()}
        _plot(True, plots.error_histograms, hists, args.out / "error_histograms.png")
        _plot(True, plots.xz_slices, {"truth": truth, **vols}, args.out / "xz_slices.png")
    return EXIT_OK


def cmd_traces(args) -> int:
    truth, vols = _load_compare(args)
    if args.xy is None:
        x, y, _ = np.unravel_index(np.argmax(np.abs(np.real(truth) - np.median(np.real(truth)))), truth.shape)
    else:
        x, y = args.xy
    nz = truth.shape[2]
    traces = {"truth": axial_trace(truth, x, y), **{k: axial_trace(v, x, y) for k, v in vols.items()}}
    rows = [{"z_index": i, **{k: float(t[i]) for k, t in traces.items()}} for i in range(nz)]
    _write_csv(args.out / "traces.csv", rows)
    if args.plots:
        from . import plots
        _plot(True, plots.axial_traces, np.arange(nz), traces, args.out / "traces.png")
    return EXIT_OK


_COMMANDS = {("simulate", None): cmd_simulate, ("reconstruct", None): cmd_reconstruct,
             ("analyze", "transfer-function"): cmd_transfer_function, ("analyze", "sbp"): cmd_sbp,
             ("analyze", "metrics"): cmd_metrics, ("analyze", "traces"): cmd_traces}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DPTOMO_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"dptomo: error: DPTOMO_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    fn = _COMMANDS[(args.command, getattr(args, "analysis", None))]
    try:
        with threadpool_limits(limits=limit):
            return fn(args)
    except (DivergenceError, FloatingPointError) as e:
        print(f"dptomo: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContainerError, FileNotFoundError, ValueError) as e:
        print(f"dptomo: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
