"""Command-line surface for the identification pipeline.

Subcommands: generate, identify, simulate, extract, montecarlo, validate.
Everything is driven by a JSON experiment manifest with optional
``--set key=value`` overrides, so runs are reproducible from the config
plus the seed. Plot-worthy results are emitted as CSV data files;
rendering is left to external tooling.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .experiment import (ConfigError, build_truth_system, generate_record,
                         identify_from_config, load_config)
from .fnsi import FnsiError
from .model import ModelError, load_model, save_model
from .optimize import save_trace, validate
from .physical import (ConversionError, modal_parameters,
                       nonlinear_coefficients, to_continuous,
                       PhysicalReport)
from .signals import (SignalError, dft, estimate_frf, load_time_record,
                      noise_variance, save_spectra, save_time_record)
from .simulate import SimulationError, run_to_steady_state
from .stats import (correlation_matrix, ensemble_stats, ensemble_to_json,
                    monte_carlo, save_correlation, save_parameter_stats)
from .signals import generate_multisine

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_NUMERICAL_ERRORS = (SimulationError, FnsiError, ConversionError,
                     np.linalg.LinAlgError)
_CONFIG_ERRORS = (ConfigError, ModelError, SignalError, FileNotFoundError)


def _outdir(cfg, override):
    path = Path(override or cfg.outdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_validation_json(path, res, out_rms):
    import json
    doc = {"rms": res.rms,
           "rms_per_channel": [float(v) for v in res.rms_per_channel],
           "output_rms": out_rms,
           "diverged": res.diverged}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def cmd_generate(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    record, steadiness = generate_record(cfg, seed=args.seed)
    data_path = out / "data.csv"
    save_time_record(data_path, record)
    with open(out / "config_used.json", "w") as fh:
        fh.write(cfg.to_json())
    u_spec, y_spec = dft(record, cfg.band)
    save_spectra(out / "input_spectrum.csv", u_spec)
    save_spectra(out / "output_spectrum.csv", y_spec)
    frf, _ = estimate_frf(u_spec, y_spec)
    spec = y_spec.__class__(y_spec.lines, frf, y_spec.n_period, y_spec.fs)
    save_spectra(out / "frf.csv", spec)
    if record.n_periods >= 2:
        nm = noise_variance(record, cfg.band)
        import csv as _csv
        with open(out / "noise_level.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["line", "channel", "std"])
            for ch in range(nm.variance.shape[0]):
                for k, v in zip(nm.lines, nm.variance[ch]):
                    w.writerow([k, ch + 1, repr(float(np.sqrt(v)))])
    print(f"wrote {data_path} ({record.n_periods} periods of "
          f"{record.n_period} samples at {record.fs} Hz, steadiness "
          f"{steadiness:.3e})")
    return EXIT_OK


def _identify_once(cfg, out, skip_lm, tag=""):
    result, est, val = identify_from_config(cfg, skip_lm=skip_lm)
    suffix = f"_{tag}" if tag else ""
    save_model(out / f"initial_model{suffix}.json", result.initial_model,
               result.mask)
    save_model(out / f"final_model{suffix}.json", result.final_model,
               result.mask)
    with open(out / f"fnsi_diagnostics{suffix}.json", "w") as fh:
        fh.write(result.initial_diag.to_json())
    if result.lm_state is not None:
        save_trace(out / f"lm_trace{suffix}.csv", result.lm_state)
    out_rms = float(np.sqrt(np.mean(val.y[:, -val.n_period:] ** 2)))
    _write_validation_json(out / f"validation{suffix}.json",
                           result.validation_final, out_rms)
    if result.validation_final.error_spectrum is not None:
        save_spectra(out / f"validation_error_spectrum{suffix}.csv",
                     result.validation_final.error_spectrum)
    if result.report is not None:
        result.report.save(out / f"physical_report{suffix}.json")
        result.report.save_coefficient_spectra(
            out / f"coefficient_spectra{suffix}.csv")
        peak = float(np.max(np.abs(val.y[cfg.basis_channel])))
        grid = np.linspace(-peak, peak, 201)
        result.report.save_force_curve(out / f"force_curve{suffix}.csv",
                                       cfg.basis, grid)
    return result


def cmd_identify(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    if args.degrees:
        lo, hi = args.degrees
        import csv as _csv
        rows = []
        for top in range(lo, hi + 1):
            cfg_d = cfg.with_degrees(range(lo, top + 1))
            result = _identify_once(cfg_d, out, args.skip_lm,
                                    tag=f"deg{lo}-{top}")
            rows.append((top, len(cfg_d.degrees),
                         result.theta.size,
                         result.validation_final.rms))
            print(f"degrees {lo}..{top}: validation RMS "
                  f"{result.validation_final.rms:.6e}")
        with open(out / "degree_scan.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["max_degree", "n_terms", "n_parameters",
                        "validation_rms"])
            for row in rows:
                w.writerow(row)
        return EXIT_OK
    result = _identify_once(cfg, out, args.skip_lm)
    v = result.validation_final.rms
    print(f"initial validation RMS {result.validation_initial.rms:.6e}, "
          f"final {v:.6e}")
    if result.report is not None:
        for mode in result.report.modal.modes:
            print(f"mode: {mode.frequency_hz:.4f} Hz, "
                  f"damping {100 * mode.damping_ratio:.4f} %")
        for c in result.report.coefficients:
            print(f"coefficient y^{c.term.exponent}: {c.real_average:.6g} "
                  f"(imag/real {c.imag_real_ratio:.3f})")
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    model, _ = load_model(args.model)
    u_period = generate_multisine(cfg.band, cfg.fs, cfg.n_period, cfg.rms,
                                  args.seed if args.seed is not None
                                  else cfg.seed)[None, :]
    kept = cfg.periods - cfg.transient_periods
    record, steadiness, flagged = run_to_steady_state(
        model, u_period, cfg.transient_periods, kept)
    save_time_record(out / "simulated.csv", record)
    print(f"wrote {out / 'simulated.csv'} (steadiness {steadiness:.3e}"
          f"{', transient leakage' if flagged else ''})")
    return EXIT_OK


def cmd_extract(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    model, _ = load_model(args.model)
    modal = modal_parameters(to_continuous(model).Ac)
    coeffs = nonlinear_coefficients(model, cfg.band, row=cfg.coeff_row,
                                    col=cfg.coeff_col)
    report = PhysicalReport(modal=modal, coefficients=coeffs)
    report.save(out / "physical_report.json")
    if coeffs:
        report.save_coefficient_spectra(out / "coefficient_spectra.csv")
    for mode in modal.modes:
        print(f"mode: {mode.frequency_hz:.4f} Hz, damping "
              f"{100 * mode.damping_ratio:.4f} %")
    for c in coeffs:
        print(f"coefficient y^{c.term.exponent}: {c.real_average:.6g}")
    return EXIT_OK


def cmd_montecarlo(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    ensemble = monte_carlo(cfg, args.realizations, seed0=args.seed)
    rows = ensemble_stats(ensemble.thetas, ensemble.names)
    save_parameter_stats(out / "parameter_stats.csv", rows)
    physical_names = ([f"freq_{i+1}" for i in
                       range(ensemble.modal_freq.shape[1])]
                      + [f"damping_{i+1}" for i in
                         range(ensemble.modal_damping.shape[1])]
                      + [f"c_{i+1}" for i in
                         range(ensemble.coefficients.shape[1])])
    physical = np.hstack([ensemble.modal_freq, ensemble.modal_damping,
                          ensemble.coefficients])
    save_parameter_stats(out / "modal_stats.csv",
                         ensemble_stats(physical, physical_names))
    corr, kept, _ = correlation_matrix(ensemble.thetas)
    save_correlation(out / "correlation.csv", corr,
                     [ensemble.names[i] for i in kept])
    with open(out / "ensemble.json", "w") as fh:
        fh.write(ensemble_to_json(ensemble))
    print(f"{ensemble.n_ok}/{args.realizations} realizations succeeded; "
          f"reports in {out}")
    return EXIT_OK


def cmd_validate(args):
    cfg = load_config(args.config, args.set or ())
    out = _outdir(cfg, args.outdir)
    model, _ = load_model(args.model)
    if args.data:
        record = load_time_record(args.data)
    else:
        record, _ = generate_record(cfg, seed=args.seed)
    _, val = record.split_validation(cfg.validation_periods)
    res = validate(model, val, n_warmup=cfg.n_warmup)
    out_rms = float(np.sqrt(np.mean(val.y[:, -val.n_period:] ** 2)))
    _write_validation_json(out / "validation.json", res, out_rms)
    if res.error_spectrum is not None:
        save_spectra(out / "validation_error_spectrum.csv",
                     res.error_spectrum)
    print(f"validation RMS {res.rms:.6e} (output RMS {out_rms:.6e})")
    return EXIT_OK


def _degrees_range(text):
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"degrees must look like 2:5, got {text!r}")
    if lo < 2 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad degree range {text!r}")
    return lo, hi


def build_parser():
    parser = argparse.ArgumentParser(
        prog="greyboxid",
        description="Grey-box state-space identification of vibrating "
                    "systems with localized nonlinearities.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help="experiment manifest (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted keys allowed)")
        p.add_argument("--outdir", help="output directory "
                                        "(default: config outdir)")
        p.add_argument("--seed", type=int, help="override the seed")

    p = sub.add_parser("generate", help="synthesize benchmark data")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("identify", help="two-step identification")
    common(p)
    p.add_argument("--skip-lm", action="store_true",
                   help="stop after the subspace initialization")
    p.add_argument("--degrees", type=_degrees_range, metavar="LO:HI",
                   help="scan growing polynomial degree sets, e.g. 2:5")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("simulate", help="steady-state response of a model")
    common(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="physical parameters of a model")
    common(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("montecarlo", help="ensemble over input realizations")
    common(p)
    p.add_argument("-R", "--realizations", type=int, required=True)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("validate", help="score a model on validation data")
    common(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--data", help="TimeRecord CSV (default: regenerate "
                                  "from config)")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
