"""Monte-Carlo characterization of estimator variability over independent
input realizations.

Each realization draws a fresh multisine phase spectrum (and noise
stream), reruns the complete two-step identification and the physical
extraction, and contributes one packed parameter vector plus its modal
and coefficient summaries. State-space entries are reported in the raw
identified basis (no similarity alignment across realizations), so their
spread includes the basis ambiguity; the similarity-invariant modal and
coefficient statistics are the physically meaningful outputs.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .experiment import identify_from_config

__all__ = [
    "EnsembleResult",
    "monte_carlo",
    "ensemble_stats",
    "correlation_matrix",
    "parameter_names",
    "save_parameter_stats",
    "save_correlation",
    "ensemble_to_json",
]


class EnsembleError(RuntimeError):
    """Every realization of the ensemble failed."""


@dataclass
class EnsembleFailure:
    realization: int
    seed: int
    message: str


@dataclass
class EnsembleResult:
    """Per-realization estimates sharing one protocol."""

    thetas: np.ndarray            # (R_ok, n_theta)
    modal_freq: np.ndarray        # (R_ok, n_modes)
    modal_damping: np.ndarray     # (R_ok, n_modes)
    coefficients: np.ndarray      # (R_ok, n_terms) band-averaged real parts
    validation_rms: np.ndarray    # (R_ok,)
    seeds: np.ndarray             # (R_ok,)
    names: list                   # packed parameter names
    failures: list = field(default_factory=list)

    @property
    def n_ok(self):
        return self.thetas.shape[0]


def parameter_names(mask, n_inputs):
    """Names of the free packed entries in packing order, 1-based like
    ``A(2,1)``; the extended matrices split into their B/E and D/F
    partitions for readability."""
    names = []
    for mat, base, split in ((mask.A, ("A",), None),
                             (mask.Bext, ("B", "E"), n_inputs),
                             (mask.C, ("C",), None),
                             (mask.Dext, ("D", "F"), n_inputs)):
        rows, cols = mat.shape
        for j in range(cols):
            for i in range(rows):
                if not mat[i, j]:
                    continue
                if split is None or j < split:
                    names.append(f"{base[0]}({i + 1},{j + 1})")
                else:
                    names.append(f"{base[1]}({i + 1},{j - split + 1})")
    return names


def monte_carlo(cfg, n_realizations, seed0=None):
    """Repeat the full experiment over independent input realizations.

    Realization r uses multisine seed ``seed0 + r`` (noise seed derived
    from it), so the whole ensemble is reproducible from one integer.
    Failed realizations are recorded and skipped, never fatal unless all
    fail.
    """
    if n_realizations < 2:
        raise ValueError("need at least 2 realizations")
    seed0 = cfg.seed if seed0 is None else seed0
    thetas = []
    freqs = []
    damps = []
    coeffs = []
    vrms = []
    seeds = []
    failures = []
    names = None
    n_modes = None
    for r in range(1, n_realizations + 1):
        seed = seed0 + r
        try:
            result, _, _ = identify_from_config(cfg, seed=seed)
            report = result.report
            modes = report.modal.modes if report else ()
            if n_modes is None:
                n_modes = len(modes)
            if len(modes) != n_modes:
                raise RuntimeError(
                    f"mode count changed ({len(modes)} vs {n_modes})")
            thetas.append(result.theta)
            freqs.append([m.frequency_hz for m in modes])
            damps.append([m.damping_ratio for m in modes])
            coeffs.append([c.real_average
                           for c in (report.coefficients if report else ())])
            vrms.append(result.validation_final.rms)
            seeds.append(seed)
            if names is None:
                names = parameter_names(result.mask,
                                        result.final_model.dims.n_inputs)
        except Exception as exc:  # noqa: BLE001 - recorded, not fatal
            failures.append(EnsembleFailure(r, seed, str(exc)))
    if not thetas:
        raise EnsembleError(
            f"all {n_realizations} realizations failed; first: "
            f"{failures[0].message}")
    return EnsembleResult(
        thetas=np.array(thetas), modal_freq=np.array(freqs),
        modal_damping=np.array(damps), coefficients=np.array(coeffs),
        validation_rms=np.array(vrms), seeds=np.array(seeds),
        names=names, failures=failures)


def ensemble_stats(values, names=None):
    """Sample mean, unbiased standard deviation and std/mean ratio per
    column of a (realizations, parameters) matrix.

    Returns a list of dicts {name, mean, std, ratio_percent}.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] < 2:
        raise ValueError("statistics need at least 2 realizations")
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mean != 0, 100.0 * std / mean, np.inf)
    names = names or [f"p{i}" for i in range(values.shape[1])]
    return [{"name": nm, "mean": float(mu), "std": float(sd),
             "ratio_percent": float(rt)}
            for nm, mu, sd, rt in zip(names, mean, std, ratio)]


def correlation_matrix(values):
    """Correlation matrix of the parameter ensemble.

    Zero-variance parameters cannot be normalized; they are excluded and
    their indices reported.

    Returns
    -------
    (corr, kept, excluded)
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] < 2:
        raise ValueError("correlation needs at least 2 realizations")
    std = values.std(axis=0, ddof=1)
    kept = np.flatnonzero(std > 0)
    excluded = np.flatnonzero(std == 0)
    if kept.size == 0:
        raise ValueError("all parameters have zero variance")
    dev = values[:, kept] - values[:, kept].mean(axis=0)
    cov = dev.T @ dev / (values.shape[0] - 1)
    corr = cov / np.outer(std[kept], std[kept])
    # clip the roundoff fringe but keep symmetry exact
    corr = np.clip(corr, -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr, kept, excluded


def save_parameter_stats(path, stats_rows):
    """CSV mirroring the parameter-statistics table layout:
    parameter, mean, std x 100, std/mean %."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "std_x100", "std_over_mean_pct"])
        for row in stats_rows:
            w.writerow([row["name"], repr(float(row["mean"])),
                        repr(float(100.0 * row["std"])),
                        repr(float(row["ratio_percent"]))])


def save_correlation(path, corr, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", *names])
        for name, row in zip(names, corr):
            w.writerow([name, *(repr(float(v)) for v in row)])


def ensemble_to_json(ensemble):
    doc = {
        "n_ok": ensemble.n_ok,
        "seeds": ensemble.seeds.tolist(),
        "parameter_names": ensemble.names,
        "failures": [{"realization": f.realization, "seed": f.seed,
                      "message": f.message} for f in ensemble.failures],
        "validation_rms": ensemble.validation_rms.tolist(),
        "modal_freq": ensemble.modal_freq.tolist(),
        "modal_damping": ensemble.modal_damping.tolist(),
        "coefficients": ensemble.coefficients.tolist(),
    }
    return json.dumps(doc, indent=1)
