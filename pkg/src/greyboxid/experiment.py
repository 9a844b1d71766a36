"""Experiment configuration and the end-to-end identification pipeline.

An ExperimentConfig captures one complete protocol: excitation design,
truth-system synthesis (or a measured-data path), steady-state handling,
model structure, refinement options and extraction settings. The runner
functions are shared by the command-line interface and the Monte-Carlo
ensemble driver.
"""

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .fnsi import fnsi_identify
from .model import (BasisSet, BasisTerm, ParameterMask, pack_parameters,
                    unpack_parameters)
from .optimize import (CostSetup, LmOptions, lm_optimize, validate)
from .physical import (PhysicalReport, modal_parameters,
                       nonlinear_coefficients, to_continuous)
from .signals import (ExcitedBand, TimeRecord, generate_multisine,
                      load_time_record, rms)
from .simulate import (PhysicalSystem, PhysicalTerm,
                       load_physical_system, make_duffing_system,
                       make_two_dof_system, run_to_steady_state)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "IdentificationResult",
    "load_config",
    "build_truth_system",
    "generate_record",
    "run_identification",
    "identify_from_config",
]

NOISE_SEED_OFFSET = 1_000_000


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One reproducible experiment manifest."""

    # excitation and sampling
    fs: float = 2441.0
    n_period: int = 8192
    band_hz: tuple = (0.0, 300.0)
    excluded_lines: tuple = ()
    rms: float = 0.1
    periods: int = 10
    transient_periods: int = 5
    validation_periods: int = 1
    seed: int = 12345
    # data source: synthetic truth system or a measured CSV
    system: dict = None
    data_csv: str = None
    # truth integration
    oversample: int = 20
    interp: str = "bandlimited"
    noise_snr_db: float = None
    # model structure
    n_states: int = 2
    basis_channel: int = 0
    degrees: tuple = (2, 3)
    block_rows: int = None
    # refinement
    n_warmup: int = 3
    lm: dict = field(default_factory=dict)
    # extraction
    coeff_row: int = None
    coeff_col: int = 0
    # output
    outdir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "band_hz", tuple(self.band_hz))
        object.__setattr__(self, "excluded_lines",
                           tuple(self.excluded_lines))
        object.__setattr__(self, "degrees", tuple(self.degrees))
        if self.fs <= 0 or self.n_period < 8:
            raise ConfigError("fs must be positive and n_period >= 8")
        if not 0 <= self.band_hz[0] < self.band_hz[1]:
            raise ConfigError(f"invalid band {self.band_hz}")
        if self.band_hz[1] >= self.fs / 2:
            raise ConfigError(
                f"band top {self.band_hz[1]} Hz reaches Nyquist "
                f"{self.fs / 2} Hz")
        kept = self.periods - self.transient_periods
        if self.transient_periods < 0 or kept < self.validation_periods + 1:
            raise ConfigError(
                "periods must cover transient + estimation + validation "
                f"(got total {self.periods}, transient "
                f"{self.transient_periods}, validation "
                f"{self.validation_periods})")
        if self.system is None and self.data_csv is None:
            raise ConfigError("either a truth system or a data CSV is "
                              "required")
        if any(d < 2 for d in self.degrees):
            raise ConfigError("basis degrees must be >= 2")
        if self.interp not in ("bandlimited", "zoh"):
            raise ConfigError(f"unknown interpolation {self.interp!r}")
        if self.n_states < 1:
            raise ConfigError("n_states must be >= 1")

    @property
    def band(self):
        return ExcitedBand.from_hz(self.band_hz[0], self.band_hz[1],
                                   self.fs, self.n_period,
                                   self.excluded_lines)

    @property
    def basis(self):
        return BasisSet.polynomial(self.basis_channel, self.degrees)

    @property
    def lm_options(self):
        known = {f.name for f in fields(LmOptions)}
        bad = set(self.lm) - known
        if bad:
            raise ConfigError(f"unknown lm options: {sorted(bad)}")
        return LmOptions(**self.lm)

    def with_degrees(self, degrees):
        return replace(self, degrees=tuple(degrees))

    def to_json(self):
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return json.dumps(doc, indent=1)


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path, overrides=()):
    """Experiment config from a JSON manifest plus `key=value` overrides
    (dotted keys reach into nested dicts, e.g. ``lm.max_iter=50``)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for text in overrides:
        key, value = _parse_override(text)
        target = doc
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {key!r} crosses a non-object")
        target[parts[-1]] = value
    known = {f.name for f in fields(ExperimentConfig)}
    bad = set(doc) - known
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc))


def build_truth_system(cfg):
    """PhysicalSystem from the config's ``system`` entry.

    Kinds: ``duffing`` (single DOF by modal parameters + quadratic/cubic
    coefficients), ``two_dof`` (mass chain with optional cubic grounding),
    ``matrices`` (explicit M/Cv/K/terms/input_map), ``file`` (JSON path).
    """
    spec = cfg.system
    if spec is None:
        raise ConfigError("config has no truth system")
    if isinstance(spec, PhysicalSystem):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("system must be an object with a 'kind'")
    kind = spec["kind"]
    args = {k: v for k, v in spec.items() if k != "kind"}
    try:
        if kind == "duffing":
            return make_duffing_system(**args)
        if kind == "two_dof":
            return make_two_dof_system(**args)
        if kind == "file":
            return load_physical_system(args["path"])
        if kind == "matrices":
            terms = tuple(
                PhysicalTerm(float(t["coefficient"]),
                             BasisTerm(int(t["channel"]), int(t["exponent"]),
                                       bool(t.get("velocity", False))),
                             t.get("row"))
                for t in args.get("terms", ()))
            return PhysicalSystem(np.array(args["M"], dtype=float),
                                  np.array(args["Cv"], dtype=float),
                                  np.array(args["K"], dtype=float),
                                  terms,
                                  np.array(args["input_map"], dtype=float)
                                  if "input_map" in args else None)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad system spec for kind {kind!r}: {exc}")
    raise ConfigError(f"unknown system kind {kind!r}")


def _add_output_noise(record, snr_db, seed):
    rng = np.random.default_rng(seed)
    y = record.y.copy()
    for ch in range(y.shape[0]):
        level = rms(y[ch]) / 10 ** (snr_db / 20)
        y[ch] += level * rng.standard_normal(y.shape[1])
    return TimeRecord(u=record.u, y=y, fs=record.fs,
                      n_period=record.n_period,
                      n_periods=record.n_periods)


def generate_record(cfg, seed=None):
    """Synthesize steady-state benchmark data for one input realization.

    Draws the multisine with the given seed (default: config seed),
    integrates the truth system, discards the transient periods and adds
    output noise when configured (noise stream derived from the same
    seed).

    Returns
    -------
    (record, steadiness) : kept periods only.
    """
    seed = cfg.seed if seed is None else seed
    u_period = generate_multisine(cfg.band, cfg.fs, cfg.n_period, cfg.rms,
                                  seed)[None, :]
    sys = build_truth_system(cfg)
    kept = cfg.periods - cfg.transient_periods
    record, steadiness, flagged = run_to_steady_state(
        sys, u_period, cfg.transient_periods, kept, fs=cfg.fs,
        oversample=cfg.oversample, interp=cfg.interp)
    if cfg.noise_snr_db is not None:
        record = _add_output_noise(record, cfg.noise_snr_db,
                                   seed + NOISE_SEED_OFFSET)
    return record, steadiness


@dataclass
class IdentificationResult:
    """Artifacts of one two-step identification."""

    initial_model: object
    initial_diag: object
    final_model: object
    lm_state: object
    mask: ParameterMask
    theta: np.ndarray
    validation_initial: object
    validation_final: object
    report: PhysicalReport = None


def run_identification(est, val, basis, band, n_states, block_rows=None,
                       lm_options=None, n_warmup=3, skip_lm=False,
                       coeff_row=None, coeff_col=0, extract=True):
    """Two-step identification: subspace initialization then weighted
    least-squares refinement, scored on a validation record.

    Returns an IdentificationResult; the physical report is extracted from
    the final model unless disabled (or the basis is empty).
    """
    initial, diag = fnsi_identify(est, basis, band, n_states,
                                  block_rows=block_rows)
    mask = ParameterMask.default(initial.dims)
    theta0 = pack_parameters(initial, mask)
    val_init = validate(initial, val, n_warmup=n_warmup)
    if skip_lm:
        final, state, theta = initial, None, theta0
        val_final = val_init
    else:
        setup = CostSetup.from_record(est, initial, band, mask=mask,
                                      n_warmup=n_warmup)
        theta, state = lm_optimize(theta0, setup, validation=val,
                                   options=lm_options)
        final = unpack_parameters(theta, mask, initial)
        val_final = validate(final, val, n_warmup=n_warmup)
    report = None
    if extract and basis.size:
        coeffs = nonlinear_coefficients(final, band, row=coeff_row,
                                        col=coeff_col)
        modal = modal_parameters(to_continuous(final).Ac)
        report = PhysicalReport(modal=modal, coefficients=coeffs)
    return IdentificationResult(
        initial_model=initial, initial_diag=diag, final_model=final,
        lm_state=state, mask=mask, theta=theta,
        validation_initial=val_init, validation_final=val_final,
        report=report)


def identify_from_config(cfg, seed=None, skip_lm=False):
    """Generate (or load) data per the config and run the full pipeline.

    Returns
    -------
    (result, est, val)
    """
    if cfg.data_csv is not None:
        record = load_time_record(cfg.data_csv)
        if cfg.transient_periods:
            if cfg.transient_periods >= record.n_periods:
                raise ConfigError("transient_periods removes every period "
                                  "of the data file")
            record = record.keep_periods(
                range(cfg.transient_periods, record.n_periods))
    else:
        record, _ = generate_record(cfg, seed)
    est, val = record.split_validation(cfg.validation_periods)
    result = run_identification(
        est, val, cfg.basis, cfg.band, cfg.n_states,
        block_rows=cfg.block_rows, lm_options=cfg.lm_options,
        n_warmup=cfg.n_warmup, skip_lm=skip_lm, coeff_row=cfg.coeff_row,
        coeff_col=cfg.coeff_col)
    return result, est, val
