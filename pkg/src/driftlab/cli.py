"""Command-line front end: ``driftlab <config> [--seed N] [--samples M] [--output PATH]``.

The config is a flat ``key = value`` document::

    command = trace
    model = rigid_body
    scheme = dp, em
    sigma_row = 0.25, 0
    sigma_row = 0, 0.25
    sigma_row = 0, 0
    h = 0.0625
    t_end = 4

Lists are comma-separated; matrix rows repeat the ``sigma_row`` key.
"""

from __future__ import annotations

import argparse
import io
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from driftlab import harness
from driftlab.harness import ConvergenceReport, Mode, Observable, TraceReport
from driftlab.integrators import NonConvergence, SchemeId, SolverSettings, check_scheme, step
from driftlab.models import MODEL_IDS, make_model
from driftlab.stochastic import DEFAULT_SEED, sample_increments

logger = logging.getLogger("driftlab")

COMMANDS = ("trace", "strong", "weak", "single")
DEFAULT_SAMPLES = {
    "trace": harness.TRACE_SAMPLES,
    "strong": harness.STRONG_SAMPLES,
    "weak": harness.WEAK_SAMPLES,
    "single": 1,
}
_MODEL_DIMS = {"oscillator": 2, "pendulum": 2, "rigid_body": 3}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


class UnknownKey(ConfigError):
    def __init__(self, key: str):
        super().__init__(key, f"unknown key {key!r}")


class MissingRequired(ConfigError):
    def __init__(self, key: str):
        super().__init__(key, f"missing required key {key!r}")


class DimensionMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    model_id: str
    schemes: tuple[SchemeId, ...]
    t_end: float
    h: Optional[float] = None
    h_list: tuple[float, ...] = ()
    h_ref: Optional[float] = None
    sigma: Optional[Union[float, np.ndarray]] = None
    initial_value: Optional[tuple[float, ...]] = None
    samples: int = 0
    seed: int = DEFAULT_SEED
    observable: Observable = Observable.ENERGY
    reference_scheme: Optional[SchemeId] = None
    moments: tuple[Mode, ...] = (Mode.WEAK_M1, Mode.WEAK_M2)
    antithetic: bool = False
    control_variate: bool = False
    settings: SolverSettings = field(default_factory=SolverSettings)
    output_path: Optional[str] = None

    def build_model(self):
        return make_model(self.model_id, self.sigma, self.initial_value)


_KNOWN_KEYS = {
    "command", "model", "scheme", "schemes", "sigma", "sigma_row", "initial_value",
    "h", "h_list", "h_ref", "t_end", "samples", "seed", "observable", "output",
    "output_path", "reference_scheme", "moments", "antithetic", "control_variate",
    "fp_tolerance", "fp_max_iters", "quadrature_nodes",
}


def _floats(key: str, value: str) -> list[float]:
    try:
        out = [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(key, f"{key}: expected numbers, got {value!r}") from None
    if not out or not all(math.isfinite(v) for v in out):
        raise ConfigError(key, f"{key}: expected finite numbers, got {value!r}")
    return out


def _scalar(key: str, value: str) -> float:
    vals = _floats(key, value)
    if len(vals) != 1:
        raise DimensionMismatch(key, f"{key} must be a single number")
    return vals[0]


def _positive(key: str, value: str) -> float:
    v = _scalar(key, value)
    if v <= 0:
        raise ConfigError(key, f"{key} must be positive")
    return v


def _integer(key: str, value: str, minimum: int = 0) -> int:
    try:
        v = int(value, 0)
    except ValueError:
        raise ConfigError(key, f"{key}: expected an integer, got {value!r}") from None
    if v < minimum:
        raise ConfigError(key, f"{key} must be at least {minimum}")
    return v


def _flag(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"{key}: expected true/false, got {value!r}")


def _read_pairs(text: str) -> tuple[dict[str, str], list[str]]:
    values: dict[str, str] = {}
    sigma_rows: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("", f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise UnknownKey(key)
        if key == "sigma_row":
            sigma_rows.append(value)
        else:
            values[key] = value
    return values, sigma_rows


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a flat key-value config, filling defaults."""
    values, sigma_rows = _read_pairs(text)

    def require(key: str) -> str:
        if key not in values:
            raise MissingRequired(key)
        return values[key]

    command = require("command").lower()
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}; expected one of {COMMANDS}")
    model_id = require("model")
    if model_id not in MODEL_IDS:
        raise ConfigError("model", f"unknown model {model_id!r}; expected one of {MODEL_IDS}")
    dim = _MODEL_DIMS[model_id]

    scheme_text = values.get("scheme", values.get("schemes"))
    if scheme_text is None:
        raise MissingRequired("scheme")
    try:
        schemes = tuple(SchemeId.parse(s) for s in scheme_text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError("scheme", str(exc)) from None
    if not schemes:
        raise MissingRequired("scheme")

    kwargs: dict = {}
    t_end = _positive("t_end", require("t_end"))
    if command in ("trace", "single"):
        kwargs["h"] = _positive("h", require("h"))
    else:
        hs = _floats("h_list", require("h_list"))
        if any(h <= 0 for h in hs) or len(hs) < 2:
            raise ConfigError("h_list", "h_list needs at least two positive step sizes")
        kwargs["h_list"] = tuple(hs)
    if command == "strong":
        kwargs["h_ref"] = _positive("h_ref", require("h_ref"))
    elif "h_ref" in values:
        kwargs["h_ref"] = _positive("h_ref", values["h_ref"])
    steps_to_check = [(key, kwargs[key]) for key in ("h", "h_ref") if key in kwargs]
    steps_to_check += [("h_list", h) for h in kwargs.get("h_list", ())]
    for key, h in steps_to_check:
        try:
            harness._num_steps(t_end, h)
        except ValueError as exc:
            raise ConfigError(key, f"{key}: {exc}") from None

    if "sigma" in values and sigma_rows:
        raise ConfigError("sigma", "give either sigma or sigma_row, not both")
    if "sigma" in values:
        kwargs["sigma"] = _scalar("sigma", values["sigma"])
    elif sigma_rows:
        rows = [_floats("sigma_row", r) for r in sigma_rows]
        if len(rows) != dim:
            raise DimensionMismatch(
                "sigma_row", f"sigma_row: model {model_id} needs {dim} rows, got {len(rows)}"
            )
        if len({len(r) for r in rows}) != 1:
            raise DimensionMismatch("sigma_row", "sigma_row: rows have different lengths")
        matrix = np.array(rows)
        if model_id != "rigid_body":
            if matrix.shape[1] != 1 or matrix[1, 0] != 0.0:
                raise DimensionMismatch(
                    "sigma_row", f"sigma_row: {model_id} takes one noise column acting on p only"
                )
            kwargs["sigma"] = float(matrix[0, 0])
        else:
            if matrix.shape[1] > 3:
                raise DimensionMismatch("sigma_row", "sigma_row: at most 3 noise columns")
            kwargs["sigma"] = matrix
    if "initial_value" in values:
        x0 = _floats("initial_value", values["initial_value"])
        if len(x0) != dim:
            raise DimensionMismatch(
                "initial_value", f"initial_value: model {model_id} needs {dim} entries, got {len(x0)}"
            )
        kwargs["initial_value"] = tuple(x0)

    kwargs["samples"] = (
        _integer("samples", values["samples"], 1) if "samples" in values else DEFAULT_SAMPLES[command]
    )
    if "seed" in values:
        kwargs["seed"] = _integer("seed", values["seed"])
    if "observable" in values:
        try:
            kwargs["observable"] = Observable(values["observable"].lower())
        except ValueError:
            raise ConfigError("observable", f"unknown observable {values['observable']!r}") from None
    if "reference_scheme" in values:
        try:
            kwargs["reference_scheme"] = SchemeId.parse(values["reference_scheme"])
        except ValueError as exc:
            raise ConfigError("reference_scheme", str(exc)) from None
    if "moments" in values:
        try:
            kwargs["moments"] = tuple(
                Mode("weak_" + m.strip().lower()) for m in values["moments"].split(",") if m.strip()
            )
        except ValueError:
            raise ConfigError("moments", "moments must be a list drawn from m1, m2") from None
    for key in ("antithetic", "control_variate"):
        if key in values:
            kwargs[key] = _flag(key, values[key])

    solver = {}
    if "fp_tolerance" in values:
        solver["fp_tolerance"] = _positive("fp_tolerance", values["fp_tolerance"])
    if "fp_max_iters" in values:
        solver["fp_max_iters"] = _integer("fp_max_iters", values["fp_max_iters"], 1)
    if "quadrature_nodes" in values:
        solver["quadrature_nodes"] = _integer("quadrature_nodes", values["quadrature_nodes"], 1)
    try:
        kwargs["settings"] = SolverSettings(**solver)
    except ValueError as exc:
        raise ConfigError(next(iter(solver), ""), str(exc)) from None

    output = values.get("output_path", values.get("output"))
    if output:
        kwargs["output_path"] = output

    config = ExperimentConfig(command=command, model_id=model_id, schemes=schemes, t_end=t_end, **kwargs)
    model = config.build_model()
    for scheme in schemes + ((config.reference_scheme,) if config.reference_scheme else ()):
        try:
            check_scheme(scheme, model)
        except ValueError as exc:
            raise ConfigError("scheme", str(exc)) from None
    if config.observable is Observable.CASIMIR and model.casimir is None:
        raise ConfigError("observable", f"model {model_id} has no Casimir")
    return config


# -- output ---------------------------------------------------------------------


def format_float(x: float) -> str:
    """Shortest decimal that round-trips; integral values drop the trailing ``.0``."""
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def _trace_lines(report: TraceReport) -> list[str]:
    tail = f"{report.scheme.value},{report.observable.value}"
    return [
        f"{format_float(t)},{format_float(m)},{format_float(s)},{format_float(p)},{tail}"
        for t, m, s, p in zip(report.time_grid, report.sample_mean, report.std_error, report.predicted)
    ]


def _convergence_lines(report: ConvergenceReport) -> list[str]:
    lines = [
        f"{format_float(h)},{format_float(e)},{report.mode.value},{report.scheme.value}"
        for h, e in zip(report.step_sizes, report.errors)
    ]
    lines.append(f"# fitted_slope={format_float(report.fitted_slope)}")
    return lines


def render_csv(reports) -> str:
    if isinstance(reports, (TraceReport, ConvergenceReport)):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to write")
    if all(isinstance(r, TraceReport) for r in reports):
        lines = ["t,mean,std_error,predicted,scheme,observable"]
        for r in reports:
            lines.extend(_trace_lines(r))
    elif all(isinstance(r, ConvergenceReport) for r in reports):
        lines = ["h,error,mode,scheme"]
        for r in reports:
            lines.extend(_convergence_lines(r))
    else:
        raise TypeError("cannot mix trace and convergence reports in one CSV")
    return "\n".join(lines) + "\n"


def _write(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_csv(report, path) -> None:
    """Write one or more reports as CSV (LF line endings, round-trip floats)."""
    _write(render_csv(report), path)


def read_csv(path) -> tuple[list[str], list[list[str]], list[str]]:
    """Header, data rows and comment lines of a CSV written by :func:`emit_csv`."""
    rows, comments = [], []
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n").split(",")
        for line in fh:
            line = line.rstrip("\n")
            (comments if line.startswith("#") else rows).append(
                line if line.startswith("#") else line.split(",")
            )
    return header, rows, comments


# -- dispatch -------------------------------------------------------------------


def run_single(config: ExperimentConfig, sample_index: int = 0) -> str:
    """One trajectory per scheme as ``t,x_1..x_n`` CSV rows (plus a scheme column)."""
    model = config.build_model()
    n_steps = harness._num_steps(config.t_end, config.h)
    inc = sample_increments(config.seed, [sample_index], model.wiener_dim, config.h / 2, 2 * n_steps)[0]
    header = "t," + ",".join(f"x_{i + 1}" for i in range(model.dim)) + ",scheme"
    out = io.StringIO()
    out.write(header + "\n")
    for scheme in config.schemes:
        x = model.initial_value.copy()
        for k in range(n_steps + 1):
            if k:
                try:
                    x = step(scheme, model, x, config.h, inc[2 * k - 2], inc[2 * k - 1], config.settings)
                except NonConvergence as exc:
                    raise NonConvergence(exc.residual, exc.iterations, sample=sample_index, step=k - 1)
            cells = [format_float(k * config.h)] + [format_float(v) for v in x] + [scheme.value]
            out.write(",".join(cells) + "\n")
    return out.getvalue()


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None):
    """Run the configured study; returns the list of reports (or CSV text for ``single``)."""
    model = config.build_model()
    common = dict(settings=config.settings, workers=workers)
    reports = []
    for scheme in config.schemes:
        if config.command == "trace":
            reports.append(
                harness.run_trace(
                    model, scheme, config.h, config.t_end, config.samples, config.seed,
                    config.observable, **common,
                )
            )
        elif config.command == "strong":
            reports.append(
                harness.run_strong(
                    model, scheme, config.h_list, config.h_ref, config.t_end, config.samples,
                    config.seed, config.reference_scheme, **common,
                )
            )
        elif config.command == "weak":
            result = harness.run_weak(
                model, scheme, config.h_list, config.t_end, config.samples, config.seed,
                config.moments, reference_h=config.h_ref, reference_scheme=config.reference_scheme,
                antithetic=config.antithetic, control_variate=config.control_variate, **common,
            )
            reports.extend(result[m] for m in config.moments)
        else:
            return run_single(config)
    return reports


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="driftlab", description=__doc__.splitlines()[0])
    parser.add_argument("config", help="path to a key = value experiment config")
    parser.add_argument("--seed", type=lambda s: int(s, 0), help="override the master seed")
    parser.add_argument("--samples", type=int, help="override the Monte Carlo sample count")
    parser.add_argument("--output", help="CSV destination (default: stdout)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        config = parse_config(Path(args.config).read_text())
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.samples is not None:
            if args.samples < 1:
                raise ConfigError("samples", "samples must be at least 1")
            config = replace(config, samples=args.samples)
        if args.output is not None:
            config = replace(config, output_path=args.output)
        result = run_experiment(config)
        text = result if isinstance(result, str) else render_csv(result)
        _write(text, config.output_path)
    except (ConfigError, NonConvergence, OSError, ValueError) as exc:
        print(f"driftlab: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
