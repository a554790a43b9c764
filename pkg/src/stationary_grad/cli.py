"""Command-line batch runner.

One YAML (or JSON) config describes one run::

    stationary-grad compare --config run.yaml --seed 3 --output out.json

Exit statuses: 0 success, 2 bad config, 3 model precondition violated,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from typing import Any, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .certify import RegionSampler, certify, report_document
from .costs import cost_registry_lookup
from .errors import ConfigError, ModelConditionError, NumericalError
from .model import RngStream, validate_cost, validate_derivatives
from .oracle import fd_gradient
from .sensitivity import batch_gradient, default_burn_in
from .zoo import MODEL_KINDS, build_model

SCHEMA_VERSION = 1
COMMANDS = ("certify", "estimate", "oracle", "compare", "validate")
AGREE_THRESHOLD = 3.0

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_NUMERICAL = 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegionConfig(_Strict):
    mode: Literal["grid", "uniform"] = "uniform"
    x_low: list[float]
    x_high: list[float]
    theta_low: Optional[list[float]] = None
    theta_high: Optional[list[float]] = None
    seed: Optional[int] = None


class MCConfig(_Strict):
    n_noise: int = Field(2048, gt=1)
    n_points: int = Field(256, gt=0)


class OutputConfig(_Strict):
    path: Optional[str] = None
    format: Literal["json", "csv"] = "json"


class RunConfig(_Strict):
    """A single run. ``model`` holds ``kind`` plus the fields of that model's config."""

    command: Optional[Literal["certify", "estimate", "oracle", "compare", "validate"]] = None
    model: dict[str, Any]
    theta: Optional[list[Any]] = None
    cost: str = "coordinate(0)"
    n_steps: int = Field(100_000, gt=0)
    burn_in: Optional[int] = Field(None, ge=0)
    replicates: int = Field(8, gt=0)
    seed: int = Field(0, ge=0)
    fd_h: Optional[float] = Field(None, gt=0)
    crn: bool = True
    region: Optional[RegionConfig] = None
    mc: MCConfig = MCConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("model")
    @classmethod
    def _known_kind(cls, v):
        kind = v.get("kind")
        if kind not in MODEL_KINDS:
            raise ValueError(f"model.kind must be one of {sorted(MODEL_KINDS)}, got {kind!r}")
        return v

    @field_validator("cost")
    @classmethod
    def _known_cost(cls, v):
        try:
            cost_registry_lookup(v)
        except KeyError as exc:
            raise ValueError(exc.args[0]) from None
        return v

    @model_validator(mode="after")
    def _burn_in_below_steps(self):
        if self.burn_in is not None and self.burn_in >= self.n_steps:
            raise ValueError(f"burn_in must be < n_steps (got burn_in={self.burn_in}, "
                             f"n_steps={self.n_steps})")
        return self

    def effective_burn_in(self):
        return default_burn_in(self.n_steps) if self.burn_in is None else self.burn_in


def _format_validation(exc: ValidationError):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"].removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def parse_config(data: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Validate a config mapping; a result document is accepted and its echoed config reused."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "schema_version" in data and "config" in data:
        data = data["config"]
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("output_path", "output_format"):
            out = dict(data.get("output") or {})
            out["path" if key == "output_path" else "format"] = value
            data["output"] = out
        else:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_config(path, overrides=None) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data, overrides)


# --------------------------------------------------------------------------- building blocks

def _model_from(cfg: RunConfig):
    fields = {k: v for k, v in cfg.model.items() if k != "kind"}
    kind = cfg.model["kind"]
    if kind == "stochastic_nn" and fields.get("theta") is None and cfg.theta is not None:
        fields["theta"] = cfg.theta
    try:
        model, weight = build_model(kind, **fields)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    if cfg.theta is not None:
        theta = np.asarray(cfg.theta, dtype=float).reshape(-1)
    elif kind == "stochastic_nn":
        theta = model.cfg.theta_matrix().reshape(-1)
    else:
        raise ConfigError("theta: required for this model")
    if theta.size != model.param_dim:
        raise ConfigError(f"theta: model expects {model.param_dim} entries, got {theta.size}")
    model.check_theta(theta)
    return model, weight, theta


def _region_from(cfg: RunConfig, model):
    if cfg.region is None:
        if model.state_domain is None:
            raise ConfigError("region: required for models on an unbounded state space")
        low, high = model.state_domain.low, model.state_domain.high
        return RegionSampler.box(low, high, count=cfg.mc.n_points, seed=cfg.seed)
    r = cfg.region
    try:
        return RegionSampler.box(r.x_low, r.x_high, r.theta_low, r.theta_high, mode=r.mode,
                                 count=cfg.mc.n_points,
                                 seed=cfg.seed if r.seed is None else r.seed)
    except ValueError as exc:
        raise ConfigError(f"region: {exc}") from None


def z_scores(mean_a, se_a, mean_b, se_b):
    """``|a - b| / sqrt(se_a^2 + se_b^2)`` per component.

    A floor of ``1e-10 (1 + |mean|)`` on the combined error keeps
    zero-variance components from turning roundoff into huge scores.
    """
    a, b = np.asarray(mean_a, dtype=float), np.asarray(mean_b, dtype=float)
    se = np.sqrt(np.asarray(se_a, dtype=float) ** 2 + np.asarray(se_b, dtype=float) ** 2)
    floor = 1e-10 * (1.0 + np.maximum(np.abs(a), np.abs(b)))
    return np.abs(a - b) / np.maximum(se, floor)


def _verdict(z):
    if not np.all(np.isfinite(z)):
        return "undetermined"
    return "agree" if np.all(z < AGREE_THRESHOLD) else "disagree"


# --------------------------------------------------------------------------- commands

def _estimate(cfg, model, weight, theta, cost):
    est = batch_gradient(model, theta, cost, cfg.n_steps, cfg.effective_burn_in(),
                         cfg.replicates, cfg.seed)
    return est.to_dict(), _replicate_rows("forward", est)


def _oracle(cfg, model, weight, theta, cost, seed=None):
    est = fd_gradient(model, theta, cost, h=cfg.fd_h, n_steps=cfg.n_steps,
                      burn_in=cfg.effective_burn_in(), replicates=cfg.replicates,
                      seed=cfg.seed if seed is None else seed, crn=cfg.crn)
    return est.to_dict(), _replicate_rows("fd", est)


def _compare(cfg, model, weight, theta, cost):
    fwd = batch_gradient(model, theta, cost, cfg.n_steps, cfg.effective_burn_in(),
                         cfg.replicates, cfg.seed)
    # the oracle gets its own seed so the two estimates are independent
    fd = fd_gradient(model, theta, cost, h=cfg.fd_h, n_steps=cfg.n_steps,
                     burn_in=cfg.effective_burn_in(), replicates=cfg.replicates,
                     seed=cfg.seed + 1, crn=cfg.crn)
    z = z_scores(fwd.mean, fwd.stderr, fd.mean, fd.stderr)
    doc = {"forward": fwd.to_dict(), "oracle": fd.to_dict(),
           "z_scores": [None if not math.isfinite(v) else float(v) for v in z],
           "threshold": AGREE_THRESHOLD, "verdict": _verdict(z)}
    return doc, _replicate_rows("forward", fwd) + _replicate_rows("fd", fd)


def _certify(cfg, model, weight, theta, cost):
    region = _region_from(cfg, model)
    report = certify(model, weight, theta, region, n_noise=cfg.mc.n_noise, seed=cfg.seed)
    xs, thetas = region.points(model, theta)
    rows = []
    for i in range(len(xs)):
        row = {"point": i}
        row.update({f"x{j}": v for j, v in enumerate(xs[i])})
        row.update({f"theta{j}": v for j, v in enumerate(thetas[i])})
        for name, est in report.coefficients.items():
            row[f"L_{name}"] = est.values[i]
            row[f"L_{name}_stderr"] = est.stderrs[i]
        rows.append(row)
    return report_document(report), rows


def _validate(cfg, model, weight, theta, cost):
    rng = RngStream(cfg.seed)
    rep = validate_derivatives(model, theta, points=cfg.mc.n_points, rng=rng)
    if model.state_domain is not None:
        xs = model.state_domain.sample(rng.fork(1).generator, cfg.mc.n_points)
    else:
        xs = rng.fork(1).generator.standard_normal((cfg.mc.n_points, model.state_dim))
    doc = rep.to_dict()
    doc["cost"] = {"name": cost.name, **validate_cost(cost, xs)}
    rows = [{"derivative": k, "max_rel_error": v,
             "tol": rep.hess_tol if k.startswith("hess") else rep.tol}
            for k, v in rep.max_rel_error.items()]
    rows.append({"derivative": f"cost:{cost.name}", "max_rel_error": doc["cost"]["grad"],
                 "tol": rep.tol})
    return doc, rows


_HANDLERS = {"estimate": _estimate, "oracle": _oracle, "compare": _compare,
             "certify": _certify, "validate": _validate}


def _replicate_rows(method, est):
    rows = []
    for r, vals in enumerate(est.replicate_values):
        row = {"method": method, "replicate": r}
        row.update({f"d{j}": v for j, v in enumerate(np.ravel(vals))})
        rows.append(row)
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def run(cfg: RunConfig):
    """Execute a validated config; returns ``(document, csv_rows)``."""
    command = cfg.command
    if command is None:
        raise ConfigError("command: not given in the config or on the command line")
    t0 = time.perf_counter()
    model, weight, theta = _model_from(cfg)
    cost = cost_registry_lookup(cfg.cost)
    result, rows = _HANDLERS[command](cfg, model, weight, theta, cost)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "library_version": __version__,
        "seed": cfg.seed,
        "wall_time_s": time.perf_counter() - t0,
        "config": cfg.model_dump(mode="json", exclude={"output"}),
        "result": result,
    }
    return _jsonable(doc), _jsonable(rows)


def write_output(doc, rows, fmt, path=None):
    if fmt == "json":
        text = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    else:
        buf = io.StringIO()
        fields = []
        for row in rows:
            fields.extend(k for k in row if k not in fields)
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stationary-grad",
        description="Stationary-cost gradients by forward sensitivity, with oracles and "
                    "empirical contraction certificates.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--n-steps", type=int, dest="n_steps")
        p.add_argument("--replicates", type=int)
        p.add_argument("--output", dest="output_path", help="output file (default: stdout)")
        p.add_argument("--format", dest="output_format", choices=("json", "csv"))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"command": args.command, "seed": args.seed, "n_steps": args.n_steps,
                 "replicates": args.replicates, "output_path": args.output_path,
                 "output_format": args.output_format}
    try:
        cfg = load_config(args.config, overrides)
        # non-finite values are detected and reported as exit status 4
        with np.errstate(over="ignore", invalid="ignore"):
            doc, rows = run(cfg)
        write_output(doc, rows, cfg.output.format, cfg.output.path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelConditionError as exc:
        print(f"model condition violated: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
