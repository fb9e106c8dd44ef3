"""Command line entry point.

Subcommands read a JSON experiment config, validate it against
:data:`CONFIG_SCHEMA` before doing any work, and write CSV tables plus an
optional JSON summary. Exit codes: 0 success, 1 comparison failure,
2 configuration error, 3 runtime error (for example a degenerate batch).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import analytic, montecarlo
from .model import (
    FLOAT_FORMATS,
    ConfigError,
    ContractError,
    DegenerateBatchError,
    InitScheme,
    NetworkConfig,
    Scheme,
    float_format,
)
from .propagation import run as propagate
from .sampling import SeedPlan, sample_inputs, sample_output_delta, sample_weights
from .trainer import DatasetConfig, TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# --dump-trace refuses configs with more activations than this
MAX_TRACE_ENTRIES = 200_000

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}


def _obj(properties, required=()):
    return {
        "type": "object",
        "properties": properties,
        "required": list(required),
        "additionalProperties": False,
    }


def _only(scheme, allowed, required=()):
    """Schema clause: ``scheme`` accepts only the parameter keys in ``allowed``."""
    banned = {"c", "gain", "variance"} - set(allowed)
    return {
        "if": {"properties": {"scheme": {"const": scheme}}, "required": ["scheme"]},
        "then": {"properties": {k: False for k in sorted(banned)}, "required": list(required)},
    }


CONFIG_SCHEMA = _obj(
    {
        "network": _obj(
            {
                "depth": _POS_INT,
                "width": _POS_INT,
                "activation": {"enum": ["identity", "relu"]},
                "block": {"enum": ["plain", "bn_pre_add", "bn_pre_act"]},
                "batch_size": _POS_INT,
                "input_variance": _NONNEG,
                "output_delta_variance": _NONNEG,
            },
            required=("depth", "width", "activation", "block"),
        ),
        "init": {
            **_obj(
                {
                    "scheme": {"enum": [s.value for s in Scheme]},
                    "c": _POS,
                    "gain": _POS,
                    "variance": _POS,
                    "distribution": {"enum": ["gaussian", "uniform", "rademacher"]},
                },
                required=("scheme",),
            ),
            "allOf": [
                _only("proposed", ["c"]),
                _only("he", ["gain"]),
                _only("glorot", []),
                _only("fixed", ["variance"], required=["variance"]),
            ],
        },
        "run": _obj(
            {
                "trials": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
                "tolerance_rel": _POS,
                "workers": _POS_INT,
            }
        ),
        "output": _obj({"csv_path": {"type": "string"}, "json_path": {"type": "string"}}),
        "train": _obj(
            {
                "steps": _POS_INT,
                "learning_rate": _POS,
                "repeats": _POS_INT,
                "plateau_window": _POS_INT,
                "plateau_threshold": _NONNEG,
                "dataset": _obj(
                    {"samples": {"type": "integer", "minimum": 2}, "separation": _NONNEG,
                     "classes": {"const": 2}}
                ),
            }
        ),
        "bn": _obj(
            {
                "batch_sizes": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
                "layer": _POS_INT,
            }
        ),
    },
    required=("network", "init"),
)

RUN_DEFAULTS = {"trials": 64, "seed": 0, "tolerance_rel": montecarlo.ToleranceConfig().exact_rel}
TRAIN_DEFAULTS = {"steps": 20, "learning_rate": 0.05, "repeats": 1, "plateau_window": 20, "plateau_threshold": 0.01}
DATASET_DEFAULTS = {"samples": 512, "separation": 2.0, "classes": 2}
BN_DEFAULTS = {"batch_sizes": [8, 32, 128, 512], "layer": 1}


def validate(config: dict) -> None:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {err.message}") from None


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    validate(config)
    return config


def network_config(config: dict) -> NetworkConfig:
    net = config["network"]
    init = config["init"]
    scheme = Scheme(init["scheme"])
    param = {Scheme.PROPOSED: init.get("c", 1.0), Scheme.HE: init.get("gain", 2.0),
             Scheme.FIXED: init.get("variance"), Scheme.GLOROT: None}[scheme]
    return NetworkConfig(
        depth=net["depth"],
        width=net["width"],
        activation=net["activation"],
        block=net["block"],
        init=InitScheme(scheme, param, init.get("distribution", "gaussian")),
        batch_size=net.get("batch_size", 256),
        input_variance=net.get("input_variance", 1.0),
        output_delta_variance=net.get("output_delta_variance", 1.0),
    )


def _fill(section: dict, defaults: dict, prefix: str, noted: list) -> dict:
    out = dict(section)
    for key, value in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(value)
            noted.append(f"{prefix}.{key}")
    return out


def effective_config(config: dict, args, sections=("run",)) -> tuple:
    """Config with CLI overrides and defaults applied; also lists defaulted keys."""
    noted = []
    cfg = copy.deepcopy(config)
    net = network_config(cfg)
    cfg.update(net.to_dict())
    run = dict(cfg.get("run", {}))
    for key in ("trials", "seed", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    if "workers" not in run:
        run["workers"] = montecarlo.default_workers()
    cfg["run"] = _fill(run, RUN_DEFAULTS, "run", noted)
    if "train" in sections:
        tr = _fill(cfg.get("train", {}), TRAIN_DEFAULTS, "train", noted)
        tr["dataset"] = _fill(tr.get("dataset", {}), DATASET_DEFAULTS, "train.dataset", noted)
        cfg["train"] = tr
    if "bn" in sections:
        cfg["bn"] = _fill(cfg.get("bn", {}), BN_DEFAULTS, "bn", noted)
    if getattr(args, "out", None):
        cfg.setdefault("output", {})["csv_path"] = args.out
    validate(cfg)
    return cfg, noted


def _emit(text: str, path=None):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _write_summary(cfg: dict, summary: dict):
    path = cfg.get("output", {}).get("json_path")
    if path:
        Path(path).write_text(json.dumps({"config": cfg, **summary}, indent=2) + "\n")


def gnuplot_script(csv_path: str, x: str, columns, log_y=True) -> str:
    """Companion gnuplot script plotting ``columns`` of ``csv_path`` against ``x``."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{x}'",
    ]
    if log_y:
        lines.append("set logscale y")
    plots = [f"'{csv_path}' using '{x}':'{c}' with linespoints" for c in columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def _write_gnuplot(args, csv_path, x, columns, log_y=True):
    if getattr(args, "gnuplot", None):
        Path(args.gnuplot).write_text(gnuplot_script(csv_path or "-", x, columns, log_y))


def _dump_trace(cfg: NetworkConfig, seed: int, path: str):
    entries = cfg.depth * cfg.width * cfg.batch_size
    if entries > MAX_TRACE_ENTRIES:
        raise ConfigError(
            f"--dump-trace is for small configs ({entries} activations > {MAX_TRACE_ENTRIES})"
        )
    plan = SeedPlan(seed, 0)
    trace = propagate(cfg, sample_weights(cfg, plan), sample_inputs(cfg, plan), sample_output_delta(cfg, plan))
    Path(path).write_text(trace.to_json())


# -- subcommands --------------------------------------------------------------


def cmd_run(args) -> int:
    cfg, noted = effective_config(load_config(args.config), args)
    net = network_config(cfg)
    run = cfg["run"]
    if args.dump_trace:
        _dump_trace(net, run["seed"], args.dump_trace)
    tol = montecarlo.ToleranceConfig(exact_rel=run["tolerance_rel"])
    stats, report = montecarlo.experiment_report(net, run["trials"], run["seed"], run["workers"], tol)
    means = montecarlo.mean_checks(stats, net, tol.z_crit)
    combined = montecarlo.ComparisonReport(report.rows + means.rows)
    csv_path = cfg.get("output", {}).get("csv_path")
    _emit(combined.to_csv(), csv_path)
    _write_gnuplot(args, csv_path, "layer", ["empirical", "predicted"])
    _write_summary(cfg, {
        "defaults_applied": noted,
        "samples_per_layer": int(stats.count("z")[0]),
        "result": combined.summary(),
        "failures": [f"{r.quantity}@{r.layer}" for r in combined.failures()],
    })
    for r in combined.failures():
        logger.info("%s at layer %d: empirical %.6g, predicted %.6g (%s)",
                    r.quantity, r.layer, r.empirical, r.predicted, r.kind.value)
    return EXIT_OK if combined.ok else EXIT_FAIL


def cmd_predict(args) -> int:
    config = load_config(args.config)
    net = network_config(config)
    rows = analytic.predict(net).rows(log_space=args.log_space)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    out = args.out or config.get("output", {}).get("csv_path")
    _emit(buf.getvalue(), out)
    values = [c for c in rows[0] if c.startswith("predicted_")]
    _write_gnuplot(args, out, "layer", values, log_y=not args.log_space)
    return EXIT_OK


def cmd_depth_limit(args) -> int:
    limit = analytic.depth_limit(float_format(args.format), args.fan_in, args.c)
    if limit.saturated:
        print(f"saturated (max depth ~2^{limit.max_depth.bit_length() - 1} exceeds 2^53)")
    else:
        print(limit.max_depth)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, noted = effective_config(load_config(args.config), args, sections=("run", "train"))
    net = network_config(cfg)
    tr = cfg["train"]
    tc = TrainConfig(
        net,
        steps=tr["steps"],
        learning_rate=tr["learning_rate"],
        dataset=DatasetConfig(**tr["dataset"]),
        repeats=tr["repeats"],
        plateau_window=tr["plateau_window"],
        plateau_threshold=tr["plateau_threshold"],
    )
    result = train(tc, seed=cfg["run"]["seed"], workers=cfg["run"]["workers"])
    csv_path = cfg.get("output", {}).get("csv_path")
    _emit(result.to_csv(), csv_path)
    _write_gnuplot(args, csv_path, "step", ["loss"])
    _write_summary(cfg, {"defaults_applied": noted, "result": result.summary()})
    return EXIT_OK


def cmd_bn_convergence(args) -> int:
    cfg, noted = effective_config(load_config(args.config), args, sections=("run", "bn"))
    net = network_config(cfg)
    bn = cfg["bn"]
    run = cfg["run"]
    rows = montecarlo.bn_finite_N_convergence(
        net, bn["batch_sizes"], run["trials"], run["seed"], run["workers"], bn["layer"]
    )
    csv_path = cfg.get("output", {}).get("csv_path")
    _emit(montecarlo.convergence_csv(rows), csv_path)
    _write_gnuplot(args, csv_path, "batch_size", ["deviation"])
    shrink = montecarlo.deviations_shrink(rows)
    _write_summary(cfg, {"defaults_applied": noted, "result": {"deviations_shrink": shrink}})
    return EXIT_OK if shrink else EXIT_FAIL


# -- parser ---------------------------------------------------------------------


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="CSV output path (default: output.csv_path or stdout)")
        p.add_argument("--gnuplot", metavar="PATH", help="also write a gnuplot script for the CSV")
        return p

    def with_run(p):
        p.add_argument("--seed", type=_nonneg_int)
        p.add_argument("--trials", type=_nonneg_int)
        p.add_argument("--workers", type=_nonneg_int, help="default: $RESPROP_WORKERS or 1")
        return p

    p = with_run(with_config(sub.add_parser("run", help="Monte-Carlo run compared against predictions")))
    p.add_argument("--dump-trace", metavar="PATH", help="write one trial's full trace as JSON")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("predict", help="analytic predictions only"))
    p.add_argument("--log-space", action="store_true", help="emit log10 of each prediction")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("depth-limit", help="deepest network whose weight variance stays normal")
    p.add_argument("--format", required=True, choices=sorted(FLOAT_FORMATS))
    p.add_argument("--fan-in", type=int, default=64)
    p.add_argument("--c", type=float, default=1.0)
    p.set_defaults(func=cmd_depth_limit)

    p = with_run(with_config(sub.add_parser("train", help="short SGD runs, loss curves as CSV")))
    p.set_defaults(func=cmd_train)

    p = with_run(with_config(sub.add_parser("bn-convergence", help="batch-size sweep of the delta ratio")))
    p.set_defaults(func=cmd_bn_convergence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for key in ("trials", "workers"):
        if getattr(args, key, None) == 0:
            print(f"error: --{key} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateBatchError, ContractError, FloatingPointError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
