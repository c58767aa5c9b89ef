"""Command-line experiment runner.

Subcommands: ``estimate``, ``verify``, ``diagnose`` and ``reproduce
table1|table2``.  Each reads one TOML config, writes ``<name>.csv`` and a
``<name>.json`` sidecar into the output directory and exits non-zero on
config errors, strict verification failures or excess censoring.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import engine, limits, tuning
from .hazard import MG1Pareto, model_from_config

OUT_ENV = "RUINMIX_OUT"
DEFAULT_OUT = "ruinmix-out"
CSV_COLUMNS = ("b", "estimator", "n", "mean", "std_error", "cv", "mean_tau", "censored_frac",
               "seed", "wall_seconds")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY, EXIT_CENSORED = 0, 1, 2, 3, 4

SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "model": {"name": str, "service_index": (int, float), "interarrival_mean": (int, float),
              "b0": (int, float)},
    "run": {"mode": str, "b": list, "n": int, "seed": int, "shards": int, "workers": int,
            "gamma": (int, float), "max_steps": int, "censoring_threshold": (int, float)},
    "overrides": {"a_star": (int, float), "a_star_star": (int, float), "delta0": (int, float),
                  "kappa": (int, float), "eta_floor": (int, float), "cutoff_override": list,
                  "epsilon": (int, float), "lyapunov_probe": bool},
    "baselines": {"crude": bool, "crude_n": int, "crude_barrier": (int, float),
                  "ak": bool, "ak_n": int},
    "diagnostics": {"conditional": bool, "coupling": bool, "n": int, "n_min": int,
                    "ks_threshold": (int, float)},
    "output": {"name": str},
}
REQUIRED = {"model": ("name",), "run": ("b", "n")}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    model: dict[str, Any]
    mode: tuning.Mode
    b: list[float]
    n: int
    seed: int = 0
    shards: int = 1
    workers: int | None = None
    gamma: float | None = None
    max_steps: int = engine.MAX_STEPS
    censoring_threshold: float = 1e-4
    overrides: dict[str, Any] = field(default_factory=dict)
    baselines: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, doc: dict[str, Any], default_name: str) -> "ExperimentConfig":
        validate(doc)
        run = doc["run"]
        try:
            mode = tuning.Mode(run.get("mode", tuning.Mode.STRONG_EFFICIENCY.value))
        except ValueError:
            raise ConfigError(f"unknown mode {run.get('mode')!r}; expected one of "
                              f"{[m.value for m in tuning.Mode]}") from None
        bs = [float(x) for x in run["b"]]
        if not bs or any(not (x > 0 and math.isfinite(x)) for x in bs):
            raise ConfigError("run.b must be a non-empty list of positive barriers")
        if run["n"] < 2:
            raise ConfigError("run.n must be at least 2")
        if run.get("shards", 1) < 1:
            raise ConfigError("run.shards must be positive")
        if mode is tuning.Mode.GAMMA_MOMENT and "gamma" not in run:
            raise ConfigError("gamma_moment mode needs run.gamma")
        return cls(
            name=doc.get("output", {}).get("name", default_name), model=dict(doc["model"]),
            mode=mode, b=bs, n=int(run["n"]), seed=int(run.get("seed", 0)),
            shards=int(run.get("shards", 1)), workers=run.get("workers"),
            gamma=run.get("gamma"), max_steps=int(run.get("max_steps", engine.MAX_STEPS)),
            censoring_threshold=float(run.get("censoring_threshold", 1e-4)),
            overrides=dict(doc.get("overrides", {})), baselines=dict(doc.get("baselines", {})),
            diagnostics=dict(doc.get("diagnostics", {})), raw=doc,
        )


def validate(doc: dict[str, Any]) -> None:
    """Reject unknown sections or keys, wrong types and missing required keys."""
    unknown = set(doc) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, keys in REQUIRED.items():
        if section not in doc:
            raise ConfigError(f"missing [{section}] section")
        for k in keys:
            if k not in doc[section]:
                raise ConfigError(f"missing {section}.{k}")
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for k, v in body.items():
            if k not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{k}")
            want = SCHEMA[section][k]
            if isinstance(v, bool) and want is not bool:
                raise ConfigError(f"{section}.{k} has the wrong type")
            if not isinstance(v, want):
                raise ConfigError(f"{section}.{k} has the wrong type ({type(v).__name__})")


def load_config(path: str | os.PathLike, seed: int | None = None,
                shards: int | None = None, n: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from None
    return _apply_cli(ExperimentConfig.from_mapping(doc, path.stem), seed, shards, n)


def bundled_config(table: str, seed: int | None = None, shards: int | None = None,
                   n: int | None = None) -> ExperimentConfig:
    res = resources.files("ruinmix") / "configs" / f"{table}.toml"
    if not res.is_file():
        raise ConfigError(f"no bundled config {table!r}")
    doc = tomllib.loads(res.read_text())
    return _apply_cli(ExperimentConfig.from_mapping(doc, table), seed, shards, n)


def _apply_cli(cfg: ExperimentConfig, seed, shards, n) -> ExperimentConfig:
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = seed
    if shards is not None:
        if shards < 1:
            raise ConfigError("--shards must be positive")
        cfg.shards = shards
    if n is not None:
        if n < 2:
            raise ConfigError("--n must be at least 2")
        cfg.n = n
        cfg.baselines.pop("ak_n", None)
        cfg.baselines.pop("crude_n", None)
    return cfg


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig):
    try:
        return model_from_config(cfg.model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [model]: {exc}") from None


def build_params(cfg: ExperimentConfig, model) -> tuning.TuningParams:
    ov = cfg.overrides
    if cfg.mode is tuning.Mode.GAMMA_MOMENT:
        return tuning.select_gamma_params(model, float(cfg.gamma), ov)
    if cfg.mode is tuning.Mode.TERMINATION:
        base = tuning.select_variance_params(model, tuning.Mode.STRONG_EFFICIENCY, ov)
        return tuning.enforce_termination_params(base, model)
    return tuning.select_variance_params(model, cfg.mode, ov)


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, int)) and not isinstance(v, float):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.16e}"


def csv_text(rows: list[engine.EstimateSummary], timings: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        vals = [r.b, r.estimator, r.n, r.mean, r.std_error, r.cv, r.mean_tau, r.censored_frac,
                r.seed, r.wall_seconds if timings else math.nan]
        w.writerow([format_value(v) for v in vals])
    return buf.getvalue()


def _summary_json(r: engine.EstimateSummary, timings: bool) -> dict[str, Any]:
    d = r.to_dict()
    if not timings:
        d.pop("wall_seconds")
    return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def out_dir(arg: str | None) -> Path:
    p = Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(out: Path, name: str, csv_body: str | None, sidecar: dict[str, Any]) -> list[Path]:
    written = []
    if csv_body is not None:
        (out / f"{name}.csv").write_text(csv_body)
        written.append(out / f"{name}.csv")
    (out / f"{name}.json").write_text(json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n")
    written.append(out / f"{name}.json")
    return written


def _verification(model, params, b: float) -> dict[str, Any]:
    grid = tuning.default_s_grid(b)
    lyap = tuning.verify_lyapunov(model, params, b, grid)
    drift = tuning.verify_drift(model, params, b, grid)
    return {"lyapunov": lyap.to_dict(), "drift": drift.to_dict(),
            "passed": bool(lyap.passed and drift.passed)}


def _header(cfg: ExperimentConfig, model, params) -> dict[str, Any]:
    return {"config": cfg.raw, "name": cfg.name, "seed": cfg.seed, "shards": cfg.shards,
            "n": cfg.n, "model": model.to_config(), "params": params.to_dict()}


def _log(msg: str, quiet: bool):
    if not quiet:
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out: Path, verify: str = "off",
                   timings: bool = False, quiet: bool = False) -> int:
    """Estimates (plus configured baselines) for every barrier in ``cfg``."""
    model = build_model(cfg)
    params = build_params(cfg, model)
    sidecar = _header(cfg, model, params)
    rows: list[engine.EstimateSummary] = []
    status = EXIT_OK
    if verify != "off":
        sidecar["verification"] = {}
        for b in cfg.b:
            rep = _verification(model, params, b)
            sidecar["verification"][format_value(b)] = rep
            _log(f"verify b={b:g}: {'pass' if rep['passed'] else 'FAIL'}", quiet)
            if not rep["passed"] and verify == "strict":
                status = EXIT_VERIFY
        if status:
            _write(out, cfg.name, None, sidecar)
            return status
    base = cfg.baselines
    for b in cfg.b:
        r = engine.estimate(model, params, b, cfg.n, cfg.seed, cfg.shards, cfg.workers,
                            gamma=cfg.gamma, max_steps=cfg.max_steps)
        rows.append(r)
        _log(f"is    b={b:g} mean={r.mean:.6g} se={r.std_error:.3g} "
             f"({r.wall_seconds:.1f}s)", quiet)
        if r.censored_frac > cfg.censoring_threshold:
            _log(f"censored fraction {r.censored_frac:g} exceeds {cfg.censoring_threshold:g}",
                 quiet)
            status = EXIT_CENSORED
        if base.get("crude"):
            c = engine.crude_mc(model, b, int(base.get("crude_n", cfg.n)),
                                base.get("crude_barrier"), cfg.seed, cfg.shards, cfg.workers,
                                max_steps=cfg.max_steps)
            rows.append(c)
            _log(f"crude b={b:g} mean={c.mean:.6g} se={c.std_error:.3g}", quiet)
        if base.get("ak"):
            if not isinstance(model, MG1Pareto):
                raise ConfigError("the ak baseline needs the mg1_pareto model")
            a = engine.ak_estimate(model, b, int(base.get("ak_n", cfg.n)), cfg.seed, cfg.shards,
                                   cfg.workers)
            rows.append(a)
            _log(f"ak    b={b:g} mean={a.mean:.6g} se={a.std_error:.3g}", quiet)
    sidecar["summaries"] = [_summary_json(r, timings) for r in rows]
    sidecar["pv_approx"] = {format_value(b): math.exp(limits.pv_approx(model, b)) for b in cfg.b}
    for path in _write(out, cfg.name, csv_text(rows, timings), sidecar):
        _log(f"wrote {path}", quiet)
    return status


def run_verify(cfg: ExperimentConfig, out: Path, strict: bool, quiet: bool = False) -> int:
    model = build_model(cfg)
    params = build_params(cfg, model)
    sidecar = _header(cfg, model, params)
    sidecar["verification"] = {}
    ok = True
    for b in cfg.b:
        rep = _verification(model, params, b)
        sidecar["verification"][format_value(b)] = rep
        ok &= rep["passed"]
        _log(f"b={b:g}: lyapunov worst={rep['lyapunov']['worst']:.9g} "
             f"drift worst={rep['drift']['worst']:.6g} -> {'pass' if rep['passed'] else 'FAIL'}",
             quiet)
    for path in _write(out, f"{cfg.name}-verify", None, sidecar):
        _log(f"wrote {path}", quiet)
    return EXIT_VERIFY if strict and not ok else EXIT_OK


def run_diagnose(cfg: ExperimentConfig, out: Path, quiet: bool = False) -> int:
    model = build_model(cfg)
    diag = cfg.diagnostics
    if not (diag.get("conditional") or diag.get("coupling")):
        raise ConfigError("enable diagnostics.conditional or diagnostics.coupling")
    n = int(diag.get("n", cfg.n))
    thr = float(diag.get("ks_threshold", limits.KS_THRESHOLD))
    params = build_params(cfg, model)
    sidecar = _header(cfg, model, params)
    if diag.get("conditional"):
        sidecar["conditional"] = {}
        for b in cfg.b:
            batch = engine.simulate(model, params, b, n, cfg.seed, cfg.shards, cfg.workers,
                                    record=True, max_steps=cfg.max_steps)
            rep = limits.conditional_diagnostics(batch, model, b,
                                                 n_min=int(diag.get("n_min", limits.N_MIN)),
                                                 ks_threshold=thr, seed=cfg.seed)
            sidecar["conditional"][format_value(b)] = rep.to_dict()
            _log(f"conditional b={b:g}: " + ", ".join(f"{k}={v:.4f}" for k, v in rep.ks.items()),
                 quiet)
    if diag.get("coupling"):
        tv = params if params.mode is tuning.Mode.TOTAL_VARIATION else \
            tuning.select_variance_params(model, tuning.Mode.TOTAL_VARIATION, cfg.overrides)
        sidecar["coupling"] = {"params": tv.to_dict()}
        for b in cfg.b:
            rep = limits.coupling_experiment(model, tv, b, n, cfg.seed, cfg.shards, cfg.workers,
                                             ks_threshold=thr, max_steps=cfg.max_steps)
            sidecar["coupling"][format_value(b)] = rep.to_dict()
            _log(f"coupling b={b:g}: P(tau=N_b)={rep.equal_fraction:.4f} "
                 f"KS={rep.ks_decoupling:.4f}", quiet)
    for path in _write(out, f"{cfg.name}-diagnose", None, sidecar):
        _log(f"wrote {path}", quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--shards", type=int, help="number of contiguous replication blocks")
    common.add_argument("--n", type=int, help="replications per barrier and estimator (overrides the config)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    p = argparse.ArgumentParser(prog="ruinmix", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, hlp in (("estimate", "importance-sampling estimates and baselines"),
                      ("verify", "Lyapunov and drift reports on state grids"),
                      ("diagnose", "conditional-law and coupling diagnostics")):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        sp.add_argument("--config", required=True, help="TOML experiment config")
        if name != "diagnose":
            sp.add_argument("--verify", choices=("off", "report", "strict"),
                            default="off" if name == "estimate" else "report")
        if name == "estimate":
            sp.add_argument("--timings", action="store_true",
                            help="fill the wall_seconds column")
    rp = sub.add_parser("reproduce", parents=[common], help="run a bundled table config")
    rp.add_argument("table", choices=("table1", "table2"))
    rp.add_argument("--verify", choices=("off", "report", "strict"), default="off")
    rp.add_argument("--timings", action="store_true", help="fill the wall_seconds column")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "reproduce":
            cfg = bundled_config(args.table, args.seed, args.shards, args.n)
        else:
            cfg = load_config(args.config, args.seed, args.shards, args.n)
        out = out_dir(args.out)
        t0 = time.perf_counter()
        if args.command in ("estimate", "reproduce"):
            code = run_experiment(cfg, out, args.verify, args.timings, args.quiet)
        elif args.command == "verify":
            code = run_verify(cfg, out, args.verify == "strict", args.quiet)
        else:
            code = run_diagnose(cfg, out, args.quiet)
        _log(f"done in {time.perf_counter() - t0:.1f}s", args.quiet)
        return code
    except (ConfigError, tuning.TuningError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
