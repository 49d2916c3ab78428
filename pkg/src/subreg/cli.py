"""Experiment orchestration CLI.

One JSON config per run; subcommands: gen, train, eval, count, solve,
control, report.  Exit codes: 0 success, 2 configuration/usage error,
3 runtime numerical failure.  Data goes to files/stdout, structured logs to
stderr, and every CSV carries a comment line with the config hash.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import ConfigError, SubregError
from . import eigencount
from . import learn
from . import problems
from . import solvers

SCHEMA_VERSION = 1


def _fmt(x):
    """Stable shortest-roundtrip formatting for CSV floats."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _log(message, **fields):
    payload = {"msg": message, **fields}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path, header, rows, chash):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={chash}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


@dataclass
class Field:
    type: type
    required: bool = False
    default: object = None


SCHEMAS = {
    "gen": {
        "preset": Field(str, required=True),
        "n_samples": Field(int, default=20),
        "m_target": Field(int, default=10),
        "seed": Field(int, default=0),
        "grid": Field(list, default=None),
        "n_test": Field(int, default=0),
        "test_seed": Field(int, default=None),
        "omega": Field(float, default=None),
        "n_inputs": Field(int, default=None),
        "n_observations": Field(int, default=None),
    },
    "train": {
        "dataset": Field(str, required=True),
        "test_dataset": Field(str, default=None),
        "loss": Field(str, default="L1"),
        "r": Field((int, list), required=True),
        "batch_size": Field(int, default=25),
        "epochs": Field(int, default=200),
        "learning_rate": Field(float, default=3e-4),
        "gamma_decay": Field(float, default=0.5),
        "decay_interval": Field(int, default=100),
        "weight_decay": Field(float, default=1e-4),
        "seed": Field(int, default=0),
        "hidden": Field(list, default=[256, 256, 256]),
        "encoder_modes": Field(int, default=12),
    },
    "eval": {
        "dataset": Field(str, required=True),
        "checkpoint": Field(str, default=None),
        "oracle": Field(bool, default=False),
        "metric": Field(str, default="rel_subspace"),
    },
    "count": {
        "k": Field(int, required=True),
        "d": Field(int, required=True),
        "mc": Field(int, default=0),
        "greedy": Field(list, default=[]),
        "seed": Field(int, default=0),
    },
    "solve": {
        "dataset": Field(str, required=True),
        "mode": Field(str, default="deflated-cg"),
        "source": Field(str, default="exact"),
        "sizes": Field(list, default=[10]),
        "tol": Field(float, default=1e-8),
        "maxit": Field(int, default=20000),
        "omega": Field(float, default=0.9),
        "power_iters": Field(int, default=400),
        "checkpoint": Field(str, default=None),
        "train_dataset": Field(str, default=None),
        "k_nn": Field(int, default=8),
        "seed": Field(int, default=0),
        "max_samples": Field(int, default=None),
    },
    "control": {
        "dataset": Field(str, required=True),
        "sizes": Field(list, default=[8]),
        "source": Field(str, default="exact"),
        "lam": Field(float, default=1e-2),
        "t_final": Field(float, default=2.0),
        "max_samples": Field(int, default=None),
    },
    "report": {
        "inputs": Field(list, required=True),
    },
}


def validate_config(command, config):
    schema = SCHEMAS[command]
    unknown = set(config) - set(schema) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if config.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {config.get('schema_version')!r}")
    out = {}
    for key, spec in schema.items():
        if key in config:
            value = config[key]
            types = spec.type if isinstance(spec.type, tuple) else (spec.type,)
            if value is not None:
                if float in types and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                if not isinstance(value, types) or isinstance(value, bool) and bool not in types:
                    raise ConfigError(f"config key {key!r} must be {spec.type}")
            out[key] = value
        elif spec.required:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            out[key] = spec.default
    return out


class OutputLock:
    """Guards an output directory against concurrent writers."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def write_manifest(out_dir, config, outputs):
    manifest = {
        "config_hash": config_hash(config),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _dataset_kwargs(cfg):
    extra = {}
    if cfg["preset"] == "twogrid" and cfg["omega"] is not None:
        extra["omega"] = cfg["omega"]
    if cfg["preset"] == "control":
        if cfg["n_inputs"] is not None:
            extra["n_inputs"] = cfg["n_inputs"]
        if cfg["n_observations"] is not None:
            extra["n_observations"] = cfg["n_observations"]
    return extra


def cmd_gen(cfg, out_dir):
    if cfg["preset"] not in problems.PRESET_NAMES:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    grid = tuple(cfg["grid"]) if cfg["grid"] else None
    outputs = []
    ds = problems.generate_dataset(
        cfg["preset"], cfg["n_samples"], cfg["m_target"], cfg["seed"],
        grid_extents=grid, **_dataset_kwargs(cfg),
    )
    train_dir = os.path.join(out_dir, "train")
    problems.write_dataset(ds, train_dir)
    outputs += [os.path.join(train_dir, f) for f in ("meta.json", "features.f64", "targets.f64")]
    if cfg["n_test"] > 0:
        test_seed = cfg["test_seed"] if cfg["test_seed"] is not None else cfg["seed"] + 1
        ds_test = problems.generate_dataset(
            cfg["preset"], cfg["n_test"], cfg["m_target"], test_seed,
            grid_extents=grid, **_dataset_kwargs(cfg),
        )
        test_dir = os.path.join(out_dir, "test")
        problems.write_dataset(ds_test, test_dir)
        outputs += [os.path.join(test_dir, f) for f in ("meta.json", "features.f64", "targets.f64")]
    _log("dataset written", preset=cfg["preset"], n_samples=cfg["n_samples"], out=out_dir)
    return outputs


def _train_config(cfg, r):
    return learn.TrainConfig(
        loss=cfg["loss"],
        r=r,
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        gamma_decay=cfg["gamma_decay"],
        decay_interval=cfg["decay_interval"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        hidden=tuple(cfg["hidden"]),
        encoder=learn.FeatureEncoder(n_modes=cfg["encoder_modes"]),
    )


def cmd_train(cfg, out_dir, chash):
    ds = problems.read_dataset(cfg["dataset"])
    test_ds = problems.read_dataset(cfg["test_dataset"]) if cfg["test_dataset"] else None
    r_values = cfg["r"] if isinstance(cfg["r"], list) else [cfg["r"]]
    outputs = []
    for r in r_values:
        tc = _train_config(cfg, r)
        model, history = learn.train(ds, tc, test_dataset=test_ds)
        ckpt = os.path.join(out_dir, f"r{r}")
        learn.save_model(model, ckpt, config=tc)
        rows = [
            (
                h["epoch"],
                h["train_loss"],
                h.get("test_loss", math.nan),
                h.get("test_metric", math.nan),
            )
            for h in history
        ]
        hist_path = os.path.join(out_dir, f"history_r{r}.csv")
        write_csv(hist_path, ("epoch", "train_loss", "test_loss", "test_metric"), rows, chash)
        outputs += [os.path.join(ckpt, "meta.json"), os.path.join(ckpt, "params.f64"), hist_path]
        _log("trained", r=r, final_train_loss=history[-1]["train_loss"])
    return outputs


def cmd_eval(cfg, out_dir, chash):
    ds = problems.read_dataset(cfg["dataset"])
    runs = []
    if cfg["oracle"]:
        runs.append(("oracle", lambda d, i: d.targets[i]))
    if cfg["checkpoint"]:
        if not os.path.exists(os.path.join(cfg["checkpoint"], "meta.json")):
            candidates = (
                sorted(
                    d for d in os.listdir(cfg["checkpoint"])
                    if os.path.isdir(os.path.join(cfg["checkpoint"], d)) and d.startswith("r")
                )
                if os.path.isdir(cfg["checkpoint"])
                else []
            )
            if not candidates:
                raise ConfigError(f"no checkpoint found at {cfg['checkpoint']}")
            for d in candidates:
                runs.append((d, learn.load_model(os.path.join(cfg["checkpoint"], d))))
        else:
            runs.append(("model", learn.load_model(cfg["checkpoint"])))
    if not runs:
        raise ConfigError("eval: need a checkpoint or the oracle flag")
    summary_rows = []
    outputs = []
    for name, predictor in runs:
        summary = learn.evaluate(predictor, ds, metric=cfg["metric"])
        per_path = os.path.join(out_dir, f"per_sample_{name}.csv")
        write_csv(
            per_path,
            ("sample", "metric"),
            [(i, v) for i, v in enumerate(summary.per_sample)],
            chash,
        )
        outputs.append(per_path)
        summary_rows.append((name, summary.mean, summary.worst))
        _log("evaluated", predictor=name, mean=summary.mean)
    path = os.path.join(out_dir, "metrics.csv")
    write_csv(path, ("predictor", "mean", "worst"), summary_rows, chash)
    outputs.append(path)
    return outputs


def cmd_count(cfg, out_dir, chash):
    k, d = cfg["k"], cfg["d"]
    if k < 1 or d < 1:
        raise ConfigError("count: k and d must be >= 1")
    if d == 2 and k > eigencount.MAX_K_D2:
        raise ConfigError(f"count: k exceeds the documented cap {eigencount.MAX_K_D2} for d=2")
    rng = np.random.default_rng(cfg["seed"])
    header = ["k", "d", "exact", "tau_sum", "asymptotic"]
    do_census = cfg["mc"] > 0
    if do_census:
        header += ["census_position", "census_subspaces"]
        header += [f"greedy_m{m}" for m in cfg["greedy"]]
    rows = []
    for kk in range(1, k + 1):
        exact = eigencount.count_products_leq(kk, d)
        tau_sum = sum(eigencount.tau(p, d) for p in range(1, kk + 1))
        row = [kk, d, exact, tau_sum, eigencount.count_products_asymptotic(kk, d)]
        if do_census:
            pos = eigencount.census_position_k(d, kk, cfg["mc"], rng)
            census = eigencount.census_subspaces(d, kk, cfg["mc"], rng)
            row += [len(pos), census.distinct_count]
            row += [eigencount.greedy_augment(census, m) for m in cfg["greedy"]]
        rows.append(tuple(row))
    path = os.path.join(out_dir, "counts.csv")
    write_csv(path, header, rows, chash)
    return [path]


def _subspace_for(cfg, ds, i, m, op):
    source = cfg["source"]
    if source == "none":
        return None
    if source == "exact":
        if ds.meta["preset"] == "twogrid":
            return problems.smoother_leading_eigenspace(op, cfg["omega"], m)
        return solvers.smallest_eigenspace(op, m)
    if source == "stored":
        return ds.targets[i][:, :m]
    if source == "learned":
        if not cfg["checkpoint"]:
            raise ConfigError("solve: learned source needs a checkpoint")
        model = learn.load_model(cfg["checkpoint"])
        pred = learn.forward(model, model.encoder.encode(ds.grid, ds.features[i]))
        from .grassmann import orthonormalize

        return orthonormalize(pred)[:, :m]
    if source == "interpolated":
        if not cfg["train_dataset"]:
            raise ConfigError("solve: interpolated source needs a train_dataset")
        train_ds = problems.read_dataset(cfg["train_dataset"])
        encoder = learn.FeatureEncoder()
        query = encoder.encode(ds.grid, ds.features[i])
        basis = learn.interpolate_normal_coords(train_ds, query, cfg["k_nn"], encoder=encoder)
        return basis[:, :m]
    raise ConfigError(f"solve: unknown subspace source {source!r}")


def cmd_solve(cfg, out_dir, chash):
    ds = problems.read_dataset(cfg["dataset"])
    n_samples = ds.n_samples if cfg["max_samples"] is None else min(ds.n_samples, cfg["max_samples"])
    outputs = []
    if cfg["mode"] == "deflated-cg":
        rows = []
        rng = np.random.default_rng(cfg["seed"])
        for i in range(n_samples):
            op = problems.operator_from_sample(ds, i)
            b = rng.standard_normal(op.dimension)
            for m in [0] + list(cfg["sizes"]):
                v = None if m == 0 else _subspace_for(cfg, ds, i, m, op)
                x, rep = solvers.deflated_cg(op, b, v, tol=cfg["tol"], maxit=cfg["maxit"])
                rows.append((i, cfg["source"] if m else "none", m, rep.iterations, rep.residuals[-1]))
                conv = os.path.join(out_dir, f"convergence_s{i}_m{m}.csv")
                write_csv(
                    conv,
                    ("iteration", "relative_residual"),
                    list(enumerate(rep.residuals)),
                    chash,
                )
                outputs.append(conv)
        path = os.path.join(out_dir, "iterations.csv")
        write_csv(path, ("sample", "source", "subspace_size", "iterations", "final_residual"), rows, chash)
        outputs.append(path)
    elif cfg["mode"] == "two-grid":
        rows = []
        for i in range(n_samples):
            op = problems.operator_from_sample(ds, i)
            rho0 = solvers.two_grid_rho(op, None, 1.0, power_iters=cfg["power_iters"])
            rows.append((i, "none", 0, rho0))
            for m in cfg["sizes"]:
                v = _subspace_for(cfg, ds, i, m, op)
                rho = solvers.two_grid_rho(op, v, cfg["omega"], power_iters=cfg["power_iters"])
                rows.append((i, cfg["source"], m, rho))
        path = os.path.join(out_dir, "spectral_radius.csv")
        write_csv(path, ("sample", "source", "subspace_size", "rho"), rows, chash)
        outputs.append(path)
    else:
        raise ConfigError(f"solve: unknown mode {cfg['mode']!r}")
    return outputs


def cmd_control(cfg, out_dir, chash):
    ds = problems.read_dataset(cfg["dataset"])
    if ds.meta.get("preset") != "control":
        raise ConfigError("control: dataset preset must be 'control'")
    n_samples = ds.n_samples if cfg["max_samples"] is None else min(ds.n_samples, cfg["max_samples"])
    rows = []
    for i in range(n_samples):
        system = problems.control_system_from_sample(ds, i)
        nt = solvers.lqr_min_steps(system, cfg["t_final"], cfg["lam"])
        if system.psi.size == 0:
            rows.append((i, cfg["source"], 0, 0.0, math.nan, math.nan))
            continue
        for m in cfg["sizes"]:
            if cfg["source"] == "exact":
                red = solvers.balanced_truncation(system.a, system.w, system.psi.T, m)
                from .numerics import cholesky_qr2

                basis = cholesky_qr2(red.projection)
            elif cfg["source"] == "stored":
                basis = ds.targets[i][:, :m]
            else:
                raise ConfigError(f"control: unknown source {cfg['source']!r}")
            res = solvers.lqr_solve(system, cfg["lam"], cfg["t_final"], nt, basis=basis)
            rows.append((i, cfg["source"], m, float(np.abs(res.control).max()), res.e_state, res.e_obs))
    path = os.path.join(out_dir, "control.csv")
    write_csv(path, ("sample", "source", "basis_size", "max_control", "e_state", "e_obs"), rows, chash)
    return [path]


def cmd_report(cfg, out_dir, chash):
    """Aggregate metric CSVs into per-(source, size) mean summary tables."""
    groups = {}
    for path in cfg["inputs"]:
        if not os.path.exists(path):
            raise ConfigError(f"report: missing input {path}")
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if not ln.startswith("#")]
        header = lines[0].split(",")
        for line in lines[1:]:
            parts = line.split(",")
            row = dict(zip(header, parts))
            key_cols = [c for c in ("source", "predictor", "subspace_size", "basis_size") if c in row]
            val_cols = [c for c in header if c not in key_cols and c != "sample" and c != "iteration"]
            key = (os.path.basename(path), tuple(row[c] for c in key_cols))
            for c in val_cols:
                try:
                    groups.setdefault((key, c), []).append(float(row[c]))
                except ValueError:
                    pass
    rows = [
        (key[0], "|".join(key[1]), col, float(np.mean(vals)), len(vals))
        for (key, col), vals in sorted(groups.items(), key=str)
    ]
    path = os.path.join(out_dir, "summary.csv")
    write_csv(path, ("input", "group", "column", "mean", "count"), rows, chash)
    return [path]


def _apply_overrides(config, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        if key not in config:
            raise ConfigError(f"override for unknown top-level key {key!r}")
        if isinstance(config[key], (list, dict)):
            raise ConfigError(f"only top-level scalars may be overridden, not {key!r}")
        try:
            config[key] = json.loads(raw)
        except json.JSONDecodeError:
            config[key] = raw
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(prog="subreg", description=__doc__)
    parser.add_argument("command", choices=sorted(SCHEMAS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--out", default=None, help="output directory (default: cwd)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="override a top-level scalar config key",
    )
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = _apply_overrides(raw, args.override)
        if args.seed is not None and "seed" in SCHEMAS[args.command]:
            raw["seed"] = args.seed
        cfg = validate_config(args.command, raw)
        chash = config_hash(cfg)
        out_dir = args.out or os.getcwd()
        os.makedirs(out_dir, exist_ok=True)
        threads = os.environ.get("SUBREG_THREADS")
        if threads is not None and (not threads.isdigit() or int(threads) < 1):
            raise ConfigError("SUBREG_THREADS must be a positive integer")
        with OutputLock(out_dir):
            if args.command == "gen":
                outputs = cmd_gen(cfg, out_dir)
            elif args.command == "train":
                outputs = cmd_train(cfg, out_dir, chash)
            elif args.command == "eval":
                outputs = cmd_eval(cfg, out_dir, chash)
            elif args.command == "count":
                outputs = cmd_count(cfg, out_dir, chash)
            elif args.command == "solve":
                outputs = cmd_solve(cfg, out_dir, chash)
            elif args.command == "control":
                outputs = cmd_control(cfg, out_dir, chash)
            else:
                outputs = cmd_report(cfg, out_dir, chash)
            outputs.append(write_manifest(out_dir, cfg, outputs))
        return 0
    except (ConfigError, ValueError) as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return 2
    except SubregError as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 3
    except OSError as exc:
        print(json.dumps({"error": "io", "detail": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
