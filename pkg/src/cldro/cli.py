"""Command-line experiment runner.

Every subcommand takes flat ``key = value`` parameters, from ``--config
FILE`` and/or ``--key value`` flags (flags win). Results go to
``<out>/<command>.csv`` and ``<out>/<command>.jsonl``, and the effective
configuration is echoed to ``<out>/<command>.cfg`` in the same format
``--config`` reads, so any run can be replayed exactly. Without ``--out``
the CSV goes to stdout.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 a requested check
missed its tolerance.

Sweeps run single-threaded unless ``CLDRO_PARALLEL=1`` is set, in which case
independent cells are spread over processes. Results are identical either
way since every cell is seeded on its own, but only the single-threaded
mode is the reference.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, dro, losses, mi, phidiv, scores, toytrain

PARALLEL_ENV = "CLDRO_PARALLEL"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# -- parameter schema -----------------------------------------------------


def _float_list(text):
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(float(t) for t in items)


def _str_list(text):
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


TYPE_NAMES = {int: "integer", float: "number", str: "string", _float_list: "comma-separated numbers",
              _str_list: "comma-separated names"}


@dataclass(frozen=True)
class Param:
    type: object
    default: object
    check: str = ""
    choices: tuple = ()
    help: str = ""

    def parse(self, key, raw):
        try:
            value = self.type(raw)
        except (TypeError, ValueError):
            raise UsageError(f"{key} expects {TYPE_NAMES[self.type]}, got {raw!r}") from None
        self.validate(key, value)
        return value

    def validate(self, key, value):
        values = value if isinstance(value, tuple) else (value,)
        for v in values:
            if self.choices and v not in self.choices:
                raise UsageError(f"{key} must be one of {', '.join(self.choices)}")
            if self.check == "positive" and not v > 0:
                raise UsageError(f"{key} must be positive")
            if self.check == "nonnegative" and not v >= 0:
                raise UsageError(f"{key} must be nonnegative")
            if self.check == "unit" and not 0 <= v <= 1:
                raise UsageError(f"{key} must lie in [0, 1]")
            if self.check == "open_unit" and not 0 < v < 1:
                raise UsageError(f"{key} must lie in (0, 1)")
            if self.check == "correlation" and not -1 < v < 1:
                raise UsageError(f"{key} must lie in (-1, 1)")
            if isinstance(v, float) and not math.isfinite(v):
                raise UsageError(f"{key} must be finite")


P = Param
SEED = {"seed": P(int, 0, "nonnegative", help="base random seed")}

TOY_DATA = {
    "num_classes": P(int, toytrain.ClusterDataConfig.num_classes, "positive"),
    "ambient_dim": P(int, toytrain.ClusterDataConfig.ambient_dim, "positive"),
    "points_per_class": P(int, toytrain.ClusterDataConfig.points_per_class, "positive"),
    "class_separation": P(float, toytrain.ClusterDataConfig.class_separation, "positive"),
    "within_class_noise": P(float, toytrain.ClusterDataConfig.within_class_noise, "nonnegative"),
    "nuisance_dim": P(int, toytrain.ClusterDataConfig.nuisance_dim, "nonnegative"),
    "nuisance_noise": P(float, toytrain.ClusterDataConfig.nuisance_noise, "nonnegative"),
    "data_seed": P(int, 0, "nonnegative"),
    "embed_dim": P(int, toytrain.TrainSettings.embed_dim, "positive"),
    "epochs": P(int, toytrain.TrainSettings.epochs, "positive"),
    "batch_size": P(int, toytrain.TrainSettings.batch_size, "positive"),
    "num_negatives": P(int, toytrain.TrainSettings.num_negatives, "positive"),
    "step_size": P(float, toytrain.TrainSettings.step_size, "positive"),
    "momentum": P(float, toytrain.TrainSettings.momentum, "unit"),
    "augment_noise": P(float, toytrain.TrainSettings.augment_noise, "nonnegative"),
}

LOSS = {
    "loss": P(str, "infonce", choices=tuple(k.value for k in losses.LossKind)),
    "tau": P(float, 0.5, "positive"),
    "mu": P(float, 0.5),
    "sigma": P(float, 1.0, "positive"),
    "r": P(float, 1.0, "unit", help="false-negative ratio"),
}

SCHEMAS = {
    "dro-check": {
        "instances": P(int, 100, "positive"),
        "negatives": P(int, 64, "positive"),
        "etas": P(_float_list, (0.1, 0.5, 1.0), "positive"),
        "oracle_instances": P(int, 100, "nonnegative"),
        "oracle_negatives": P(int, 16, "positive"),
        "gap_tol": P(float, 1e-6, "positive"),
        "objective_tol": P(float, 1e-4, "positive"),
        "radius_tol": P(float, 1e-6, "positive"),
        **SEED,
    },
    "bound": {
        "m1": P(float, -1.0),
        "m2": P(float, 1.0),
        "rho": P(float, 0.05, "open_unit"),
        "hypothesis_count": P(float, 1e6, "positive"),
        "taus": P(_float_list, (0.5,), "positive"),
        "n_min_exp": P(int, 4, "nonnegative"),
        "n_max_exp": P(int, 12, "nonnegative"),
    },
    "mi": {
        "estimators": P(_str_list, ("infonce",), choices=mi.ESTIMATORS),
        "dimension": P(int, 1, "positive"),
        "correlation": P(float, 0.8, "correlation"),
        "batch": P(int, 128, "positive"),
        "steps": P(int, 2000, "positive"),
        "step_size": P(float, 0.01, "positive"),
        "momentum": P(float, 0.9, "unit"),
        "convention": P(str, "mean", choices=("mean", "sum")),
        **SEED,
    },
    "divergence": {
        "phi": P(str, "KL", choices=phidiv.DIVERGENCES),
        "outcomes": P(int, 6, "positive"),
        "instances": P(int, 5, "positive"),
        "concentration": P(float, 1.0, "positive"),
        "tol": P(float, 1e-4, "positive"),
        **SEED,
    },
    "tau-sweep": {
        "taus": P(_float_list, toytrain.DEFAULT_TAU_GRID, "positive"),
        "rs": P(_float_list, (0.0, 1.0), "unit"),
        "runs": P(int, 2, "positive"),
        **TOY_DATA,
        **SEED,
    },
    "variance-sweep": {
        "taus": P(_float_list, (0.2, 1.0), "positive"),
        "seeds": P(int, 5, "positive"),
        "r": LOSS["r"],
        **TOY_DATA,
        **SEED,
    },
    "train-toy": {**LOSS, **TOY_DATA, **SEED},
    "weights": {
        "score_min": P(float, -1.0),
        "score_max": P(float, 1.0),
        "points": P(int, 201, "positive"),
        "tau": P(float, 0.5, "positive"),
        "mus": P(_float_list, (0.1, 0.5, 0.9)),
        "sigma": P(float, 1.0, "positive"),
        "families": P(_str_list, ("gamma", "rayleigh", "chi_squared"),
                      choices=tuple(f.value for f in losses.WeightFamily if f is not losses.WeightFamily.GAUSSIAN)),
        "m": P(float, 2.0, "positive"),
        "n": P(float, 1.0, "positive"),
    },
}


def load_config(path, schema=None):
    """Parse a flat ``key = value`` file into a dict of raw strings or typed values.

    With ``schema`` given, unknown keys and ill-typed values are errors and
    the result holds parsed values; missing keys are simply absent.
    """
    raw = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    if schema is None:
        return raw
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r}")
    return {k: schema[k].parse(k, v) for k, v in raw.items()}


def resolve(command, file_values, flag_values):
    schema = SCHEMAS[command]
    cfg = {k: p.default for k, p in schema.items()}
    cfg.update(file_values)
    for k, v in flag_values.items():
        if v is not None:
            cfg[k] = schema[k].parse(k, v)
    for k, p in schema.items():
        p.validate(k, cfg[k])
    return cfg


def format_value(v):
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(command, cfg):
    lines = [f"# cldro {__version__} {command}"]
    lines += [f"{k} = {format_value(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


# -- results --------------------------------------------------------------


@dataclass
class Result:
    rows: list
    metrics: dict
    passed: bool = True
    series: dict = None


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not serializable: {type(v).__name__}")


def _cell(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        v = v.item()
    return format_value(v) if isinstance(v, float) else v


def write_csv(rows, stream):
    if not rows:
        return
    w = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows({k: _cell(v) for k, v in r.items()} for r in rows)


def emit(command, cfg, result, duration, out):
    record = {
        "experiment": command,
        "config": cfg,
        "metrics": result.metrics,
        "passed": result.passed,
        "seed": cfg.get("seed"),
        "version": __version__,
        "duration_s": duration,
    }
    if result.series:
        record["series"] = result.series
    line = json.dumps(record, default=_jsonable, sort_keys=False)
    if out is None:
        write_csv(result.rows, sys.stdout)
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    write_csv(result.rows, buf)
    (out / f"{command}.csv").write_text(buf.getvalue(), encoding="utf-8")
    with open(out / f"{command}.jsonl", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    (out / f"{command}.cfg").write_text(config_text(command, cfg), encoding="utf-8")


# -- subcommands ----------------------------------------------------------


def run_dro_check(cfg):
    """Equivalence gap and worst-case oracle comparison on random score batches."""
    rng = np.random.default_rng(cfg["seed"])
    rows, metrics, passed = [], {}, True
    batch = scores.random_score_batch(rng, cfg["instances"], cfg["negatives"])
    oracle = rng.uniform(-1, 1, size=(cfg["oracle_instances"], cfg["oracle_negatives"]))
    for eta in cfg["etas"]:
        gap = dro.equivalence_gap(batch, eta)
        obj_diff = radius_excess = 0.0
        if oracle.size:
            _, pga = dro.projected_gradient_ascent(oracle, eta)
            for row, ref in zip(oracle, pga):
                sol = dro.worst_case_weights_constrained(row, dro.DroConstraint(eta))
                obj_diff = max(obj_diff, abs(sol.objective - ref))
                radius_excess = max(radius_excess, sol.achieved_divergence - eta)
        ok = gap < cfg["gap_tol"] and obj_diff < cfg["objective_tol"] and radius_excess < cfg["radius_tol"]
        passed &= ok
        rows.append({"eta": eta, "max_equivalence_gap": gap, "max_oracle_objective_diff": obj_diff,
                     "max_radius_excess": radius_excess, "pass": ok})
        metrics[f"max_gap_eta_{eta}"] = gap
        metrics[f"max_oracle_diff_eta_{eta}"] = obj_diff
    gaps = [r["max_equivalence_gap"] for r in rows]
    rows.append({"eta": "all", "max_equivalence_gap": max(gaps),
                 "max_oracle_objective_diff": max(r["max_oracle_objective_diff"] for r in rows),
                 "max_radius_excess": max(r["max_radius_excess"] for r in rows), "pass": passed})
    metrics["max_gap"] = max(gaps)
    return Result(rows, metrics, passed)


def run_bound(cfg):
    """Generalization bound over a grid of N and tau."""
    if cfg["n_min_exp"] > cfg["n_max_exp"]:
        raise UsageError("n_min_exp must not exceed n_max_exp")
    if not cfg["m1"] < cfg["m2"]:
        raise UsageError("m1 must be smaller than m2")
    rows, metrics = [], {}
    for tau in cfg["taus"]:
        prev = None
        for e in range(cfg["n_min_exp"], cfg["n_max_exp"] + 1):
            b = dro.generalization_bound(
                dro.BoundParams(cfg["rho"], 2**e, tau, cfg["m1"], cfg["m2"], cfg["hypothesis_count"])
            )
            rows.append({"tau": tau, "N": 2**e, "bound": b, "decreasing": prev is not None and b < prev})
            prev = b
        tail = [r for r in rows if r["tau"] == tau]
        metrics[f"tail_monotone_tau_{tau}"] = all(r["decreasing"] for r in tail[1:]) if len(tail) > 1 else True
        metrics[f"bound_at_max_N_tau_{tau}"] = prev
    return Result(rows, metrics)


def run_mi(cfg):
    """Train critics on correlated Gaussians and report MI estimates."""
    gc = mi.GaussianPairConfig(cfg["dimension"], cfg["correlation"])
    rows = mi.compare_estimators(
        gc, cfg["estimators"], cfg["batch"], cfg["steps"], cfg["step_size"], cfg["seed"],
        momentum=cfg["momentum"], convention=cfg["convention"],
    )
    series = {r["estimator"]: r.pop("estimate").trajectory for r in rows}
    metrics = {f"final_{r['estimator']}": r["final"] for r in rows}
    metrics["true_mi"] = mi.true_mi(gc)
    return Result(rows, metrics, series=series)


def run_divergence(cfg):
    """Tight vs DV bounds at the tabular optimum on random discrete pairs."""
    rng = np.random.default_rng(cfg["seed"])
    names = [cfg["phi"]] + (["ChiSquared-printed"] if cfg["phi"] == "ChiSquared" else [])
    specs = {"ChiSquared-printed": phidiv.register_divergence("ChiSquared", printed_conjugate=True)}
    rows, passed, worst = [], True, 0.0
    for i in range(cfg["instances"]):
        p, q = rng.dirichlet(np.full(cfg["outcomes"], cfg["concentration"]), size=2)
        for name in names:
            spec = specs.get(name) or phidiv.register_divergence(name)
            exact = phidiv.discrete_divergence(spec, p, q)
            f, tight = phidiv.tabular_critic_ascent(spec, p, q)
            samples = phidiv.SampleSet.discrete(f, p, q)
            try:
                dv = phidiv.dv_divergence(spec, samples)
            except ValueError:
                dv = -math.inf  # the critic leaves the conjugate's domain without lambda
            gap = abs(tight - exact)
            ok = tight >= dv - 1e-12 and (gap < cfg["tol"] or name != "KL")
            if name == "KL":
                worst = max(worst, gap)
            passed &= ok
            rows.append({"instance": i, "phi": name, "exact": exact, "tight": tight, "dv": dv,
                         "abs_gap": gap, "pass": ok})
    return Result(rows, {"max_kl_gap": worst if cfg["phi"] == "KL" else None}, passed)


def _toy(cfg):
    data = toytrain.ClusterDataConfig(
        cfg["num_classes"], cfg["ambient_dim"], cfg["points_per_class"], cfg["class_separation"],
        cfg["within_class_noise"], cfg["nuisance_dim"], cfg["nuisance_noise"],
    )
    settings = toytrain.TrainSettings(
        cfg["embed_dim"], cfg["epochs"], cfg["batch_size"], cfg["num_negatives"],
        cfg["step_size"], cfg["momentum"], cfg["augment_noise"],
    )
    return toytrain.make_clusters(data, cfg["data_seed"]), settings


def parallel_enabled():
    return os.environ.get(PARALLEL_ENV, "0").strip() not in ("", "0", "false", "no")


def run_tau_sweep(cfg):
    """Linear-eval accuracy over (r, tau) cells on the synthetic clusters."""
    ds, settings = _toy(cfg)
    res = toytrain.tau_sweep(ds, cfg["taus"], cfg["rs"], cfg["runs"], settings, cfg["seed"], parallel_enabled())
    metrics = {f"best_tau_r_{r}": t for r, t in res["best_tau"].items()}
    return Result(res["table"], metrics)


def run_variance_sweep(cfg):
    """Final negative-score variance and positive mean per tau."""
    ds, settings = _toy(cfg)
    rows = []
    for s in range(cfg["seed"], cfg["seed"] + cfg["seeds"]):
        for row in toytrain.variance_sweep(ds, cfg["taus"], settings, s, toytrain.NoiseConfig(cfg["r"])):
            rows.append({"seed": s, **row})
    metrics = {}
    for tau in cfg["taus"]:
        sel = [r for r in rows if r["tau"] == tau]
        metrics[f"mean_neg_variance_tau_{tau}"] = float(np.mean([r["neg_variance"] for r in sel]))
        metrics[f"mean_pos_mean_tau_{tau}"] = float(np.mean([r["pos_mean"] for r in sel]))
    return Result(rows, metrics)


def run_train_toy(cfg):
    """One training run with the chosen loss; per-step statistics."""
    ds, settings = _toy(cfg)
    lc = losses.LossConfig(cfg["loss"], tau=cfg["tau"], mu=cfg["mu"], sigma=cfg["sigma"])
    acc, log = toytrain.run_cell(ds, lc, toytrain.NoiseConfig(cfg["r"]), cfg["seed"], settings)
    rows = [
        {"step": t, "loss": log.loss[t], "pos_mean": log.pos_mean[t], "neg_mean": log.neg_mean[t],
         "neg_variance": log.neg_variance[t]}
        for t in range(len(log.loss))
    ]
    metrics = {"accuracy": acc, "final_loss": float(log.loss[-1]),
               "final_pos_mean": log.tail_mean("pos_mean"), "final_neg_variance": log.tail_mean("neg_variance")}
    return Result(rows, metrics)


def run_weights(cfg):
    """Training weight of a negative versus its score for each weighting."""
    if not cfg["score_min"] < cfg["score_max"]:
        raise UsageError("score_min must be smaller than score_max")
    s = np.linspace(cfg["score_min"], cfg["score_max"], cfg["points"])
    tau = cfg["tau"]
    grid = s[None, :]
    tilt = np.exp(s / tau - np.max(s / tau))
    # training weight of each negative: kernel times exp(s/tau), normalized over the grid
    cols = {"infonce": tilt}
    for mu in cfg["mus"]:
        cols[f"adnce_mu_{mu}"] = losses.adnce_weights(grid, mu, cfg["sigma"])[0] * tilt
    for fam in cfg["families"]:
        cols[fam] = losses.alternative_weights(grid, fam, cfg["m"], cfg["n"])[0] * tilt
    cols = {k: v / v.sum() for k, v in cols.items()}
    rows = [{"score": float(x), **{k: float(v[i]) for k, v in cols.items()}} for i, x in enumerate(s)]
    metrics = {f"argmax_score_{k}": float(s[int(np.argmax(v))]) for k, v in cols.items()}
    return Result(rows, metrics)


RUNNERS = {
    "dro-check": run_dro_check,
    "bound": run_bound,
    "mi": run_mi,
    "divergence": run_divergence,
    "tau-sweep": run_tau_sweep,
    "variance-sweep": run_variance_sweep,
    "train-toy": run_train_toy,
    "weights": run_weights,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cldro", description="Contrastive-learning DRO experiments.", allow_abbrev=False
    )
    parser.add_argument("--version", action="version", version=f"cldro {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, allow_abbrev=False, help=RUNNERS[name].__doc__)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("--out", help="directory for CSV, JSONL and config echo")
        for key, p in schema.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"{p.help + '; ' if p.help else ''}default {format_value(p.default)}")
    return parser


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    schema = SCHEMAS[command]
    try:
        file_values = load_config(args.config, schema) if args.config else {}
        cfg = resolve(command, file_values, {k: getattr(args, k) for k in schema})
    except (UsageError, OSError) as exc:
        print(f"cldro {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        result = RUNNERS[command](cfg)
    except UsageError as exc:
        print(f"cldro {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"cldro {command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    emit(command, cfg, result, time.perf_counter() - start, args.out)
    return EXIT_OK if result.passed else EXIT_TOLERANCE


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
