"""Command-line experiment runner.

    etr run --config experiment.json --out results/
    etr verify --suite Steihaug
    etr quadratic --kappa 20 --method adagrad --seeds 30

Exit status is 0 on success, 1 when a verification suite fails and 2 for
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from etr import __version__
from etr.data import DATA_DIR_ENV, load_mnist, make_synthetic
from etr.errors import ConfigError
from etr.firstorder import METHODS as FIRST_ORDER_METHODS
from etr.firstorder import FirstOrderConfig, first_order_run
from etr.problems import MlpSpec, QuadraticSpec, make_mlp, make_quadratic
from etr.trloop import (
    ACCOUNTING,
    TRConfig,
    _atomic_write_text,
    tr_minimize,
    trace_to_csv_text,
    write_metadata,
)
from etr.verification import SUITES, run_verification

logger = logging.getLogger("etr")

CHECKPOINTS = 100
CI_Z = 1.96
LOSS_FLOOR = 1e-300
AGGREGATE_HEADER = ["method", "axis", "checkpoint", "mean_log10_loss", "ci_low", "ci_high", "runs"]
OPTIMIZER_TYPES = ("tr", "first_order")


@dataclass
class OptimizerSpec:
    name: str
    type: str
    params: dict = field(default_factory=dict)

    def build(self, seed):
        params = dict(self.params, seed=seed)
        if self.type == "tr":
            return TRConfig.from_dict(params)
        return FirstOrderConfig.from_dict(params)


@dataclass
class ExperimentConfig:
    problem: dict
    optimizers: list
    seeds: list
    budget: dict
    name: str = "experiment"
    output_dir: str | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, doc):
        """Validate a config document; metadata files (with a ``config`` key)
        are accepted as well, so any run can be replayed from its metadata."""
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]
        bad = {}
        known = {"problem", "optimizer", "optimizers", "seeds", "repeats", "budget", "name",
                 "output_dir", "workers"}
        for key in sorted(set(doc) - known):
            bad[key] = "unknown field"
        problem = doc.get("problem")
        if not isinstance(problem, dict) or problem.get("kind") not in ("quadratic", "mlp"):
            bad["problem.kind"] = "must be 'quadratic' or 'mlp'"
        raw = doc.get("optimizers", [doc["optimizer"]] if "optimizer" in doc else [])
        if not raw:
            bad["optimizers"] = "at least one optimizer is required"
        optimizers = []
        for i, o in enumerate(raw):
            if not isinstance(o, dict) or o.get("type") not in OPTIMIZER_TYPES:
                bad[f"optimizers[{i}].type"] = f"must be one of {OPTIMIZER_TYPES}"
                continue
            spec = OptimizerSpec(o.get("name", f"{o['type']}_{i}"), o["type"], dict(o.get("params", {})))
            try:
                spec.build(0)
            except ConfigError as exc:
                for k, v in exc.fields.items():
                    bad[f"optimizers[{i}].{k}"] = v
            except TypeError as exc:
                bad[f"optimizers[{i}].params"] = str(exc)
            optimizers.append(spec)
        names = [o.name for o in optimizers]
        if len(set(names)) != len(names):
            bad["optimizers.name"] = "names must be unique"
        seeds = doc.get("seeds")
        if seeds is None and "repeats" in doc:
            seeds = list(range(int(doc["repeats"])))
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            bad["seeds"] = "must be a non-empty list of integers"
        elif "repeats" in doc and doc["repeats"] != len(seeds):
            bad["repeats"] = "must equal the number of seeds"
        budget = doc.get("budget", {})
        limits = {k: budget.get(k) for k in ("max_backprops", "max_epochs", "max_iterations")}
        for key in sorted(set(budget) - set(limits)):
            bad[f"budget.{key}"] = "unknown field"
        if all(v is None for v in limits.values()):
            bad["budget"] = "set at least one of max_backprops, max_epochs, max_iterations"
        for key, value in limits.items():
            if value is not None and not (isinstance(value, (int, float)) and value > 0):
                bad[f"budget.{key}"] = "must be positive"
        workers = doc.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            bad["workers"] = "must be a positive integer"
        if bad:
            raise ConfigError(bad)
        return cls(
            problem=dict(problem),
            optimizers=optimizers,
            seeds=list(seeds),
            budget={k: v for k, v in limits.items() if v is not None},
            name=doc.get("name", "experiment"),
            output_dir=doc.get("output_dir"),
            workers=workers,
        )

    def to_dict(self):
        return {
            "name": self.name,
            "problem": self.problem,
            "optimizers": [{"name": o.name, "type": o.type, "params": o.params} for o in self.optimizers],
            "seeds": self.seeds,
            "repeats": len(self.seeds),
            "budget": self.budget,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }


def load_dataset(ref, data_dir=None):
    """Dataset from a reference: ``{"kind": "mnist", "limit": 5000, ...}`` or
    any synthetic generator (``blobs``, ``digits``, ``regression``)."""
    ref = dict(ref)
    kind = ref.pop("kind")
    if kind in ("mnist", "fashion_mnist"):
        return load_mnist(
            ref.get("path") or data_dir, ref.get("split", "train"), ref.get("limit"), name=kind
        )
    limit = ref.pop("limit", None)
    return make_synthetic(kind, **ref).head(limit)


def build_problem(problem, data_dir=None):
    problem = dict(problem)
    kind = problem.pop("kind")
    if kind == "quadratic":
        if "optimum" in problem and problem["optimum"] is not None:
            problem["optimum"] = np.asarray(problem["optimum"], dtype=float)
        return make_quadratic(QuadraticSpec(**problem))
    dataset = problem.pop("dataset")
    if "linear_layers" in problem:
        problem["linear_layers"] = tuple(problem["linear_layers"])
    return make_mlp(MlpSpec(**problem), load_dataset(dataset, data_dir))


@lru_cache(maxsize=4)
def _cached_problem(problem_json, data_dir):
    return build_problem(json.loads(problem_json), data_dir)


def execute_run(problem, optimizer, seed, budget, data_dir=None):
    """One seeded run.  Returns the trace and the final full training loss."""
    objective = _cached_problem(json.dumps(problem, sort_keys=True), data_dir)
    cfg = optimizer.build(seed)
    max_epochs = budget.get("max_epochs")
    max_it = budget.get("max_iterations")
    max_it = int(max_it) if max_it is not None else 10**12
    bp = budget.get("max_backprops", math.inf)

    if optimizer.type == "tr":
        stop = None if max_epochs is None else (lambda state, rec: rec.epoch_fraction >= max_epochs)
        run = tr_minimize(objective, cfg, max_iterations=max_it, backprop_budget=bp, callback=stop)
    else:
        stop = None if max_epochs is None else (lambda it, w, rec: rec.epoch_fraction >= max_epochs)
        run = first_order_run(objective, cfg, max_iterations=max_it, backprop_budget=bp, callback=stop)
    return run.trace, float(objective.loss(run.w)), run.stop_reason


def _run_task(args):
    problem, optimizer, seed, budget, data_dir = args
    trace, final, reason = execute_run(problem, optimizer, seed, budget, data_dir)
    return trace_to_csv_text(trace), trace, final, reason


def curve_at(xs, losses, checkpoints):
    """Loss known at each checkpoint cost.

    ``losses[k]`` is measured at the iterate produced after the first ``k``
    records, whose cost is ``xs[k-1]`` (zero for ``k = 0``).
    """
    xs = np.asarray(xs, dtype=float)
    losses = np.asarray(losses, dtype=float)
    k = np.searchsorted(xs, checkpoints, side="right")
    return losses[np.minimum(k, len(losses) - 1)]


def checkpoint_grid(upper):
    return np.geomspace(upper * 1e-3, upper, CHECKPOINTS)


def aggregate(results, budget):
    """Mean and 95% interval of log10 loss at shared checkpoints.

    ``results`` maps method name to a list of traces.  Grids come from the
    budget when available and otherwise from the largest cost observed
    across all methods, so every method shares the same grid.
    """
    grids = {}
    for axis, key, attr in (("backprops", "max_backprops", "backprops"),
                            ("epochs", "max_epochs", "epoch_fraction")):
        upper = budget.get(key)
        if upper is None:
            upper = max((getattr(t[-1], attr) for ts in results.values() for t in ts if t), default=0)
        if upper > 0:
            grids[axis] = (attr, checkpoint_grid(float(upper)))
    rows = []
    curves = {}
    for method, traces in results.items():
        for axis, (attr, grid) in grids.items():
            per_run = []
            for t in traces:
                if not t:
                    continue
                xs = [getattr(r, attr) for r in t]
                ls = [r.loss_batch for r in t]
                # exact zeros (solved quadratics) would give -inf
                per_run.append(np.log10(np.maximum(curve_at(xs, ls, grid), LOSS_FLOOR)))
            if not per_run:
                continue
            Y = np.array(per_run)
            mean = Y.mean(axis=0)
            if Y.shape[0] > 1:
                half = CI_Z * Y.std(axis=0, ddof=1) / math.sqrt(Y.shape[0])
            else:
                half = np.zeros_like(mean)
            curves[(method, axis)] = mean
            for c, m, hw in zip(grid, mean, half):
                rows.append([method, axis, repr(float(c)), repr(float(m)),
                             repr(float(m - hw)), repr(float(m + hw)), Y.shape[0]])
    return rows, curves


def _csv_text(header, rows):
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def run_experiment(cfg, out_dir=None, data_dir=None):
    """Run every (optimizer, seed) pair and write traces, aggregate and metadata."""
    out = Path(out_dir or cfg.output_dir or f"results/{cfg.name}")
    (out / "traces").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg.problem, o, s, cfg.budget, data_dir) for o in cfg.optimizers for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outputs = list(pool.map(_run_task, tasks))
    else:
        outputs = [_run_task(t) for t in tasks]

    results = {o.name: [] for o in cfg.optimizers}
    runs = []
    for (_, opt, seed, _, _), (text, trace, final, reason) in zip(tasks, outputs):
        rel = f"traces/{opt.name}_seed{seed}.csv"
        _atomic_write_text(out / rel, text)
        results[opt.name].append(trace)
        runs.append({
            "method": opt.name,
            "seed": seed,
            "trace": rel,
            "iterations": len(trace),
            "backprops": trace[-1].backprops if trace else 0,
            "final_loss": final,
            "stop_reason": reason,
        })
    rows, _ = aggregate(results, cfg.budget)
    _atomic_write_text(out / "aggregate.csv", _csv_text(AGGREGATE_HEADER, rows))

    summary = {}
    for o in cfg.optimizers:
        finals = [r["final_loss"] for r in runs if r["method"] == o.name]
        summary[o.name] = {"mean_final_loss": float(np.mean(finals)), "final_losses": finals}
    dataset = cfg.problem.get("dataset", {})
    write_metadata(out / "metadata.json", {
        "config": cfg.to_dict(),
        "accounting": ACCOUNTING,
        "subset_cap": dataset.get("limit"),
        "data_dir": str(data_dir) if data_dir else os.environ.get(DATA_DIR_ENV),
        "version": __version__,
        "runs": runs,
        "summary": summary,
    })
    return {"output_dir": str(out), "runs": runs, "summary": summary}


QUAD_METHODS = FIRST_ORDER_METHODS + ("tr1_uniform", "tr1_ada", "tr1_ada_full")
ETA_GRID = tuple(float(x) for x in np.logspace(-4, 0, 7))


def _quadratic_run(obj, method, eta, seed, iterations, target):
    """Iterations needed to reach ``log10(L) <= target`` and the final loss."""
    hit = [None]

    def record(it, loss):
        if hit[0] is None and loss > 0 and math.log10(loss) <= target:
            hit[0] = it + 1
            return True
        return loss == 0.0

    w0 = obj.initial_point(seed)
    # large grid stepsizes diverge by design; those runs end as non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        if method in FIRST_ORDER_METHODS:
            cfg = FirstOrderConfig(method, eta=eta, batch_size=1, seed=seed)
            run = first_order_run(obj, cfg, w0=w0, max_iterations=iterations,
                                  callback=lambda it, w, rec: record(it, obj.loss(w)))
        else:
            mode = {"tr1_uniform": "uniform", "tr1_ada": "ada_diag", "tr1_ada_full": "ada_full"}[method]
            cfg = TRConfig(delta0=eta, delta_max=max(10.0, eta), model_order=1, ellipsoid_mode=mode,
                           batch_loss=1, batch_grad=1, batch_hess=1, seed=seed)
            run = tr_minimize(obj, cfg, w0=w0, max_iterations=iterations,
                              callback=lambda state, rec: record(rec.iteration, obj.loss(state.w)))
        final = obj.loss(run.w)
    if hit[0] is None and final == 0.0:
        hit[0] = len(run.trace)
    return hit[0], final


def quadratic_study(kappa, method, seeds, dim=2, rotation="axis", rotation_seed=1,
                    iterations=2000, target=-6.0, select="iterations", etas=ETA_GRID):
    """Grid-search the stepsize of one method on an ill-conditioned quadratic.

    For every ``eta`` in the grid, runs all seeds and records the median
    number of iterations to reach ``log10(L - L*) <= target`` (infinite when
    the target is missed) and the median final loss.  ``select`` picks the
    best ``eta`` by ``"iterations"`` or by ``"final_loss"``.
    """
    if method not in QUAD_METHODS:
        raise ConfigError({"method": f"must be one of {QUAD_METHODS}"})
    if select not in ("iterations", "final_loss"):
        raise ConfigError({"select": "must be 'iterations' or 'final_loss'"})
    obj = make_quadratic(QuadraticSpec(dim, kappa, rotation, rotation_seed))
    grid = []
    for eta in etas:
        hits, finals = [], []
        for seed in range(seeds):
            it, final = _quadratic_run(obj, method, eta, seed, iterations, target)
            hits.append(math.inf if it is None else it)
            finals.append(final)
        grid.append({
            "eta": eta,
            "median_iterations": float(np.median(hits)),
            "median_final_loss": float(np.median(finals)),
        })
    key = "median_iterations" if select == "iterations" else "median_final_loss"
    best = min(grid, key=lambda r: (r[key], r["median_final_loss"]))
    return {"kappa": kappa, "method": method, "seeds": seeds, "rotation": rotation,
            "target": target, "select": select, "best": best, "grid": grid}


def _finite_json(obj):
    """Replace infinities (missed targets) by null so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite_json(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_json(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def build_parser():
    parser = argparse.ArgumentParser(prog="etr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a JSON config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path)
    run.add_argument("--data-dir", type=Path, help=f"dataset directory (default ${DATA_DIR_ENV})")
    run.add_argument("--workers", type=int)

    verify = sub.add_parser("verify", help="run a property suite and print a JSON report")
    verify.add_argument("--suite", required=True, choices=SUITES)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--report", type=Path, help="also write the report to this file")

    quad = sub.add_parser("quadratic", help="stepsize grid search on an ill-conditioned quadratic")
    quad.add_argument("--kappa", type=float, required=True)
    quad.add_argument("--method", required=True, choices=QUAD_METHODS)
    quad.add_argument("--seeds", type=int, default=30)
    quad.add_argument("--dim", type=int, default=2)
    quad.add_argument("--rotation", choices=("axis", "random"), default="axis")
    quad.add_argument("--iterations", type=int, default=2000)
    quad.add_argument("--select", choices=("iterations", "final_loss"), default="final_loss")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            try:
                doc = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError({"config": str(exc)}) from exc
            cfg = ExperimentConfig.from_dict(doc)
            if args.workers:
                cfg.workers = args.workers
            summary = run_experiment(cfg, args.out, args.data_dir)
            print(json.dumps(summary["summary"], indent=2))
            return 0
        if args.command == "verify":
            report = run_verification(args.suite, args.seed)
            text = json.dumps(report, indent=2)
            if args.report:
                _atomic_write_text(args.report, text + "\n")
            print(text)
            return 0 if report["passed"] else 1
        result = quadratic_study(args.kappa, args.method, args.seeds, args.dim, args.rotation,
                                 iterations=args.iterations, select=args.select)
        print(json.dumps(_finite_json(result), indent=2))
        return 0
    except ConfigError as exc:
        print(f"configuration error: {json.dumps(exc.fields)}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
