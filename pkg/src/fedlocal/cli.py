"""Command line front end: ``run``, ``check`` and ``topology`` subcommands.

Experiment spec (JSON)::

    {
      "problem": {"kind": "quadratic", "p": 4, "d": 2, "knob": 1.0, "seed": 0},
      "run": {"algorithm": "LFSGD", "E": 4, "K": 2, "T": 500, "B": 1,
              "lr": {"kind": "constant", "eta": 0.05},
              "topology": {"kind": "ring", "self_weight": 0.5}},
      "sweep": {"parameter": "E", "values": [1, 2, 4, 8]},
      "seeds": [0, 1, 2],
      "constants": {"lam": 2.0, "C1": 0.0},
      "output_dir": "out"
    }

Every (sweep value, seed) cell writes ``<hash>.csv`` and ``<hash>.json`` where the
hash is the first 16 hex digits of the SHA-256 of the cell's canonical JSON.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import conditions
from .engine import LearningRateSchedule, RunConfig, run
from .errors import InvalidArgument, InvalidMixing
from .metrics import fit_rate
from .problem import ProblemSpec, make_synthetic_problem
from .topology import make_topology, topology_from_dict

WORKERS_ENV = "FEDLOCAL_WORKERS"
SWEEPABLE = ("E", "K", "eta", "B", "knob", "zeta")
RUN_FIELDS = {
    "algorithm", "E", "K", "T", "B", "lr", "topology", "controlled_averaging",
    "corrections", "w0", "participation", "log_every",
}


class SpecError(ValueError):
    pass


def canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _finite_number(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SpecError(f"sweep value for {name} must be a finite number, got {v!r}")


def _check_sweep_value(name, v, p):
    _finite_number(name, v)
    if name in ("E", "K", "B") and (int(v) != v or v < 1):
        raise SpecError(f"sweep value {name}={v} must be an integer >= 1")
    if name == "K" and v > p:
        raise SpecError(f"sweep value K={v} violates K <= p (p={p})")
    if name == "eta" and v <= 0:
        raise SpecError(f"sweep value eta={v} must be > 0")
    if name == "knob" and v < 0:
        raise SpecError(f"sweep value knob={v} must be >= 0")
    if name == "zeta" and not (0 <= v < 1):
        raise SpecError(f"sweep value zeta={v} must lie in [0, 1)")


def expand_cells(spec: dict) -> list[dict]:
    """Resolve the experiment spec into one ``{problem, run, seed}`` dict per (sweep value, seed)."""
    if not isinstance(spec, dict):
        raise SpecError("spec must be a JSON object")
    unknown = set(spec) - {"problem", "run", "sweep", "seeds", "constants", "output_dir"}
    if unknown:
        raise SpecError(f"unknown top-level fields: {sorted(unknown)}")
    for key in ("problem", "run", "seeds"):
        if key not in spec:
            raise SpecError(f"spec is missing required field {key!r}")
    problem = dict(spec["problem"])
    run_cfg = dict(spec["run"])
    bad = set(run_cfg) - RUN_FIELDS
    if bad:
        raise SpecError(f"unknown run fields: {sorted(bad)}")
    seeds = spec["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise SpecError("seeds must be a non-empty list of integers")
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
            raise SpecError(f"seed {s!r} is not a 64-bit non-negative integer")
    p = int(problem.get("p", ProblemSpec.p))
    sweep = spec.get("sweep")
    values = [None]
    if sweep is not None:
        name = sweep.get("parameter")
        if name not in SWEEPABLE:
            raise SpecError(f"sweep parameter must be one of {SWEEPABLE}, got {name!r}")
        values = sweep.get("values")
        if not isinstance(values, list) or not values:
            raise SpecError("sweep values must be a non-empty list")
        for v in values:
            _check_sweep_value(name, v, p)
    cells = []
    for v in values:
        prob = dict(problem)
        rc = json.loads(json.dumps(run_cfg))
        if v is not None:
            name = sweep["parameter"]
            if name == "knob":
                prob["knob"] = v
            elif name == "eta":
                rc["lr"] = {"kind": "constant", "eta": v}
            elif name == "zeta":
                rc["topology"] = {"kind": "lazy_complete", "zeta": v}
            else:
                rc[name] = int(v)
        for s in seeds:
            cells.append({"problem": prob, "run": rc, "seed": s})
    return cells


def build_cell(cell: dict):
    """Turn a resolved cell into a (problem, RunConfig) pair, validating every invariant."""
    try:
        problem = make_synthetic_problem(ProblemSpec.from_dict(cell["problem"]))
    except TypeError as exc:
        raise SpecError(f"bad problem spec: {exc}") from exc
    rc = dict(cell["run"])
    lr = dict(rc.pop("lr", {}))
    kind = lr.pop("kind", "constant")
    if kind == "pl_decay":
        if problem.mu is None and "mu" not in lr:
            raise SpecError("pl_decay schedule needs mu but the problem has no known PL constant")
        lr.setdefault("mu", problem.mu)
        lr.setdefault("E", rc.get("E"))
    schedule = LearningRateSchedule(kind, **lr)
    topo = rc.pop("topology", None)
    if topo is not None:
        topo = dict(topo)
        topo.setdefault("p", problem.p)
        topo = topology_from_dict(topo)
    for key in ("w0", "corrections"):
        if key in rc and rc[key] is not None:
            rc[key] = np.asarray(rc[key], dtype=np.float64)
    config = RunConfig(lr=schedule, topology=topo, seed=cell["seed"], **rc)
    config.validate(problem)
    return problem, config


def condition_report(problem, config, traj, constants: dict) -> dict:
    """Evaluate the theorem condition matching the run's algorithm and schedule."""
    div = traj.diversity[np.isfinite(traj.diversity)]
    observed = float(max(1.0, div.max())) if div.size else None
    lam = constants.get("lam", observed)
    if lam is None:
        return {"error": "no diversity bound available"}
    C1 = constants.get("C1", 0.0)
    K = config.resolved_K(problem.p)
    out = {"lambda": lam, "lambda_source": "given" if "lam" in constants else "trajectory"}
    if observed is not None:
        out["lambda_observed"] = observed
        out["lambda_exceeded"] = bool(observed > lam)
    try:
        if config.algorithm == "LFGD":
            if problem.mu is None:
                return {**out, "error": "LFGD condition needs a PL constant"}
            rep = conditions.check_lfgd(config.lr.eta, config.E, problem.L, problem.mu, lam)
            out["theorem"] = "lfgd"
        elif config.algorithm == "LFSGD" and config.lr.kind == "pl_decay":
            rep = conditions.check_lfsgd_pl(config.lr.alpha, config.E, K, lam, problem.L / config.lr.mu)
            out["theorem"] = "lfsgd-pl"
        elif config.algorithm == "LFSGD":
            rep = conditions.check_lfsgd_nonconvex(config.lr.eta, config.E, K, problem.L, lam, C1)
            out["theorem"] = "lfsgd"
        else:
            rep = conditions.check_nfsgd(
                config.lr.eta, config.E, problem.p, problem.L, lam, C1, config.topology.zeta, config.T
            )
            out["theorem"] = "nfsgd"
    except InvalidArgument as exc:
        return {**out, "error": str(exc)}
    out["report"] = rep.to_dict()
    return out


def _execute(args):
    cell, out_dir, constants = args
    h = canonical_hash(cell)
    csv_path, json_path = out_dir / f"{h}.csv", out_dir / f"{h}.json"
    if csv_path.exists() and json_path.exists():
        summary = json.loads(json_path.read_text())
        return {"hash": h, "cached": True, "status": summary.get("status"), "condition": summary.get("condition")}
    problem, config = build_cell(cell)
    traj = run(problem, config)
    rates = {}
    for model in ("exp_decay", "power_law"):
        try:
            slope, r2 = fit_rate(traj, model)
            rates[model] = {"slope": slope, "r2": r2}
        except (ValueError, np.linalg.LinAlgError):
            rates[model] = None
    summary = traj.summary(h, rates)
    summary["config"] = cell
    summary["condition"] = condition_report(problem, config, traj, constants)
    csv_path.write_text(traj.to_csv())
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"hash": h, "cached": False, "status": traj.status, "condition": summary["condition"]}


def run_experiment(spec: dict, workers: int = 1, base_dir: Path | None = None) -> dict:
    """Execute every cell, write per-cell files and a manifest; return the manifest."""
    cells = expand_cells(spec)
    for cell in cells:
        build_cell(cell)
    out_dir = Path(spec.get("output_dir", "fedlocal_out"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise SpecError(f"output directory {out_dir} is not writable")
    spec_hash = canonical_hash({k: v for k, v in spec.items() if k != "output_dir"})
    manifest_path = out_dir / f"manifest-{spec_hash}.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        manifest["cache_hit"] = True
        return manifest
    constants = spec.get("constants", {})
    jobs = [(c, out_dir, constants) for c in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, jobs))
    else:
        results = [_execute(j) for j in jobs]
    entries = []
    for cell, res in zip(cells, results):
        entries.append({
            "hash": res["hash"],
            "trajectory": f"{res['hash']}.csv",
            "summary": f"{res['hash']}.json",
            "config": cell,
            "status": res["status"],
            "diverged": res["status"] == "diverged",
            "condition": res["condition"],
        })
    manifest = {"spec_hash": spec_hash, "spec": spec, "runs": entries, "cache_hit": False}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# check


THEOREM_PARAMS = {
    "lfgd": ("eta", "E", "L", "mu", "lam"),
    "lfsgd-pl": ("alpha", "E", "K", "lam", "kappa"),
    "lfsgd": ("eta", "E", "K", "L", "lam", "C1"),
    "nfsgd": ("eta", "E", "p", "L", "lam", "C1", "zeta"),
}
INT_PARAMS = {"E", "K", "p", "T"}


def check_command(theorem: str, params: dict) -> tuple[int, dict]:
    missing = [k for k in THEOREM_PARAMS[theorem] if params.get(k) is None]
    if missing:
        return 2, {"error": f"missing required constant(s) for {theorem}: {', '.join('--' + m for m in missing)}"}
    vals = {k: (int(v) if k in INT_PARAMS else float(v)) for k, v in params.items() if v is not None}
    try:
        if theorem == "lfgd":
            rep = conditions.check_lfgd(vals["eta"], vals["E"], vals["L"], vals["mu"], vals["lam"],
                                        variant=params.get("variant") or "lemma")
        elif theorem == "lfsgd-pl":
            strict = bool(params.get("strict"))
            rep = conditions.check_lfsgd_pl(vals["alpha"], vals["E"], vals["K"], vals["lam"], vals["kappa"],
                                            strict=strict, L=vals.get("L"), mu=vals.get("mu"), C1=vals.get("C1"))
        elif theorem == "lfsgd":
            rep = conditions.check_lfsgd_nonconvex(vals["eta"], vals["E"], vals["K"], vals["L"], vals["lam"], vals["C1"])
        else:
            rep = conditions.check_nfsgd(vals["eta"], vals["E"], vals["p"], vals["L"], vals["lam"], vals["C1"],
                                         vals["zeta"], T=vals.get("T"))
    except InvalidArgument as exc:
        return 2, {"error": str(exc)}
    return (0 if rep.satisfied else 1), rep.to_dict()


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedlocal", description="Local descent federated learning simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment spec")
    r.add_argument("spec", help="path to the experiment JSON")
    r.add_argument("--workers", type=int, default=None, help=f"parallel cells (default ${WORKERS_ENV} or 1)")
    r.add_argument("--output-dir", default=None, help="override output_dir from the experiment file")

    c = sub.add_parser("check", help="evaluate a step-size / local-update condition")
    c.add_argument("--theorem", required=True, choices=sorted(THEOREM_PARAMS))
    for name in ("eta", "E", "K", "L", "mu", "lam", "kappa", "alpha", "C1", "zeta", "p", "T"):
        c.add_argument(f"--{name}", default=None)
    c.add_argument("--variant", choices=("lemma", "theorem"), default=None)
    c.add_argument("--strict", action="store_true")
    c.add_argument("--params", default=None, help="JSON object (or path to one) with the same keys")

    t = sub.add_parser("topology", help="build a mixing matrix and report zeta")
    t.add_argument("--kind", required=True, choices=("complete", "ring", "random_geometric", "lazy_complete"))
    t.add_argument("--p", type=int, required=True)
    t.add_argument("--self-weight", type=float, default=0.5)
    t.add_argument("--radius", type=float, default=0.5)
    t.add_argument("--zeta", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dump", nargs="?", const="-", default=None, help="write the matrix as CSV (path or '-')")
    return ap


def _load_json_arg(text: str) -> dict:
    path = Path(text)
    data = json.loads(path.read_text()) if path.exists() else json.loads(text)
    if not isinstance(data, dict):
        raise SpecError("params must be a JSON object")
    return data


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "check":
        params = {}
        if args.params:
            try:
                params.update(_load_json_arg(args.params))
            except (ValueError, SpecError) as exc:
                print(json.dumps({"error": f"bad --params: {exc}"}))
                return 2
        for name in ("eta", "E", "K", "L", "mu", "lam", "kappa", "alpha", "C1", "zeta", "p", "T"):
            if getattr(args, name) is not None:
                params[name] = getattr(args, name)
        params["variant"] = args.variant or params.get("variant")
        params["strict"] = args.strict or params.get("strict", False)
        try:
            code, out = check_command(args.theorem, params)
        except ValueError as exc:
            code, out = 2, {"error": f"bad numeric value: {exc}"}
        print(json.dumps(out, indent=2, sort_keys=True))
        if code == 2:
            print(out["error"], file=sys.stderr)
        return code

    if args.command == "topology":
        try:
            W = make_topology(args.kind, args.p, seed=args.seed, self_weight=args.self_weight,
                              radius=args.radius, zeta=args.zeta)
        except (InvalidArgument, InvalidMixing) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if args.dump == "-":
            sys.stdout.write(W.to_csv())
        else:
            if args.dump:
                Path(args.dump).write_text(W.to_csv())
            print(json.dumps({"kind": args.kind, "p": W.p, "zeta": W.zeta}))
        return 0

    workers = args.workers if args.workers is not None else int(os.environ.get(WORKERS_ENV, "1"))
    try:
        spec = json.loads(Path(args.spec).read_text())
        if args.output_dir:
            spec["output_dir"] = args.output_dir
        manifest = run_experiment(spec, workers=max(1, workers))
    except (OSError, ValueError, SpecError, InvalidArgument, InvalidMixing) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2
    n = len(manifest["runs"])
    if manifest.get("cache_hit"):
        print(f"cache hit: manifest {manifest['spec_hash']} already exists ({n} runs); nothing overwritten")
    else:
        diverged = sum(r["diverged"] for r in manifest["runs"])
        print(f"wrote {n} runs ({diverged} diverged), manifest-{manifest['spec_hash']}.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
