"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``) with one
section per module; explicit flags win over the file, and ``MOE2_SEED``
overrides the file's seed. Each run writes ``run_manifest.json`` next to its
outputs. Passing that manifest back as ``--config`` replays the run.

Exit codes: 0 success, 2 validation error, 3 infeasible problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .costs import CostTable
from .domain import ConstraintSet, SubsetMask, Workload, fleet_from_dict, fleet_to_dict, substreams
from .gating import GatingDataset, GatingParams, TrainConfig, train_gating
from .harness import ExperimentConfig, run_experiment
from .inference import InferenceConfig, generate_answer
from .smo import InfeasibleProblem, SmoConfig, select_subset
from .synth import (
    FleetSpec,
    HardwareTier,
    WorkloadSpec,
    generate_fleet,
    generate_workload,
    kmeans_cluster,
    split_indices,
)

log = logging.getLogger("moe2")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
MANIFEST_NAME = "run_manifest.json"


class ValidationError(Exception):
    pass


# --------------------------------------------------------------------------
# io helpers
# --------------------------------------------------------------------------

def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _read_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})")


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_workload(path) -> Workload:
    return Workload.from_dict(_read_json(path))


def _load_fleet(path):
    return fleet_from_dict(_read_json(path))


def _dataclass_from(cls, d: dict | None, where: str):
    """Build a config dataclass from a JSON section, turning lists into tuples."""
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValidationError(f"unknown keys in [{where}]: {sorted(unknown)}")
    for k, v in list(d.items()):
        if isinstance(v, list):
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    if cls is FleetSpec and "hardware_tiers" in d:
        d["hardware_tiers"] = tuple(HardwareTier(t["name"], t["count"],
                                                 {k: tuple(r) for k, r in t["ranges"].items()})
                                    for t in (d["hardware_tiers"]))
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"[{where}]: {e}")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

class Settings:
    """Flags layered over a config file; records what was resolved for the manifest."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.command = command
        self.file: dict = {}
        if getattr(args, "config", None):
            doc = _read_json(args.config)
            if doc.get("kind") == "manifest":
                if doc.get("command") != command:
                    raise ValidationError(f"manifest is for {doc.get('command')!r}, not {command!r}")
                doc = doc["config"]
            self.file = doc
        self.resolved: dict = {}

    def section(self, name: str) -> dict:
        sec = self.file.get(name, {})
        if not isinstance(sec, dict):
            raise ValidationError(f"config section [{name}] must be an object")
        return sec

    def get(self, flag: str, section: str | None = None, key: str | None = None, default=None):
        val = getattr(self.args, flag, None)
        if val is None:
            src = self.section(section) if section else self.file
            val = src.get(key or flag, default)
        self._record(section, key or flag, val)
        return val

    def _record(self, section: str | None, key: str, val) -> None:
        self.resolved[(section, key)] = val

    def require(self, flag: str, section: str | None = None, key: str | None = None):
        val = self.get(flag, section, key)
        if val is None:
            raise ValidationError(f"missing required --{flag.replace('_', '-')}")
        return val

    def seed(self) -> int:
        if getattr(self.args, "seed", None) is not None:
            seed = self.args.seed
        elif os.environ.get("MOE2_SEED"):
            try:
                seed = int(os.environ["MOE2_SEED"])
            except ValueError:
                raise ValidationError("MOE2_SEED must be an integer")
        else:
            seed = int(self.file.get("seed", 0))
        self._record(None, "seed", seed)
        return seed

    def effective_config(self) -> dict:
        """The config file with every resolved value written where it is read from."""
        out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.file.items()}
        for (section, key), val in self.resolved.items():
            if val is None:
                continue
            if section is None:
                out[key] = val
            else:
                out.setdefault(section, {})[key] = val
        return _to_jsonable(out)


def parse_mask(text: str, n: int) -> SubsetMask:
    text = str(text).strip()
    if text == "all":
        return SubsetMask.full(n)
    if len(text) == n and set(text) <= {"0", "1"}:
        mask = SubsetMask.from_array([c == "1" for c in text])
    else:
        try:
            mask = SubsetMask.from_members([int(t) for t in text.split(",") if t.strip()], n)
        except ValueError as e:
            raise ValidationError(f"bad mask {text!r}: {e}")
    if mask.bits == 0:
        raise ValidationError("mask selects no experts")
    return mask


def parse_constraints(tau_items, e_max, n_classes: int) -> ConstraintSet:
    """``tau_items`` is a list of 'm=seconds' or a bare number applying to every class."""
    tau = [float("inf")] * n_classes
    for item in tau_items or []:
        item = str(item)
        try:
            if "=" in item:
                m, v = item.split("=", 1)
                m = int(m)
                if not 0 <= m < n_classes:
                    raise ValidationError(f"--tau-max class {m} out of range 0..{n_classes - 1}")
                tau[m] = float(v)
            else:
                tau = [float(item)] * n_classes
        except ValueError:
            raise ValidationError(f"bad --tau-max value {item!r}; expected m=seconds")
    try:
        return ConstraintSet(tuple(tau), float("inf") if e_max is None else float(e_max))
    except ValueError as e:
        raise ValidationError(str(e))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    timings: dict[str, float]
    tool_version: str = __version__

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True, default=_json_default)
                              .encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"kind": "manifest", "schema_version": 1, "tool": "moe2", "tool_version": self.tool_version,
                "command": self.command, "config": self.config, "config_hash": self.config_hash,
                "seed": self.seed, "inputs": self.inputs, "outputs": self.outputs, "timings": self.timings}


def _finish(settings: Settings, out_dir: Path, inputs: Sequence[str], outputs: Sequence[Path],
            started: float, seed: int | None = None) -> Path:
    manifest = RunManifest(
        command=settings.command,
        config=settings.effective_config(),
        seed=seed,
        inputs={str(p): _digest(p) for p in inputs},
        outputs={str(p): _digest(p) for p in outputs},
        timings={"wall_seconds": round(time.perf_counter() - started, 6)},
    )
    path = _write(out_dir / MANIFEST_NAME, _dumps(manifest.to_dict()))
    log.info("wrote manifest %s", path)
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_workload(args, settings: Settings) -> int:
    started = time.perf_counter()
    seed = settings.seed()
    out = Path(settings.require("out"))
    wsec = dict(settings.section("workload"))
    if settings.get("n_prompts", "workload") is not None:
        wsec["n_prompts"] = settings.get("n_prompts", "workload")
    wspec = _dataclass_from(WorkloadSpec, wsec, "workload")
    fspec = _dataclass_from(FleetSpec, settings.section("fleet"), "fleet")
    test_fraction = float(settings.get("test_fraction", "experiment", default=0.2))
    try:
        wspec.validate()
        fspec.validate()
    except ValueError as e:
        raise ValidationError(str(e))
    r_workload, r_cluster, r_fleet, r_split = substreams(seed, 4)
    workload = generate_workload(wspec, r_workload)
    labels = kmeans_cluster(workload.embeddings(), fspec.k_clusters, r_cluster).labels
    fleet = generate_fleet(fspec, labels, r_fleet)
    train_idx, test_idx = split_indices(len(workload), test_fraction, r_split)
    outputs = [
        _write(out / "workload.json", _dumps(workload.to_dict())),
        _write(out / "train.json", _dumps(workload.subset(train_idx.tolist()).to_dict())),
        _write(out / "test.json", _dumps(workload.subset(test_idx.tolist()).to_dict())),
        _write(out / "fleet.json", _dumps(fleet_to_dict(fleet))),
    ]
    log.info("generated %d prompts (%d train / %d test) and %d experts",
             len(workload), len(train_idx), len(test_idx), len(fleet))
    _finish(settings, out, [], outputs, started, seed)
    return EXIT_OK


def cmd_train_gate(args, settings: Settings) -> int:
    started = time.perf_counter()
    seed = settings.seed()
    wpath, fpath = settings.require("workload", "inputs"), settings.require("fleet", "inputs")
    out = Path(settings.require("out"))
    train = dict(settings.section("train"))
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        val = settings.get(flag, "train", key)
        if val is not None:
            train[key] = val
    train["seed"] = seed
    config = _dataclass_from(TrainConfig, train, "train")
    workload, fleet = _load_workload(wpath), _load_fleet(fpath)
    result = train_gating(GatingDataset.build(workload, fleet), config)
    log.info("training loss %.6f -> %.6f (best epoch %d)", result.initial_loss, result.final_loss, result.best_epoch)
    outputs = [
        _write(out / "theta.json", _dumps(result.params.to_dict())),
        _write(out / "training.json", _dumps({
            "initial_loss": result.initial_loss, "final_loss": result.final_loss,
            "best_epoch": result.best_epoch, "epoch_losses": result.epoch_losses,
            "learning_rates": result.learning_rates})),
    ]
    _finish(settings, out, [wpath, fpath], outputs, started, seed)
    return EXIT_OK


def _constraints(settings: Settings, n_classes: int) -> ConstraintSet:
    items = getattr(settings.args, "tau_max", None)
    if items is None:
        tau = settings.section("constraints").get("tau_max")
        if tau is None:
            items = []
        elif isinstance(tau, (int, float)):
            items = [tau]
        else:
            # strings are flag items recorded by an earlier run; numbers are per-class deadlines
            items = [t if isinstance(t, str) else f"{m}={t}" for m, t in enumerate(tau)]
    settings._record("constraints", "tau_max", list(items))
    return parse_constraints(items, settings.get("e_max", "constraints"), n_classes)


def cmd_cost_report(args, settings: Settings) -> int:
    started = time.perf_counter()
    wpath, fpath = settings.require("workload", "inputs"), settings.require("fleet", "inputs")
    workload, fleet = _load_workload(wpath), _load_fleet(fpath)
    mask = parse_mask(settings.get("mask", default="all"), len(fleet))
    gate = float(settings.get("gate_delay", "costs", default=0.002))
    table = CostTable(fleet, workload, gate_delay=gate)
    constraints = _constraints(settings, workload.n_classes)
    report = table.report(mask, constraints)
    per_expert = [{"expert": n, **{k: v for k, v in table.report(1 << n, constraints).to_dict().items()
                                   if k in ("delay_by_class", "energy", "feasible")}}
                  for n in range(len(fleet))]
    doc = {"mask": mask.bitstring(), "members": mask.members(), "constraints": constraints.to_dict(),
           "report": report.to_dict(), "experts": per_expert}
    text = _dumps(doc)
    out = settings.get("out")
    if out is None:
        sys.stdout.write(text)
        return EXIT_OK
    path = _write(Path(out) / "cost_report.json", text)
    _finish(settings, Path(out), [wpath, fpath], [path], started)
    return EXIT_OK


def cmd_select_subset(args, settings: Settings) -> int:
    started = time.perf_counter()
    wpath, fpath = settings.require("workload", "inputs"), settings.require("fleet", "inputs")
    objective = settings.get("objective", "smo", default="restricted")
    tpath = settings.get("theta", "inputs")
    if objective == "restricted" and tpath is None:
        raise ValidationError("missing required --theta (needed by the restricted objective)")
    opath = settings.get("objective_workload", "inputs") or wpath
    out = Path(settings.require("out"))
    eps = settings.get("epsilon", "smo", default=0.0)
    workload, fleet = _load_workload(wpath), _load_fleet(fpath)
    obj_workload = workload if opath == wpath else _load_workload(opath)
    theta = GatingParams.from_dict(_read_json(tpath)) if tpath else None
    gate = float(settings.get("gate_delay", "costs", default=0.002))
    table = CostTable(fleet, workload, gate_delay=gate)
    constraints = _constraints(settings, workload.n_classes)
    smo_sec = {k: v for k, v in settings.section("smo").items() if k != "objective"}
    smo_cfg = _dataclass_from(SmoConfig, {**smo_sec, "epsilon": eps}, "smo")
    inputs = [p for p in (wpath, fpath, tpath, opath if opath != wpath else None) if p]
    try:
        result = select_subset(theta, GatingDataset.build(obj_workload, fleet), table, constraints,
                               smo_cfg, objective)
    except InfeasibleProblem as e:
        log.error("infeasible: %s", e)
        doc = {"status": "infeasible", "message": str(e), "binding": e.binding,
               "constraints": constraints.to_dict(),
               "least_violating": None if e.report is None else e.report.to_dict()}
        path = _write(out / "selection.json", _dumps(doc))
        _finish(settings, out, inputs, [path], started)
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report = table.report(result.mask, constraints)
    doc = {"status": result.status, "mask": result.mask.bitstring(), "members": result.mask.members(),
           "objective": result.objective, "constraints": constraints.to_dict(),
           "report": report.to_dict(), "trace": result.trace.to_dict()}
    path = _write(out / "selection.json", _dumps(doc))
    log.info("selected %s (objective %.6f, %d iterations)", result.mask, result.objective,
             len(result.trace.records))
    _finish(settings, out, inputs, [path], started)
    return EXIT_OK


def cmd_infer(args, settings: Settings) -> int:
    started = time.perf_counter()
    wpath, fpath = settings.require("workload", "inputs"), settings.require("fleet", "inputs")
    tpath = settings.get("theta", "inputs")
    out = Path(settings.require("out"))
    workload, fleet = _load_workload(wpath), _load_fleet(fpath)
    mask = parse_mask(settings.get("mask", default="all"), len(fleet))
    sec = settings.section("inference")
    k = settings.get("k", "inference", default=2)
    k = None if k in (None, "all") else int(k)
    mode = settings.get("mode", "inference", default="greedy")
    seed = settings.seed()
    cfg = _dataclass_from(InferenceConfig, {**sec, "k": None if k is None else min(k, len(mask)),
                                            "mode": mode, "seed": seed}, "inference")
    theta = GatingParams.from_dict(_read_json(tpath)) if tpath else None
    gate = float(settings.get("gate_delay", "costs", default=0.002))
    lines, correct = [], 0
    for p in workload:
        ans = generate_answer(theta, mask, p, fleet, cfg, workload.vocab_size, gate)
        correct += ans.tokens == p.answer
        row = ans.to_dict()
        row["correct"] = ans.tokens == p.answer
        lines.append(json.dumps(row, sort_keys=True, default=_json_default))
    path = _write(out / "answers.jsonl", "\n".join(lines) + "\n")
    summary = _write(out / "summary.json", _dumps({"accuracy": correct / len(workload),
                                                   "n_prompts": len(workload), "mask": mask.bitstring(),
                                                   "k": cfg.k, "mode": cfg.mode}))
    log.info("accuracy %.4f over %d prompts", correct / len(workload), len(workload))
    _finish(settings, out, [p for p in (wpath, fpath, tpath) if p], [path, summary], started, seed)
    return EXIT_OK


def experiment_config(settings: Settings, seeds: Sequence[int]) -> ExperimentConfig:
    ex = {k: v for k, v in settings.section("experiment").items() if k != "replicates"}
    ex["seeds"] = tuple(seeds)
    for key, cls in (("workload", WorkloadSpec), ("fleet", FleetSpec), ("train", TrainConfig),
                     ("smo", SmoConfig)):
        ex[key] = _dataclass_from(cls, settings.section(key), key)
    return _dataclass_from(ExperimentConfig, ex, "experiment")


def cmd_sweep(args, settings: Settings) -> int:
    started = time.perf_counter()
    if not args.config:
        raise ValidationError("missing required --config")
    seed = settings.seed()
    out = Path(settings.require("out"))
    n_seeds = int(settings.get("replicates", "experiment", default=1))
    if n_seeds < 1:
        raise ValidationError("--replicates must be >= 1")
    seeds = [seed + i for i in range(n_seeds)]
    config = experiment_config(settings, seeds)
    table = run_experiment(config)
    outputs = [_write(out / "results.json", _dumps(table.to_dict()))]
    for tau in config.tau_grid:
        outputs.append(_write(out / f"results_tau_{tau:g}.csv", table.to_csv(tau)))
    _finish(settings, out, [args.config], outputs, started, seed)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser and dispatch
# --------------------------------------------------------------------------

class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"ts": round(record.created, 6), "level": record.levelname.lower(),
                           "logger": record.name, "msg": record.getMessage()})


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("moe2")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe2", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"moe2 {__version__}")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config (or a previous run manifest to replay)")
        p.set_defaults(func=func)
        return p

    p = add("gen-workload", "generate a synthetic workload, its train/test split and an expert fleet",
            cmd_gen_workload)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--test-fraction", type=float)

    p = add("train-gate", "train the gating network on a workload", cmd_train_gate)
    p.add_argument("--workload")
    p.add_argument("--fleet")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    def constraint_flags(p):
        p.add_argument("--tau-max", action="append", metavar="M=SECONDS",
                       help="mean-delay deadline for class M (repeatable); a bare number applies to all classes")
        p.add_argument("--e-max", type=float, metavar="JOULES")
        p.add_argument("--gate-delay", type=float)

    p = add("cost-report", "expected delay/energy of an expert subset", cmd_cost_report)
    p.add_argument("--workload")
    p.add_argument("--fleet")
    p.add_argument("--mask", help="bitstring (expert 0 first), comma-separated ids, or 'all'")
    p.add_argument("--out", help="output directory (default: print to stdout)")
    constraint_flags(p)

    p = add("select-subset", "choose the best feasible expert subset", cmd_select_subset)
    p.add_argument("--workload", help="evaluation workload (feasibility)")
    p.add_argument("--objective-workload", help="workload for the objective (default: --workload)")
    p.add_argument("--fleet")
    p.add_argument("--theta")
    p.add_argument("--out")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--objective", choices=["restricted", "tabular"])
    constraint_flags(p)

    p = add("infer", "generate answers with top-k gated fusion", cmd_infer)
    p.add_argument("--workload")
    p.add_argument("--fleet")
    p.add_argument("--theta", help="gating parameters; omit for uniform (majority-vote) fusion")
    p.add_argument("--mask")
    p.add_argument("--k", help="experts per prompt, or 'all'")
    p.add_argument("--mode", choices=["greedy", "sample"])
    p.add_argument("--seed", type=int)
    p.add_argument("--gate-delay", type=float)
    p.add_argument("--out")

    p = add("sweep", "run the method comparison over the constraint grid", cmd_sweep)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    return parser


def parse_and_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.log_level)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("moe2: error: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        settings = Settings(args, args.command)
        return args.func(args, settings)
    except ValidationError as e:
        print(f"moe2 {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleProblem as e:
        print(f"moe2 {args.command}: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, KeyError) as e:
        print(f"moe2 {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
