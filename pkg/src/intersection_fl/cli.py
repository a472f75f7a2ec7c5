"""Command-line driver: ``intersection-fl <subcommand> [flags]``.

Every text artifact carries the resolved config and a version hash (JSON files
under a ``"meta"`` key, CSV files as leading ``#`` comment lines). Checkpoints
are raw binary and are covered by ``manifest-<command>.json`` instead, which
lists the SHA-256 of every file the subcommand emitted. ``--check`` recomputes the artifacts, compares
them against an existing manifest, and verifies the run's safety and
monotonicity properties.

Exit codes: 0 success, 1 configuration error, 2 drift or property violation
under ``--check``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (Evaluation, evaluate, federation, is_monotone_non_decreasing,
                          selection_point, train_il)
from .federated import AGGREGATION_MODES
from .imitation import convergence_step
from .metrics import aligned_table, rows_to_csv, summary_json
from .policy import CheckpointFormatError, checkpoint_name, deserialize, serialize
from .rules import rule_trace
from .sim import Simulation

log = logging.getLogger("intersection_fl")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2


def version_hash(version: str = __version__) -> str:
    """Git blob hash of the package version string."""
    payload = f"intersection_fl {version}".encode()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


class Artifacts:
    """In-memory file set; nothing touches disk until :meth:`write`."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.files: dict[str, bytes] = {}
        self.violations: list[str] = []

    @property
    def meta(self) -> dict:
        return {"command": self.command, "version": __version__, "version_hash": version_hash(),
                "config": self.cfg.to_dict()}

    def csv(self, name: str, text: str) -> None:
        head = (f"# intersection_fl {self.command} version_hash={version_hash()}\n"
                f"# config {json.dumps(self.cfg.to_dict(), sort_keys=True)}\n")
        self.files[name] = (head + text).encode()

    def json(self, name: str, payload: dict) -> None:
        self.files[name] = (json.dumps({**payload, "meta": self.meta}, sort_keys=True, indent=2) + "\n").encode()

    def text(self, name: str, text: str) -> None:
        self.files[name] = (f"# intersection_fl {self.command} version_hash={version_hash()}\n" + text).encode()

    def binary(self, name: str, data: bytes) -> None:
        self.files[name] = data

    def require(self, ok: bool, message: str) -> None:
        if not ok:
            self.violations.append(message)

    @property
    def manifest_name(self) -> str:
        return f"manifest-{self.command}.json"

    def manifest(self) -> dict:
        return {"command": self.command, "version_hash": version_hash(),
                "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(self.files.items())}}

    def write(self, out: Path) -> None:
        for name, data in sorted(self.files.items()):
            path = out / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        (out / self.manifest_name).write_text(json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n")


def _fmt(d: float) -> str:
    return f"{d:g}"


def _ind_row(ev: Evaluation) -> list:
    return [ev.density, ev.mode, ev.n_vehicles, ev.n_collision, ev.pooled.collision_ratio, ev.pooled.v_avg,
            ev.pooled.discomfort]


IND_HEADER = ["density", "mode", "n_vehicles", "n_collision", "collision_ratio", "v_avg", "discomfort"]


# --- subcommands -------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, densities: Sequence[float], art: Artifacts, trace: bool = False) -> None:
    rows, seed_rows = [], []
    for d in densities:
        ev = evaluate(cfg, d, "rule")
        rows.append(_ind_row(ev))
        seed_rows += [[d, s, i.collision_ratio, i.v_avg, i.discomfort] for s, i in zip(ev.seeds, ev.per_seed)]
        art.json(f"simulate/summary_{_fmt(d)}.json",
                 json.loads(summary_json(d, "rule", cfg.seed, ev.pooled, {"seeds": ev.seeds})))
        art.require(ev.n_collision == 0, f"rule-only collisions at density {_fmt(d)}: {ev.n_collision}")
        if trace:
            art.csv(f"simulate/rule_trace_{_fmt(d)}.csv", _rule_trace_csv(cfg, d, ev.seeds[0]))
    art.csv("simulate/indicators.csv", rows_to_csv(IND_HEADER, rows))
    art.csv("simulate/indicators_per_seed.csv",
            rows_to_csv(["density", "seed", "collision_ratio", "v_avg", "discomfort"], seed_rows))
    art.text("simulate/indicators.txt", aligned_table(IND_HEADER, rows))


def _rule_trace_csv(cfg: ExperimentConfig, density: float, seed: int) -> str:
    sim = Simulation(replace(cfg.sim, arrival_rate_lambda=float(density)), cfg.rules, seed=seed,
                     n_select=cfg.training.n_select)
    rows = []
    for step in range(cfg.sim.episode_steps):
        obs = sim.step().observation
        if not len(obs):
            continue
        tr = rule_trace(obs.rule_inputs(), cfg.rules)
        cols = [np.broadcast_to(np.asarray(c, dtype=float), (len(obs),))
                for c in (tr.sv_space, tr.sv_time, tr.sv_accel, tr.sv, tr.action)]
        rows += [[step, int(vid), *(float(c[k]) for c in cols)] for k, vid in enumerate(obs.ids)]
    return rows_to_csv(["step", "id", "sv_s", "sv_t", "sv_acc", "sv", "action"], rows)


def cmd_train_il(cfg: ExperimentConfig, densities: Sequence[float], art: Artifacts) -> None:
    train_densities = list(cfg.federation.densities)
    matrix, summary = [], {}
    baseline = {d: evaluate(cfg, d, "rule") for d in densities}
    for td in train_densities:
        node = train_il(cfg, td)
        art.binary(f"il/model_density{_fmt(td)}.bin", serialize(node.params))
        art.csv(f"il/curve_density{_fmt(td)}.csv", node.curve.csv())
        summary[_fmt(td)] = {"train_steps": node.train_steps, "sim_steps": node.sim_steps,
                             "converged_at": convergence_step(node.curve.losses)}
        for ed in densities:
            for mode in ("model", "mixed"):
                ev = evaluate(cfg, ed, mode, node.params)
                matrix.append([td, *_ind_row(ev)])
                if mode == "mixed":
                    art.require(ev.n_collision == 0,
                                f"model+rule collisions (train {_fmt(td)}, eval {_fmt(ed)}): {ev.n_collision}")
    for ed, ev in baseline.items():
        matrix.append(["rule", *_ind_row(ev)])
    header = ["train_density", *IND_HEADER]
    art.csv("il/eval_matrix.csv", rows_to_csv(header, matrix))
    art.text("il/eval_matrix.txt", aligned_table(header, matrix))
    art.json("il/summary.json", {"trainers": summary, "eval_densities": list(densities)})


def cmd_train_fl(cfg: ExperimentConfig, densities: Sequence[float], modes: Sequence[str], art: Artifacts) -> None:
    finals = {}
    for mode in modes:
        flog = federation(cfg, mode)
        art.csv(f"fl/{mode}/federation.csv", flog.csv())
        for r, (g, locals_) in enumerate(zip(flog.history, flog.local_history)):
            art.binary(f"fl/{mode}/model_round{r}_global.bin", serialize(g))
            for n, m in enumerate(locals_):
                art.binary(f"fl/{mode}/{checkpoint_name(r, n)}", serialize(m))
        for r in range(len(flog.history)):
            w = [rec.weight for rec in flog.records if rec.round == r]
            art.require(abs(sum(w) - 1.0) < 1e-12, f"{mode} round {r}: weights sum to {sum(w)!r}")
        finals[mode] = flog
        art.json(f"fl/{mode}/summary.json", {
            "mode": mode, "rounds": len(flog.history), "checkpoint_bytes": flog.checkpoint_bytes,
            "bytes_down": flog.bytes_down, "bytes_up_models": flog.bytes_up_models,
            "bytes_up_experience": flog.bytes_up_experience,
            "round0_weights": [rec.weight for rec in flog.records if rec.round == 0]})
    rows = []
    for d in densities:
        evs = {m: evaluate(cfg, d, "model", finals[m].final) for m in modes}
        row = [d] + [evs[m].pooled.discomfort for m in modes] + [evs[m].pooled.collision_ratio for m in modes]
        if len(modes) == 2:
            row.append(evs["density"].pooled.discomfort - evs["same"].pooled.discomfort)
        rows.append(row)
    header = ["eval_density"] + [f"J_{m}" for m in modes] + [f"collision_ratio_{m}" for m in modes]
    if len(modes) == 2:
        header.append("J_delta_density_minus_same")
    art.csv("fl/comparison.csv", rows_to_csv(header, rows))
    art.text("fl/comparison.txt", aligned_table(header, rows))


def cmd_sweep_selection(cfg: ExperimentConfig, ps: Sequence[float], art: Artifacts) -> None:
    rows, savings = [], []
    dens = cfg.selection.density
    for p in ps:
        pt = selection_point(cfg, p)
        node = pt.node
        art.csv(f"selection/loss_p{p:g}.csv", node.curve.csv())
        art.csv(f"selection/savings_p{p:g}.csv", node.selector.counters.csv())
        art.binary(f"selection/model_p{p:g}.bin", serialize(node.params))
        ev_m = evaluate(cfg, dens, "model", node.params)
        ev_x = evaluate(cfg, dens, "mixed", node.params)
        rows.append([p, pt.savings_pct, "" if pt.converged_at is None else pt.converged_at,
                     ev_m.pooled.collision_ratio, ev_m.pooled.v_avg, ev_m.pooled.discomfort,
                     ev_x.pooled.collision_ratio, ev_x.pooled.v_avg, ev_x.pooled.discomfort])
        savings.append((p, pt.savings_pct))
        art.require(pt.converged_at is not None, f"p={p:g}: loss did not converge within the horizon")
        art.require(p > 0 or pt.savings_pct == 0.0, f"p=0 savings {pt.savings_pct!r} != 0")
    savings.sort()
    art.require(is_monotone_non_decreasing([s for _, s in savings]), f"savings not monotone in p: {savings}")
    header = ["p", "savings_pct", "converged_at", "model_collision_ratio", "model_v_avg", "model_discomfort",
              "mixed_collision_ratio", "mixed_v_avg", "mixed_discomfort"]
    art.csv("selection/table.csv", rows_to_csv(header, rows))
    art.text("selection/table.txt", aligned_table(header, rows))


def cmd_evaluate(cfg: ExperimentConfig, densities: Sequence[float], checkpoint: Path, art: Artifacts) -> None:
    params = deserialize(checkpoint.read_bytes())
    rows = []
    for d in densities:
        for mode in ("rule", "model", "mixed"):
            ev = evaluate(cfg, d, mode, params)
            rows.append(_ind_row(ev))
            if mode in ("rule", "mixed"):
                art.require(ev.n_collision == 0, f"{mode} collisions at density {_fmt(d)}: {ev.n_collision}")
    art.csv("evaluate/indicators.csv", rows_to_csv(IND_HEADER, rows))
    art.text("evaluate/indicators.txt", aligned_table(IND_HEADER, rows))
    art.json("evaluate/summary.json", {"checkpoint_sha256": hashlib.sha256(checkpoint.read_bytes()).hexdigest(),
                                       "checkpoint_version": params.version})


# --- argument handling -------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intersection-fl", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({version_hash()[:12]})")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--densities", type=_float_list, help="comma-separated veh/lane/h list")
    common.add_argument("--check", action="store_true",
                        help="compare against the existing manifest and verify run properties")
    common.add_argument("-v", "--verbose", action="store_true")
    sp = sub.add_parser("simulate", parents=[common], help="rule-only density sweep")
    sp.add_argument("--trace-rules", action="store_true", help="dump per-step safety-value traces as CSV")
    sub.add_parser("train-il", parents=[common], help="per-density imitation learning and evaluation matrix")
    sp = sub.add_parser("train-fl", parents=[common], help="federated training, both aggregation modes")
    sp.add_argument("--mode", choices=AGGREGATION_MODES, help="run only this aggregation mode")
    sp = sub.add_parser("sweep-selection", parents=[common], help="experience-selection discard-rate sweep")
    sp.add_argument("--p", type=_float_list, help="comma-separated discard rates")
    sp = sub.add_parser("evaluate", parents=[common], help="score a checkpoint across densities")
    sp.add_argument("--checkpoint", type=Path, required=True)
    return ap


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = str(args.out)
    if args.densities is not None:
        data["eval_densities"] = args.densities
    if getattr(args, "p", None) is not None:
        data["selection"]["discard_rates"] = args.p
    return ExperimentConfig.from_dict(data)


def _compare(art: Artifacts, out: Path) -> list[str]:
    path = out / art.manifest_name
    if not path.exists():
        return []
    old = json.loads(path.read_text()).get("files", {})
    new = art.manifest()["files"]
    drift = [f"changed: {k}" for k in sorted(set(old) & set(new)) if old[k] != new[k]]
    drift += [f"missing: {k}" for k in sorted(set(old) - set(new))]
    drift += [f"new: {k}" for k in sorted(set(new) - set(old))]
    return drift


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.output_dir)
    art = Artifacts(cfg, args.command)
    densities = list(cfg.eval_densities)
    runners: dict[str, Callable[[], None]] = {
        "simulate": lambda: cmd_simulate(cfg, densities, art, args.trace_rules),
        "train-il": lambda: cmd_train_il(cfg, densities, art),
        "train-fl": lambda: cmd_train_fl(cfg, densities, [args.mode] if args.mode else list(AGGREGATION_MODES), art),
        "sweep-selection": lambda: cmd_sweep_selection(cfg, cfg.selection.discard_rates, art),
        "evaluate": lambda: cmd_evaluate(cfg, densities, args.checkpoint, art),
    }
    try:
        runners[args.command]()
    except (OSError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.check:
        drift = _compare(art, out)
        problems = drift + art.violations
        if not (out / art.manifest_name).exists():
            art.write(out)
        for p in problems:
            print(f"check: {p}", file=sys.stderr)
        if problems:
            return EXIT_CHECK
        print(f"check ok: {len(art.files)} files", file=sys.stderr)
        return EXIT_OK
    art.write(out)
    for v in art.violations:
        log.warning("property violation: %s", v)
    log.info("wrote %d files to %s", len(art.files) + 1, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
