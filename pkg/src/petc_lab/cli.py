"""Command line entry point: ``petc-lab {certify,simulate,verify,compare,sweep}``.

Exit codes: 0 success, 1 verification failure, 2 configuration / parse error,
3 assumption, domain or protocol violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .certify import CertificationConstants, estimate_constants
from .engine import run, run_periodic_baseline
from .errors import ConfigError, PetcError
from .trajlog import read_csv
from .verify import verify_run

log = logging.getLogger("petc_lab")

EXIT_OK, EXIT_VERIFY_FAILED = 0, 1


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    config_path: str | None
    tool_version: str = __version__
    seeds: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None

    def write(self, directory, name="manifest.json") -> Path:
        self.finished = _now()
        path = Path(directory) / name
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class Session:
    """Shared state of one CLI invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg = cfgmod.load(args.config)
        if args.seed is not None:
            self.cfg = self.cfg.with_values(channel__seed=int(args.seed))
        self.out = self.cfg.output_dir(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, self.cfg.digest, str(args.config))
        self.manifest.seeds = {"certify": self.cfg.get("certify.seed", 0),
                               "channel": self.cfg.get("channel.seed", 0)}

    def say(self, text):
        if not self.args.quiet:
            print(text)

    def write(self, name, text) -> Path:
        path = self.out / name
        path.write_text(text)
        self.manifest.outputs.append(str(path))
        return path

    def finish(self):
        self.manifest.write(self.out, f"{self.args.command}.manifest.json")


def _certificate(session):
    model, ls = session.cfg.model()
    constants = session.cfg.certify(model, ls)
    return model, ls, constants


def cmd_certify(session) -> int:
    _, _, c = _certificate(session)
    session.write("certificate.txt", c.report())
    session.write("certificate.csv", c.csv_header() + "\n" + c.csv_row() + "\n")
    session.manifest.parameters = {"sigma": c.sigma, "m": c.m}
    session.say(c.report().rstrip())
    return EXIT_OK


def _summary(traj):
    return (f"rows = {len(traj)}  h = {traj.h:.6e}  sends = {int(traj.sent.sum())}  "
            f"successes = {traj.success_index.size}  mean_gap = {traj.mean_gap:.6g} s")


def cmd_simulate(session) -> int:
    model, ls, c = _certificate(session)
    sim = session.cfg.sim(model, ls, c)
    traj = run(sim)
    path = session.out / session.cfg.log_name()
    traj.to_csv(path)
    session.manifest.outputs.append(str(path))
    session.manifest.parameters = {"h": sim.effective_constants().h, "nu": sim.effective_nu(),
                                   "horizon": sim.horizon, "rule": sim.rule.kind}
    session.say(_summary(traj))
    return EXIT_OK


def cmd_verify(session) -> int:
    model, ls, c = _certificate(session)
    sim = session.cfg.sim(model, ls, c)
    c_eff = sim.effective_constants()
    path = Path(session.args.log) if session.args.log else session.out / session.cfg.log_name()
    if not path.exists():
        raise ConfigError(f"trajectory log {path} not found")
    traj = read_csv(path, c_eff.h, c_eff.m)
    report = verify_run(traj, model, ls, c_eff, rule=sim.rule, nu=sim.effective_nu(),
                        tol=session.cfg.tolerance())
    session.write("verification.txt", report.to_text())
    session.write("verification.csv", report.to_csv())
    session.say(report.to_text().rstrip())
    if not report.passed:
        print("verification FAILED: " + ", ".join(report.failed), file=sys.stderr)
        return EXIT_VERIFY_FAILED
    return EXIT_OK


COMPARE_FIELDS = ["petc_mean_gap", "petc_median_gap", "baseline_mean_gap", "baseline_median_gap",
                  "petc_sends", "petc_successes", "baseline_sends", "baseline_successes",
                  "savings_ratio", "gap_ratio", "h", "h_sigma_masp", "h_masp_prior", "bound_ratio"]


def compare_rows(traj, base, c: CertificationConstants) -> dict:
    def median(t):
        g = t.gaps
        return float(np.median(g)) if g.size else float("nan")

    return {
        "petc_mean_gap": traj.mean_gap, "petc_median_gap": median(traj),
        "baseline_mean_gap": base.mean_gap, "baseline_median_gap": median(base),
        "petc_sends": int(traj.sent.sum()), "petc_successes": int(traj.success_index.size),
        "baseline_sends": int(base.sent.sum()), "baseline_successes": int(base.success_index.size),
        "savings_ratio": 1.0 - traj.sent.sum() / base.sent.sum(),
        "gap_ratio": traj.mean_gap / base.mean_gap,
        "h": traj.h, "h_sigma_masp": c.h_sigma_masp, "h_masp_prior": c.h_masp_prior,
        "bound_ratio": c.bound_ratio,
    }


def _csv_text(fields, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([f"{r[k]:.16e}" if isinstance(r[k], float) else r[k] for k in fields])
    return buf.getvalue()


def cmd_compare(session) -> int:
    model, ls, c = _certificate(session)
    sim = session.cfg.sim(model, ls, c)
    traj = run(sim)
    base = run_periodic_baseline(sim)    # fresh copy of the same channel: identical draws
    row = compare_rows(traj, base, sim.effective_constants())
    session.write("comparison.csv", _csv_text(COMPARE_FIELDS, [row]))
    session.say("\n".join(f"{k} = {row[k]}" for k in COMPARE_FIELDS))
    return EXIT_OK


SWEEP_FIELDS = ["cell", "sigma", "m", "rule", "p", "seed", "h_sigma_masp", "h_masp_prior", "h",
                "active_branch", "mean_gap", "median_gap", "successes", "verdict"]


def sweep_cells(cfg):
    axes = {
        "sigma": cfg.get("sweep.sigma", [cfg.sigma]),
        "m": cfg.get("sweep.m", [cfg.m]),
        "rule": cfg.get("sweep.rule", [cfg.get("trigger.rule", "linear")]),
        "p": cfg.get("sweep.p", [cfg.get("channel.p", 0.0)]),
        "seed": cfg.get("sweep.seed", [cfg.get("channel.seed", 0)]),
    }
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"'sweep.{k}' must be a non-empty list")
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes.values())]


def _run_cell(index, cell, cfg, model, ls, estimates, out, simulate, tol):
    cell_cfg = cfg.with_values(certify__sigma=float(cell["sigma"]), certify__m=int(cell["m"]),
                               trigger__rule=cell["rule"], channel__p=float(cell["p"]),
                               channel__seed=int(cell["seed"]), channel__m=int(cell["m"]))
    if "mode" not in cfg.get("channel", {}) and float(cell["p"]) > 0:
        cell_cfg = cell_cfg.with_values(channel__mode="bernoulli")
    cell_dir = out / f"cell_{index:04d}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("sweep-cell", cfg.digest, cfg.source, seeds={"channel": int(cell["seed"])},
                           parameters=dict(cell))
    c = cell_cfg.certify(model, ls, estimates=estimates)
    (cell_dir / "certificate.txt").write_text(c.report())
    manifest.outputs.append(str(cell_dir / "certificate.txt"))
    row = dict(cell, cell=index, h_sigma_masp=c.h_sigma_masp, h_masp_prior=c.h_masp_prior, h=c.h,
               active_branch=c.active_branch, mean_gap=float("nan"), median_gap=float("nan"),
               successes=0, verdict="skipped")
    row["sigma"], row["p"] = float(row["sigma"]), float(row["p"])
    if simulate:
        sim = cell_cfg.sim(model, ls, c)
        traj = run(sim)
        rep = verify_run(traj, model, ls, sim.effective_constants(), rule=sim.rule,
                         nu=sim.effective_nu(), tol=tol)
        (cell_dir / "verification.txt").write_text(rep.to_text())
        manifest.outputs.append(str(cell_dir / "verification.txt"))
        g = traj.gaps
        row.update(mean_gap=traj.mean_gap, median_gap=float(np.median(g)) if g.size else float("nan"),
                   successes=int(traj.success_index.size), verdict="pass" if rep.passed else "fail")
    manifest.write(cell_dir)
    return row


def cmd_sweep(session) -> int:
    cfg = session.cfg
    model, ls = cfg.model()
    cells = sweep_cells(cfg)
    simulate = bool(cfg.get("sweep.simulate", "engine" in cfg.data))
    # constants estimated once over the level set, reused by every cell
    estimates = estimate_constants(model, ls, cfg.estimation())
    threads = max(1, int(os.environ.get("PETC_LAB_THREADS", os.cpu_count() or 1)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_cell, i, cell, cfg, model, ls, estimates, session.out, simulate,
                               cfg.tolerance()) for i, cell in enumerate(cells)]
        rows = [f.result() for f in futures]
    session.write("sweep.csv", _csv_text(SWEEP_FIELDS, rows))
    session.manifest.parameters = {"cells": len(rows), "threads": threads}
    session.say(_csv_text(SWEEP_FIELDS, rows).rstrip())
    if any(r["verdict"] == "fail" for r in rows):
        print("sweep: some cells FAILED verification", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    return EXIT_OK


COMMANDS = {"certify": cmd_certify, "simulate": cmd_simulate, "verify": cmd_verify,
            "compare": cmd_compare, "sweep": cmd_sweep}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--out", default=None, help="output directory (default: [output] dir)")
    common.add_argument("--seed", type=int, default=None, help="override the channel seed")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    parser = argparse.ArgumentParser(prog="petc-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("certify", parents=[common], help="compute the certified sampling period")
    sub.add_parser("simulate", parents=[common], help="run the closed loop and write the log")
    p = sub.add_parser("verify", parents=[common], help="check a trajectory log")
    p.add_argument("--log", default=None, help="trajectory CSV (default: the simulate output)")
    sub.add_parser("compare", parents=[common], help="event-triggered vs periodic transmission")
    sub.add_parser("sweep", parents=[common], help="grid over sigma, m, rule, p, seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # argparse usage errors are configuration errors
        return 0 if exc.code == 0 else ConfigError.exit_code
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        session = Session(args)
        code = COMMANDS[args.command](session)
        session.finish()
        return code
    except PetcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
