"""Command-line entry point: ``eccoop validate|generate-case|solve|allocate|report``.

Every command that produces artifacts writes them under one run directory
together with ``manifest.json`` (config hash, case hash, file list). Exit
codes: 0 success, 1 input error, 2 model or topology error, 3 solver
failure, 4 audit failure.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import __version__
from .allocation import (
    SignatureScheme,
    allocate_base,
    allocate_exact,
    allocate_signature,
    compare_allocations,
    propose_groups,
)
from .case import NetworkCase, load_case, parse_case
from .coalitions import (
    Coalition,
    Ledger,
    ValueTable,
    evaluate_all,
    enumerate_all,
    failure_report,
    members_of,
)
from .errors import (
    AuditError,
    BackendError,
    BigMSaturatedError,
    DimensionError,
    DomainError,
    EccoopError,
    IncompleteTableError,
    InactiveCommunityError,
    InfeasibleError,
    InfeasibleTopologyError,
    MissingScheduleError,
    SchemaError,
    SolveLimitError,
    TopologyError,
    UnboundedError,
    UnhousedVariableError,
    ValidationError,
    ZeroCapacityError,
)
from .kkt import build_single_level
from .solver import SolveOptions
from .synth import BUILDERS

log = logging.getLogger("eccoop")

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_SOLVER, EXIT_AUDIT = 0, 1, 2, 3, 4
_EXIT_BY_ERROR = (
    ((SchemaError, ValidationError, DomainError, DimensionError, IncompleteTableError, ZeroCapacityError), EXIT_INPUT),
    ((TopologyError, InfeasibleTopologyError, UnhousedVariableError, InactiveCommunityError, MissingScheduleError), EXIT_MODEL),
    ((BackendError, InfeasibleError, UnboundedError, SolveLimitError, BigMSaturatedError), EXIT_SOLVER),
    ((AuditError,), EXIT_AUDIT),
)


def exit_code(exc: BaseException) -> int:
    for classes, code in _EXIT_BY_ERROR:
        if isinstance(exc, classes):
            return code
    return EXIT_INPUT


BUNDLED = tuple(BUILDERS)


def bundled_case_path(name: str):
    return resources.files("eccoop").joinpath("cases", f"{name}.json")


def read_case(ref: str) -> tuple[NetworkCase, str]:
    """Load a case from a path or a bundled case name; returns (case, source label)."""
    p = Path(ref)
    if p.exists():
        return load_case(p), str(p)
    if ref in BUNDLED:
        return parse_case(bundled_case_path(ref).read_bytes()), f"bundled:{ref}"
    raise SchemaError(f"no case file {ref!r} (bundled cases: {', '.join(BUNDLED)})")


@dataclass
class RunConfig:
    command: str
    case: str
    method: str = ""
    parallel: int = 1
    big_m: float | None = None
    gap_tol: float = 1e-6
    seed: int | None = None
    out: str = ""
    extra: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        d = {k: v for k, v in vars(self).items() if k != "out"}
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()

    def solve_options(self) -> SolveOptions:
        return SolveOptions(gap_tol=self.gap_tol, threads=1)


class RunDir:
    def __init__(self, cfg: RunConfig, case: NetworkCase | None):
        out = cfg.out or f"runs/{cfg.command}-{cfg.config_hash()[:12]}"
        self.path = Path(out)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise SchemaError(f"output directory {out!r} is not writable: {exc}") from exc
        self.cfg = cfg
        self.case = case
        self.files: list[str] = []

    def write(self, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text)
        if name not in self.files:
            self.files.append(name)
        return p

    def manifest(self, status: str = "ok") -> None:
        doc = {
            "tool": "eccoop",
            "version": __version__,
            "command": self.cfg.command,
            "config": self.cfg.canonical(),
            "config_hash": self.cfg.config_hash(),
            "case_hash": self.case.content_hash() if self.case is not None else None,
            "case_name": self.case.name if self.case is not None else None,
            "status": status,
            "files": sorted(self.files),
        }
        (self.path / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _ledger(run: RunDir, path: str | None) -> Ledger:
    return Ledger(path if path else run.path / "ledger.jsonl")


def _fail(exc: EccoopError) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    raise SystemExit(exit_code(exc))


common = [
    click.option("--parallel", default=1, show_default=True, type=click.IntRange(1, 256), help="Worker processes for coalition solves."),
    click.option("--big-m", type=float, default=None, help="Big-M constant (default: case meta)."),
    click.option("--gap-tol", type=float, default=1e-6, show_default=True, help="Relative MILP gap."),
    click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory."),
    click.option("--seed", type=int, default=None, help="Seed recorded in the run config."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="eccoop")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int):
    """Bilevel community/DSO scheduling and Shapley cost allocation."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("case")
def validate(case: str):
    """Parse CASE and audit every data and topology invariant."""
    try:
        c, src = read_case(case)
    except EccoopError as exc:
        _fail(exc)
    click.echo(f"{src}: valid")
    click.echo(f"  name={c.name} buses={len(c.buses)} lines={len(c.lines)} horizon={c.horizon} dt={c.dt_hours}h")
    click.echo(f"  communities={list(c.community_buses)} slack={c.slack.id} base_kva={c.base_kva}")
    click.echo(f"  case_hash={c.content_hash()}")


@main.command("generate-case")
@click.argument("kind", type=click.Choice(BUNDLED))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output case file.")
@click.option("--seed", type=int, default=0, show_default=True, help="Noise seed for the synthetic series.")
@click.option("--horizon", type=int, default=None, help="Number of periods (builder default if omitted).")
@click.option("--start", type=float, default=None, help="Start hour of the first period.")
def generate_case(kind: str, out: str, seed: int, horizon: int | None, start: float | None):
    """Write a synthetic case of the given KIND.

    Loads follow a residential diurnal shape with morning and evening
    peaks, PV a clipped half sine between 6:00 and 18:00, and wholesale
    prices a duck curve between 12 and 55 $/MWh; each series carries
    seed-controlled multiplicative noise.
    """
    kw = {"seed": seed}
    if horizon is not None:
        kw["horizon"] = horizon
    if start is not None:
        kw["start"] = start
    doc = BUILDERS[kind](**kw)
    text = json.dumps(doc, indent=1) + "\n"
    try:
        case = parse_case(text)
    except EccoopError as exc:
        _fail(exc)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(text)
    click.echo(f"wrote {out} (case_hash={case.content_hash()})")


def _result_summary(r) -> dict:
    return {
        "mask": r.mask,
        "members": list(r.members),
        "objective": r.objective,
        "settlement": {str(k): v for k, v in sorted(r.settlement.items())},
        "dso_cost": r.dso_cost,
        "nonparticipant_cost": {str(k): v for k, v in sorted(r.nonparticipant_cost.items())},
        "audit": r.audit,
        "provenance": r.provenance,
        "big_m": r.big_m,
        "escalations": r.escalations,
    }


def _dlmp_rows(case: NetworkCase, results) -> list[list]:
    rows = []
    for m in sorted(results):
        r = results[m]
        if r.dlmp_p is None:
            continue
        for i, b in enumerate(case.buses):
            for t in range(case.horizon):
                rows.append([m, b.id, t, float(r.dlmp_p[i, t]), float(r.dlmp_q[i, t])])
    return rows


def _schedule_rows(case: NetworkCase, results) -> tuple[list[str], list[list]]:
    from .cea import CommunitySchedule

    fields = [f for f in CommunitySchedule.FIELDS if f != "e"]
    rows = []
    for m in sorted(results):
        sched = results[m].schedule
        if sched is None:
            continue
        for b in sched.buses:
            s = sched[b]
            for t in range(case.horizon):
                rows.append([m, b, t] + [float(s[f][t]) for f in fields] + [float(s["e"][t + 1])])
    return ["coalition", "community", "period"] + fields + ["soc_end"], rows


@main.command()
@click.argument("case")
@click.option("--coalition", "coalition", default="all", show_default=True, help="all, none, a bitmask such as 0b101, or an integer.")
@click.option("--enumerate", "enumerate_", is_flag=True, help="Solve every coalition.")
@click.option("--dump-model", is_flag=True, help="Write a readable constraint listing and an MPS file per solved coalition.")
@click.option("--ledger", "ledger_path", type=click.Path(dir_okay=False), default=None, help="Ledger file (default: <out>/ledger.jsonl).")
@with_common
def solve(case, coalition, enumerate_, dump_model, ledger_path, parallel, big_m, gap_tol, out, seed):
    """Solve the single-level model for one coalition or all of them."""
    try:
        c, src = read_case(case)
        n = c.n_communities
        masks = list(range(1 << n)) if enumerate_ else [Coalition.parse(coalition, n).mask]
        cfg = RunConfig("solve", src, "exact", parallel, big_m, gap_tol, seed, out or "",
                        {"coalitions": masks if not enumerate_ else "all", "dump_model": dump_model})
        run = RunDir(cfg, c)
        ledger = _ledger(run, ledger_path)
        opts = cfg.solve_options()
        if dump_model:
            for m in masks:
                slm = build_single_level(c, members_of(m, c.community_buses), big_m)
                run.write(f"model_{m}.txt", slm.model.to_text())
                slm.model.write_mps(run.path / f"model_{m}.mps")
                run.files.append(f"model_{m}.mps")
        table = evaluate_all(c, masks, parallelism=parallel, ledger=ledger, opts=opts, big_m=big_m)
        results = table.results
        run.write("results.json", json.dumps([_result_summary(results[m]) for m in sorted(results)], indent=1, sort_keys=True) + "\n")
        run.write("dlmp.csv", _csv(["coalition", "bus", "period", "dlmp_p", "dlmp_q"], _dlmp_rows(c, results)))
        header, rows = _schedule_rows(c, results)
        run.write("schedule.csv", _csv(header, rows))
        audit = {str(m): results[m].audit for m in sorted(results)}
        audit_doc = {"passed": len(results), "failed": {str(m): e for m, e in sorted(table.failed.items())}, "coalitions": audit}
        run.write("audit.json", json.dumps(audit_doc, indent=1, sort_keys=True) + "\n")
        run.manifest("ok" if not table.failed else "partial")
        for m in sorted(results):
            r = results[m]
            click.echo(f"coalition {format(m, f'0{max(n, 1)}b')} {list(r.members)}: cost {r.objective:.6f} $  audit {r.audit['verdict']}")
        click.echo(f"{table.stats.solved} solved, {table.stats.cached} from ledger; artifacts in {run.path}")
        if table.failed:
            click.echo(failure_report(table), err=True)
            quarantined = [e for e in table.failed.values() if e.startswith("audit failed")]
            if quarantined:
                raise AuditError(f"{len(quarantined)} coalition(s) failed the residual audit")
            raise InfeasibleError(f"{len(table.failed)} coalition(s) failed to solve")
    except EccoopError as exc:
        _fail(exc)


def parse_groups(text: str, roster: tuple[int, ...]) -> SignatureScheme:
    """``"31,36;44,52"``; communities not listed become singletons."""
    groups = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            groups.append([int(b) for b in part.split(",")])
        except ValueError:
            raise ValidationError("signature-groups", f"cannot read group {part!r}") from None
    listed = {b for g in groups for b in g}
    groups += [[b] for b in roster if b not in listed]
    return SignatureScheme.from_groups(roster, groups)


@main.command()
@click.argument("case")
@click.option("--method", type=click.Choice(["exact", "signature", "base", "all"]), default="exact", show_default=True)
@click.option("--groups", default=None, help='Signature groups, e.g. "31,36;44,52"; proposed automatically if omitted.')
@click.option("--tol", type=float, default=None, help="Electrical-distance tolerance for automatic grouping.")
@click.option("--no-post-scale", is_flag=True, help="Skip capacity post-scaling of signature results.")
@click.option("--from-ledger", "ledger_path", type=click.Path(dir_okay=False), default=None, help="Reuse (and extend) this ledger.")
@with_common
def allocate(case, method, groups, tol, no_post_scale, ledger_path, parallel, big_m, gap_tol, out, seed):
    """Allocate the grand coalition's savings among communities."""
    try:
        c, src = read_case(case)
        cfg = RunConfig("allocate", src, method, parallel, big_m, gap_tol, seed, out or "",
                        {"groups": groups, "tol": tol, "post_scale": not no_post_scale})
        run = RunDir(cfg, c)
        ledger = _ledger(run, ledger_path)
        opts = cfg.solve_options()
        reports = {}
        exact_table = None
        if method in ("exact", "all"):
            if ledger_path and method == "exact":
                stored = ledger.load(c.content_hash())
                table = ValueTable.from_results(c.community_buses, stored)
                if not table.complete:
                    raise IncompleteTableError(f"ledger lacks {len(table.missing())} of {1 << c.n_communities} coalitions for exact mode")
                rep, exact_table = allocate_exact(c, table=table)
            else:
                rep, exact_table = allocate_exact(c, parallel, ledger, opts)
            reports["exact"] = rep
            run.write("value_table.json", exact_table.to_json() + "\n")
        if method in ("signature", "all"):
            scheme = parse_groups(groups, c.community_buses) if groups else propose_groups(c, tol)
            rep, sig = allocate_signature(c, scheme, parallel, ledger, opts, post_scale=not no_post_scale)
            reports["signature"] = rep
            run.write("signature_table.json", sig.table.to_json() + "\n")
        if method in ("base", "all"):
            reports["base"] = allocate_base(c, parallel, ledger, opts)
        if "exact" in reports and "signature" in reports:
            compare_allocations(reports["exact"], reports["signature"])
            run.write("error_table.csv", reports["signature"].error_csv())
        table_rows = []
        for name, rep in reports.items():
            run.write(f"allocation_{name}.json", rep.to_json() + "\n")
            run.write(f"bar_chart_{name}.csv", rep.bar_chart_csv())
            table_rows += rep.table_rows()
        run.write("allocation.csv", _csv(["method", "scenario", "community", "original_cost", "new_cost", "difference"], table_rows))
        run.manifest()
        for name, rep in reports.items():
            click.echo(f"[{name}] {rep.solve_count} coalitions solved; grand cost {rep.grand_cost:.6f} $, v(M) {rep.v_grand:.6f} $")
            for r in rep.rows:
                new = r.c_base if name == "base" else r.c_final
                click.echo(f"  community {r.bus}: individual {r.c_indiv:.6f}  saving {r.phi:.6f}  final {new:.6f}")
            if rep.errors:
                worst = max(e["rel_error"] for e in rep.errors)
                click.echo(f"  worst relative error vs exact: {worst:.3%}")
        click.echo(f"artifacts in {run.path}")
    except EccoopError as exc:
        _fail(exc)


@main.command()
@click.argument("case")
@click.option("--from-ledger", "ledger_path", type=click.Path(dir_okay=False), default=None, help="Read coalition results from this ledger.")
@with_common
def report(case, ledger_path, parallel, big_m, gap_tol, out, seed):
    """Emit DLMP and non-participant cost distributions per coalition."""
    try:
        c, src = read_case(case)
        cfg = RunConfig("report", src, "", parallel, big_m, gap_tol, seed, out or "")
        run = RunDir(cfg, c)
        ledger = _ledger(run, ledger_path)
        if ledger_path:
            results = ledger.load(c.content_hash())
        else:
            results = enumerate_all(c, parallelism=parallel, ledger=ledger, opts=cfg.solve_options(), big_m=big_m).results
        if not results:
            raise IncompleteTableError("no audited coalition results to report")
        np_rows = []
        for m in sorted(results):
            for b, v in sorted(results[m].nonparticipant_cost.items()):
                np_rows.append([m, b, v])
        run.write("nonparticipant_cost.csv", _csv(["coalition", "bus", "cost"], np_rows))
        run.write("dlmp.csv", _csv(["coalition", "bus", "period", "dlmp_p", "dlmp_q"], _dlmp_rows(c, results)))
        stats = []
        for m in sorted(results):
            p = results[m].dlmp_p
            if p is None:
                continue
            q = np.percentile(p, [0, 25, 50, 75, 100])
            stats.append([m] + [float(v) for v in q] + [float(np.mean(p))])
        run.write("dlmp_summary.csv", _csv(["coalition", "min", "p25", "median", "p75", "max", "mean"], stats))
        run.manifest()
        click.echo(f"{len(results)} coalitions reported; artifacts in {run.path}")
    except EccoopError as exc:
        _fail(exc)


def run(argv=None) -> int:
    """Entry point mapping usage errors to the input-error exit code."""
    try:
        main.main(args=argv, prog_name="eccoop", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    except EccoopError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return exit_code(exc)
    return EXIT_OK


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
