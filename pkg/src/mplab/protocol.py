"""Leave-one-domain-out protocol runner and report CSV/table output."""

from __future__ import annotations

import csv
import io
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .config import RunConfig
from .data import DomainData
from .metrics import EvalReport, evaluate
from .trainer import FasModel, Trainer

REPORT_HEADER = ("fold", "test_domain", "auc", "hter", "far", "frr", "threshold")


def evaluate_model(model: FasModel, data: DomainData, train_domains: Sequence[str] = (), seed: int = 0) -> EvalReport:
    return evaluate(model.scores(data.images), data.labels, train_domains, data.name, seed)


def run_protocol(cfg: RunConfig, domains: dict[str, DomainData], test_domains: Optional[Sequence[str]] = None,
                 progress: Optional[Callable[[str, int, float], None]] = None) -> list[EvalReport]:
    """Train on all-but-one domain and test on the held-out one, once per fold."""
    if len(domains) < 2:
        raise ValueError(f"leave-one-domain-out needs at least 2 domains, got {len(domains)}")
    names = sorted(domains)
    reports = []
    for test in test_domains or names:
        if test not in domains:
            raise KeyError(f"unknown test domain {test!r}")
        src = {n: domains[n] for n in names if n != test}
        trainer = Trainer(cfg, src)
        cb = None if progress is None else (lambda it, loss, _t=test: progress(_t, it, loss))
        trainer.run(progress=cb)
        reports.append(evaluate_model(trainer.model, domains[test], sorted(src), cfg.train.seed))
    return reports


def summary(reports: Sequence[EvalReport]) -> dict:
    keys = ("auc", "hter", "far", "frr", "threshold")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def _fmt(x: float) -> str:
    return format(x, ".6f")


def report_rows(reports: Sequence[EvalReport], summary_label: str = "mean") -> list[list[str]]:
    rows = [[str(i), r.test_domain, _fmt(r.auc), _fmt(r.hter), _fmt(r.far), _fmt(r.frr), _fmt(r.threshold)]
            for i, r in enumerate(reports)]
    if len(reports) > 1:
        s = summary(reports)
        rows.append([summary_label, "all", *(_fmt(s[k]) for k in ("auc", "hter", "far", "frr", "threshold"))])
    return rows


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(report_rows(reports))
    return buf.getvalue()


def write_report(reports: Sequence[EvalReport], path) -> None:
    atomic_write_bytes(path, report_csv(reports).encode("utf-8"))


def format_table(reports: Sequence[EvalReport]) -> str:
    rows = [list(REPORT_HEADER)] + report_rows(reports)
    widths = [max(len(r[i]) for r in rows) for i in range(len(REPORT_HEADER))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

BENCH_HEADER = ("cell", "fusion_mode", "trainer_mode", "pattern", "K", "seed", "fold", "test_domain", "auc", "hter")


def bench_cells(cfg: RunConfig) -> list[RunConfig]:
    """One config per (fusion mode, trainer mode, K or pattern, seed) cell."""
    b = cfg.bench
    cells = []
    for fusion in b.fusion_modes:
        for mode in b.trainer_modes:
            if mode == "meta":
                variants = [{"inner_steps": k} for k in b.inner_steps]
            elif mode == "fixed_pattern":
                variants = [{"pattern": p} for p in b.patterns]
            else:
                variants = [{}]
            for v in variants:
                for seed in b.seeds:
                    cells.append(cfg.replace(hfn={"fusion_mode": fusion}, train={"mode": mode, "seed": seed, **v}))
    return cells


def cell_name(cfg: RunConfig) -> str:
    t = cfg.train
    detail = {"meta": f"K{t.inner_steps}", "fixed_pattern": t.pattern, "joint_erm": "erm"}[t.mode]
    return f"{cfg.hfn.fusion_mode}/{t.mode}/{detail}"


def run_bench(cfg: RunConfig, make_domains: Callable[[int], dict[str, DomainData]],
              progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Leave-one-domain-out protocol for every ablation cell; ``make_domains(seed)`` supplies the data."""
    rows = []
    cache: dict[int, dict[str, DomainData]] = {}
    for cell in bench_cells(cfg):
        seed = cell.train.seed
        if seed not in cache:
            cache[seed] = make_domains(seed)
        name = cell_name(cell)
        if progress is not None:
            progress(f"{name} seed={seed}")
        for fold, rep in enumerate(run_protocol(cell, cache[seed])):
            rows.append({"cell": name, "fusion_mode": cell.hfn.fusion_mode, "trainer_mode": cell.train.mode,
                         "pattern": cell.train.pattern if cell.train.mode == "fixed_pattern" else "",
                         "K": cell.train.inner_steps if cell.train.mode == "meta" else "",
                         "seed": seed, "fold": fold, "test_domain": rep.test_domain,
                         "auc": _fmt(rep.auc), "hter": _fmt(rep.hter)})
    return rows


def write_bench(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
