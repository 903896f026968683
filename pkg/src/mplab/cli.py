"""``mplab`` command-line entry point."""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from . import plotting, protocol
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    ManifestError,
    generate_domain,
    generate_domains,
    load_manifest,
    make_domain_specs,
    read_png,
    save_png,
    write_manifest,
)
from .gradcheck import TOLERANCE, run_suite
from .tensor import Tensor
from .trainer import Trainer, model_from_checkpoint

THREADS_ENV = "MPLAB_THREADS"


class CliError(Exception):
    pass


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError(f"{THREADS_ENV} must be >= 0, got {n}")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = config_mod.load(path) if path else RunConfig()
    if seed is not None:
        cfg = cfg.replace(train={"seed": seed})
    return cfg


def _domains_for(cfg: RunConfig, root: Optional[str] = None):
    root = root or cfg.data.root
    if root:
        return load_manifest(root).to_domains()
    d = cfg.data
    specs = make_domain_specs(d.domains, cfg.data_seed, d.resolution)
    return generate_domains(specs, d.per_class, cfg.data_seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    specs = make_domain_specs(args.domains, args.seed, args.resolution)
    samples = [s for spec in specs for s in generate_domain(spec, args.per_class, args.seed)]
    path = write_manifest(samples, args.out)
    print(f"wrote {len(samples)} images in {len(specs)} domains; manifest {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.resolved")
    domains = _domains_for(cfg)
    heldout = None
    if cfg.data.test_domain:
        if cfg.data.test_domain not in domains:
            raise CliError(f"test_domain {cfg.data.test_domain!r} not among {sorted(domains)}")
        heldout = domains.pop(cfg.data.test_domain)
    trainer = Trainer(cfg, domains, heldout)
    every = max(1, cfg.train.iterations // 10)

    def progress(it: int, loss: float) -> None:
        if it % every == 0 or it == cfg.train.iterations:
            _log(f"iter {it}/{cfg.train.iterations} loss {loss:.4f}")

    history = trainer.run(out, progress)
    history.write_csv(out / "history.csv")
    plotting.plot_history(history, out / "history.png")
    print(f"trained {cfg.train.mode} on {', '.join(sorted(domains))}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    domains = load_manifest(args.data).to_domains()
    if args.protocol == "loo":
        _, cfg = model_from_checkpoint(ckpt)
        reports = protocol.run_protocol(cfg, domains, progress=None)
    else:
        model, cfg = model_from_checkpoint(ckpt)
        reports = [protocol.evaluate_model(model, domains[n], seed=cfg.train.seed) for n in sorted(domains)]
    out.mkdir(parents=True, exist_ok=True)
    protocol.write_report(reports, out / "report.csv")
    plotting.plot_roc(reports, out / "roc.png")
    print(protocol.format_table(reports))
    return 0


def cmd_extract(args) -> int:
    model, _ = model_from_checkpoint(load_checkpoint(args.checkpoint))
    img = read_png(args.image)
    mp = model.pattern(Tensor(img[None]), training=False)
    save_png(mp.data[0], args.out)
    print(f"wrote {model.pattern_source} pattern to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    def report(r) -> None:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:20s} trials={r.trials:<4d} max_rel_err={r.max_rel_error:.2e} {r.seconds:6.1f}s  {status}",
              flush=True)

    results = run_suite(trials=args.trials, seed=args.seed, names=args.only or None, report=report)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) exceeded relative error {TOLERANCE:g}: {', '.join(failed)}")
        return 1
    print("all checks passed")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, None)
    out = Path(args.out)

    def make_domains(seed: int):
        if cfg.data.root:
            return load_manifest(cfg.data.root).to_domains()
        return _domains_for(cfg.replace(train={"seed": seed}))

    rows = protocol.run_bench(cfg, make_domains, progress=lambda m: _log(f"bench: {m}"))
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.resolved")
    protocol.write_bench(rows, out / "bench.csv")
    plotting.plot_bench(rows, out / "bench_auc.png", "auc")
    plotting.plot_bench(rows, out / "bench_hter.png", "hter")
    cells: dict[str, list[float]] = {}
    for r in rows:
        cells.setdefault(r["cell"], []).append(float(r["auc"]))
    for name, aucs in cells.items():
        print(f"{name:32s} mean AUC {np.mean(aucs):.4f} over {len(aucs)} fold(s)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mplab", description="Meta Pattern learning for face anti-spoofing.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="write a synthetic multi-domain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--per-class", type=int, default=150)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, or rerun its config leave-one-domain-out")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=["loo"])
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("extract", help="dump the pattern of one image as PNG")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", nargs="*", help="run only these checks")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="ablation matrix: fusion mode x trainer mode x K")
    b.add_argument("--config")
    b.add_argument("--out", default="bench_out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (CliError, ConfigError, ManifestError, CheckpointError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mplab {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
