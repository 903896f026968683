"""Leave-one-domain-out trend runs shared by the acceptance suite.

Each (arm, seed, fold) unit is cached as JSON under ``CACHE_DIR``. The cache
key covers the numeric source files and the unit's resolved config, so any
change to the model, trainer or data generator forces recomputation. Run
``python -m tests.experiments`` to fill the cache ahead of the test suite.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import mplab
from mplab.config import RunConfig
from mplab.data import generate_domains, make_domain_specs
from mplab.protocol import evaluate_model
from mplab.trainer import Trainer

CACHE_DIR = Path(os.environ.get("MPLAB_ACCEPTANCE_CACHE", Path(__file__).resolve().parent.parent / "acceptance_cache"))
FRESH_ENV = "MPLAB_ACCEPTANCE_FRESH"
SEEDS = (0, 1, 2, 3, 4)
SOURCE_FILES = ("tensor.py", "layers.py", "models.py", "data.py", "trainer.py", "metrics.py", "config.py")

ARMS = {
    "meta_hfm": {"train": {"mode": "meta"}, "hfn": {"fusion_mode": "hfm"}},
    "fixed_identity": {"train": {"mode": "fixed_pattern", "pattern": "identity"}},
    "fixed_colorlbp": {"train": {"mode": "fixed_pattern", "pattern": "colorlbp"}},
    "meta_concat": {"train": {"mode": "meta"}, "hfn": {"fusion_mode": "concat"}},
}


def source_hash() -> str:
    h = hashlib.sha256()
    root = Path(mplab.__file__).parent
    for name in SOURCE_FILES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def arm_config(arm: str, seed: int) -> RunConfig:
    sections = {k: dict(v) for k, v in ARMS[arm].items()}
    sections.setdefault("train", {})["seed"] = seed
    return RunConfig().replace(**sections)


def _key(cfg: RunConfig, test: str) -> str:
    blob = json.dumps({"src": source_hash(), "cfg": cfg.to_dict(), "test": test}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _domains(cfg: RunConfig, _memo: dict = {}):
    d = cfg.data
    k = (d.domains, cfg.data_seed, d.resolution, d.per_class)
    if k not in _memo:
        _memo.clear()
        _memo[k] = generate_domains(make_domain_specs(d.domains, cfg.data_seed, d.resolution), d.per_class,
                                    cfg.data_seed)
    return _memo[k]


def run_unit(arm: str, seed: int, test: str, fresh: bool = False) -> dict:
    """Train one fold of one arm, or return its cached result."""
    cfg = arm_config(arm, seed)
    path = CACHE_DIR / f"{arm}-s{seed}-{test}-{_key(cfg, test)}.json"
    if path.exists() and not fresh:
        return json.loads(path.read_text(encoding="utf-8"))
    domains = _domains(cfg)
    src = {n: v for n, v in domains.items() if n != test}
    t0 = time.process_time()
    trainer = Trainer(cfg, src)
    trainer.run()
    rep = evaluate_model(trainer.model, domains[test], sorted(src), seed)
    out = {"arm": arm, "seed": seed, "test_domain": test, "auc": rep.auc, "hter": rep.hter,
           "cpu_seconds": time.process_time() - t0, "source": source_hash()}
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out, indent=1, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
    return out


def folds(seed: int) -> list[str]:
    return sorted(_domains(arm_config("meta_hfm", seed)))


def run_arm_seed(arm: str, seed: int, fresh: bool = False) -> list[dict]:
    return [run_unit(arm, seed, t, fresh) for t in folds(seed)]


def collect(arms, seeds=SEEDS, fresh: bool = False) -> dict[str, dict[int, list[dict]]]:
    return {a: {s: run_arm_seed(a, s, fresh) for s in seeds} for a in arms}


def fresh_requested() -> bool:
    return os.environ.get(FRESH_ENV, "") not in ("", "0")


def main(argv=None) -> int:
    arms = (argv or sys.argv[1:]) or list(ARMS)
    fresh = fresh_requested()
    # seed-major order so partial results cover whole seeds early
    for seed in SEEDS:
        for arm in arms:
            for r in run_arm_seed(arm, seed, fresh):
                print(f"{arm:15s} seed={seed} test={r['test_domain']} auc={r['auc']:.4f} "
                      f"hter={r['hter']:.4f} cpu={r['cpu_seconds']:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
