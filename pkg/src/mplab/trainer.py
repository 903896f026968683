"""First-order bi-level training of the pattern extractor and the fusion network, plus ERM baselines.

The step functions below only rely on a small model interface, so they drive
both the full network and tiny analytic models used for oracle checks:

* ``phi_params`` / ``theta_params``: :class:`ParameterSet` objects
* ``loss(batch, phi_stats, theta_stats) -> Tensor``: training-mode forward;
  the flags say whose BatchNorm running statistics may be updated.

Batches come from any object with ``sample(domain_names) -> DomainBatch``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, atomic_write_bytes, save_checkpoint
from .config import ConfigError, RunConfig, TrainConfig, from_dict
from .data import BalancedSampler, DomainBatch, DomainData
from .models import (
    HierarchicalFusionNetwork,
    MetaPatternExtractor,
    ParameterSet,
    Prediction,
    build_extractor,
    build_hfn,
    color_lbp_map,
    compute_loss,
)
from .tensor import SgdState, Tape, Tensor, backward, default_dtype, sgd_step

__all__ = [
    "FasModel", "History", "StepResult", "Trainer", "TrainConfig",
    "split_domains", "inner_update", "meta_train_step", "erm_step", "train",
    "model_from_checkpoint",
]


# ---------------------------------------------------------------------------
# Model wrapper
# ---------------------------------------------------------------------------


class FasModel:
    """Pattern source (learned extractor or fixed map) feeding the fusion network."""

    def __init__(self, theta: HierarchicalFusionNetwork, phi: Optional[MetaPatternExtractor] = None,
                 pattern: str = "learned") -> None:
        if pattern == "learned" and phi is None:
            raise ValueError("a learned pattern needs an extractor")
        if pattern not in ("learned", "identity", "colorlbp"):
            raise ValueError(f"unknown pattern source {pattern!r}")
        self.theta = theta
        self.phi = phi if pattern == "learned" else None
        self.pattern_source = pattern
        self.phi_params = self.phi.params if self.phi is not None else ParameterSet()
        self.theta_params = theta.params

    def pattern(self, x: Tensor, training: bool = False, update_stats: bool = False) -> Tensor:
        if self.pattern_source == "learned":
            return self.phi(x, training=training, update_stats=update_stats)
        if self.pattern_source == "identity":
            return x
        return Tensor(color_lbp_map(x.data))

    def forward(self, x: Tensor, training: bool, phi_stats: bool = False, theta_stats: bool = False) -> Prediction:
        mp = self.pattern(x, training, phi_stats)
        return self.theta(x, mp, training=training, update_stats=theta_stats)

    def loss(self, batch: DomainBatch, phi_stats: bool, theta_stats: bool) -> Tensor:
        x = Tensor(np.asarray(batch.images, dtype=default_dtype()))
        return compute_loss(self.forward(x, True, phi_stats, theta_stats), batch.labels)

    def predict(self, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode (s, m) for a stack of images, computed in chunks."""
        ss, ms = [], []
        for i in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[i : i + batch_size], dtype=default_dtype()))
            pred = self.forward(x, training=False)
            ss.append(pred.s.data)
            ms.append(pred.m.data)
        return np.concatenate(ss), np.concatenate(ms)

    def scores(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        s, m = self.predict(images, batch_size)
        return metrics.score(Prediction(s, m))


# ---------------------------------------------------------------------------
# Step functions
# ---------------------------------------------------------------------------


def _apply_sgd(params: ParameterSet, lr: float, states: Optional[dict[str, SgdState]] = None) -> None:
    for name, t in params.params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        sgd_step(t, grad, lr, states.get(name) if states is not None else None)
    params.zero_grad()


def make_opt_states(params: ParameterSet, momentum: float) -> dict[str, SgdState]:
    return {name: SgdState(momentum) for name in params.names()}


def split_domains(domains: Sequence[str], rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """One randomly chosen domain for the inner (extractor) step, the rest for the outer step."""
    domains = list(domains)
    if len(domains) < 2:
        raise ValueError(f"meta training needs at least 2 source domains, got {len(domains)}")
    k = int(rng.integers(len(domains)))
    return [domains[k]], domains[:k] + domains[k + 1 :]


def inner_update(model, sampler, d_phi: Sequence[str], K: int, lr: float) -> ParameterSet:
    """K plain-SGD steps on the extractor with the fusion network frozen; returns the extractor params."""
    if not d_phi:
        raise ValueError("inner update needs at least one domain")
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    for _ in range(K):
        batch = sampler.sample(d_phi)
        with model.theta_params.frozen(), Tape() as tape:
            loss = model.loss(batch, phi_stats=True, theta_stats=False)
        model.phi_params.zero_grad()
        backward(loss, tape)
        _apply_sgd(model.phi_params, lr)
    return model.phi_params


def erm_step(model, batch: DomainBatch, lr: float, theta_opt: dict[str, SgdState],
             phi_opt: Optional[dict[str, SgdState]] = None) -> float:
    """One loss-gradient step on the fusion network, and on the extractor too when ``phi_opt`` is given.

    Without ``phi_opt`` the extractor is frozen: its output acts as a constant
    input and its gradient buffers are never written.
    """
    train_phi = phi_opt is not None
    model.theta_params.zero_grad()
    if train_phi:
        model.phi_params.zero_grad()
        with Tape() as tape:
            loss = model.loss(batch, phi_stats=True, theta_stats=True)
        backward(loss, tape)
        _apply_sgd(model.phi_params, lr, phi_opt)
    else:
        with model.phi_params.frozen(), Tape() as tape:
            loss = model.loss(batch, phi_stats=False, theta_stats=True)
        backward(loss, tape)
    _apply_sgd(model.theta_params, lr, theta_opt)
    return loss.item()


@dataclass
class StepResult:
    loss: float
    d_phi: list = field(default_factory=list)
    d_theta: list = field(default_factory=list)
    batch: Optional[DomainBatch] = None


def meta_train_step(model, sampler, domains: Sequence[str], config: TrainConfig, rng: np.random.Generator,
                    theta_opt: dict[str, SgdState]) -> StepResult:
    """Fresh split, K inner extractor steps, then one momentum step on the fusion network.

    The extractor keeps its inner-loop weights; no gradient from the outer
    loss reaches it (first-order relaxation).
    """
    d_phi, d_theta = split_domains(domains, rng)
    inner_update(model, sampler, d_phi, config.inner_steps, config.lr)
    batch = sampler.sample(d_theta)
    loss = erm_step(model, batch, config.lr, theta_opt)
    return StepResult(loss, d_phi, d_theta, batch)


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

HISTORY_HEADER = ("iter", "loss", "heldout_auc", "heldout_hter")


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else format(x, ".9g")


@dataclass
class HistoryRow:
    iter: int
    loss: float  # mean training loss over the log window ending at ``iter``
    heldout_auc: Optional[float] = None
    heldout_hter: Optional[float] = None


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)
    initial_loss: Optional[float] = None  # loss of the very first iteration

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.rows:
            w.writerow([r.iter, _fmt(r.loss), _fmt(r.heldout_auc), _fmt(r.heldout_hter)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))

    @classmethod
    def read_csv(cls, path) -> "History":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            opt = lambda v: float(v) if v else None  # noqa: E731
            rows = [HistoryRow(int(r["iter"]), float(r["loss"]), opt(r["heldout_auc"]), opt(r["heldout_hter"]))
                    for r in reader]
        return cls(rows)

    def to_json(self) -> dict:
        return {"initial_loss": self.initial_loss,
                "rows": [[r.iter, r.loss, r.heldout_auc, r.heldout_hter] for r in self.rows]}

    @classmethod
    def from_json(cls, d: dict) -> "History":
        return cls([HistoryRow(*r) for r in d["rows"]], d["initial_loss"])


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


def build_model(cfg: RunConfig, rng: np.random.Generator) -> FasModel:
    # theta first so every trainer mode starts from the same fusion-network weights
    theta = build_hfn(cfg.hfn, rng)
    if cfg.train.mode == "fixed_pattern":
        return FasModel(theta, None, cfg.train.pattern)
    return FasModel(theta, build_extractor(cfg.extractor, rng), "learned")


class Trainer:
    """Stateful training run: model, optimizer states, sampler and RNG."""

    def __init__(self, cfg: RunConfig, domains: dict[str, DomainData],
                 heldout: Optional[DomainData] = None) -> None:
        tc = cfg.train
        if not domains:
            raise ConfigError("no training domains")
        if tc.mode == "meta" and len(domains) < 2:
            raise ConfigError(f"meta mode needs at least 2 source domains, got {len(domains)}")
        self.cfg = cfg
        self.domains = domains
        self.domain_names = sorted(domains)
        self.heldout = heldout
        init_ss, run_ss = np.random.SeedSequence(tc.seed).spawn(2)
        self.model = build_model(cfg, np.random.default_rng(init_ss))
        self.rng = np.random.default_rng(run_ss)
        self.sampler = BalancedSampler(domains, self.rng, tc.batch_per_class)
        self.theta_opt = make_opt_states(self.model.theta_params, tc.momentum)
        self.phi_opt = make_opt_states(self.model.phi_params, tc.momentum) if tc.mode == "joint_erm" else None
        self.iteration = 0
        self.history = History()
        self._window: list[float] = []

    def step(self) -> float:
        tc = self.cfg.train
        if tc.mode == "meta":
            loss = meta_train_step(self.model, self.sampler, self.domain_names, tc, self.rng, self.theta_opt).loss
        else:
            batch = self.sampler.sample(self.domain_names)
            loss = erm_step(self.model, batch, tc.lr, self.theta_opt, self.phi_opt)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration + 1}")
        self.iteration += 1
        if self.history.initial_loss is None:
            self.history.initial_loss = loss
        self._window.append(loss)
        return loss

    def heldout_metrics(self) -> tuple[Optional[float], Optional[float]]:
        if self.heldout is None:
            return None, None
        rep = metrics.evaluate(self.model.scores(self.heldout.images), self.heldout.labels)
        return rep.auc, rep.hter

    def _log(self) -> None:
        tc = self.cfg.train
        it = self.iteration
        last_logged = tc.iterations - tc.iterations % tc.log_interval
        due = (tc.eval_interval and it % tc.eval_interval == 0) or it == last_logged
        a, h = self.heldout_metrics() if due else (None, None)
        self.history.rows.append(HistoryRow(it, float(np.mean(self._window)), a, h))
        self._window = []

    def run(self, out_dir=None, progress: Optional[Callable[[int, float], None]] = None) -> History:
        tc = self.cfg.train
        while self.iteration < tc.iterations:
            loss = self.step()
            if progress is not None:
                progress(self.iteration, loss)
            if self.iteration % tc.log_interval == 0:
                self._log()
            if out_dir is not None and tc.checkpoint_interval and self.iteration % tc.checkpoint_interval == 0:
                save_checkpoint(self.checkpoint(), Path(out_dir) / "checkpoint.mpck")
        if out_dir is not None:
            save_checkpoint(self.checkpoint(), Path(out_dir) / "checkpoint.mpck")
        return self.history

    # -- checkpointing ------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for prefix, ps in (("phi", self.model.phi_params), ("theta", self.model.theta_params)):
            for k, v in ps.state().items():
                tensors[f"{prefix}/{k}"] = v
        for prefix, opt in (("opt/theta", self.theta_opt), ("opt/phi", self.phi_opt or {})):
            for name, st in opt.items():
                if st.velocity is not None:
                    tensors[f"{prefix}/{name}"] = st.velocity
        meta = {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "pattern": self.model.pattern_source,
            "rng": self.rng.bit_generator.state,
            "sampler": self.sampler.state(),
            "history": self.history.to_json(),
            "window": self._window,
        }
        return Checkpoint(tensors, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a checkpoint written by a run with the same config and data."""
        if from_dict(ckpt.meta["config"]) != self.cfg:
            raise ConfigError("checkpoint config differs from this run's config")
        _load_params(self.model, ckpt)
        for prefix, opt in (("opt/theta", self.theta_opt), ("opt/phi", self.phi_opt or {})):
            for name, st in opt.items():
                key = f"{prefix}/{name}"
                st.velocity = ckpt.tensors[key].copy() if key in ckpt.tensors else None
        self.iteration = ckpt.meta["iteration"]
        self.rng.bit_generator.state = ckpt.meta["rng"]
        self.sampler.load_state(ckpt.meta["sampler"])
        self.history = History.from_json(ckpt.meta["history"])
        self._window = list(ckpt.meta["window"])


def _load_params(model: FasModel, ckpt: Checkpoint) -> None:
    for prefix, ps in (("phi", model.phi_params), ("theta", model.theta_params)):
        state = {k[len(prefix) + 1 :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + "/")}
        expected = set(ps.state())
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ValueError(f"checkpoint does not match the {prefix} architecture "
                             f"(missing {missing[:3]}, unexpected {extra[:3]})")
        ps.load_state(state)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[FasModel, RunConfig]:
    """Rebuild the network described by a checkpoint and load its weights."""
    cfg = from_dict(ckpt.meta["config"])
    model = build_model(cfg, np.random.default_rng(0))
    _load_params(model, ckpt)
    return model, cfg


def train(cfg: RunConfig, domains: dict[str, DomainData], heldout: Optional[DomainData] = None,
          out_dir=None, progress: Optional[Callable[[int, float], None]] = None) -> tuple[Checkpoint, History]:
    trainer = Trainer(cfg, domains, heldout)
    history = trainer.run(out_dir, progress)
    return trainer.checkpoint(), history
