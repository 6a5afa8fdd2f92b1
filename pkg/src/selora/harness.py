"""Training loop for adapter-wrapped models, run reports and sweeps."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

from .adapter import ExpansionEvent, SeLoRALinear
from .autodiff import Tape, backward
from .fisher import Batch, ExpansionPolicy, batch_size, evaluate_expansions, take
from .optim import SGD, Adam, AdamConfig
from .rng import SeededRng

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, step: int, loss: float, layer_norms: dict[str, float]):
        self.step = step
        self.loss = loss
        self.layer_norms = layer_norms
        super().__init__(f"non-finite loss {loss} at step {step}")

    def diagnostic(self) -> dict:
        return {"error": "non-finite loss", "step": self.step, "loss": repr(self.loss), "layer_norms": self.layer_norms}


class Model(Protocol):
    adapters: list[SeLoRALinear]

    def loss(self, batch: Batch): ...

    def eval_loss(self, batch: Batch) -> float: ...


@dataclass
class Dataset:
    train: Batch
    test: Batch


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    policy: ExpansionPolicy = field(default_factory=ExpansionPolicy)
    seed: int = 1
    mode: str = "selora"  # or "fixed_lora"
    fixed_rank: int = 4
    eval_every: int = 100
    inject_nonfinite_at_step: int | None = None

    def __post_init__(self):
        if self.mode not in ("selora", "fixed_lora"):
            raise ValueError(f"mode must be 'selora' or 'fixed_lora', got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("total_steps", "batch_size", "fixed_rank", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class LayerInfo:
    layer_id: str
    d_in: int
    d_out: int
    final_rank: int


@dataclass
class RunReport:
    loss_curve: list[float]
    eval_losses: list[tuple[int, float]]
    rank_trajectory: list[tuple[int, dict[str, int]]]
    expansion_events: list[ExpansionEvent]
    layers: list[LayerInfo]
    final_param_count: int
    wall_time_seconds: float = 0.0

    @property
    def final_eval_loss(self) -> float:
        return self.eval_losses[-1][1]

    @property
    def final_ranks(self) -> dict[str, int]:
        return {li.layer_id: li.final_rank for li in self.layers}

    @property
    def total_final_rank(self) -> int:
        return sum(li.final_rank for li in self.layers)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "loss_curve": list(self.loss_curve),
            "eval_losses": [{"step": s, "loss": v} for s, v in self.eval_losses],
            "rank_trajectory": [{"step": s, "ranks": dict(r)} for s, r in self.rank_trajectory],
            "expansion_events": [e.to_dict() for e in self.expansion_events],
            "layers": [vars(li).copy() for li in self.layers],
            "final_param_count": self.final_param_count,
        }
        if include_timing:
            d["wall_time_seconds"] = self.wall_time_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(
            loss_curve=list(d["loss_curve"]),
            eval_losses=[(e["step"], e["loss"]) for e in d["eval_losses"]],
            rank_trajectory=[(e["step"], dict(e["ranks"])) for e in d["rank_trajectory"]],
            expansion_events=[ExpansionEvent(**e) for e in d["expansion_events"]],
            layers=[LayerInfo(**li) for li in d["layers"]],
            final_param_count=d["final_param_count"],
            wall_time_seconds=d.get("wall_time_seconds", 0.0),
        )


def _ranks(adapters) -> dict[str, int]:
    return {a.layer_id: a.rank for a in sorted(adapters, key=lambda a: a.layer_id)}


def _layer_norms(adapters) -> dict[str, float]:
    return {
        a.layer_id: float(np.sqrt(np.sum(a.A.value**2) + np.sum(a.B.value**2)))
        for a in sorted(adapters, key=lambda a: a.layer_id)
    }


def train(model: Model, data: Dataset, config: TrainConfig, on_step=None) -> RunReport:
    """Run the self-expanding training procedure.

    Each step: sample a batch, forward, MSE loss, backward, optimizer update
    of the adapter factors; then, every ``test_interval`` steps, the
    expansion test on that same batch. In ``fixed_lora`` mode the expansion
    test is skipped (the model is expected to be built at the fixed rank).
    """
    start = time.perf_counter()
    root = SeededRng(config.seed)
    batch_rng = root.child("batches")
    probe_rng = root.child("probes")
    adapters = sorted(model.adapters, key=lambda a: a.layer_id)
    params = [p for a in adapters for p in a.parameters()]
    if config.optimizer == "adam":
        opt = Adam(params, AdamConfig(lr=config.learning_rate))
    else:
        opt = SGD(params, lr=config.learning_rate)
    policy = config.policy
    n_train = batch_size(data.train)
    bs = min(config.batch_size, n_train)

    loss_curve: list[float] = []
    eval_losses: list[tuple[int, float]] = []
    trajectory = [(0, _ranks(adapters))]
    events: list[ExpansionEvent] = []

    for step in range(1, config.total_steps + 1):
        batch = take(data.train, np.sort(batch_rng.choice(n_train, bs)))
        if config.inject_nonfinite_at_step == step:
            adapters[0].B.value[0, 0] = np.nan
        with Tape():
            loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(step, value, _layer_norms(adapters))
        backward(loss)
        opt.step()
        opt.zero_grad()
        loss_curve.append(value)

        if step % policy.test_interval == 0:
            if config.mode == "selora":
                new = evaluate_expansions(adapters, batch, model.loss, policy, probe_rng, step)
                events.extend(new)
                for e in new:
                    log.debug("step %d: %s %d -> %d (ratio %.4f)", step, e.layer_id, e.old_rank, e.new_rank, e.fi_ratio)
            trajectory.append((step, _ranks(adapters)))
        if step % config.eval_every == 0 or step == config.total_steps:
            eval_losses.append((step, model.eval_loss(data.test)))
        if on_step is not None:
            on_step(step, value)

    layers = [LayerInfo(a.layer_id, a.d_in, a.d_out, a.rank) for a in adapters]
    return RunReport(
        loss_curve=loss_curve,
        eval_losses=eval_losses,
        rank_trajectory=trajectory,
        expansion_events=events,
        layers=layers,
        final_param_count=sum(a.trainable_param_count() for a in adapters),
        wall_time_seconds=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class RankRow:
    layer_id: str
    final_rank: int
    param_count: int
    share: float


def rank_report(report: RunReport) -> list[RankRow]:
    """Per-layer final rank and share of trainable parameters, sorted by layer id."""
    counts = {li.layer_id: li.final_rank * (li.d_in + li.d_out) for li in report.layers}
    total = sum(counts.values())
    rows = []
    for li in sorted(report.layers, key=lambda li: li.layer_id):
        rows.append(RankRow(li.layer_id, li.final_rank, counts[li.layer_id], counts[li.layer_id] / total))
    return rows


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties.

    Returns 0.0 when either input is constant (no ordering information).
    """
    if len(xs) != len(ys):
        raise ValueError(f"spearman: length mismatch {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("spearman needs at least two points")
    rx, ry = stats.rankdata(xs), stats.rankdata(ys)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return 0.0
    return float(np.clip(np.corrcoef(rx, ry)[0, 1], -1.0, 1.0))


@dataclass
class SweepRow:
    lambda_threshold: float
    total_final_rank: int
    final_eval_loss: float
    param_count: int
    seconds: float


def lambda_sweep(build, base_config: TrainConfig, lambdas: Sequence[float]) -> list[RunReport]:
    """One run per threshold on identical data and seeds.

    ``build()`` must return a fresh ``(model, dataset)`` pair; it is called
    once per run so no state leaks between runs.
    """
    reports = []
    for lam in lambdas:
        if lam < 1:
            log.warning("lambda %.3g < 1: every probe passes, adapters expand at every test", lam)
        model, data = build()
        cfg = replace(base_config, policy=replace(base_config.policy, lambda_threshold=lam))
        reports.append(train(model, data, cfg))
    return reports


def sweep_summary(lambdas: Sequence[float], reports: Sequence[RunReport]) -> list[SweepRow]:
    return [
        SweepRow(lam, r.total_final_rank, r.final_eval_loss, r.final_param_count, r.wall_time_seconds)
        for lam, r in zip(lambdas, reports)
    ]
