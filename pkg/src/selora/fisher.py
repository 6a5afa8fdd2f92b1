"""Empirical Fisher information and the rank-expansion test.

The Fisher value of a weight is the batch mean of its squared per-sample
loss gradient. An adapter's score sums those values over every entry of
``A`` and ``B``. To decide on an expansion, a candidate column ``K`` and an
all-zero row are attached to the adapter as a side branch (leaving the
forward pass bit-identical), the score is measured with and without the new
entries on the same batch, and the adapter grows when
``score_exp / score_orig >= lambda``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .adapter import ExpansionEvent, RankCapReached, SeLoRALinear
from .autodiff import Parameter, Tape, UsageError, Var, grad
from .rng import SeededRng, kaiming_uniform

log = logging.getLogger(__name__)

Batch = tuple  # tuple of arrays sharing the leading (sample) axis
LossFn = Callable[[Batch], Var]

ORIENTATIONS = ("exp-over-orig", "paper-literal")


def batch_size(batch: Batch) -> int:
    return len(batch[0])


def take(batch: Batch, idx) -> Batch:
    """Sub-batch of the samples at ``idx`` (an int keeps a length-1 leading axis)."""
    if isinstance(idx, (int, np.integer)):
        idx = slice(int(idx), int(idx) + 1)
    return tuple(a[idx] for a in batch)


@dataclass
class FisherEstimate:
    layer_id: str
    fisher_A: np.ndarray
    fisher_B: np.ndarray
    batch_size: int


@dataclass(frozen=True)
class ExpansionPolicy:
    lambda_threshold: float = 1.1
    test_interval: int = 40
    probe_batch_size: int | None = None  # None: the whole training batch
    ratio_orientation: str = "exp-over-orig"

    def __post_init__(self):
        if not self.lambda_threshold > 0:
            raise ValueError(f"lambda_threshold must be > 0, got {self.lambda_threshold}")
        if self.test_interval < 1:
            raise ValueError(f"test_interval must be >= 1, got {self.test_interval}")
        if self.probe_batch_size is not None and self.probe_batch_size < 1:
            raise ValueError(f"probe_batch_size must be >= 1, got {self.probe_batch_size}")
        if self.ratio_orientation not in ORIENTATIONS:
            raise ValueError(f"ratio_orientation must be one of {ORIENTATIONS}, got {self.ratio_orientation!r}")


def per_sample_sq_grad_mean(params: Sequence[Parameter], batch: Batch, loss_fn: LossFn) -> list[np.ndarray]:
    """``(1/|B|) sum_i (dL(b_i)/dw)^2`` for every entry of every parameter.

    One forward/backward per sample on a private tape; ``param.grad`` is not
    touched.
    """
    n = batch_size(batch)
    if n == 0:
        raise UsageError("empirical Fisher needs a non-empty batch")
    acc = [np.zeros_like(p.value) for p in params]
    for i in range(n):
        with Tape():
            loss = loss_fn(take(batch, i))
        for a, g in zip(acc, grad(loss, params)):
            a += g * g
    return [a / n for a in acc]


def empirical_fisher(adapter: SeLoRALinear, batch: Batch, loss_fn: LossFn) -> FisherEstimate:
    fA, fB = per_sample_sq_grad_mean([adapter.A, adapter.B], batch, loss_fn)
    return FisherEstimate(adapter.layer_id, fA, fB, batch_size(batch))


def _exact_sum(*arrays: np.ndarray) -> float:
    # correctly rounded, so the score does not depend on summation order
    return math.fsum(v for a in arrays for v in a.ravel().tolist())


def fi_score(est: FisherEstimate) -> float:
    return _exact_sum(est.fisher_A, est.fisher_B)


def ratio_from_scores(score_orig: float, score_exp: float, orientation: str = "exp-over-orig") -> float:
    if orientation == "paper-literal":
        num, den = score_orig, score_exp
    else:
        num, den = score_exp, score_orig
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


@dataclass
class ProbeResult:
    layer_id: str
    column: np.ndarray
    score_orig: float
    score_exp: float
    ratio: float


def _attach_probe(adapter: SeLoRALinear, column: np.ndarray) -> tuple[Parameter, Parameter]:
    K = Parameter(f"{adapter.layer_id}.K", column)
    Z = Parameter(f"{adapter.layer_id}.B_new", np.zeros((1, adapter.d_out)))
    adapter.probe = (K, Z)
    return K, Z


def probe_expansions(
    adapters: Sequence[SeLoRALinear],
    batch: Batch,
    loss_fn: LossFn,
    columns: Sequence[np.ndarray],
    orientation: str = "exp-over-orig",
) -> list[ProbeResult]:
    """Score the expansion of each adapter by its given candidate column.

    All probes share one per-sample sweep. Because every probe branch adds
    exact zeros, each adapter sees the same forward values and the same
    upstream gradients as when probed alone, so the results equal separate
    single-adapter probes.
    """
    if batch_size(batch) == 0:
        raise UsageError("fi_ratio needs a non-empty batch")
    probes = []
    try:
        for adapter, col in zip(adapters, columns):
            probes.append(_attach_probe(adapter, col))
        params = []
        for adapter, (K, Z) in zip(adapters, probes):
            params += [adapter.A, adapter.B, K, Z]
        fisher = per_sample_sq_grad_mean(params, batch, loss_fn)
    finally:
        for adapter in adapters:
            adapter.probe = None
    out = []
    for j, (adapter, col) in enumerate(zip(adapters, columns)):
        fA, fB, fK, fZ = fisher[4 * j : 4 * j + 4]
        orig = _exact_sum(fA, fB)
        exp = _exact_sum(fA, fB, fK, fZ)
        out.append(ProbeResult(adapter.layer_id, col, orig, exp, ratio_from_scores(orig, exp, orientation)))
    return out


def fi_ratio(
    adapter: SeLoRALinear,
    batch: Batch,
    loss_fn: LossFn,
    rng: SeededRng,
    orientation: str = "exp-over-orig",
) -> float:
    """FI-Score of the hypothetically expanded adapter over that of the current one.

    The adapter is left unchanged. +inf when the current score is 0 and the
    expanded one is not; 1 when both are 0.
    """
    col = kaiming_uniform(adapter.d_in, 1, rng)
    return probe_expansions([adapter], batch, loss_fn, [col], orientation)[0].ratio


def evaluate_expansions(
    adapters: Sequence[SeLoRALinear],
    batch: Batch,
    loss_fn: LossFn,
    policy: ExpansionPolicy,
    rng: SeededRng,
    step: int,
    probes_out: list | None = None,
) -> list[ExpansionEvent]:
    """Expansion test of one training step; a no-op unless ``step % t == 0``.

    Every adapter draws its candidate column in ``layer_id`` order (capped
    adapters too, so the stream does not depend on which layers are capped),
    and accepted expansions install exactly the probed column.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step % policy.test_interval != 0:
        return []
    ordered = sorted(adapters, key=lambda a: a.layer_id)
    columns = [kaiming_uniform(a.d_in, 1, rng) for a in ordered]
    if policy.probe_batch_size is not None:
        batch = take(batch, slice(0, policy.probe_batch_size))
    results = probe_expansions(ordered, batch, loss_fn, columns, policy.ratio_orientation)
    if probes_out is not None:
        probes_out.extend(results)
    events = []
    for adapter, res in zip(ordered, results):
        if res.ratio < policy.lambda_threshold:
            continue
        old = adapter.rank
        try:
            adapter.expand(column=res.column)
        except RankCapReached as exc:
            log.info("step %d: skip expansion (%s)", step, exc)
            continue
        events.append(ExpansionEvent(adapter.layer_id, step, old, adapter.rank, res.ratio))
    return events
