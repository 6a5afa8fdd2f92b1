"""Self-expanding low-rank adapter around a frozen linear layer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Parameter, ShapeError, Var, add, add_row, as_matrix, matmul, scale
from .rng import SeededRng, kaiming_uniform


class RankCapReached(RuntimeError):
    """Raised when ``expand`` is called on an adapter already at ``max_rank``."""


@dataclass(frozen=True)
class ExpansionEvent:
    layer_id: str
    step: int
    old_rank: int
    new_rank: int
    fi_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def weight_hash(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()


class SeLoRALinear:
    """``f(x) = x W0 + (x A) B + b0`` with frozen ``W0, b0`` and trainable ``A, B``.

    ``A`` starts as a Kaiming-uniform ``d_in x r`` matrix and ``B`` as an
    ``r x d_out`` zero matrix, so a fresh adapter reproduces the frozen layer
    exactly. ``expand`` appends a Kaiming column to ``A`` and a zero row to
    ``B``, which leaves the output unchanged.

    ``scale`` multiplies the low-rank product; it is 1 unless set for
    ablations.
    """

    def __init__(
        self,
        layer_id: str,
        W0,
        b0=None,
        rng: SeededRng | None = None,
        rank: int = 1,
        max_rank: int | None = None,
        scale: float = 1.0,
    ):
        W0 = as_matrix(W0)
        d_in, d_out = W0.shape
        b0 = np.zeros((1, d_out)) if b0 is None else as_matrix(b0)
        if b0.shape != (1, d_out):
            raise ShapeError(f"bias shape {b0.shape} does not match W0 shape {W0.shape}")
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.layer_id = layer_id
        self.max_rank = d_in if max_rank is None else int(max_rank)
        if rank > self.max_rank:
            raise ValueError(f"initial rank {rank} exceeds max_rank {self.max_rank}")
        self.scale = float(scale)
        rng = rng if rng is not None else SeededRng(0)
        self.W0 = Parameter(f"{layer_id}.W0", W0, trainable=False)
        self.b0 = Parameter(f"{layer_id}.b0", b0, trainable=False)
        self.A = Parameter(f"{layer_id}.A", kaiming_uniform(d_in, rank, rng))
        self.B = Parameter(f"{layer_id}.B", np.zeros((rank, d_out)))
        # scratch (K, zero-row) pair installed while an expansion is being probed
        self.probe: tuple[Parameter, Parameter] | None = None

    @property
    def d_in(self) -> int:
        return self.W0.shape[0]

    @property
    def d_out(self) -> int:
        return self.W0.shape[1]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def forward(self, x) -> Var:
        """Taped forward pass; ``W0 + AB`` is never materialised."""
        if not isinstance(x, (Var, Parameter)):
            x = as_matrix(x, copy=False)
        n_cols = x.shape[1] if len(x.shape) == 2 else -1
        if n_cols != self.d_in:
            raise ShapeError(f"{self.layer_id}: input has {n_cols} columns, adapter expects d_in={self.d_in}")
        low = matmul(matmul(x, self.A), self.B)
        if self.scale != 1.0:
            low = scale(low, self.scale)
        out = add(matmul(x, self.W0), low)
        if self.probe is not None:
            K, Z = self.probe
            # Z is exactly zero, so this branch adds exact zeros to the output
            out = add(out, matmul(matmul(x, K), Z))
        return add_row(out, self.b0)

    __call__ = forward

    def expand(self, rng: SeededRng | None = None, column: np.ndarray | None = None) -> None:
        """Grow the rank by one: ``A <- [A K]``, ``B <- [B; 0]``.

        ``column`` supplies ``K`` directly (e.g. the column used in a probe);
        otherwise it is drawn Kaiming-uniform from ``rng``.
        """
        if self.rank >= self.max_rank:
            raise RankCapReached(f"{self.layer_id}: rank {self.rank} is at max_rank {self.max_rank}")
        if column is None:
            if rng is None:
                raise ValueError("expand needs either rng or column")
            column = kaiming_uniform(self.d_in, 1, rng)
        column = as_matrix(column).reshape(self.d_in, 1)
        self.A.resize(np.hstack([self.A.value, column]))
        self.B.resize(np.vstack([self.B.value, np.zeros((1, self.d_out))]))

    def merge_weights(self) -> np.ndarray:
        """Dense ``W0 + scale * A B``."""
        return self.W0.value + self.scale * (self.A.value @ self.B.value)

    def trainable_param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    # -- checkpointing -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "rank": self.rank,
            "max_rank": self.max_rank,
            "scale": self.scale,
            "W0_sha256": weight_hash(self.W0.value),
            "b0_sha256": weight_hash(self.b0.value),
            "A": self.A.value.tolist(),
            "B": self.B.value.tolist(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["layer_id"] != self.layer_id:
            raise ValueError(f"checkpoint is for {state['layer_id']!r}, not {self.layer_id!r}")
        if state["W0_sha256"] != weight_hash(self.W0.value) or state["b0_sha256"] != weight_hash(self.b0.value):
            raise ValueError(f"{self.layer_id}: frozen weights do not match the checkpoint hash")
        A, B = as_matrix(state["A"]), as_matrix(state["B"])
        if A.shape != (self.d_in, state["rank"]) or B.shape != (state["rank"], self.d_out):
            raise ShapeError(f"{self.layer_id}: checkpoint factor shapes {A.shape}, {B.shape} are inconsistent")
        self.max_rank = int(state["max_rank"])
        self.scale = float(state["scale"])
        self.A.resize(A)
        self.B.resize(B)
        self.A.zero_grad()
        self.B.zero_grad()

    def __repr__(self) -> str:
        return f"SeLoRALinear({self.layer_id!r}, d_in={self.d_in}, d_out={self.d_out}, rank={self.rank})"


def save_adapters(path: str | Path, adapters: list[SeLoRALinear]) -> None:
    """Write adapter states as JSON (float repr round-trips float64 exactly)."""
    doc = {"format": "selora-adapters/1", "adapters": [a.state_dict() for a in adapters]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_adapters(path: str | Path, adapters: list[SeLoRALinear]) -> None:
    doc = json.loads(Path(path).read_text())
    by_id = {a.layer_id: a for a in adapters}
    for state in doc["adapters"]:
        if state["layer_id"] not in by_id:
            raise KeyError(f"checkpoint layer {state['layer_id']!r} has no matching adapter")
        by_id[state["layer_id"]].load_state_dict(state)
