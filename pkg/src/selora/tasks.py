"""Synthetic fine-tuning tasks with adapter-wrapped frozen models."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapter import SeLoRALinear
from .autodiff import Parameter, Tape, add, add_row, backward, matmul, mse_loss, relu, scale, softmax_rows, transpose
from .optim import Adam, AdamConfig
from .fisher import Batch
from .harness import Dataset
from .rng import SeededRng


class SpecError(ValueError):
    pass


def _split(arrays: tuple[np.ndarray, ...], frac: float = 0.8) -> Dataset:
    n = len(arrays[0])
    cut = int(round(frac * n))
    return Dataset(train=tuple(a[:cut] for a in arrays), test=tuple(a[cut:] for a in arrays))


# ---------------------------------------------------------------------------
# teacher-student rank recovery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearTeacherSpec:
    layer_dims: tuple[tuple[int, int], ...] = ((48, 48), (48, 48), (48, 48))
    true_ranks: tuple[int, ...] = (1, 3, 6)
    noise_std: float = 0.01
    n_samples: int = 1000
    seed: int = 1

    def validate(self) -> None:
        if len(self.layer_dims) != len(self.true_ranks):
            raise SpecError(f"{len(self.layer_dims)} layer dims but {len(self.true_ranks)} true ranks")
        if not self.layer_dims:
            raise SpecError("need at least one layer")
        for l, ((d_in, d_out), r) in enumerate(zip(self.layer_dims, self.true_ranks)):
            if d_in < 1 or d_out < 1:
                raise SpecError(f"layer {l}: dimensions must be positive, got {(d_in, d_out)}")
            if not 0 <= r <= min(d_in, d_out):
                raise SpecError(f"layer {l}: true rank {r} outside [0, {min(d_in, d_out)}]")
        if self.noise_std < 0:
            raise SpecError("noise_std must be >= 0")
        if self.n_samples < 5:
            raise SpecError("n_samples must be >= 5 for an 80/20 split")


def teacher_layer_id(l: int) -> str:
    return f"layer.{l:02d}"


def gen_linear_teacher(spec: LinearTeacherSpec):
    """Frozen base weights, teacher weights and an 80/20 dataset.

    Layers are independent regressions: layer ``l`` maps its own Gaussian
    input block to its own output block, and its teacher differs from the
    base by a product ``U V`` of exact rank ``true_ranks[l]``. The batch
    layout is ``(x_0, y_0, x_1, y_1, ...)``.
    """
    spec.validate()
    rng = SeededRng(spec.seed).child("linear-teacher")
    base, teacher, arrays = [], [], []
    for (d_in, d_out), k in zip(spec.layer_dims, spec.true_ranks):
        W0 = rng.normal((d_in, d_out), std=1.0 / np.sqrt(d_in))
        U = rng.normal((d_in, k))
        V = rng.normal((k, d_out))
        # equal update energy per layer whatever its rank
        W = W0 + (U @ V) / np.sqrt(max(k, 1))
        x = rng.normal((spec.n_samples, d_in))
        y = x @ W + rng.normal((spec.n_samples, d_out), std=spec.noise_std)
        base.append(W0)
        teacher.append(W)
        arrays += [x, y]
    return base, teacher, _split(tuple(arrays))


class LinearStudent:
    """Independent adapter-wrapped linear layers, one per teacher layer."""

    def __init__(self, base_weights, seed: int = 1, rank: int = 1, max_rank: int | None = None):
        init = SeededRng(seed).child("init")
        self.adapters = [
            SeLoRALinear(teacher_layer_id(l), W0, rng=init.child(teacher_layer_id(l)), rank=rank, max_rank=max_rank)
            for l, W0 in enumerate(base_weights)
        ]
        self._total_out = sum(a.d_out for a in self.adapters)

    def loss(self, batch: Batch):
        # MSE over all output entries of all layers
        total = None
        for l, a in enumerate(self.adapters):
            x, y = batch[2 * l], batch[2 * l + 1]
            term = mse_loss(a(x), y) * (a.d_out / self._total_out)
            total = term if total is None else total + term
        return total

    def eval_loss(self, batch: Batch) -> float:
        return self.loss(batch).item()

    def layer_losses(self, batch: Batch) -> list[float]:
        return [mse_loss(a(batch[2 * l]), batch[2 * l + 1]).item() for l, a in enumerate(self.adapters)]


def least_squares_fit(x: np.ndarray, y: np.ndarray, rank: int | None = None) -> np.ndarray:
    """Least-squares weight for ``x W ~ y``, optionally truncated to ``rank`` (reduced-rank regression)."""
    W, *_ = np.linalg.lstsq(x, y, rcond=None)
    if rank is None:
        return W
    fitted = x @ W
    _, _, vt = np.linalg.svd(fitted, full_matrices=False)
    P = vt[:rank].T @ vt[:rank]
    return W @ P


# ---------------------------------------------------------------------------
# toy conditional denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDenoiserSpec:
    image_dim: int = 16
    text_dim: int = 8
    hidden_dim: int = 32
    n_attention_blocks: int = 2
    n_image_tokens: int = 4
    n_text_tokens: int = 3
    n_classes: int = 4
    n_fillers: int = 4
    noise_level: float = 0.5
    n_samples: int = 1000
    pretrain_steps: int = 400
    pretrain_lr: float = 0.01
    zero_condition: bool = False
    seed: int = 1

    @property
    def vocab_size(self) -> int:
        return self.n_classes + self.n_fillers

    def validate(self) -> None:
        for name in ("image_dim", "text_dim", "hidden_dim", "n_attention_blocks", "n_image_tokens",
                     "n_text_tokens", "n_classes", "n_fillers", "n_samples", "pretrain_steps"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.n_samples < 5:
            raise SpecError("n_samples must be >= 5 for an 80/20 split")
        if self.noise_level < 0 or self.pretrain_lr <= 0:
            raise SpecError("noise_level must be >= 0 and pretrain_lr > 0")


class _Dense:
    """Plain trainable linear map, used only while pretraining the base network."""

    def __init__(self, name: str, W: np.ndarray, b: np.ndarray):
        self.W = Parameter(f"{name}.W", W)
        self.b = Parameter(f"{name}.b", b)

    def __call__(self, x):
        return add_row(matmul(x, self.W), self.b)


def denoiser_layer_shapes(spec: ToyDenoiserSpec) -> dict[str, tuple[int, int]]:
    h, ff = spec.hidden_dim, 2 * spec.hidden_dim
    shapes = {"in": (spec.image_dim, h), "out": (h, spec.image_dim)}
    for b in range(spec.n_attention_blocks):
        p = f"blk{b}"
        shapes.update({
            f"{p}.self.q": (h, h), f"{p}.self.k": (h, h), f"{p}.self.v": (h, h), f"{p}.self.o": (h, h),
            f"{p}.cross.q": (h, h), f"{p}.cross.k": (spec.text_dim, h),
            f"{p}.cross.v": (spec.text_dim, h), f"{p}.cross.o": (h, h),
            f"{p}.ff.1": (h, ff), f"{p}.ff.2": (ff, h),
        })
    return dict(sorted(shapes.items()))


def _block_mask(n: int, rows_per: int, cols_per: int) -> np.ndarray:
    # additive mask keeping attention inside each sample of a stacked batch
    same = np.kron(np.eye(n), np.ones((rows_per, cols_per)))
    return np.where(same > 0, 0.0, -1e9)


class ToyDenoiser:
    """Two-stage (self- then cross-attention) residual denoiser over image tokens.

    A batch is ``(noisy, cond, clean)`` with shapes ``(n, T, image_dim)``,
    ``(n, L)`` integer tokens and ``(n, T, image_dim)``. Samples are stacked
    row-wise and attention is masked to stay within a sample. Each layer
    is looked up by id in ``layers``, so the same forward serves the
    pretraining net and the adapter-wrapped net.
    """

    def __init__(self, spec: ToyDenoiserSpec, layers: dict, embedding: np.ndarray):
        self.spec = spec
        self.layers = layers
        self.embedding = embedding
        self.adapters = sorted(
            (m for m in layers.values() if isinstance(m, SeLoRALinear)), key=lambda a: a.layer_id
        )
        self._masks: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _mask(self, n: int):
        if n not in self._masks:
            T, L = self.spec.n_image_tokens, self.spec.n_text_tokens
            self._masks[n] = (_block_mask(n, T, T), _block_mask(n, T, L))
        return self._masks[n]

    def _attend(self, q, k, v, mask):
        scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(self.spec.hidden_dim))
        return matmul(softmax_rows(add(scores, mask)), v)

    def predict(self, noisy: np.ndarray, cond: np.ndarray):
        s, L = self.spec, self.layers
        n = noisy.shape[0]
        self_mask, cross_mask = self._mask(n)
        x = noisy.reshape(n * s.n_image_tokens, s.image_dim)
        c = self.embedding[cond.reshape(-1)]
        h = L["in"](x)
        for b in range(s.n_attention_blocks):
            p = f"blk{b}"
            a = self._attend(L[f"{p}.self.q"](h), L[f"{p}.self.k"](h), L[f"{p}.self.v"](h), self_mask)
            h = add(h, L[f"{p}.self.o"](a))
            a = self._attend(L[f"{p}.cross.q"](h), L[f"{p}.cross.k"](c), L[f"{p}.cross.v"](c), cross_mask)
            h = add(h, L[f"{p}.cross.o"](a))
            h = add(h, L[f"{p}.ff.2"](relu(L[f"{p}.ff.1"](h))))
        return L["out"](h)

    def loss(self, batch: Batch):
        noisy, cond, clean = batch
        target = clean.reshape(-1, self.spec.image_dim)
        return mse_loss(self.predict(noisy, cond), target)

    def eval_loss(self, batch: Batch) -> float:
        return self.loss(batch).item()


def _denoiser_data(spec: ToyDenoiserSpec, rng: SeededRng, prototypes: np.ndarray, conditional: bool):
    n, T, L = spec.n_samples, spec.n_image_tokens, spec.n_text_tokens
    labels = rng.integers(spec.n_classes, n)
    clean = prototypes[labels] + 0.3 * rng.normal((n, T * spec.image_dim)).reshape(n, T, spec.image_dim)
    noisy = clean + spec.noise_level * rng.normal((n, T * spec.image_dim)).reshape(n, T, spec.image_dim)
    # one class token at a random position among filler tokens
    cond = spec.n_classes + rng.integers(spec.n_fillers, n * L).reshape(n, L)
    pos = rng.integers(L, n)
    cond[np.arange(n), pos] = labels if conditional else cond[np.arange(n), pos]
    return noisy, cond, clean


def gen_toy_denoiser_task(spec: ToyDenoiserSpec, rank: int = 1, max_rank: int | None = None, adapter_seed: int | None = None):
    """Pretrained frozen denoiser wrapped with adapters, plus the conditional fine-tuning data.

    The base net is pretrained on unconditional denoising (condition
    embeddings zeroed, so cross-attention sees nothing). The fine-tuning
    targets come from the same class-prototype mixture, but the condition
    now names the class, which only cross-attention can pick up. With
    ``zero_condition`` the fine-tuning task is the pretraining task.
    """
    spec.validate()
    root = SeededRng(spec.seed).child("toy-denoiser")
    wrng, drng = root.child("weights"), root.child("data")
    T = spec.n_image_tokens
    prototypes = 1.0 * drng.normal((spec.n_classes, T * spec.image_dim)).reshape(spec.n_classes, T, spec.image_dim)
    embedding = wrng.normal((spec.vocab_size, spec.text_dim))

    dense = {}
    for lid, (d_in, d_out) in denoiser_layer_shapes(spec).items():
        gain = 0.5 if lid.endswith((".o", ".ff.2")) else 1.0
        dense[lid] = _Dense(lid, gain * wrng.normal((d_in, d_out), std=1.0 / np.sqrt(d_in)), np.zeros((1, d_out)))

    # unconditional pretraining: condition embeddings are all zero
    pre_spec = replace(spec, n_samples=max(spec.n_samples, 1000))
    pre = ToyDenoiser(spec, dense, np.zeros_like(embedding))
    pdata = _denoiser_data(pre_spec, root.child("pretrain-data"), prototypes, conditional=False)
    params = [p for d in dense.values() for p in (d.W, d.b)]
    opt = Adam(params, AdamConfig(lr=spec.pretrain_lr))
    brng = root.child("pretrain-batches")
    for _ in range(spec.pretrain_steps):
        idx = np.sort(brng.choice(len(pdata[0]), 32))
        with Tape():
            loss = pre.loss(tuple(a[idx] for a in pdata))
        backward(loss)
        opt.step()
        opt.zero_grad()

    init = SeededRng(spec.seed if adapter_seed is None else adapter_seed).child("init")
    layers = {
        lid: SeLoRALinear(lid, d.W.value, d.b.value, rng=init.child(lid), rank=rank, max_rank=max_rank)
        for lid, d in dense.items()
    }
    emb = np.zeros_like(embedding) if spec.zero_condition else embedding
    model = ToyDenoiser(spec, layers, emb)
    data = _denoiser_data(spec, drng, prototypes, conditional=not spec.zero_condition)
    return model, _split(data)
