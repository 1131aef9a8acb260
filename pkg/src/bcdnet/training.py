"""Scalable multi-level loss, Adam and a small seeded training loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import codec
from . import tensor as T
from .codec import CodecConfig, CodecModel
from .metrics import l1_distortion, ms_ssim
from .tensor import ShapeError, Tensor

LOG_FIELDS = ("step", "level", "distortion", "loss", "bpp_estimate")


@dataclass(frozen=True)
class LossWeights:
    beta: tuple

    @classmethod
    def uniform(cls, n: int) -> "LossWeights":
        return cls(tuple([1.0 / n] * n))

    def __post_init__(self):
        if any(b < 0 for b in self.beta):
            raise ValueError("level weights must be non-negative")


def distortion(kind: str, estimate: Tensor, target: Tensor) -> Tensor:
    if kind == "l1":
        return l1_distortion(estimate, target)
    if kind == "ms_ssim":
        return 1.0 - ms_ssim(estimate, target)
    raise ValueError(f"unknown distortion {kind!r}")


def image_tensor(images: np.ndarray, dtype=T.DEFAULT_DTYPE) -> Tensor:
    """(b, H, W, 3) uint8 batch as an NCHW tensor in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return Tensor((images.transpose(0, 3, 1, 2) / 255.0).astype(dtype))


def scalable_loss(
    images: np.ndarray,
    model: CodecModel,
    weights: LossWeights | None = None,
    kind: str = "l1",
    binarizer: str = "deterministic",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[float]]:
    """Weighted sum over levels of the distortion of each cumulative reconstruction.

    One encoder pass produces all branch codes; the decoder is evaluated once
    per level (batched), with the codes of branches beyond that level zeroed.
    Reconstructions enter the loss unclamped.
    """
    n = model.config.branches
    weights = weights or LossWeights.uniform(n)
    if len(weights.beta) != n:
        raise ValueError(f"{len(weights.beta)} level weights for {n} branches")
    target = image_tensor(images, model.first[0].w.dtype)
    codes = codec.code_tensors(images, model, binarizer, rng)
    levels = codec.reconstruct_levels(codes, model)
    loss = None
    per_level = []
    for beta, estimate in zip(weights.beta, levels):
        d = distortion(kind, estimate, target)
        per_level.append(d.item())
        term = d * beta
        loss = term if loss is None else loss + term
    return loss, per_level


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = OptimizerState(lr, tuple(betas), eps, weight_decay)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    steps: int = 2000
    lr: float = 5e-4
    batch_size: int = 1
    weight_decay: float = 0.0
    distortion: str = "l1"
    beta: tuple | None = None  # defaults to 1/N per level
    seed: int = 0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, level, distortion, loss, bpp_estimate)

    def level_series(self, level: int) -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[1] == level])

    def loss_series(self) -> np.ndarray:
        seen = {}
        for r in self.rows:
            seen.setdefault(r[0], r[3])
        return np.array([seen[k] for k in sorted(seen)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for step, level, dist, loss, bpp in self.rows:
            writer.writerow([step, level, repr(float(dist)), repr(float(loss)), repr(float(bpp))])
        return buf.getvalue()


def train_toy(
    patches: np.ndarray,
    config: CodecConfig,
    schedule: TrainSchedule,
    model: CodecModel | None = None,
    callback=None,
) -> tuple[CodecModel, TrainLog]:
    """Train on a (n, H, W, 3) uint8 patch array; fully determined by the seed."""
    patches = np.asarray(patches)
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError("training needs a non-empty (n, H, W, 3) patch array")
    s = config.spatial_factor
    if patches.shape[1] % s or patches.shape[2] % s:
        raise ValueError(f"patch size {patches.shape[1:3]} must be divisible by {s}")
    n = config.branches
    model = model or CodecModel.init(config, seed=schedule.seed)
    weights = LossWeights(tuple(schedule.beta)) if schedule.beta else LossWeights.uniform(n)
    optim = Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed + 1)
    bpp = codec.basic_bitrate(config)
    log = TrainLog()
    order = np.empty(0, dtype=np.int64)
    for step in range(schedule.steps):
        if len(order) < schedule.batch_size:
            order = np.concatenate([order, rng.permutation(len(patches))])
        idx, order = order[: schedule.batch_size], order[schedule.batch_size :]
        batch = patches[idx]
        optim.zero_grad()
        loss, per_level = scalable_loss(batch, model, weights, schedule.distortion, config.binarizer, rng)
        T.backward(loss)
        optim.step()
        total = loss.item()
        for level, d in enumerate(per_level, 1):
            log.rows.append((step, level, d, total, bpp * level))
        if callback is not None:
            callback(step, total, per_level)
    return model, log


def evaluate_levels(patches: np.ndarray, model: CodecModel, kind: str = "l1") -> np.ndarray:
    """Mean distortion per level (deterministic binarizer, clamped reconstructions)."""
    n = model.config.branches
    totals = np.zeros(n)
    with T.no_grad():
        for patch in np.asarray(patches):
            target = image_tensor(patch, model.first[0].w.dtype)
            codes = codec.code_tensors(patch[None], model, "deterministic")
            levels = codec.reconstruct_levels(codes, model)
            for i, est in enumerate(levels):
                totals[i] += distortion(kind, T.clamp(est, 0.0, 1.0), target).item()
    return totals / len(patches)
