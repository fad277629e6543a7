"""Adam, learning-rate schedules, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NoiseSpec, PatchBatch, SceneImages, sample_patches, synth_noise
from .errors import ConfigError, DataError, NumericalError
from .losses import gt_pyramid, multiscale_loss, psnr, ssim
from .net import DenoiserNet, net_forward
from .tensor import Tape, Tensor4

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CosineSchedule:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    total_steps: int = 2000

    def __post_init__(self):
        if not (self.lr_start > 0 and self.lr_end > 0 and self.total_steps > 0):
            raise ConfigError("cosine schedule needs positive lr_start, lr_end and total_steps")


@dataclass(frozen=True)
class StepHalfSchedule:
    lr_start: float = 3e-4
    interval: int = 20000

    def __post_init__(self):
        if not (self.lr_start > 0 and self.interval > 0):
            raise ConfigError("step-half schedule needs positive lr_start and interval")


Schedule = Union[CosineSchedule, StepHalfSchedule]


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if isinstance(schedule, StepHalfSchedule):
        return schedule.lr_start * 2.0 ** -(step // schedule.interval)
    if step >= schedule.total_steps:
        return schedule.lr_end
    t = step / schedule.total_steps
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 2e-4

    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def to_meta(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "lr": self.lr}

    @classmethod
    def from_checkpoint(cls, meta: dict, tensors: Dict[str, np.ndarray]) -> "OptimState":
        st = cls(**meta)
        for k, a in tensors.items():
            if k.startswith("adam.m."):
                st.m[k[len("adam.m."):]] = a
            elif k.startswith("adam.v."):
                st.v[k[len("adam.v."):]] = a
        return st


def adam_step(named_params: Sequence, state: OptimState, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update, in place, on (name, Tensor4) pairs."""
    for name, p in named_params:
        if p.grad is None:
            raise NumericalError(f"parameter {name!r} has no gradient")
    if lr is not None:
        state.lr = lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Tensor4], max_norm: float) -> float:
    """Scale gradients so their global l2 norm is at most ``max_norm``; return the norm before."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if total > max_norm:
        f = max_norm / total
        for p in params:
            p.grad = p.grad * f
    return total


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def batch_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint64)[0])


class TripleDataset:
    """Fixed in-memory (noisy, clean, NIR) triples; each batch draws with replacement."""

    def __init__(self, noisy: np.ndarray, clean: np.ndarray, nir: Optional[np.ndarray] = None):
        if noisy.shape != clean.shape or len(noisy) == 0:
            raise DataError("noisy and clean stacks must be non-empty and equally shaped")
        self.noisy, self.clean, self.nir = noisy, clean, nir

    def __len__(self) -> int:
        return len(self.clean)

    def batch(self, size: int, patch: int, seed: int) -> PatchBatch:
        rng = np.random.default_rng(seed)
        idx = rng.integers(len(self), size=size)
        h, w = self.clean.shape[2:]
        ys = rng.integers(h - patch + 1, size=size)
        xs = rng.integers(w - patch + 1, size=size)

        def crop(a):
            return np.stack([a[i, :, y:y + patch, x:x + patch] for i, y, x in zip(idx, ys, xs)])

        return PatchBatch(Tensor4(crop(self.noisy)), Tensor4(crop(self.clean)),
                          None if self.nir is None else Tensor4(crop(self.nir)), patch)


class SceneDataset:
    """Random patches from whole scenes, noised on the fly when no noisy image is recorded."""

    def __init__(self, scenes: Sequence[SceneImages], noise: Optional[NoiseSpec] = None,
                 augment: bool = True):
        if not scenes:
            raise DataError("dataset has no scenes")
        self.scenes, self.noise, self.augment = list(scenes), noise, augment

    def __len__(self) -> int:
        return len(self.scenes)

    def batch(self, size: int, patch: int, seed: int) -> PatchBatch:
        return sample_patches(self.scenes, size, patch, seed, augment=self.augment, noise=self.noise)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    patch: int = 32
    lr_start: float = 1e-3  # desk scale; CosineSchedule keeps the long-run 2e-4
    lr_end: float = 1e-6
    schedule: str = "cosine"
    halve_every: int = 20000
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def make_schedule(self) -> Schedule:
        if self.schedule == "cosine":
            return CosineSchedule(self.lr_start, self.lr_end, self.steps)
        if self.schedule == "step_half":
            return StepHalfSchedule(self.lr_start, self.halve_every)
        raise ConfigError(f"schedule must be 'cosine' or 'step_half', got {self.schedule!r}")


@dataclass
class TrainResult:
    curve: List[tuple]  # (step, lr, loss)
    state: OptimState

    @property
    def losses(self) -> np.ndarray:
        return np.array([c[2] for c in self.curve])


def _as_dtype(t: Optional[Tensor4], dtype) -> Optional[Tensor4]:
    if t is None or t.dtype == dtype:
        return t
    return Tensor4(t.data.astype(dtype))


def train_step(net: DenoiserNet, batch: PatchBatch, state: OptimState, lr: float,
               grad_clip: float = 1.0) -> float:
    dtype = np.dtype(net.cfg.dtype)
    noisy, clean, nir = (_as_dtype(t, dtype) for t in (batch.noisy_rgb, batch.clean_rgb, batch.nir))
    named = net.named_parameters()
    for _, p in named:
        p.grad = None
    with Tape() as tape:
        outputs = net_forward(net, noisy, nir)
        loss = multiscale_loss(outputs, gt_pyramid(clean, len(outputs)))
    value = float(loss.data.reshape(()))
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at optimizer step {state.step}")
    T.backward(tape, loss, [p for _, p in named])
    if grad_clip > 0:
        clip_grad_norm([p for _, p in named], grad_clip)
    adam_step(named, state, lr)
    return value


def save_training_checkpoint(path, net: DenoiserNet, state: OptimState, extra_meta: Optional[dict] = None) -> None:
    save_checkpoint(path, net, state.to_tensors(), {"optim": state.to_meta(), **(extra_meta or {})})


def load_training_checkpoint(path):
    """Return (net, optimizer state, meta)."""
    net, meta, extra = load_checkpoint(path)
    state = OptimState.from_checkpoint(meta.get("optim", {}), extra)
    return net, state, meta


def train(net: DenoiserNet, dataset, cfg: TrainConfig, state: Optional[OptimState] = None,
          out_dir=None, on_step: Optional[Callable[[int, float, float], None]] = None,
          until: Optional[int] = None) -> TrainResult:
    """Run optimizer steps ``state.step .. until - 1`` (``until`` defaults to ``cfg.steps``).

    Batch ``i`` depends only on (cfg.seed, i) and the schedule always spans
    ``cfg.steps``, so a run stopped early and resumed from its checkpoint
    sees the same batches and learning rates as an uninterrupted one.
    """
    stop = cfg.steps if until is None else min(until, cfg.steps)
    schedule = cfg.make_schedule()
    state = state if state is not None else OptimState(lr=lr_at(schedule, 0))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve = []
    while state.step < stop:
        step = state.step
        lr = lr_at(schedule, step)
        batch = dataset.batch(cfg.batch, cfg.patch, batch_seed(cfg.seed, step))
        try:
            loss = train_step(net, batch, state, lr, cfg.grad_clip)
        except NumericalError as e:
            raise NumericalError(f"{e} (batch id {cfg.seed}:{step})") from e
        curve.append((step, lr, loss))
        if on_step is not None:
            on_step(step, lr, loss)
        if cfg.log_every and (step % cfg.log_every == 0 or step == stop - 1):
            log.info("step %d  lr %.3e  loss %.6f", step, lr, loss)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_training_checkpoint(out / f"checkpoint_{state.step:07d}.bin", net, state)
    result = TrainResult(curve, state)
    if out is not None:
        write_loss_curve(out / "loss.csv", curve)
        save_training_checkpoint(out / "checkpoint.bin", net, state)
    return result


def write_loss_curve(path, curve: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    scene_id: str
    psnr: float
    ssim: float


@dataclass
class MetricTable:
    rows: List[MetricRow]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def lines(self) -> List[str]:
        out = ["image_id,psnr,ssim"]
        out += [f"{r.scene_id},{r.psnr:.4f},{r.ssim:.6f}" for r in self.rows]
        out.append(f"mean,{self.mean_psnr:.4f},{self.mean_ssim:.6f}")
        return out

    def write_csv(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def center_crop(arr: np.ndarray, multiple: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return arr[..., y0:y0 + nh, x0:x0 + nw]


def denoise(net: DenoiserNet, noisy: np.ndarray, nir: Optional[np.ndarray]) -> np.ndarray:
    """Full-resolution estimate for one (C, H, W) image, clipped to [0, 1]."""
    dtype = np.dtype(net.cfg.dtype)
    i_r = Tensor4(noisy[None].astype(dtype))
    i_n = None if nir is None or net.cfg.fusion_mode == "single" else Tensor4(nir[None].astype(dtype))
    return np.clip(net_forward(net, i_r, i_n)[0].data[0].astype(np.float64), 0.0, 1.0)


def evaluate(net: DenoiserNet, scenes: Sequence[SceneImages], noise: Optional[NoiseSpec] = None,
             seed: int = 0) -> MetricTable:
    """PSNR / SSIM of the network's output against the clean image, per scene.

    Scenes without a recorded noisy image are noised with ``noise`` seeded
    by (seed, scene index). Sizes not divisible by 2**(scales-1) are
    center-cropped.
    """
    m = net.cfg.multiple
    rows = []
    for i, s in enumerate(scenes):
        if s.noisy is not None:
            noisy = s.noisy
        elif noise is not None:
            noisy = synth_noise(s.clean, noise.with_seed(batch_seed(seed, i))).data[0]
        else:
            raise DataError(f"scene {s.scene_id!r} has no noisy image and no noise model was given")
        clean, nir = s.clean, s.nir
        if clean.shape[1] % m or clean.shape[2] % m:
            log.warning("scene %s: %dx%d not divisible by %d, center-cropping",
                        s.scene_id, clean.shape[1], clean.shape[2], m)
            clean, noisy = center_crop(clean, m), center_crop(noisy, m)
            nir = None if nir is None else center_crop(nir, m)
        out = denoise(net, noisy, nir)
        rows.append(MetricRow(s.scene_id, psnr(out, clean), ssim(out, clean)))
    return MetricTable(rows)
