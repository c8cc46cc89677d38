"""Teacher training and student distillation.

One loop serves both: with ``strategy="none"`` it minimizes plain L1 against
the HR patches; otherwise a frozen teacher adds a distillation term

    L_out = lambda_dis * L_dis + lambda_1 * L_1

tapped either at the reconstructed images (``"end"``) or at the deep features
before reconstruction (``"mid"``, through a trainable 1x1 adapter).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import functional as F
from .autodiff import Tensor, backward, no_grad, tabs, square, tmean
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    pack_params,
    save_checkpoint,
    weights_from_checkpoint,
)
from .data import Pair, sample_batch
from .functional import ConfigError
from .metrics import evaluate_pair
from .model import ModelConfig, build_model, dvmsr_features, dvmsr_forward

__all__ = [
    "TrainConfig",
    "DistillConfig",
    "AdamState",
    "TrainResult",
    "TrainingDiverged",
    "NonFiniteGradient",
    "FrozenTeacherError",
    "FULL_MILESTONES",
    "l1_loss",
    "l2_loss",
    "distill_loss",
    "compose_loss",
    "adam_step",
    "lr_at",
    "init_adapter",
    "train",
    "validate",
    "super_resolve",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

FULL_ITERATIONS = 500_000
FULL_MILESTONES = (250_000, 400_000, 450_000, 475_000)
LOG_COLUMNS = ("iteration", "lr", "loss_total", "loss_l1", "loss_dis", "val_psnr", "val_ssim")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str, dump: Path | None = None):
        self.iteration = iteration
        self.dump = dump
        where = f"; state saved to {dump}" if dump else ""
        super().__init__(f"iteration {iteration}: {detail}{where}")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class FrozenTeacherError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch: int = 8
    patch: int = 64
    lr0: float = 2e-4
    lr_milestones: tuple[int, ...] = (250, 400, 450, 475)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    scale: int = 4
    val_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """The full-length recipe: 500k iterations, batch 128, 256px patches."""
        base = dict(iterations=FULL_ITERATIONS, batch=128, patch=256, lr_milestones=FULL_MILESTONES)
        base.update(kw)
        return cls(**base)

    @classmethod
    def scaled(cls, rho: float = 1e-3, **kw) -> "TrainConfig":
        """Full-length schedule shrunk by ``rho``; batch 8 and patch 64 at desk scale.

        Milestones that coincide after rounding are merged.
        """
        if rho <= 0:
            raise ConfigError(f"schedule scale factor must be positive, got {rho}")
        iterations = max(1, round(FULL_ITERATIONS * rho))
        # very small rho can merge milestones or push them past the end; drop those
        scaled_ms = sorted({max(1, round(m * rho)) for m in FULL_MILESTONES})
        base = dict(
            iterations=iterations,
            lr_milestones=tuple(m for m in scaled_ms if m < iterations),
            batch=8,
            patch=64,
        )
        base.update(kw)
        return cls(**base)

    def validate(self) -> None:
        problems = []
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.lr0 <= 0:
            problems.append("lr0 must be > 0")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            problems.append(f"lr_milestones {list(ms)} must be strictly increasing")
        if ms and ms[-1] >= self.iterations:
            problems.append(f"lr_milestones must be < iterations ({self.iterations})")
        if self.batch < 1 or self.patch < 1 or self.scale < 1:
            problems.append("batch, patch and scale must be positive")
        elif self.patch % self.scale:
            problems.append(f"patch {self.patch} must be divisible by scale {self.scale}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            problems.append("Adam betas must lie in [0, 1) and eps must be > 0")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))

    @property
    def validation_interval(self) -> int:
        return self.val_every or max(1, self.iterations // 20)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


STRATEGIES = ("none", "mid", "end")
LOSS_KINDS = ("L1", "L2")


@dataclass(frozen=True)
class DistillConfig:
    strategy: str = "none"
    loss_kind: str = "L1"
    lambda_dis: float = 1.0
    lambda_1: float = 1.0
    teacher_checkpoint: str | None = None

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.loss_kind not in LOSS_KINDS:
            problems.append(f"loss_kind must be one of {LOSS_KINDS}")
        if self.lambda_dis < 0 or self.lambda_1 < 0:
            problems.append("loss weights must be >= 0")
        if problems:
            raise ConfigError("invalid distill config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistillConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


# -- losses -----------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return tmean(tabs(pred - target))


def l2_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return tmean(square(pred - target))


def distill_loss(teacher_out, student_out, kind: str = "L1") -> Tensor:
    """Distance between a frozen teacher signal and the student's."""
    if isinstance(teacher_out, Tensor) and (teacher_out.requires_grad or teacher_out._parents):
        raise FrozenTeacherError("teacher signal is gradient-tracked; the teacher must be frozen")
    if kind == "L1":
        return l1_loss(student_out, teacher_out)
    if kind == "L2":
        return l2_loss(student_out, teacher_out)
    raise ConfigError(f"unknown distillation loss {kind!r}")


# -- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Uses the folded step size ``lr * sqrt(1 - beta2^t) / (1 - beta1^t)`` with
    ``eps`` added to the raw second-moment root.  Missing gradients count as 0.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    t = state.t
    step = lr * math.sqrt(1.0 - beta2**t) / (1.0 - beta1**t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - step * m / (np.sqrt(v) + eps)
    return state


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    halvings = sum(1 for m in cfg.lr_milestones if m <= iteration)
    return cfg.lr0 * 0.5**halvings


# -- evaluation helpers ---------------------------------------------------------------

def super_resolve(lr_hwc: np.ndarray, weights: Mapping[str, Tensor], cfg: ModelConfig) -> np.ndarray:
    """Single (H, W, 3) image in, (rH, rW, 3) unclamped output."""
    x = Tensor(lr_hwc.transpose(2, 0, 1)[None].copy())
    with no_grad():
        y = dvmsr_forward(x, weights, cfg)
    return y.data[0].transpose(1, 2, 0)


def validate(
    pairs: Sequence[Pair], weights: Mapping[str, Tensor], cfg: ModelConfig, border: int
) -> tuple[float, float]:
    """Mean Y-channel PSNR/SSIM over ``pairs`` after 8-bit quantization."""
    reports = [evaluate_pair(super_resolve(p.lr, weights, cfg), p.hr, border) for p in pairs]
    return (
        float(np.mean([r.psnr_db for r in reports])),
        float(np.mean([r.ssim for r in reports])),
    )


# -- training loop ----------------------------------------------------------------------

def init_adapter(c_student: int, c_teacher: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0xADA])
    bound = 1.0 / math.sqrt(c_student)
    return {
        "weight": Tensor(rng.uniform(-bound, bound, (c_teacher, c_student, 1, 1)), requires_grad=True),
        "bias": Tensor(np.zeros(c_teacher), requires_grad=True),
    }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    weights: dict[str, Tensor]

    @property
    def final_val(self) -> tuple[float, float]:
        rows = [r for r in self.history if r["val_psnr"] != ""]
        return (rows[-1]["val_psnr"], rows[-1]["val_ssim"]) if rows else (math.nan, math.nan)


def _format_row(row: dict) -> list[str]:
    return [repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS]


def _rewrite_log(path: Path, upto: int) -> None:
    """Keep the header and rows with iteration <= ``upto`` (used when resuming)."""
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= upto] if rows else []
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(kept)
    path.write_text(buf.getvalue())


def compose_loss(
    sr: Tensor,
    deep: Tensor,
    hr: np.ndarray,
    teacher_signals: tuple[np.ndarray, np.ndarray] | None,
    adapter: Mapping[str, Tensor] | None,
    distill: DistillConfig,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(total, l1, l_dis)`` with ``total = lambda_dis * l_dis + lambda_1 * l1``.

    ``teacher_signals`` is the frozen teacher's ``(sr, deep)`` pair; without it
    the total is the plain L1 reconstruction loss.
    """
    l1 = l1_loss(sr, hr)
    if teacher_signals is None or distill.strategy == "none":
        return l1, l1, None
    t_sr, t_deep = teacher_signals
    if distill.strategy == "end":
        l_dis = distill_loss(t_sr, sr, distill.loss_kind)
    else:
        mapped = F.conv2d(deep, adapter["weight"], adapter["bias"])
        l_dis = distill_loss(t_deep, mapped, distill.loss_kind)
    return l_dis * distill.lambda_dis + l1 * distill.lambda_1, l1, l_dis


class _Teacher:
    def __init__(self, cfg: ModelConfig, weights: Mapping[str, Tensor]):
        self.cfg = cfg
        self.weights = weights

    def signals(self, lr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            sr, deep = dvmsr_features(Tensor(lr), self.weights, self.cfg)
        return sr.data, deep.data


def _load_teacher(distill: DistillConfig, teacher) -> _Teacher | None:
    if distill.strategy == "none":
        return None
    if teacher is None:
        if not distill.teacher_checkpoint:
            raise ConfigError(f"strategy {distill.strategy!r} needs a teacher checkpoint")
        teacher = load_checkpoint(distill.teacher_checkpoint)
    if isinstance(teacher, Checkpoint):
        return _Teacher(teacher.config, weights_from_checkpoint(teacher))
    cfg, weights = teacher
    frozen = {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v)) for k, v in weights.items()}
    return _Teacher(cfg, frozen)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
    dataset: Sequence[Pair],
    val_pairs: Sequence[Pair] = (),
    out_dir: Path | str | None = None,
    teacher: Checkpoint | tuple | None = None,
    resume: Checkpoint | Path | str | None = None,
) -> TrainResult:
    """Run the optimization loop and return the final checkpoint and per-iteration history.

    With ``out_dir`` set, ``metrics.csv`` and ``final.ckpt`` (plus periodic
    ``iter_<n>.ckpt`` files) are written there.
    """
    model_cfg.validate()
    train_cfg.validate()
    distill_cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if model_cfg.scale != train_cfg.scale:
        raise ConfigError(f"model scale {model_cfg.scale} != train scale {train_cfg.scale}")
    tch = _load_teacher(distill_cfg, teacher)
    if tch is not None and tch.cfg.scale != model_cfg.scale:
        raise ConfigError("teacher and student scales differ")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(train_cfg.seed)
    weights = build_model(model_cfg, seed=train_cfg.seed)
    adapter = None
    if distill_cfg.strategy == "mid":
        adapter = init_adapter(model_cfg.channels, tch.cfg.channels, train_cfg.seed)
    opt = AdamState()
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        weights = weights_from_checkpoint(ckpt, model_cfg, requires_grad=True)
        if adapter is not None:
            for k in adapter:
                adapter[k] = Tensor(ckpt.tensors[f"adapter.{k}"].copy(), requires_grad=True)
        opt.m = ckpt.group("adam.m.")
        opt.v = ckpt.group("adam.v.")
        opt.t = int(ckpt.meta.get("adam_t", 0))
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.iteration

    trainable = dict(weights)
    if adapter is not None:
        trainable.update({f"adapter.{k}": v for k, v in adapter.items()})

    def snapshot(iteration: int) -> Checkpoint:
        tensors = pack_params("param.", weights)
        if adapter is not None:
            tensors.update(pack_params("adapter.", adapter))
        tensors.update(pack_params("adam.m.", opt.m))
        tensors.update(pack_params("adam.v.", opt.v))
        meta = {
            "adam_t": opt.t,
            "train_config": train_cfg.to_dict(),
            "distill_config": distill_cfg.to_dict(),
        }
        return Checkpoint(model_cfg, tensors, iteration, rng.bit_generator.state, meta)

    log_path = out / "metrics.csv" if out is not None else None
    if log_path is not None:
        if start and log_path.exists():
            _rewrite_log(log_path, start)
        else:
            log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    # updates happen only after both checks, so the dump holds the pre-step weights
    def dump_and_raise(it: int, detail: str, state: Checkpoint):
        path = None
        if out is not None:
            path = out / f"diverged_iter{it}.ckpt"
            save_checkpoint(state, path)
        raise TrainingDiverged(it, detail, path)

    history = []
    val_every = train_cfg.validation_interval
    border = model_cfg.scale
    for it in range(start + 1, train_cfg.iterations + 1):
        lr_np, hr_np = sample_batch(dataset, train_cfg.batch, train_cfg.scale, train_cfg.patch, rng)
        for p in trainable.values():
            p.grad = None
        sr, deep = dvmsr_features(Tensor(lr_np), weights, model_cfg)
        signals = tch.signals(lr_np) if tch is not None else None
        total, l1, l_dis = compose_loss(sr, deep, hr_np, signals, adapter, distill_cfg)
        loss_value = total.item()
        if not math.isfinite(loss_value):
            dump_and_raise(it, f"non-finite loss {loss_value}", snapshot(it - 1))
        backward(total)
        lr = lr_at(it, train_cfg)
        try:
            adam_step(
                trainable,
                {k: p.grad for k, p in trainable.items()},
                opt,
                lr,
                train_cfg.adam_beta1,
                train_cfg.adam_beta2,
                train_cfg.adam_eps,
            )
        except NonFiniteGradient as exc:
            dump_and_raise(it, str(exc), snapshot(it - 1))
        row = {
            "iteration": it,
            "lr": lr,
            "loss_total": loss_value,
            "loss_l1": l1.item(),
            "loss_dis": l_dis.item() if l_dis is not None else 0.0,
            "val_psnr": "",
            "val_ssim": "",
        }
        if val_pairs and (it % val_every == 0 or it == train_cfg.iterations):
            row["val_psnr"], row["val_ssim"] = validate(val_pairs, weights, model_cfg, border)
            log.info("iter %d  loss %.5f  val %.3f dB", it, loss_value, row["val_psnr"])
        history.append(row)
        if log_path is not None:
            with log_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_format_row(row))
        if out is not None and train_cfg.checkpoint_every and it % train_cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(it), out / f"iter_{it}.ckpt")

    final = snapshot(train_cfg.iterations)
    if out is not None:
        save_checkpoint(final, out / "final.ckpt")
    return TrainResult(final, history, weights)
