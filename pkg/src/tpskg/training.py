"""SGD with momentum, cosine schedule, and the joint training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SyntheticDataset, augment_batch
from .knowledge import DEFAULT_MU
from .model import MODES, TPSKGModel
from .tensor import Tape, Tensor
from .vit import Params


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a training step produces a non-finite value."""

    def __init__(self, tensor_name: str, epoch: int, step: int):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite value in {tensor_name!r} at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-3
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 30
    mu: float = DEFAULT_MU
    seed: int = 0
    mode: str = "full"
    precision: int = 32
    top_k: int = 1
    pad: int = 1

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be at least 1")
        if self.mu < 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.top_k < 1 or self.pad < 0:
            raise ValueError("top_k must be >= 1 and pad >= 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Classic momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Params, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            v *= p.data.dtype.type(self.momentum)
            v += p.grad
            p.data -= p.data.dtype.type(lr) * v

    def zero_grad(self) -> None:
        self.params.zero_grad()


def sgd_step(params: Params, state: SGD, lr: float) -> None:
    state.step(lr)


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    lr: float
    loss_total: float
    loss_kl: float
    loss_rep: float
    train_acc: float
    test_acc: float
    wall_ms: float = 0.0

    def deterministic_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_ms")
        return d


@dataclass
class EpochAccumulator:
    loss_total: float = 0.0
    loss_kl: float = 0.0
    loss_rep: float = 0.0
    correct: int = 0
    seen: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.loss_total, self.loss_kl, self.loss_rep, self.correct, self.seen], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "EpochAccumulator":
        return cls(float(a[0]), float(a[1]), float(a[2]), int(a[3]), int(a[4]))


def _first_nonfinite(model: TPSKGModel, art) -> str | None:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            return name
    for name in ("y", "logits_kl", "r", "delta", "u_logits", "loss_kl", "loss_rep", "loss_total"):
        t = getattr(art, name)
        if isinstance(t, Tensor) and not np.all(np.isfinite(t.data)):
            return name
    return None


@dataclass
class Trainer:
    """Owns the model, optimizer and position in the schedule.

    Batch order and augmentation draws are derived from (seed, epoch, step),
    so a trainer restored from a checkpoint continues exactly where the
    original left off.
    """

    model: TPSKGModel
    train_set: SyntheticDataset
    test_set: SyntheticDataset
    config: TrainConfig
    epoch: int = 0
    batch_index: int = 0
    global_step: int = 0
    acc: EpochAccumulator = field(default_factory=EpochAccumulator)
    optimizer: SGD = None
    _wall_start: float | None = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = SGD(self.model.params, self.config.momentum)
        self._images = self.train_set.images.astype(self.config.dtype)
        self._test_images = self.test_set.images.astype(self.config.dtype)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.train_set) // self.config.batch)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.epochs

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_set))

    def step(self) -> dict:
        """One optimizer step on the next batch. Returns the step's losses."""
        cfg = self.config
        order = self.epoch_order(self.epoch)
        idx = order[self.batch_index * cfg.batch:(self.batch_index + 1) * cfg.batch]
        rng = np.random.default_rng([cfg.seed, self.epoch, self.batch_index, 1])
        images = augment_batch(self._images[idx], rng, cfg.pad)
        labels = self.train_set.labels[idx]
        lr = cosine_lr(self.global_step, self.total_steps, cfg.lr0)

        self.optimizer.zero_grad()
        with Tape() as tape:
            art, _ = self.model.train_forward(images, labels, cfg.mu)
        bad = _first_nonfinite(self.model, art)
        if bad is not None:
            raise NonFiniteError(bad, self.epoch, self.batch_index)
        tape.backward(art.loss_total)
        self.optimizer.step(lr)

        n = len(idx)
        loss_kl = art.loss_kl.item() if art.loss_kl is not None else 0.0
        out = {"lr": lr, "loss_total": art.loss_total.item(), "loss_kl": loss_kl, "loss_rep": art.loss_rep.item()}
        self.acc.loss_total += out["loss_total"] * n
        self.acc.loss_kl += loss_kl * n
        self.acc.loss_rep += out["loss_rep"] * n
        self.acc.correct += int((np.argmax(art.u_logits.data, axis=-1) == labels).sum())
        self.acc.seen += n
        self.batch_index += 1
        self.global_step += 1
        return out

    def evaluate(self, split: str = "test") -> float:
        ds, images = (self.test_set, self._test_images) if split == "test" else (self.train_set, self._images)
        if len(ds) == 0:
            return float("nan")
        return float((self.model.predict(images) == ds.labels).mean())

    def finish_epoch(self, last_lr: float) -> MetricsRecord:
        a = self.acc
        rec = MetricsRecord(
            epoch=self.epoch + 1,
            step=self.global_step,
            lr=float(last_lr),
            loss_total=a.loss_total / a.seen,
            loss_kl=a.loss_kl / a.seen,
            loss_rep=a.loss_rep / a.seen,
            train_acc=a.correct / a.seen,
            test_acc=self.evaluate("test"),
        )
        self.epoch += 1
        self.batch_index = 0
        self.acc = EpochAccumulator()
        return rec

    def train_epoch(self) -> MetricsRecord:
        start = time.perf_counter()
        lr = cosine_lr(self.global_step, self.total_steps, self.config.lr0)
        while self.batch_index < self.steps_per_epoch:
            lr = self.step()["lr"]
        rec = self.finish_epoch(lr)
        rec.wall_ms = (time.perf_counter() - start) * 1000.0
        return rec

    def run(self, max_epochs: int | None = None, on_epoch=None, max_steps: int | None = None) -> list[MetricsRecord]:
        """Train until done, ``max_epochs`` more epochs, or ``max_steps`` more steps."""
        records = []
        done_epochs = 0
        steps_left = max_steps
        while not self.finished and (max_epochs is None or done_epochs < max_epochs):
            if steps_left is not None:
                start = time.perf_counter()
                lr = cosine_lr(self.global_step, self.total_steps, self.config.lr0)
                while self.batch_index < self.steps_per_epoch and steps_left > 0:
                    lr = self.step()["lr"]
                    steps_left -= 1
                if self.batch_index < self.steps_per_epoch:
                    break
                rec = self.finish_epoch(lr)
                rec.wall_ms = (time.perf_counter() - start) * 1000.0
            else:
                rec = self.train_epoch()
            records.append(rec)
            done_epochs += 1
            if on_epoch is not None:
                on_epoch(self, rec)
        return records


def build_trainer(model_cfg, train_cfg: TrainConfig, train_set, test_set) -> Trainer:
    model = TPSKGModel(model_cfg, train_cfg.mode, dtype=train_cfg.dtype, top_k=train_cfg.top_k)
    return Trainer(model, train_set, test_set, train_cfg)
