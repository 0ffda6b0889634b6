"""
Optimisation engine shared by teacher (clip-level) and student (frame-level) training.
"""

import os
import math
import time
import logging
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from .cleanup import latest_checkpoint, prune_checkpoints, remove_stale_temp_files
from .crnn import Crnn, time_mask
from .dsp import LogMelSpec, SpecAugConfig, spec_augment, time_shift
from .errors import ConfigError, InvalidInput, NonFiniteGradient, TrainingDiverged
from .file_exports import append_log_record
from .layers import Parameter, linear_softmax_pool, linear_softmax_pool_backward
from .model_io import load_checkpoint, save_model
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
NO_EVENT = -1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    lr_factor: float = 0.1
    patience: int = 5
    batch_size: int = 64
    epochs: int = 15
    cv_fraction: float = 0.1
    cv_every_batches: int = 5000
    time_shift_sigma: float = 10.0
    use_specaug: bool = True
    keep_checkpoints: int = 3
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.cv_fraction < 1:
            raise ConfigError(f"cv_fraction must be in (0, 1), got {self.cv_fraction}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.cv_every_batches < 1:
            raise ConfigError("batch_size, epochs and cv_every_batches must be >= 1")


# ---------------------------------------------------------------- loss

def _bce_weights(pred, mask):
    if mask is None:
        return np.ones(pred.shape, dtype=np.float64)
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    if weights.sum() == 0:
        raise InvalidInput("Every element of the loss is masked")
    return weights


def bce(pred, target, mask=None) -> float:
    """Mean binary cross-entropy over unmasked elements"""
    weights = _bce_weights(pred, mask)
    p = np.clip(np.asarray(pred, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    elementwise = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return float((elementwise * weights).sum() / weights.sum())


def bce_backward(pred, target, mask=None) -> np.ndarray:
    weights = _bce_weights(pred, mask)
    raw = np.asarray(pred, dtype=np.float64)
    p = np.clip(raw, PRED_CLAMP, 1.0 - PRED_CLAMP)
    inside = (raw > PRED_CLAMP) & (raw < 1.0 - PRED_CLAMP)
    grad = (p - np.asarray(target, dtype=np.float64)) / (p * (1.0 - p))
    return grad * inside * weights / weights.sum()


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    moments: Dict[str, tuple] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, (m, v) in self.moments.items():
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], step: int) -> "AdamState":
        state = cls(step=step)
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                name = key[len("adam.m."):]
                state.moments[name] = (value.copy(), tensors[f"adam.v.{name}"].copy())
        return state


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float):
    """Bias-corrected Adam update; leaves everything untouched on a non-finite gradient"""
    bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteGradient(bad)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p in params:
        if p.name not in state.moments:
            state.moments[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad ** 2
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.data.dtype)


class PlateauScheduler:
    """Divide the learning rate by 1/factor after `patience` cv evaluations without a new best"""

    def __init__(self, lr0: float = 0.001, factor: float = 0.1, patience: int = 5):
        self.lr0 = lr0
        self.factor = factor
        self.patience = patience
        self.best = None
        self.bad_steps = 0
        self.reductions = 0

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.reductions

    def step(self, cv_loss: float) -> float:
        if self.best is None or cv_loss < self.best:
            self.best = cv_loss
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                self.reductions += 1
                self.bad_steps = 0
                logger.info(f"No cv improvement for {self.patience} evaluations, lr -> {self.lr:g}")
        return self.lr

    def state_dict(self) -> dict:
        return {"best": self.best, "bad_steps": self.bad_steps, "reductions": self.reductions}

    def load_state_dict(self, state: dict):
        self.best = state["best"]
        self.bad_steps = state["bad_steps"]
        self.reductions = state["reductions"]


def plateau_scheduler(history: Sequence[float], lr0: float = 0.001, factor: float = 0.1, patience: int = 5) -> float:
    scheduler = PlateauScheduler(lr0, factor, patience)
    for loss in history:
        scheduler.step(loss)
    return scheduler.lr


# ---------------------------------------------------------------- sampling

def build_label_index(clip_targets: Sequence[np.ndarray]) -> "OrderedDict[int, List[int]]":
    """event index -> dataset positions; clips without any event go to NO_EVENT"""
    num_events = len(clip_targets[0]) if len(clip_targets) else 0
    index = OrderedDict((e, []) for e in range(num_events))
    for i, target in enumerate(clip_targets):
        positives = np.flatnonzero(np.asarray(target) >= 0.5)
        if positives.size == 0:
            index.setdefault(NO_EVENT, []).append(i)
        for e in positives:
            index[int(e)].append(i)
    return index


def balanced_sampler(label_index: Mapping, batch_size: int, seed: int) -> Iterator[list]:
    """Endless stream of batches cycling over events in shuffled order.

    Each slot takes the next event of the cycle and a random clip holding it,
    so minority events are oversampled.
    """
    events = []
    for event, clips in label_index.items():
        if len(clips) == 0:
            logger.warning(f"Event {event!r} has no clips, skipping it in balanced sampling")
        else:
            events.append(event)
    if not events:
        raise InvalidInput("No event has any clip to sample from")

    rng = derive_rng(seed, "balanced-sampler")
    cycle = deque()
    while True:
        batch = []
        for _ in range(batch_size):
            if not cycle:
                cycle.extend(events[i] for i in rng.permutation(len(events)))
            clips = label_index[cycle.popleft()]
            batch.append(clips[int(rng.integers(len(clips)))])
        yield batch


def sequential_batches(num_items: int, batch_size: int, seed: int) -> List[List[int]]:
    order = derive_rng(seed, "sequential").permutation(num_items)
    return [order[i:i + batch_size].tolist() for i in range(0, num_items, batch_size)]


def split_train_cv(num_items: int, cv_fraction: float, seed: int):
    """Seeded clip-level split; returns sorted (train, cv) position lists"""
    if num_items < 2:
        raise InvalidInput(f"Need at least 2 clips to hold out a cv set, got {num_items}")
    n_cv = min(num_items - 1, max(1, int(round(num_items * cv_fraction))))
    order = derive_rng(seed, "cv-split").permutation(num_items)
    return sorted(order[n_cv:].tolist()), sorted(order[:n_cv].tolist())


# ---------------------------------------------------------------- batches

@dataclass
class TrainItem:
    clip_id: str
    features: np.ndarray
    clip_target: Optional[np.ndarray] = None
    frame_target: Optional[np.ndarray] = None


@dataclass
class Batch:
    features: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    ids: List[str]

    @property
    def frame_mask(self) -> np.ndarray:
        return time_mask(self.lengths, self.features.shape[1], np.float64)


def collate(items: Sequence[TrainItem], mode: str, features: Optional[Sequence[np.ndarray]] = None) -> Batch:
    """Zero-pad to the longest clip of the batch"""
    features = [it.features for it in items] if features is None else features
    lengths = np.array([len(f) for f in features], dtype=np.int64)
    t_max, dim = int(lengths.max()), features[0].shape[1]
    padded = np.zeros((len(items), t_max, dim), dtype=np.float32)
    for i, f in enumerate(features):
        padded[i, :len(f)] = f

    if mode == "clip":
        targets = np.stack([it.clip_target for it in items]).astype(np.float64)
    else:
        targets = np.zeros((len(items), t_max, items[0].frame_target.shape[1]), dtype=np.float64)
        for i, it in enumerate(items):
            targets[i, :len(it.frame_target)] = it.frame_target
    return Batch(features=padded, lengths=lengths, targets=targets, ids=[it.clip_id for it in items])


def batch_loss(model: Crnn, batch: Batch, mode: str, training: bool, with_grad: bool = True):
    """Forward (and optionally backward) one batch, returning (loss, element count)"""
    probs = model.forward(batch.features, batch.lengths, training=training)
    mask = batch.frame_mask
    if mode == "clip":
        clip_probs = linear_softmax_pool(probs.astype(np.float64), mask)
        loss = bce(clip_probs, batch.targets)
        count = batch.targets.size
        if with_grad:
            grad_clip = bce_backward(clip_probs, batch.targets)
            model.backward(linear_softmax_pool_backward(probs.astype(np.float64), mask, grad_clip).astype(probs.dtype))
    else:
        frame_mask = mask[..., None]
        loss = bce(probs, batch.targets, frame_mask)
        count = int(mask.sum()) * batch.targets.shape[-1]
        if with_grad:
            model.backward(bce_backward(probs, batch.targets, frame_mask).astype(probs.dtype))
    return loss, count


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    best_state: "OrderedDict[str, np.ndarray]"
    log: List[dict]
    best_cv_loss: Optional[float]
    best_step: int
    checkpoint_dir: Optional[str] = None


def _validate_dataset(model: Crnn, dataset: Sequence[TrainItem], mode: str):
    if mode not in ("clip", "frame"):
        raise InvalidInput(f"mode must be 'clip' or 'frame', got {mode!r}")
    if not dataset:
        raise InvalidInput("Training dataset is empty")
    E = model.config.num_outputs
    for item in dataset:
        if mode == "clip":
            if item.clip_target is None or len(item.clip_target) != E:
                raise InvalidInput(f"{item.clip_id}: clip mode needs a {E}-event clip target")
        else:
            if item.frame_target is None:
                raise InvalidInput(f"{item.clip_id}: frame mode needs frame targets")
            if item.frame_target.shape != (len(item.features), E):
                raise InvalidInput(
                    f"{item.clip_id}: frame targets {item.frame_target.shape} do not match "
                    f"{len(item.features)} frames x {E} outputs"
                )


class _Trainer:
    def __init__(self, model, dataset, mode, cfg, specaug, out_dir, log_path):
        self.model = model
        self.dataset = dataset
        self.mode = mode
        self.cfg = cfg
        self.specaug = specaug
        self.out_dir = out_dir
        self.log_path = log_path
        self.train_idx, self.cv_idx = split_train_cv(len(dataset), cfg.cv_fraction, cfg.seed)
        self.adam = AdamState()
        self.scheduler = PlateauScheduler(cfg.lr0, cfg.lr_factor, cfg.patience)
        self.step = 0
        self.best_state = model.copy_state()
        self.best_cv_loss = None
        self.best_step = 0
        self.log: List[dict] = []
        self.started = time.time()
        if mode == "clip":
            self.label_index = build_label_index([dataset[i].clip_target for i in self.train_idx])

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.train_idx) / self.cfg.batch_size)

    def epoch_batches(self, epoch: int) -> List[List[int]]:
        seed = derive_seed(self.cfg.seed, "epoch", epoch)
        if self.mode == "clip":
            stream = balanced_sampler(self.label_index, self.cfg.batch_size, seed)
            local = [next(stream) for _ in range(self.batches_per_epoch)]
        else:
            local = sequential_batches(len(self.train_idx), self.cfg.batch_size, seed)
        return [[self.train_idx[i] for i in batch] for batch in local]

    def assemble(self, epoch: int, batch_no: int, positions: List[int]) -> Batch:
        items = [self.dataset[i] for i in positions]
        features = []
        for slot, item in enumerate(items):
            spec = LogMelSpec(values=item.features, clip_id=item.clip_id)
            if self.cfg.use_specaug and self.specaug is not None:
                aug_seed = derive_seed(self.cfg.seed, "specaug", epoch, batch_no, slot)
                spec = spec_augment(spec, replace(self.specaug, rng_seed=aug_seed))
            if self.mode == "clip" and self.cfg.time_shift_sigma > 0:
                spec = time_shift(spec, self.cfg.time_shift_sigma,
                                  derive_seed(self.cfg.seed, "shift", epoch, batch_no, slot))
            features.append(spec.values)
        return collate(items, self.mode, features)

    def record(self, epoch: int, split: str, loss: float):
        entry = {
            "step": self.step, "epoch": epoch, "split": split,
            "loss": loss if math.isfinite(loss) else None,
            "lr": self.scheduler.lr, "wallclock": round(time.time() - self.started, 3),
        }
        self.log.append(entry)
        if self.log_path:
            append_log_record(self.log_path, entry)

    def cross_validate(self) -> float:
        total, count = 0.0, 0
        for start in range(0, len(self.cv_idx), self.cfg.batch_size):
            items = [self.dataset[i] for i in self.cv_idx[start:start + self.cfg.batch_size]]
            loss, n = batch_loss(self.model, collate(items, self.mode), self.mode, training=False, with_grad=False)
            total += loss * n
            count += n
        return total / count

    def checkpoint(self, epoch: int, next_batch: int) -> Optional[str]:
        if not self.out_dir:
            return None
        meta = {
            "kind": "checkpoint",
            "train_state": {
                "epoch": epoch, "next_batch": next_batch, "step": self.step, "mode": self.mode,
                "seed": self.cfg.seed, "adam_step": self.adam.step,
                "scheduler": self.scheduler.state_dict(),
                "best_cv_loss": self.best_cv_loss, "best_step": self.best_step,
            },
        }
        path = os.path.join(self.out_dir, f"ckpt_{self.step:07d}.gpvd")
        save_model(self.model, path, extra_meta=meta, extra_tensors=self.adam.tensors())
        prune_checkpoints(self.out_dir, keep=self.cfg.keep_checkpoints)
        return path

    def save_best(self):
        if self.out_dir:
            best = Crnn(self.model.config, dtype=self.model.dtype)
            best.load_state_dict(self.best_state)
            save_model(best, os.path.join(self.out_dir, "best.gpvd"),
                       extra_meta={"best_cv_loss": self.best_cv_loss, "best_step": self.best_step})

    def resume(self, path: str):
        restored, meta, extra = load_checkpoint(path)
        state = meta["train_state"]
        self.model.load_state_dict(restored.state_dict())
        self.adam = AdamState.from_tensors(extra, state["adam_step"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step = state["step"]
        self.best_cv_loss = state["best_cv_loss"]
        self.best_step = state["best_step"]
        best_path = os.path.join(os.path.dirname(path), "best.gpvd")
        if os.path.exists(best_path):
            best, _, _ = load_checkpoint(best_path)
            self.best_state = best.copy_state()
        else:
            self.best_state = self.model.copy_state()
        logger.info(f"Resumed from {path} at step {self.step}")
        return state["epoch"], state["next_batch"]

    def run(self, start_epoch: int = 0, start_batch: int = 0) -> FitResult:
        cfg = self.cfg
        executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        try:
            for epoch in range(start_epoch, cfg.epochs):
                plan = self.epoch_batches(epoch)
                first = start_batch if epoch == start_epoch else 0
                jobs = [(epoch, b, plan[b]) for b in range(first, len(plan))]
                # map() keeps delivery order, so threading never changes the run
                batches = executor.map(lambda job: self.assemble(*job), jobs) if executor else (
                    self.assemble(*job) for job in jobs)
                for (_, b, _), batch in zip(jobs, batches):
                    updated = self.train_step(epoch, batch)
                    last = b == len(plan) - 1
                    if (updated and self.step % cfg.cv_every_batches == 0) or last:
                        self.evaluate(epoch, next_epoch=epoch + 1 if last else epoch, next_batch=0 if last else b + 1)
        finally:
            if executor:
                executor.shutdown()
        self.model.load_state_dict(self.best_state)
        return FitResult(self.best_state, self.log, self.best_cv_loss, self.best_step, self.out_dir)

    def train_step(self, epoch: int, batch: Batch) -> bool:
        self.model.zero_grad()
        loss, _ = batch_loss(self.model, batch, self.mode, training=True)
        try:
            adam_step(self.model.parameters(), self.adam, self.scheduler.lr)
        except NonFiniteGradient as e:
            logger.warning(f"Skipping update at step {self.step} (epoch {epoch}): {e}")
            return False
        self.step += 1
        self.record(epoch, "train", loss)
        return True

    def evaluate(self, epoch: int, next_epoch: int, next_batch: int):
        cv_loss = self.cross_validate()
        self.record(epoch, "cv", cv_loss)
        if not math.isfinite(cv_loss):
            self.model.load_state_dict(self.best_state)
            best_path = os.path.join(self.out_dir, "best.gpvd") if self.out_dir else None
            logger.error(f"cv loss became {cv_loss} at step {self.step}, restored best model")
            raise TrainingDiverged(f"cv loss is {cv_loss} at step {self.step}", best_path)
        self.scheduler.step(cv_loss)
        if self.best_cv_loss is None or cv_loss < self.best_cv_loss:
            self.best_cv_loss = cv_loss
            self.best_step = self.step
            self.best_state = self.model.copy_state()
            self.save_best()
        logger.info(f"epoch {epoch} step {self.step}: cv loss {cv_loss:.4f} (best {self.best_cv_loss:.4f})")
        self.checkpoint(next_epoch, next_batch)


def fit(model: Crnn, dataset: Sequence[TrainItem], mode: str, cfg: TrainConfig = TrainConfig(),
        specaug: Optional[SpecAugConfig] = SpecAugConfig(), out_dir: Optional[str] = None,
        resume_from: Optional[str] = None) -> FitResult:
    """Train `model` in place and leave it holding the lowest-cv-loss parameters.

    mode 'clip' pools frames with linear softmax before the loss (teacher,
    balanced sampling, SpecAug + time shift); mode 'frame' scores every valid
    frame (student, shuffled sequential sampling, SpecAug only).
    """
    _validate_dataset(model, dataset, mode)
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        remove_stale_temp_files(out_dir)
        log_path = os.path.join(out_dir, "train_log.jsonl")
    trainer = _Trainer(model, dataset, mode, cfg, specaug, out_dir, log_path)
    logger.info(
        f"Training ({mode} mode): {len(trainer.train_idx)} train / {len(trainer.cv_idx)} cv clips, "
        f"{trainer.batches_per_epoch} batches per epoch, {cfg.epochs} epochs"
    )
    start_epoch, start_batch = (0, 0)
    if resume_from and os.path.isdir(resume_from):
        directory, resume_from = resume_from, latest_checkpoint(resume_from)
        if resume_from is None:
            raise FileNotFoundError(f"No checkpoints to resume from in {directory}")
    if resume_from:
        start_epoch, start_batch = trainer.resume(resume_from)
    return trainer.run(start_epoch, start_batch)
