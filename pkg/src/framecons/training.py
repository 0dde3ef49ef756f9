"""Training loop, optimisers, checkpoints and evaluation.

One optimisation step per scene: forward over all frames with the recurrent
state zeroed, total loss, backpropagation through the whole clip, global-norm
gradient clipping, parameter update.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import SceneDataset, SparseGtView
from .losses import LossConfig, total_loss
from .metrics import EvalReport, MetricAccumulator
from .models import Model, ModelSpec, build, forward_sequence, predict
from .tensorio import load_container, parse_kv, save_container

log = logging.getLogger(__name__)

OPTIMIZERS = ("Adam", "SGD")
PHASES = ("Full", "LstmOnly")
LSTM_PREFIX = "lstm."


class TrainingDiverged(RuntimeError):
    def __init__(self, scene: str, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} on {scene} in epoch {epoch}")
        self.scene = scene
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    optimizer: str = "Adam"
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = LossConfig()
    phase: str = "Full"
    clip_norm: float = 5.0
    checkpoint_interval: int = 0
    shuffle: bool = True
    eval_interval: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        # zero is allowed: a frozen run is a useful control
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip norm must be positive, got {self.clip_norm}")

    def to_kv(self) -> dict[str, str]:
        kv = {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "loss"}
        lc = self.loss
        kv.update({"lambda_ce": str(lc.lambda_ce), "lambda_incons": str(lc.lambda_incons),
                   "difference": lc.difference})
        if lc.class_weights is not None:
            kv["class_weights"] = ",".join(str(w) for w in lc.class_weights)
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str], source: str = "<config>") -> "TrainConfig":
        loss_keys = {"lambda_ce", "lambda_incons", "difference", "class_weights"}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs, loss_kwargs = {}, {}
        for key, raw in kv.items():
            try:
                if key in loss_keys:
                    if key == "difference":
                        loss_kwargs[key] = raw
                    elif key == "class_weights":
                        loss_kwargs[key] = tuple(float(v) for v in raw.split(","))
                    else:
                        loss_kwargs[key] = float(raw)
                elif key in fields and key != "loss":
                    kwargs[key] = _coerce(fields[key].type, raw)
                else:
                    raise ValueError(f"{source}: unknown training key {key!r}")
            except ValueError as exc:
                if "unknown training key" in str(exc):
                    raise
                raise ValueError(f"{source}: bad value for {key!r}: {raw!r}") from None
        if loss_kwargs:
            kwargs["loss"] = LossConfig(**loss_kwargs)
        return cls(**kwargs)


def _coerce(type_name: str, raw: str):
    if type_name == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw


# ----------------------------------------------------------------------------
# optimisers
# ----------------------------------------------------------------------------

class Optimizer:
    """Adam or SGD with momentum over named parameter arrays.

    A parameter may carry an ``lr_scale`` slot: a per-element learning-rate
    multiplier, saved and restored with the other slots.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        self.step_count += 1
        for name, g in grads.items():
            p = params[name]
            slot = self.slots.setdefault(name, {})
            scale = slot.get("lr_scale")
            step = lr if scale is None else lr * scale
            if cfg.optimizer == "SGD":
                v = slot.setdefault("velocity", np.zeros_like(p))
                v *= cfg.momentum
                v += g
                p -= step * v
            else:
                m = slot.setdefault("m", np.zeros_like(p))
                v = slot.setdefault("v", np.zeros_like(p))
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                m_hat = m / (1.0 - cfg.beta1 ** self.step_count)
                v_hat = v / (1.0 - cfg.beta2 ** self.step_count)
                p -= step * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping; nothing changes when it is within bounds.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ----------------------------------------------------------------------------
# logging
# ----------------------------------------------------------------------------

@dataclass
class TrainLog:
    """Append-only text log; mirrored to ``path`` when given."""

    path: Path | None = None
    lines: list[str] = field(default_factory=list)
    epochs: list[dict[str, float]] = field(default_factory=list)

    def write(self, text: str) -> None:
        chunk = text if text.endswith("\n") else text + "\n"
        self.lines.extend(chunk.splitlines())
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(chunk)

    def epoch(self, k: int, ce: float, incons: float, total: float) -> None:
        self.epochs.append({"epoch": k, "ce": ce, "incons": incons, "total": total})
        self.write(f"epoch {k}: ce={ce:.6f} incons={incons:.6f} total={total:.6f}")

    def report(self, title: str, report: EvalReport) -> None:
        self.write(f"[report {title}]\n{report.to_kv_text()}[/report]")


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    optimizer: Optimizer
    epoch: int
    rng: np.random.Generator


def new_state(config: TrainConfig) -> TrainState:
    return TrainState(Optimizer(config), 0, np.random.default_rng(config.seed))


def save_checkpoint(path: str | Path, model: Model, state: TrainState | None = None) -> None:
    texts = {"spec": model.spec.to_text()}
    tensors = {name: p.data for name, p in model.params.items()}
    if state is not None:
        meta = {"epoch": state.epoch, "optimizer_steps": state.optimizer.step_count}
        texts["meta"] = "".join(f"{k}={v}\n" for k, v in meta.items())
        texts["rng"] = json.dumps(state.rng.bit_generator.state, sort_keys=True)
        for name in sorted(state.optimizer.slots):
            for slot, arr in sorted(state.optimizer.slots[name].items()):
                tensors[f"optim.{slot}.{name}"] = arr
    save_container(path, texts, tensors)


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    optimizer_steps: int
    slots: dict[str, dict[str, np.ndarray]]
    rng_state: dict | None

    def train_state(self, config: TrainConfig) -> TrainState:
        opt = Optimizer(config)
        opt.step_count = self.optimizer_steps
        opt.slots = {k: {s: a.copy() for s, a in v.items()} for k, v in self.slots.items()}
        rng = np.random.default_rng(config.seed)
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return TrainState(opt, self.epoch, rng)


def load_checkpoint(path: str | Path) -> Checkpoint:
    texts, tensors = load_container(path)
    if "spec" not in texts:
        raise ValueError(f"{path}: checkpoint has no model spec")
    spec = ModelSpec.from_kv(parse_kv(texts["spec"], f"{path}:spec"))
    model = build(spec, seed=0)
    model.load_arrays({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    slots: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        if key.startswith("optim."):
            _, slot, name = key.split(".", 2)
            slots.setdefault(name, {})[slot] = arr
    meta = parse_kv(texts.get("meta", ""), f"{path}:meta")
    rng_state = json.loads(texts["rng"]) if "rng" in texts else None
    return Checkpoint(model, int(meta.get("epoch", 0)), int(meta.get("optimizer_steps", 0)),
                      slots, rng_state)


# ----------------------------------------------------------------------------
# train / evaluate
# ----------------------------------------------------------------------------

def trainable_names(model: Model, phase: str) -> list[str]:
    if phase == "Full":
        return list(model.params)
    names = [n for n in model.params if n.startswith(LSTM_PREFIX)]
    if not names:
        raise ValueError("LstmOnly phase needs a model with a ConvLSTM")
    return names


def train_step(model: Model, frames: np.ndarray, labels: np.ndarray, config: TrainConfig,
               names: Sequence[str]) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Forward + backward on one scene. Returns loss components and raw gradients."""
    model.zero_grad()
    probs = forward_sequence(model, frames)
    loss, parts = total_loss(probs, labels, config.loss)
    parts["total"] = loss.item()
    if not math.isfinite(parts["total"]):
        return parts, {}
    if loss.requires_grad:
        loss.backward()
    return parts, {n: model.params[n].grad for n in names}


def train(model: Model, dataset: SceneDataset, config: TrainConfig,
          val_dataset: SceneDataset | None = None, train_log: TrainLog | None = None,
          state: TrainState | None = None, checkpoint_path: str | Path | None = None,
          lr_scales: dict[str, np.ndarray] | None = None) -> tuple[Model, TrainLog, TrainState]:
    """Run epochs ``state.epoch .. config.epochs - 1`` over ``dataset``.

    ``lr_scales`` seeds per-parameter learning-rate multipliers on a fresh run;
    a resumed ``state`` already carries them.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model {model.spec.num_classes}")
    train_log = train_log or TrainLog()
    if state is None:
        state = new_state(config)
        for name, scale in (lr_scales or {}).items():
            state.optimizer.slots.setdefault(name, {})["lr_scale"] = \
                np.broadcast_to(np.asarray(scale, dtype=np.float64), model.params[name].shape).copy()
    names = trainable_names(model, config.phase)
    frozen = [p for n, p in model.params.items() if n not in set(names)]
    for p in frozen:
        p.requires_grad = False
    try:
        while state.epoch < config.epochs:
            epoch = state.epoch
            lr = config.learning_rate * config.lr_decay ** epoch
            order = state.rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
            sums = {"ce": 0.0, "incons": 0.0, "total": 0.0}
            for idx in order:
                scene = dataset[int(idx)]
                parts, grads = train_step(model, scene.frames, scene.labels, config, names)
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(scene.name or f"scene {idx}", epoch, parts["total"])
                clip_gradients(grads, config.clip_norm)
                state.optimizer.step({n: model.params[n].data for n in names}, grads, lr)
                for k in sums:
                    sums[k] += parts[k]
            state.epoch += 1
            n = len(order)
            train_log.epoch(epoch, sums["ce"] / n, sums["incons"] / n, sums["total"] / n)
            if val_dataset is not None and config.eval_interval and state.epoch % config.eval_interval == 0:
                train_log.report(f"epoch {epoch} {val_dataset.split}", evaluate(model, val_dataset))
            if checkpoint_path and config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, model, state)
    finally:
        for p in frozen:
            p.requires_grad = True
    model.zero_grad()
    return model, train_log, state


def evaluate(model: Model, dataset: SceneDataset, cons_mode: str = "raw") -> EvalReport:
    """Metrics over every scene. On sparse-GT views, mIoU/Acc use the labelled
    frames only while Cons/ConsW use the dense labels."""
    gt_mode = f"sparse(stride={dataset.stride})" if isinstance(dataset, SparseGtView) else "dense"
    acc = MetricAccumulator(model.spec.num_classes, cons_mode, gt_mode)
    for k in range(len(dataset)):
        scene = dataset[k]
        acc.add(predict(model, scene.frames), scene.labels, scene.temporal_labels)
    return acc.report()
