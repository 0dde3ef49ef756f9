"""Named experiment recipes and the two-phase runner that produces result tables.

Every recipe trains a single-frame base model first (phase 1), then copies its
weights into each row's model and continues for a fixed number of epochs
(phase 2). Rows without a ConvLSTM simply keep training, so every row sees the
same total epoch budget.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import SceneDataset
from .losses import LossConfig
from .metrics import EvalReport
from .models import Model, ModelSpec, build
from .training import LSTM_PREFIX, TrainConfig, TrainLog, evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecipeRow:
    label: str
    spec: ModelSpec
    loss: LossConfig = LossConfig(lambda_incons=0.0)


@dataclass(frozen=True)
class Recipe:
    name: str
    base: ModelSpec
    rows: tuple[RecipeRow, ...]
    pretrain_epochs: int
    finetune_epochs: int
    phase: str = "Full"
    learning_rate: float = 3e-3


def _esp(position: str = "None", **kw) -> ModelSpec:
    return ModelSpec("MiniEsp", lstm_position=position, **kw)


NO_INCONS = LossConfig(lambda_incons=0.0)
SQUARED_10 = LossConfig(lambda_incons=10.0)

SSNET_WIDTH = 8
ESP_PRETRAIN = 5  # shared by every MiniEsp recipe so one phase-1 model serves them all

RECIPES: dict[str, Recipe] = {r.name: r for r in [
    Recipe("single_frame_baseline", ModelSpec("SSNet", base_channels=SSNET_WIDTH), (
        RecipeRow("SSNet Single Frame", ModelSpec("SSNet", base_channels=SSNET_WIDTH), NO_INCONS),
        RecipeRow("VSSNet ConvLSTM", ModelSpec("VSSNet", base_channels=SSNET_WIDTH), SQUARED_10),
    ), pretrain_epochs=4, finetune_epochs=3, learning_rate=1e-2),
    Recipe("convlstm_positions", _esp(), (
        RecipeRow("MiniEsp Single Frame", _esp()),
        RecipeRow("MiniEsp_L1a 7x7", _esp("L1a")),
        RecipeRow("MiniEsp_L1b 3x3", _esp("L1b")),
        RecipeRow("MiniEsp_L1c 5x5", _esp("L1c")),
        RecipeRow("MiniEsp_L1d 9x9", _esp("L1d")),
    ), pretrain_epochs=ESP_PRETRAIN, finetune_epochs=3),
    Recipe("convolution_types", _esp(), (
        RecipeRow("Standard Convolution", _esp("L1a", lstm_filter=3)),
        RecipeRow("Depthwise Separable Convolution",
                  _esp("L1a", lstm_filter=3, lstm_variant="DepthwiseSeparable")),
        RecipeRow("Depthw. Sep. Conv. Weight Sharing",
                  _esp("L1a", lstm_filter=3, lstm_variant="DepthwiseShared")),
    ), pretrain_epochs=ESP_PRETRAIN, finetune_epochs=3),
    Recipe("lambda_sweep", _esp(), (
        RecipeRow("lambda_incons = 0", _esp("L1b"), NO_INCONS),
        RecipeRow("lambda_incons = 10", _esp("L1b"), SQUARED_10),
        RecipeRow("lambda_incons = 100", _esp("L1b"), LossConfig(lambda_incons=100.0)),
    ), pretrain_epochs=ESP_PRETRAIN, finetune_epochs=3, phase="LstmOnly"),
    Recipe("diff_variant", _esp(), (
        RecipeRow("Sq Diff True", _esp("L1b"), SQUARED_10),
        RecipeRow("Abs Diff True", _esp("L1b"), LossConfig(lambda_incons=10.0, difference="Absolute")),
    ), pretrain_epochs=ESP_PRETRAIN, finetune_epochs=3, phase="LstmOnly"),
    Recipe("combined", _esp(), (
        RecipeRow("MiniEsp_L1b 5x5 combined", _esp("L1b", lstm_filter=5), SQUARED_10),
    ), pretrain_epochs=ESP_PRETRAIN, finetune_epochs=3),
]}


def get_recipe(name: str) -> Recipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise KeyError(f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}") from None


def with_width(spec: ModelSpec, base_channels: int | None = None,
               esp_widths: tuple[int, ...] | None = None) -> ModelSpec:
    """Copy of ``spec`` with a different network width."""
    changes = {}
    if base_channels is not None:
        changes["base_channels"] = base_channels
    if esp_widths is not None:
        changes["esp_widths"] = tuple(esp_widths)
    return dataclasses.replace(spec, **changes) if changes else spec


def transplant(source: Model, target: Model) -> list[str]:
    """Copy every parameter whose name and shape match; returns the copied names."""
    copied = []
    for name, p in target.params.items():
        q = source.params.get(name)
        if q is not None and q.shape == p.shape:
            p.data[...] = q.data
            copied.append(name)
    return copied


# layer whose role the ConvLSTM takes over, per architecture and position
REPLACED_LAYER = {("VSSNet", "None"): "conv6", ("MiniEsp", "L1b"): "red2",
                  ("MiniEsp", "L1c"): "red1", ("MiniEsp", "L1d"): "red0"}
# activation that followed the replaced layer, if any
REPLACED_ACTIVATION = {"conv6": "act6"}
# layer reading the replaced layer's output, and which block of its input channels
CONSUMER = {"conv6": ("head", 0), "red2": ("fuse1", 0), "red1": ("fuse1", 1), "red0": ("fuse0", 1)}
CANDIDATE_SCALE = 0.1  # keeps tanh(scale * z) close to linear
CANDIDATE_PATH = ("W_xc", "W_hc", "b_c")
GATE_BIAS = 4.0  # sigmoid(4) ~ 0.98: input and output gates nearly open
FORGET_BIAS = -4.0  # sigmoid(-4) ~ 0.02: forget gate nearly shut


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + np.exp(-v))


def warm_start_lstm(source: Model, target: Model) -> dict[str, np.ndarray] | None:
    """Start the cell as a pass-through of the layer it replaces.

    Every gate weight except the candidate filter is zeroed. The input and
    output gates are almost open and the forget gate almost closed, so
    ``c_t ~ tanh(z_t)`` and ``h_t ~ act(c_t)``; since ``sigma(-b) = 1 - sigma(b)``
    a static input settles at exactly ``c = tanh(z)``.

    Replacing a layer: ``W_xc``/``b_c`` get its weights scaled by a small
    factor (tanh stays near-linear), the PReLU slope copies the activation that
    followed it, and the consuming layer's matching input weights are scaled
    back up. On a static input the model then reproduces the base model.
    Added layer (L1a): ``W_xc`` is the identity and the slope is 1; tanh, the
    uniform gates and the PReLU are the same monotone map on every class score, so
    the predicted labels of a static input are preserved.

    Adam moves every weight by about the learning rate whatever its size, so a
    weight scaled by ``s`` needs its learning rate scaled by ``s`` to train as
    before. The returned per-parameter multipliers do that for the scaled cell
    and the scaled consumer block; pass them to ``train(lr_scales=...)``.

    Call after :func:`transplant`. Returns None when the cell cannot be seeded.
    """
    cell = target.lstm
    if cell is None:
        return None
    prm = {k: t.data for k, t in cell.params.items()}
    w = prm["W_xc"]
    p, q = w.shape[-2:]
    consumer = None
    cell_scale = CANDIDATE_SCALE
    if target.spec.lstm_position == "L1a":
        cell_scale = 1.0
        src_w = np.eye(w.shape[0])[:, :, None, None] if cell.config.variant == "Standard" \
            else np.ones((w.shape[0], 1, 1, 1))
        src_b = np.zeros_like(prm["b_c"])
        slope = np.ones(cell.config.out_channels)
    else:
        layer = REPLACED_LAYER.get((target.spec.architecture, target.spec.lstm_position))
        if layer is None or cell.config.variant != "Standard" or f"{layer}.weight" not in source.params:
            return None
        src_w = CANDIDATE_SCALE * source.params[f"{layer}.weight"].data
        src_b = CANDIDATE_SCALE * source.params[f"{layer}.bias"].data
        act = REPLACED_ACTIVATION.get(layer)
        slope = source.params[f"{act}.slope"].data.copy() if act else np.ones(cell.config.out_channels)
        consumer = CONSUMER[layer]
    sp, sq = src_w.shape[-2:]
    if sp > p or sq > q or src_w.shape[1] != w.shape[1] or src_w.shape[0] != w.shape[0]:
        return None
    for name, arr in prm.items():
        if name.startswith(("W_x", "W_h", "W_c")):
            arr[...] = 0.0
    w[:, :, p // 2 - sp // 2:p // 2 + sp // 2 + 1, q // 2 - sq // 2:q // 2 + sq // 2 + 1] = src_w
    prm["b_c"][...] = src_b
    prm["b_i"][...] = GATE_BIAS
    prm["b_f"][...] = FORGET_BIAS
    prm["b_o"][...] = GATE_BIAS
    if "act_slope" in prm:
        prm["act_slope"][...] = slope
    # only the candidate path works in the scaled-down units
    scales = {f"{LSTM_PREFIX}{k}": np.full(arr.shape, cell_scale if k in CANDIDATE_PATH else 1.0)
              for k, arr in prm.items()}
    if consumer is not None:
        name, block = consumer
        d = cell.config.out_channels
        # static steady state: c = i * g / (1 - f), h = o * act(c)
        gain = (1.0 - _sigmoid(FORGET_BIAS)) / (CANDIDATE_SCALE * _sigmoid(GATE_BIAS) ** 2)
        target.params[f"{name}.weight"].data[:, block * d:(block + 1) * d] *= gain
        scales[f"{name}.weight"] = np.ones(target.params[f"{name}.weight"].shape)
        scales[f"{name}.weight"][:, block * d:(block + 1) * d] = gain
    return scales


def pretrain_base(recipe: Recipe, train_ds: SceneDataset, seed: int = 0,
                  epochs: int | None = None, num_classes: int | None = None,
                  train_log: TrainLog | None = None) -> Model:
    """Phase 1: the recipe's single-frame model trained with cross-entropy only."""
    spec = recipe.base
    if num_classes is not None:
        spec = dataclasses.replace(spec, num_classes=num_classes)
    model = build(spec, seed)
    config = TrainConfig(epochs=recipe.pretrain_epochs if epochs is None else epochs,
                         learning_rate=recipe.learning_rate, seed=seed, loss=NO_INCONS)
    model, _, _ = train(model, train_ds, config, train_log=train_log)
    return model


def finetune_row(row: RecipeRow, recipe: Recipe, base: Model, train_ds: SceneDataset,
                 seed: int = 0, epochs: int | None = None,
                 train_log: TrainLog | None = None) -> Model:
    """Phase 2: one row's model, initialised from ``base`` where names match."""
    spec = dataclasses.replace(row.spec, num_classes=base.spec.num_classes,
                               base_channels=base.spec.base_channels, esp_widths=base.spec.esp_widths)
    model = build(spec, seed)
    transplant(base, model)
    scales = warm_start_lstm(base, model)
    phase = recipe.phase if model.spec.has_lstm else "Full"
    config = TrainConfig(epochs=recipe.finetune_epochs if epochs is None else epochs,
                         learning_rate=recipe.learning_rate, seed=seed, loss=row.loss, phase=phase)
    model, _, _ = train(model, train_ds, config, train_log=train_log, lr_scales=scales)
    return model


@dataclass
class ExperimentResult:
    recipe: str
    rows: list[tuple[str, EvalReport]] = field(default_factory=list)

    def report(self, label: str) -> EvalReport:
        for name, rep in self.rows:
            if name == label:
                return rep
        raise KeyError(label)

    def table(self) -> str:
        width = max([len("Experiment")] + [len(name) for name, _ in self.rows])
        head = f"{'Experiment':<{width}} | {'mIoU':>6} {'Acc':>6} {'Cons':>6} {'ConsW':>6}"
        lines = [f"== {self.recipe} ==", head, "-" * len(head)]
        for name, r in self.rows:
            lines.append(f"{name:<{width}} | {r.miou:6.1f} {r.acc:6.1f} {r.cons:6.1f} {r.consw:6.1f}")
        return "\n".join(lines) + "\n"


def run_experiment(name: str, train_ds: SceneDataset, val_ds: SceneDataset, seed: int = 0,
                   pretrain_epochs: int | None = None, finetune_epochs: int | None = None,
                   base: Model | None = None, rows: list[str] | None = None,
                   cons_mode: str = "raw", train_log: TrainLog | None = None) -> ExperimentResult:
    """Train every row of a recipe with a shared seed and epoch budget; one EvalReport each.

    ``base`` skips phase 1 with an already trained single-frame model; ``rows``
    restricts the run to a subset of row labels.
    """
    recipe = get_recipe(name)
    if base is None:
        base = pretrain_base(recipe, train_ds, seed, pretrain_epochs, train_ds.num_classes, train_log)
    result = ExperimentResult(name)
    for row in recipe.rows:
        if rows is not None and row.label not in rows:
            continue
        log.info("%s: training row %r", name, row.label)
        if train_log is not None:
            train_log.write(f"# {name}: {row.label}")
        model = finetune_row(row, recipe, base, train_ds, seed, finetune_epochs, train_log)
        report = evaluate(model, val_ds, cons_mode)
        result.rows.append((row.label, report))
        if train_log is not None:
            train_log.report(f"{name} {row.label}", report)
    return result
