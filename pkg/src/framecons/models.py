"""Segmentation networks: SSNet, VSSNet and a miniature ESP encoder-decoder.

All networks run a whole scene at once. Stateless layers see the frames as a
batch axis (``[C, T, H, W]``); the ConvLSTM, when present, walks the time axis
with its state reset at the start of every scene.

MiniEsp layout (K classes, widths w0/w1/w2)::

    stem  3x3 conv 3->w0 @ full res                        -- tap for L1d
    down2 of [stem, rgb], ESP w0+3->w1, ESP w1->w1 @ 1/2   -- tap for L1c
    down2, ESP w1->w2, ESP w2->w2, ESP w2->w2 @ 1/4        -- tap for L1b
    red2: 1x1 w2->K @ 1/4 -> up2
    red1: 1x1 w1->K @ 1/2; fuse1: 3x3 on concat 2K->K -> up2
    red0: 1x1 w0->K @ full; fuse0: 1x1 on concat 2K->K = logits
    L1a: extra ConvLSTM K->K on the logits

L1b/L1c/L1d replace red2/red1/red0 with a ConvLSTM of the same in/out channels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .convlstm import ACTIVATIONS, VARIANTS, ConvLstmCell, ConvLstmConfig
from .tensor import DualTensor, Tensor

ARCHITECTURES = ("SSNet", "VSSNet", "MiniEsp")
POSITIONS = ("None", "L1a", "L1b", "L1c", "L1d")
SSNET_DILATIONS = (1, 1, 2, 2, 4, 4)
DEFAULT_POSITION_FILTERS = {"L1a": 7, "L1b": 3, "L1c": 5, "L1d": 9}
ESP_DILATIONS = (1, 2, 4)
INPUT_CENTER = 0.5  # frames in [0, 1] are shifted to [-0.5, 0.5]
PRELU_INIT = 0.25


class SpecError(ValueError):
    """Invalid model specification; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "SSNet"
    lstm_position: str = "None"
    lstm_filter: int = 0  # 0 = architecture default
    num_classes: int = 6
    base_channels: int = 64
    lstm_variant: str = "Standard"
    state_activation: str = "prelu"
    esp_widths: tuple[int, int, int] = (4, 24, 80)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise SpecError("architecture", f"must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.lstm_position not in POSITIONS:
            raise SpecError("lstm_position", f"must be one of {POSITIONS}, got {self.lstm_position!r}")
        if self.architecture == "SSNet" and self.lstm_position != "None":
            raise SpecError("lstm_position", "SSNet has no ConvLSTM; use None")
        if self.architecture == "VSSNet" and self.lstm_position != "None":
            raise SpecError("lstm_position", "VSSNet's ConvLSTM always replaces the last conv; use None")
        if self.lstm_filter < 0 or (self.lstm_filter and self.lstm_filter % 2 == 0):
            raise SpecError("lstm_filter", f"must be an odd positive size (or 0 for default), got {self.lstm_filter}")
        if self.num_classes < 2:
            raise SpecError("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise SpecError("base_channels", f"must be positive, got {self.base_channels}")
        if self.lstm_variant not in VARIANTS:
            raise SpecError("lstm_variant", f"must be one of {VARIANTS}, got {self.lstm_variant!r}")
        if self.state_activation not in ACTIVATIONS:
            raise SpecError("state_activation", f"must be one of {ACTIVATIONS}, got {self.state_activation!r}")
        if len(self.esp_widths) != 3 or any(w < 1 for w in self.esp_widths) or \
                any(w % 4 for w in self.esp_widths[1:]):
            raise SpecError("esp_widths", f"need three positive widths, the last two divisible by 4; "
                                          f"got {self.esp_widths}")

    @property
    def has_lstm(self) -> bool:
        return self.architecture == "VSSNet" or self.lstm_position != "None"

    @property
    def filter_size(self) -> int:
        if self.lstm_filter:
            return self.lstm_filter
        return DEFAULT_POSITION_FILTERS.get(self.lstm_position, 3)

    def to_kv(self) -> dict[str, str]:
        kv = {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}
        kv["esp_widths"] = "/".join(str(w) for w in self.esp_widths)
        return kv

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_kv().items())

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelSpec":
        kwargs = {}
        int_fields = {"lstm_filter", "num_classes", "base_channels"}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise SpecError(key, "unknown model spec field")
            if key in int_fields:
                try:
                    kwargs[key] = int(raw)
                except ValueError:
                    raise SpecError(key, f"expected an integer, got {raw!r}") from None
            elif key == "esp_widths":
                try:
                    kwargs[key] = tuple(int(v) for v in raw.replace(",", "/").split("/"))
                except ValueError:
                    raise SpecError(key, f"expected three integers like 4/24/80, got {raw!r}") from None
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        """Parse ``key=value`` pairs separated by commas, semicolons or newlines.

        ``esp_widths`` uses ``/`` between its three values.
        """
        kv = {}
        for part in text.replace(";", "\n").replace(",", "\n").splitlines():
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise SpecError(part, "expected key=value")
            k, v = part.split("=", 1)
            kv[k.strip()] = v.strip()
        return cls.from_kv(kv)


# ----------------------------------------------------------------------------
# parameter helpers
# ----------------------------------------------------------------------------

class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, DualTensor] = {}

    def conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        # He-uniform with the PReLU gain at its initial slope
        bound = np.sqrt(6.0 / ((1.0 + PRELU_INIT ** 2) * c_in * k * k))
        self.params[f"{name}.weight"] = DualTensor(self.rng.uniform(-bound, bound, (c_out, c_in, k, k)),
                                                   name=f"{name}.weight")
        self.params[f"{name}.bias"] = DualTensor(np.zeros(c_out), name=f"{name}.bias")

    def prelu(self, name: str, channels: int) -> None:
        self.params[f"{name}.slope"] = DualTensor(np.full(channels, PRELU_INIT), name=f"{name}.slope")

    def esp(self, name: str, c_in: int, c_out: int) -> None:
        d = c_out // 4
        self.conv(f"{name}.reduce", c_in, d, 1)
        for r in ESP_DILATIONS:
            self.conv(f"{name}.d{r}", d, d, 3)
        self.prelu(f"{name}.act", c_out)

    def lstm(self, c_in: int, c_out: int, spec: ModelSpec, dilation: int = 1) -> ConvLstmCell:
        k = spec.filter_size
        cfg = ConvLstmConfig(c_in, c_out, k, k, spec.lstm_variant, spec.state_activation, dilation)
        cell = ConvLstmCell.create(cfg, self.rng, prefix="lstm.")
        self.params.update(cell.named_parameters())
        return cell


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, DualTensor]
    lstm: ConvLstmCell | None = None
    layers: list[str] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def named_parameters(self) -> dict[str, DualTensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape} != model {p.shape}")
            p.data[...] = arrays[k]

    def logits(self, frames) -> Tensor:
        """Class scores ``[K, T, H, W]`` for a scene ``frames[T, 3, H, W]``."""
        if isinstance(frames, Tensor):
            x = tn.add(frames, Tensor(np.full(frames.shape, -INPUT_CENTER)))
        else:
            x = Tensor(np.asarray(frames, dtype=np.float64) - INPUT_CENTER)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"frames must be [T, 3, H, W], got {x.shape}")
        x = tn.transpose(x, (1, 0, 2, 3))
        if self.spec.architecture == "MiniEsp":
            h, w = x.shape[-2:]
            if h % 4 or w % 4:
                raise ValueError(f"MiniEsp needs frame sizes divisible by 4, got {h}x{w}")
            return _mini_esp_forward(self, x)
        return _ssnet_forward(self, x)


def _conv(model: Model, name: str, x: Tensor, dilation: int = 1) -> Tensor:
    p = model.params
    return tn.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], dilation=dilation)


def _prelu(model: Model, name: str, x: Tensor) -> Tensor:
    return tn.prelu(x, model.params[f"{name}.slope"])


def _ssnet_forward(model: Model, x: Tensor) -> Tensor:
    n_conv = 5 if model.spec.architecture == "VSSNet" else 6
    for k in range(n_conv):
        x = _prelu(model, f"act{k + 1}", _conv(model, f"conv{k + 1}", x, SSNET_DILATIONS[k]))
    if model.lstm is not None:
        x = model.lstm.run(x)
    return _conv(model, "head", x)


def _esp_block(model: Model, name: str, x: Tensor) -> Tensor:
    red = _conv(model, f"{name}.reduce", x)
    branches = [_conv(model, f"{name}.d{r}", red, r) for r in ESP_DILATIONS]
    fused = [branches[0]]
    for b in branches[1:]:
        fused.append(tn.add(fused[-1], b))
    out = tn.concat([red] + fused, axis=0)
    if out.shape == x.shape:
        out = tn.add(out, x)
    return _prelu(model, f"{name}.act", out)


def _reduce_or_lstm(model: Model, name: str, position: str, x: Tensor) -> Tensor:
    if model.spec.lstm_position == position:
        return model.lstm.run(x)
    return _conv(model, name, x)


def _mini_esp_forward(model: Model, x: Tensor) -> Tensor:
    s0 = _prelu(model, "stem.act", _conv(model, "stem", x))
    f = tn.concat([tn.resample(s0, "down2"), tn.resample(x, "down2")], axis=0)
    for k in range(2):
        f = _esp_block(model, f"l1.b{k}", f)
    f1 = f
    f = tn.resample(f1, "down2")
    for k in range(3):
        f = _esp_block(model, f"l2.b{k}", f)
    f2 = f

    r2 = _reduce_or_lstm(model, "red2", "L1b", f2)
    r1 = _reduce_or_lstm(model, "red1", "L1c", f1)
    u1 = _prelu(model, "fuse1.act", _conv(model, "fuse1", tn.concat([tn.resample(r2, "up2"), r1], axis=0)))
    r0 = _reduce_or_lstm(model, "red0", "L1d", s0)
    logits = _conv(model, "fuse0", tn.concat([tn.resample(u1, "up2"), r0], axis=0))
    if model.spec.lstm_position == "L1a":
        logits = model.lstm.run(logits)
    return logits


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Create a model with deterministic initial weights for ``seed``."""
    rng = np.random.default_rng(seed)
    b = _Builder(rng)
    k = spec.num_classes
    lstm = None
    layers: list[str] = []
    if spec.architecture in ("SSNet", "VSSNet"):
        c = spec.base_channels
        n_conv = 6 if spec.architecture == "SSNet" else 5
        for i in range(n_conv):
            b.conv(f"conv{i + 1}", 3 if i == 0 else c, c, 3)
            b.prelu(f"act{i + 1}", c)
            layers.append(f"conv{i + 1}")
        if spec.architecture == "VSSNet":
            # the cell keeps the replaced layer's dilation, and so its receptive field
            lstm = b.lstm(c, c, spec, SSNET_DILATIONS[-1])
            layers.append("lstm")
        b.conv("head", c, k, 1)
        layers.append("head")
    else:
        w0, w1, w2 = spec.esp_widths
        pos = spec.lstm_position
        b.conv("stem", 3, w0, 3)
        b.prelu("stem.act", w0)
        b.esp("l1.b0", w0 + 3, w1)
        b.esp("l1.b1", w1, w1)
        b.esp("l2.b0", w1, w2)
        b.esp("l2.b1", w2, w2)
        b.esp("l2.b2", w2, w2)
        layers += ["stem", "l1.b0", "l1.b1", "l2.b0", "l2.b1", "l2.b2"]
        for name, tap, c_in in (("red2", "L1b", w2), ("red1", "L1c", w1), ("red0", "L1d", w0)):
            if pos == tap:
                lstm = b.lstm(c_in, k, spec)
                layers.append("lstm")
            else:
                b.conv(name, c_in, k, 1)
                layers.append(name)
        b.conv("fuse1", 2 * k, k, 3)
        b.prelu("fuse1.act", k)
        b.conv("fuse0", 2 * k, k, 1)
        layers += ["fuse1", "fuse0"]
        if pos == "L1a":
            lstm = b.lstm(k, k, spec)
            layers.append("lstm")
    return Model(spec, b.params, lstm, layers)


def forward_sequence(model: Model, frames) -> Tensor:
    """Per-pixel class probabilities ``[T, M, N, K]`` for one scene."""
    probs = tn.softmax_channels(model.logits(frames))
    return tn.transpose(probs, (1, 2, 3, 0))


def predict(model: Model, frames) -> np.ndarray:
    """Probabilities as a plain array, with parameters treated as constants."""
    saved = {k: p.requires_grad for k, p in model.params.items()}
    try:
        for p in model.params.values():
            p.requires_grad = False
        return forward_sequence(model, frames).data
    finally:
        for k, p in model.params.items():
            p.requires_grad = saved[k]


def parameter_report(model: Model) -> dict[str, int]:
    """Learnable scalars per top-level layer name, in build order."""
    out: dict[str, int] = {}
    for name, p in model.params.items():
        layer = name.split(".")[0] if not name.startswith(("l1.", "l2.")) else ".".join(name.split(".")[:2])
        out[layer] = out.get(layer, 0) + p.data.size
    return out
