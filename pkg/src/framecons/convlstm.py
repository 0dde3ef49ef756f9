"""Convolutional LSTM cell with peephole connections, in three convolution variants.

Gate equations for one step (``*`` is the gate convolution, ``o`` elementwise)::

    i  = sigmoid(W_xi * x + W_hi * h + W_ci o c  + b_i)
    f  = sigmoid(W_xf * x + W_hf * h + W_cf o c  + b_f)
    c' = f o c + i o tanh(W_xc * x + W_hc * h + b_c)
    o  = sigmoid(W_xo * x + W_ho * h + W_co o c' + b_o)
    h' = o o act(c')

Variants: ``Standard`` mixes all channels; ``DepthwiseSeparable`` connects
channel k of x/h only to channel k of each gate; ``DepthwiseShared`` uses one
filter per gate-input pair for all channels, and scalar biases/peepholes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import DualTensor, Tensor

VARIANTS = ("Standard", "DepthwiseSeparable", "DepthwiseShared")
ACTIVATIONS = ("tanh", "prelu")
GATES = ("i", "f", "c", "o")
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ConvLstmConfig:
    in_channels: int
    out_channels: int
    filter_height: int = 3
    filter_width: int = 3
    variant: str = "Standard"
    state_activation: str = "tanh"
    dilation: int = 1  # spacing of the filter taps in both gate convolutions

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "filter_height", "filter_width", "dilation"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.filter_height % 2 == 0 or self.filter_width % 2 == 0:
            raise ValueError(f"filter size must be odd, got {self.filter_height}x{self.filter_width}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.state_activation not in ACTIVATIONS:
            raise ValueError(f"state_activation must be one of {ACTIVATIONS}, "
                             f"got {self.state_activation!r}")
        if self.variant != "Standard" and self.in_channels != self.out_channels:
            raise ValueError(f"{self.variant} needs in_channels == out_channels, "
                             f"got {self.in_channels} and {self.out_channels}")


def param_count(config: ConvLstmConfig) -> int:
    """Closed-form learnable-scalar count (the activation slope is not included)."""
    c, d = config.in_channels, config.out_channels
    p, q = config.filter_height, config.filter_width
    if config.variant == "Standard":
        return 4 * (c + d) * p * q * d + 7 * d
    if config.variant == "DepthwiseSeparable":
        return 8 * c * p * q + 7 * c
    return 8 * p * q + 7


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError(f"state h {self.h.shape} and c {self.c.shape} differ in shape")

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "ConvLstmState":
        return cls(Tensor(np.zeros((channels, height, width))),
                   Tensor(np.zeros((channels, height, width))))


@dataclass
class ConvLstmCell:
    config: ConvLstmConfig
    params: dict[str, DualTensor] = field(default_factory=dict)
    prefix: str = "lstm."

    @classmethod
    def create(cls, config: ConvLstmConfig, rng: np.random.Generator,
               prefix: str = "lstm.") -> "ConvLstmCell":
        c, d = config.in_channels, config.out_channels
        p, q = config.filter_height, config.filter_width
        if config.variant == "Standard":
            x_shape, h_shape = (d, c, p, q), (d, d, p, q)
            x_fan, h_fan = c * p * q, d * p * q
            vec = d
        elif config.variant == "DepthwiseSeparable":
            x_shape, h_shape = (c, 1, p, q), (d, 1, p, q)
            x_fan = h_fan = p * q
            vec = d
        else:
            x_shape = h_shape = (1, 1, p, q)
            x_fan = h_fan = p * q
            vec = 1
        params: dict[str, DualTensor] = {}
        for g in GATES:
            bound = np.sqrt(1.0 / x_fan)
            params[f"W_x{g}"] = rng.uniform(-bound, bound, size=x_shape)
            bound = np.sqrt(1.0 / h_fan)
            params[f"W_h{g}"] = rng.uniform(-bound, bound, size=h_shape)
        for g in GATES:
            params[f"b_{g}"] = np.full(vec, 1.0 if g == "f" else 0.0)
        for g in ("i", "f", "o"):
            params[f"W_c{g}"] = np.zeros(vec)
        if config.state_activation == "prelu":
            params["act_slope"] = np.full(d, PRELU_INIT)
        named = {k: DualTensor(v, name=prefix + k) for k, v in params.items()}
        return cls(config, named, prefix)

    def gate_parameters(self) -> list[DualTensor]:
        """The scalars counted by :func:`param_count`."""
        return [t for k, t in self.params.items() if k != "act_slope"]

    def named_parameters(self) -> dict[str, DualTensor]:
        return {self.prefix + k: t for k, t in self.params.items()}

    def zero_state(self, height: int, width: int) -> ConvLstmState:
        return ConvLstmState.zeros(self.config.out_channels, height, width)

    # -- gate convolutions ---------------------------------------------------

    def _stacked(self, src: str) -> Tensor:
        return tn.concat([self.params[f"W_{src}{g}"] for g in GATES], axis=0)

    def _gate_conv(self, inp: Tensor, src: str) -> Tensor:
        """All four gate pre-activations from one input: ``[4D, ...]``."""
        variant = self.config.variant
        w = self._stacked(src)
        dil = self.config.dilation
        if variant == "Standard":
            return tn.conv2d(inp, w, dilation=dil)
        tiled = tn.concat([inp] * 4, axis=0)
        if variant == "DepthwiseShared":
            ch = inp.shape[0]
            w = tn.concat([tn.repeat_channels(tn.take(w, k, k + 1), ch) for k in range(4)], axis=0)
        return tn.depthwise_conv2d(tiled, w, dil)

    def input_gates(self, x: Tensor) -> Tensor:
        """Input contributions for every gate; accepts ``[C, H, W]`` or ``[C, T, H, W]``."""
        if x.shape[0] != self.config.in_channels:
            raise ValueError(f"ConvLSTM expects {self.config.in_channels} input channels, "
                             f"got {x.shape[0]}")
        return self._gate_conv(x, "x")

    def step_from_input_gates(self, xg: Tensor, state: ConvLstmState) -> tuple[Tensor, ConvLstmState]:
        d = self.config.out_channels
        if state.h.shape[0] != d:
            raise ValueError(f"state has {state.h.shape[0]} channels, cell has {d}")
        if xg.shape[1:] != state.h.shape[1:]:
            raise ValueError(f"input spatial dims {xg.shape[1:]} differ from state {state.h.shape[1:]}")
        pre = tn.add(xg, self._gate_conv(state.h, "h"))
        zi, zf, zc, zo = tn.split(pre, 4, axis=0)
        prm = self.params
        c = state.c
        i = tn.sigmoid(tn.channel_bias(tn.add(zi, tn.channel_scale(c, prm["W_ci"])), prm["b_i"]))
        f = tn.sigmoid(tn.channel_bias(tn.add(zf, tn.channel_scale(c, prm["W_cf"])), prm["b_f"]))
        cand = tn.tanh(tn.channel_bias(zc, prm["b_c"]))
        c_new = tn.add(tn.mul(f, c), tn.mul(i, cand))
        o = tn.sigmoid(tn.channel_bias(tn.add(zo, tn.channel_scale(c_new, prm["W_co"])), prm["b_o"]))
        if self.config.state_activation == "prelu":
            act = tn.prelu(c_new, prm["act_slope"])
        else:
            act = tn.tanh(c_new)
        h_new = tn.mul(o, act)
        return h_new, ConvLstmState(h_new, c_new)

    def step(self, x: Tensor, state: ConvLstmState) -> tuple[Tensor, ConvLstmState]:
        if x.ndim != 3:
            raise ValueError(f"step expects a single frame [C, H, W], got {x.shape}")
        return self.step_from_input_gates(self.input_gates(x), state)

    def run(self, xs: Tensor, state: ConvLstmState | None = None) -> Tensor:
        """Apply the cell over ``xs`` of shape ``[C, T, H, W]``; returns ``[D, T, H, W]``.

        The input convolutions for all frames run as one batched call.
        """
        _, t_len, height, width = xs.shape
        state = state or self.zero_state(height, width)
        xg = self.input_gates(xs)
        outs = []
        for t in range(t_len):
            frame_gates = tn.reshape(tn.take(xg, t, t + 1, axis=1), (xg.shape[0], height, width))
            h, state = self.step_from_input_gates(frame_gates, state)
            outs.append(h)
        return tn.stack(outs, axis=1)
