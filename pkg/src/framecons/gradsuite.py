"""Finite-difference checks of every analytic gradient, grouped by scope.

Each case builds a small random problem from a seed and returns the worst
relative error between backprop and central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .convlstm import ConvLstmCell, ConvLstmConfig, VARIANTS
from .labels import IGNORE
from .losses import LossConfig, total_loss
from .models import ModelSpec, build, forward_sequence
from .tensor import Tensor, grad_check, param_grad_check

SCOPES = ("primitives", "cell", "model", "loss")
TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    scope: str
    name: str
    seed: int
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.scope:<10} {self.name:<34} seed={self.seed:<3} err={self.error:.3e} {status}"


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2) -> np.ndarray:
    """Random values with |v| >= low, for ops with a kink at zero."""
    mag = rng.uniform(low, 1.5, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _probe(fn: Callable[[Tensor], Tensor], rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Contract ``fn``'s output with fixed random weights to get a scalar."""
    cache = {}

    def wrapped(x: Tensor) -> Tensor:
        out = fn(x)
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return tn.weighted_sum(out, cache["w"])

    return wrapped


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------

def _unary(op, make=None):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = make(rng, (2, 3, 4)) if make else rng.normal(size=(2, 3, 4))
        return grad_check(_probe(op, rng, x.shape), x)
    return case


def _binary(op, which: int):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        if which == 0:
            f = lambda x: op(x, Tensor(b))
            return grad_check(_probe(f, rng, a.shape), a)
        f = lambda x: op(Tensor(a), x)
        return grad_check(_probe(f, rng, b.shape), b)
    return case


def _channelwise(op, which: int, shared: bool = False):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = _away_from_zero(rng, (3, 2, 4, 4))
        v = rng.uniform(0.1, 0.6, size=1 if shared else 3)
        if which == 0:
            return grad_check(_probe(lambda t: op(t, Tensor(v)), rng, x.shape), x)
        return grad_check(_probe(lambda t: op(Tensor(x), t), rng, v.shape), v)
    return case


def _conv_case(which: int, dilation: int, batched: bool = False):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 6, 6) if batched else (2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        args = [x, w, b]

        def f(t: Tensor) -> Tensor:
            ops = [Tensor(a) for a in args]
            ops[which] = t
            return tn.conv2d(ops[0], ops[1], ops[2], dilation=dilation)

        return grad_check(_probe(f, rng, None), args[which])
    return case


def _depthwise_case(which: int, dilation: int):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x, w = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(3, 1, 3, 3))
        if which == 0:
            return grad_check(_probe(lambda t: tn.depthwise_conv2d(t, Tensor(w), dilation), rng, None), x)
        return grad_check(_probe(lambda t: tn.depthwise_conv2d(Tensor(x), t, dilation), rng, None), w)
    return case


def _shape_case(op, shape=(2, 3, 4)):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=shape)
        return grad_check(_probe(op, rng, None), x)
    return case


def _gather_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 1.0, size=(2, 3, 3, 4))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = IGNORE
    return grad_check(_probe(lambda t: tn.gather_classes(t, labels), rng, None), p)


PRIMITIVES: dict[str, Callable[[int], float]] = {
    "add[a]": _binary(tn.add, 0),
    "add[b]": _binary(tn.add, 1),
    "sub[a]": _binary(tn.sub, 0),
    "sub[b]": _binary(tn.sub, 1),
    "mul[a]": _binary(tn.mul, 0),
    "mul[b]": _binary(tn.mul, 1),
    "scale": _unary(lambda t: tn.scale(t, -1.7)),
    "sigmoid": _unary(tn.sigmoid),
    "tanh": _unary(tn.tanh),
    "square": _unary(tn.square),
    "absolute": _unary(tn.absolute, _away_from_zero),
    "log_clamped": _unary(tn.log_clamped, lambda rng, s: rng.uniform(0.1, 2.0, size=s)),
    "prelu[x]": _channelwise(tn.prelu, 0),
    "prelu[slope]": _channelwise(tn.prelu, 1),
    "prelu[shared slope]": _channelwise(tn.prelu, 1, shared=True),
    "channel_scale[x]": _channelwise(tn.channel_scale, 0),
    "channel_scale[v]": _channelwise(tn.channel_scale, 1),
    "channel_bias[b]": _channelwise(tn.channel_bias, 1),
    "sum_all": _shape_case(lambda t: tn.scale(tn.sum_all(tn.square(t)), 0.5)),
    "mean_all": _shape_case(lambda t: tn.mean_all(tn.square(t))),
    "reshape": _shape_case(lambda t: tn.reshape(t, (4, 6))),
    "transpose": _shape_case(lambda t: tn.transpose(t, (2, 0, 1))),
    "concat": _shape_case(lambda t: tn.concat([t, tn.square(t)], axis=1)),
    "stack": _shape_case(lambda t: tn.stack([t, tn.tanh(t)], axis=1)),
    "take": _shape_case(lambda t: tn.take(t, 1, 3, axis=1)),
    "split": _shape_case(lambda t: tn.mul(*tn.split(t, 2, axis=2))),
    "repeat_channels": _shape_case(lambda t: tn.repeat_channels(t, 3), (1, 3, 4)),
    "gather_classes": _gather_case,
    "softmax_channels": _shape_case(tn.softmax_channels, (4, 3, 3)),
    "conv2d[x]": _conv_case(0, 1),
    "conv2d[weight]": _conv_case(1, 1),
    "conv2d[bias]": _conv_case(2, 1),
    "conv2d[x] dilation 2": _conv_case(0, 2),
    "conv2d[weight] batched": _conv_case(1, 1, batched=True),
    "depthwise_conv2d[x]": _depthwise_case(0, 1),
    "depthwise_conv2d[weight] dil 2": _depthwise_case(1, 2),
    "resample down2": _shape_case(lambda t: tn.resample(t, "down2"), (2, 4, 6)),
    "resample up2": _shape_case(lambda t: tn.resample(t, "up2"), (2, 3, 5)),
}


# ----------------------------------------------------------------------------
# ConvLSTM cell through time
# ----------------------------------------------------------------------------

def _cell_case(variant: str, activation: str, steps: int = 3):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        cfg = ConvLstmConfig(2, 2, 3, 3, variant=variant, state_activation=activation)
        cell = ConvLstmCell.create(cfg, rng)
        for p in cell.params.values():  # move off the symmetric init
            p.data += rng.normal(scale=0.3, size=p.shape)
        xs = rng.normal(size=(steps, 2, 4, 4))
        weights = rng.normal(size=(steps, 2, 4, 4))

        def unrolled(x: Tensor) -> Tensor:
            state = cell.zero_state(4, 4)
            total = None
            for t in range(steps):
                h, state = cell.step(tn.reshape(tn.take(x, t, t + 1), (2, 4, 4)), state)
                term = tn.weighted_sum(h, weights[t])
                total = term if total is None else tn.add(total, term)
            return total

        err_x = grad_check(unrolled, xs)
        err_p = param_grad_check(lambda: unrolled(Tensor(xs)), list(cell.params.values()),
                                 max_entries=6, rng=rng)
        return max(err_x, err_p)
    return case


CELL: dict[str, Callable[[int], float]] = {
    f"{variant} {act} x3 steps": _cell_case(variant, act)
    for variant in VARIANTS for act in ("tanh", "prelu")
}


# ----------------------------------------------------------------------------
# whole models and the loss
# ----------------------------------------------------------------------------

TOY_SPECS = {
    "SSNet": ModelSpec("SSNet", num_classes=3, base_channels=3),
    "VSSNet": ModelSpec("VSSNet", num_classes=3, base_channels=3),
    "MiniEsp": ModelSpec("MiniEsp", num_classes=3, esp_widths=(2, 8, 8)),
    "MiniEsp_L1a": ModelSpec("MiniEsp", "L1a", lstm_filter=3, num_classes=3, esp_widths=(2, 8, 8)),
    "MiniEsp_L1b": ModelSpec("MiniEsp", "L1b", num_classes=3, esp_widths=(2, 8, 8)),
    "MiniEsp_L1c": ModelSpec("MiniEsp", "L1c", lstm_filter=3, num_classes=3, esp_widths=(2, 8, 8)),
    "MiniEsp_L1d": ModelSpec("MiniEsp", "L1d", lstm_filter=3, num_classes=3, esp_widths=(2, 8, 8)),
}


def _model_case(spec: ModelSpec):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        model = build(spec, seed)
        frames = rng.uniform(size=(2, 3, 8, 8))
        w = rng.normal(size=(2, 8, 8, spec.num_classes))
        loss = lambda: tn.weighted_sum(forward_sequence(model, frames), w)
        return param_grad_check(loss, list(model.params.values()), max_entries=2, rng=rng)
    return case


MODEL: dict[str, Callable[[int], float]] = {name: _model_case(s) for name, s in TOY_SPECS.items()}


def _loss_case(difference: str):
    def case(seed: int) -> float:
        rng = np.random.default_rng(seed)
        k = 4
        labels = rng.integers(0, k, size=(3, 4, 4)).astype(np.uint8)
        labels[1] = labels[0]  # plenty of GT-consistent pairs
        labels[rng.uniform(size=labels.shape) < 0.15] = IGNORE
        logits = rng.normal(scale=2.0, size=(k, 3, 4, 4))
        config = LossConfig(lambda_ce=1.0, lambda_incons=10.0, difference=difference,
                            class_weights=tuple(rng.uniform(0.5, 2.0, size=k)))

        def f(z: Tensor) -> Tensor:
            probs = tn.transpose(tn.softmax_channels(z), (1, 2, 3, 0))
            return total_loss(probs, labels, config)[0]

        return grad_check(f, logits)
    return case


LOSS: dict[str, Callable[[int], float]] = {
    "total_loss squared": _loss_case("Squared"),
    "total_loss absolute": _loss_case("Absolute"),
}

CASES: dict[str, dict[str, Callable[[int], float]]] = {
    "primitives": PRIMITIVES, "cell": CELL, "model": MODEL, "loss": LOSS,
}


def run_gradcheck(scopes: Iterable[str] = SCOPES, seeds: int = 5, tolerance: float = TOLERANCE,
                  first_seed: int = 0) -> list[CheckResult]:
    results = []
    for scope in scopes:
        if scope not in CASES:
            raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
        for name, case in CASES[scope].items():
            for seed in range(first_seed, first_seed + seeds):
                results.append(CheckResult(scope, name, seed, case(seed), tolerance))
    return results
