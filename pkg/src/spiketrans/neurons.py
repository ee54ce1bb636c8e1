"""Spike encoding and stateful binary/ternary leaky integrate-and-fire layers.

A neuron layer integrates its spatial input current into a decaying membrane
potential and emits spikes on threshold crossings:

    m(t) = v(t-1) + x(t)
    s(t) = spike(m(t))
    v(t) = decay/reset update of m(t)

Binary layers emit {0,1}; ternary layers use an asymmetric pair of
thresholds and emit {-1,0,1} (+1 at or above the positive threshold, -1 at
or below the negative one).  Two reset modes are supported: ``hard`` sets
fired positions to ``v_reset`` exactly, ``subtractive`` (the training
default) subtracts the crossed threshold before decay.  The backward path
through the spike uses the arctangent surrogate; for ternary neurons the
surrogate is the sum of the two kernels shifted to the two thresholds.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError, RangeError, UsageError
from .modules import Module
from .tensor import (
    SurrogateSpec,
    Tensor,
    _accum,
    _record,
    add,
    add_const,
    heaviside_surrogate,
    mul,
    mul_const,
    neg,
    repeat_axis0,
    sub,
)

__all__ = [
    "EncoderSpec",
    "SpikeTrain",
    "NeuronState",
    "encode_rate",
    "bsn_step",
    "tsn_step",
    "BSN",
    "TSN",
    "run_window",
    "set_active_recorder",
    "active_recorder",
]

_MASK64 = (1 << 64) - 1

_RECORDER = threading.local()


def set_active_recorder(recorder) -> None:
    """Install (or clear, with None) this thread's spike-density recorder."""
    _RECORDER.value = recorder


def active_recorder():
    return getattr(_RECORDER, "value", None)


# --------------------------------------------------------------------------
# Spike trains and rate encoding
# --------------------------------------------------------------------------


@dataclass
class SpikeTrain:
    """Time-major spike tensor of shape [T, ...] over a fixed alphabet."""

    values: Tensor
    kind: str = "binary"  # "binary" -> {0,1}, "ternary" -> {-1,0,1}

    @property
    def t_len(self) -> int:
        return self.values.shape[0]

    def validate(self) -> "SpikeTrain":
        data = self.values.data
        if self.kind == "binary":
            ok = np.all((data == 0.0) | (data == 1.0))
        elif self.kind == "ternary":
            ok = np.all((data == 0.0) | (data == 1.0) | (data == -1.0))
        else:
            raise ConfigError(f"unknown spike alphabet: {self.kind!r}")
        if not ok:
            raise ContractError(f"values outside the {self.kind} spike alphabet")
        return self


@dataclass(frozen=True)
class EncoderSpec:
    """Bernoulli rate-encoding configuration.

    Inputs are interpreted as per-element firing probabilities.  In the
    default mode values are clamped to [0, 1] first; ``strict=True`` turns
    out-of-range input into an error instead.
    """

    kind: str = "bernoulli"
    t_len: int = 5
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if self.kind != "bernoulli":
            raise ConfigError(f"unknown encoder kind: {self.kind!r}")
        if self.t_len < 1:
            raise ConfigError("t_len must be >= 1")


def _step_uniforms(seed: int, step: int, shape) -> np.ndarray:
    # Counter-based stream keyed by (seed, step); the position within the
    # stream is the flat element index.  Re-encoding a stored observation
    # with the same spec is therefore bit-identical across runs.
    key = np.array([seed & _MASK64, step], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random(size=shape, dtype=np.float32)


def encode_rate(x, spec: EncoderSpec) -> SpikeTrain:
    """Expand values in [0, 1] into a binary spike train of length t_len."""
    p = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if spec.strict:
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise RangeError("encoder input outside [0, 1] in strict mode")
    else:
        p = np.clip(p, 0.0, 1.0)
    steps = [
        (_step_uniforms(spec.seed, t, p.shape) < p).astype(np.float32)
        for t in range(spec.t_len)
    ]
    values = Tensor._wrap(np.stack(steps, axis=0), False)
    return SpikeTrain(values=values, kind="binary")


# --------------------------------------------------------------------------
# Neuron dynamics
# --------------------------------------------------------------------------


@dataclass
class NeuronState:
    """Membrane potential plus the threshold/reset configuration it evolves under."""

    v: Tensor
    beta: float = 0.5
    v_reset: float = 0.0
    vth_pos: float = 1.0
    vth_neg: float | None = None
    reset_mode: str = "subtractive"
    surrogate: SurrogateSpec = SurrogateSpec()

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.reset_mode not in ("hard", "subtractive"):
            raise ConfigError(f"unknown reset mode: {self.reset_mode!r}")
        if self.vth_pos <= 0.0:
            raise ConfigError("vth_pos must be positive")
        if self.vth_neg is not None and self.vth_neg >= 0.0:
            raise ConfigError("vth_neg must be negative")


def _check_shapes(x: Tensor, state: NeuronState) -> None:
    if x.shape != state.v.shape:
        raise DimensionError(f"input shape {x.shape} does not match membrane {state.v.shape}")


def _count_comparisons(n: int) -> None:
    c = kernels.active_counters()
    if c is not None:
        c.comparisons += n


def bsn_step(x: Tensor, state: NeuronState) -> tuple[Tensor, NeuronState]:
    """One binary LIF step: integrate, fire at vth_pos, decay/reset."""
    _check_shapes(x, state)
    m = add(state.v, x)
    s = heaviside_surrogate(add_const(m, -state.vth_pos), state.surrogate)
    _count_comparisons(s.size)
    if state.reset_mode == "hard":
        decayed = mul_const(mul(m, add_const(neg(s), 1.0)), state.beta)
        v_new = add(decayed, mul_const(s, state.v_reset))
    else:
        v_new = mul_const(sub(m, mul_const(s, state.vth_pos)), state.beta)
    return s, replace(state, v=v_new)


def lif_window(x: Tensor, kind: str, beta: float, vth_pos: float,
               vth_neg: float | None, v_reset: float, reset_mode: str,
               surrogate: SurrogateSpec) -> Tensor:
    """Fused LIF scan over a [T, ...] window: one tape node for all steps.

    The forward recursion is exactly the per-step dynamics of
    :func:`bsn_step` / :func:`tsn_step`; the backward pass replays the
    chain rule through membrane and reset in reverse (backprop through
    time), using the surrogate derivative at every threshold crossing.
    """
    data = x.data
    t_len = data.shape[0]
    v = np.zeros(data.shape[1:], np.float32)
    membranes = np.empty_like(data)
    spikes = np.empty_like(data)
    b32 = np.float32(beta)
    thp = np.float32(vth_pos)
    vr = np.float32(v_reset)
    thn = np.float32(vth_neg) if vth_neg is not None else None
    for t in range(t_len):
        m = v + data[t]
        membranes[t] = m
        if kind == "binary":
            s = (m >= thp).astype(np.float32)
            if reset_mode == "hard":
                v = b32 * m * (1.0 - s) + vr * s
            else:
                v = b32 * (m - thp * s)
        else:
            sp = (m >= thp).astype(np.float32)
            sn = (m <= thn).astype(np.float32)
            s = sp - sn
            if reset_mode == "hard":
                fired = sp + sn
                v = b32 * m * (1.0 - fired) + vr * fired
            else:
                v = b32 * (m - thp * sp - thn * sn)
        spikes[t] = s
    out = Tensor._wrap(spikes, x.requires_grad)

    def backward(g):
        dx = np.empty_like(g)
        gv = None
        for t in reversed(range(t_len)):
            m = membranes[t]
            if kind == "binary":
                sig = surrogate.grad(m - thp)
                gm = g[t] * sig
                if gv is not None:
                    if reset_mode == "hard":
                        s = spikes[t]
                        gm = gm + gv * (b32 * (1.0 - s) + (vr - b32 * m) * sig)
                    else:
                        gm = gm + gv * (b32 * (1.0 - thp * sig))
            else:
                sigp = surrogate.grad(m - thp)
                sign = surrogate.grad(thn - m)
                gm = g[t] * (sigp + sign)
                if gv is not None:
                    if reset_mode == "hard":
                        fired = np.abs(spikes[t])
                        gm = gm + gv * (b32 * (1.0 - fired) + (vr - b32 * m) * (sigp - sign))
                    else:
                        gm = gm + gv * (b32 * (1.0 - thp * sigp + thn * sign))
            dx[t] = gm
            gv = gm
        _accum(x, dx, own=True)

    return _record(out, backward)


def tsn_step(x: Tensor, state: NeuronState) -> tuple[Tensor, NeuronState]:
    """One ternary LIF step with asymmetric thresholds.

    Emits +1 where the membrane reaches vth_pos and -1 where it falls to
    vth_neg.  The spike is assembled as H(m - vth_pos) - H(vth_neg - m), so
    the surrogate backward is automatically the sum of the two arctangent
    kernels centered on the thresholds.
    """
    if state.vth_neg is None:
        raise ConfigError("ternary step requires vth_neg < 0")
    _check_shapes(x, state)
    m = add(state.v, x)
    sp = heaviside_surrogate(add_const(m, -state.vth_pos), state.surrogate)
    sn = heaviside_surrogate(add_const(neg(m), state.vth_neg), state.surrogate)
    _count_comparisons(2 * m.size)
    s = sub(sp, sn)
    if state.reset_mode == "hard":
        fired = add(sp, sn)
        decayed = mul_const(mul(m, add_const(neg(fired), 1.0)), state.beta)
        v_new = add(decayed, mul_const(fired, state.v_reset))
    else:
        shifted = sub(sub(m, mul_const(sp, state.vth_pos)), mul_const(sn, state.vth_neg))
        v_new = mul_const(shifted, state.beta)
    return s, replace(state, v=v_new)


# --------------------------------------------------------------------------
# Layer wrappers
# --------------------------------------------------------------------------


class _SpikingLayer(Module):
    kind = "binary"
    _step_fn = staticmethod(bsn_step)

    def __init__(self, beta: float = 0.5, vth_pos: float = 1.0, vth_neg: float | None = None,
                 v_reset: float = 0.0, reset_mode: str = "subtractive",
                 surrogate: SurrogateSpec | None = None, tag: str = ""):
        super().__init__()
        self.beta = beta
        self.vth_pos = vth_pos
        self.vth_neg = vth_neg
        self.v_reset = v_reset
        self.reset_mode = reset_mode
        self.surrogate = surrogate or SurrogateSpec()
        self.tag = tag or self.__class__.__name__.lower()
        self._state: NeuronState | None = None
        self._remaining: int | None = None

    def reset_state(self) -> None:
        self._state = None
        self._remaining = None

    def begin(self, t_len: int, template: Tensor) -> None:
        """Start a fresh simulation window of t_len steps."""
        self._state = NeuronState(
            v=Tensor._wrap(np.zeros(template.shape, np.float32), False),
            beta=self.beta, v_reset=self.v_reset, vth_pos=self.vth_pos,
            vth_neg=self.vth_neg, reset_mode=self.reset_mode, surrogate=self.surrogate,
        )
        self._remaining = int(t_len)

    def step(self, x: Tensor, t_len: int = 1) -> Tensor:
        """Advance the window one step; begins a window of t_len if fresh."""
        if self._remaining is not None and self._remaining <= 0:
            raise UsageError(
                f"spike window of layer {self.tag!r} is exhausted; "
                "reset_state() before an unrelated forward"
            )
        if self._state is None:
            self.begin(t_len, x)
        s, self._state = self._step_fn(x, self._state)
        if self._remaining is not None:
            self._remaining -= 1
        rec = active_recorder()
        if rec is not None:
            rec.record(self.tag, s.data)
        return s

    def run(self, x, t_len: int | None = None) -> Tensor:
        """Map a whole window with fresh state: fused scan over axis 0.

        ``x`` may be a SpikeTrain, a [T, ...] Tensor, or a plain Tensor that
        is repeated for t_len steps.  Afterwards the window is exhausted;
        reset_state() is required before stepping the layer again.
        """
        if isinstance(x, SpikeTrain):
            x = x.values
            t_len = None  # the train's own time axis wins
        self.reset_state()
        if t_len is not None:
            x = repeat_axis0(x, int(t_len))
        out = lif_window(x, self.kind, self.beta, self.vth_pos, self.vth_neg,
                         self.v_reset, self.reset_mode, self.surrogate)
        self._remaining = 0  # bare step() after a run is a stale-state error
        _count_comparisons((2 if self.kind == "ternary" else 1) * out.size)
        rec = active_recorder()
        if rec is not None:
            rec.record(self.tag, out.data)
        return out


class BSN(_SpikingLayer):
    """Binary spiking neuron layer (LIF, single positive threshold)."""

    kind = "binary"
    _step_fn = staticmethod(bsn_step)


class TSN(_SpikingLayer):
    """Ternary spiking neuron layer (asymmetric thresholds, default -4/+1)."""

    kind = "ternary"
    _step_fn = staticmethod(tsn_step)

    def __init__(self, beta: float = 0.5, vth_pos: float = 1.0, vth_neg: float = -4.0,
                 v_reset: float = 0.0, reset_mode: str = "subtractive",
                 surrogate: SurrogateSpec | None = None, tag: str = ""):
        if vth_neg is None or not vth_neg < 0.0 < vth_pos:
            raise ConfigError("ternary layer requires vth_neg < 0 < vth_pos")
        super().__init__(beta=beta, vth_pos=vth_pos, vth_neg=vth_neg, v_reset=v_reset,
                         reset_mode=reset_mode, surrogate=surrogate, tag=tag)


def run_window(layer: _SpikingLayer, x, t_len: int | None = None) -> SpikeTrain:
    """Run a layer across a simulation window and return its spike train."""
    values = layer.run(x, t_len=t_len)
    return SpikeTrain(values=values, kind=layer.kind)
