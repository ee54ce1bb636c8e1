"""Quantitative analysis: capacity, alignment loss, spike density, energy.

* capacity_bits       — closed-form representational capacity of float32,
                        binary-train, per-step binary, and ternary codes.
* prop2_demo          — shows that binary rate codes destroy the alignment
                        of jointly negative query/key pairs (their dot
                        product is positive but the binary spike map is
                        identically zero) while ternary codes preserve it.
* DensityRecorder     — per-layer spike-event counting over a forward.
* energy_estimate     — MAC/AC energy model comparing a conventional
                        network with a spiking one at a given density.
* OpCounters          — add/multiply/compare accounting for the attention
                        kernels; the map paths must report zero multiplies.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, UsageError
from .neurons import BSN, TSN, set_active_recorder
from .tensor import Tensor

__all__ = [
    "OpCounters",
    "count_ops",
    "capacity_bits",
    "prop2_demo",
    "LayerDensity",
    "SpikeStats",
    "DensityRecorder",
    "record_density",
    "EnergyReport",
    "energy_estimate",
    "format_report",
]

E_MAC_PJ = 4.6  # energy per multiply-accumulate, picojoules
E_AC_PJ = 0.9   # energy per accumulate, picojoules


# --------------------------------------------------------------------------
# Operation counting
# --------------------------------------------------------------------------


@dataclass
class OpCounters:
    """Monotone counters filled by instrumented kernels within a session."""

    multiplies: int = 0
    additions: int = 0
    comparisons: int = 0

    def merge(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(
            multiplies=self.multiplies + other.multiplies,
            additions=self.additions + other.additions,
            comparisons=self.comparisons + other.comparisons,
        )

    __add__ = merge

    def as_dict(self) -> dict:
        return {"multiplies": self.multiplies, "additions": self.additions,
                "comparisons": self.comparisons}


@contextmanager
def count_ops(counters: OpCounters | None = None):
    """Enable counting on the attention kernels for the enclosed code.

    Counted sites: the spike map kernels (signed adds), the mask/value
    gating kernels (adds), neuron threshold tests (comparisons), and the
    dense attention map (multiplies, computed in closed form).  The gating
    of a real-valued V by a spike mask is classified as additions: it is a
    row-selection accumulate, not a multiply.
    """
    session = counters if counters is not None else OpCounters()
    previous = kernels.active_counters()
    kernels.set_active_counters(session)
    try:
        yield session
    finally:
        kernels.set_active_counters(previous)


# --------------------------------------------------------------------------
# Capacity formulas
# --------------------------------------------------------------------------

_CAPACITY_KINDS = ("float32", "binary", "binary_step", "ternary")


def capacity_bits(kind: str, t_len: int, c: int, h: int, w: int) -> int:
    """Maximum-entropy capacity, in bits, of a [c, h, w] feature volume.

    float32: 32 bits per element; binary: one bit per element per time step;
    binary_step: one bit per element (a single step is visible at a time);
    ternary: two bits per element per time step.
    """
    for name, value in (("t_len", t_len), ("c", c), ("h", h), ("w", w)):
        if value < 1:
            raise UsageError(f"{name} must be positive, got {value}")
    volume = c * h * w
    if kind == "float32":
        return 32 * volume
    if kind == "binary":
        return t_len * volume
    if kind == "binary_step":
        return volume
    if kind == "ternary":
        return 2 * t_len * volume
    raise UsageError(f"unknown capacity kind {kind!r}; expected one of {_CAPACITY_KINDS}")


# --------------------------------------------------------------------------
# Negative-negative alignment demonstrator
# --------------------------------------------------------------------------


def _encode_constant_drive(layer_cls, values: np.ndarray, t_len: int) -> np.ndarray:
    """Spike trains [T, trials, d] of neurons driven by a constant input."""
    layer = layer_cls()
    train = layer.run(Tensor(values.astype(np.float32)), t_len=t_len)
    return train.data


def prop2_demo(d: int = 16, trials: int = 1000, seed: int = 0, t_len: int = 5) -> dict:
    """Sample all-negative (q, k) pairs and compare their spike maps.

    Every pair has q.k > 0, yet the binary spike map sums s(q_i, t) s(k_i, t)
    of neurons that never fire for non-positive drive, so it is identically
    zero.  The ternary encoding emits -1 spikes whose coincidences produce
    positive map entries for a large fraction of pairs.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & ((1 << 64) - 1), 0x9902], dtype=np.uint64)))
    q = -rng.uniform(0.2, 6.0, size=(trials, d))
    k = -rng.uniform(0.2, 6.0, size=(trials, d))
    dots = np.einsum("td,td->t", q, k)

    sq_bin = _encode_constant_drive(BSN, q, t_len)
    sk_bin = _encode_constant_drive(BSN, k, t_len)
    sq_ter = _encode_constant_drive(TSN, q, t_len)
    sk_ter = _encode_constant_drive(TSN, k, t_len)

    m_bin = np.zeros(trials)
    m_ter = np.zeros(trials)
    for t in range(t_len):
        m_bin += kernels.binary_map(sq_bin[t][:, None, :], sk_bin[t][:, None, :])[:, 0, 0]
        m_ter += kernels.ternary_map(sq_ter[t][:, None, :], sk_ter[t][:, None, :])[:, 0, 0]

    positive = dots > 0
    violations = positive & (m_bin == 0)
    idx = int(np.argmax(violations)) if violations.any() else 0
    witness = {
        "q": q[idx].copy(),
        "k": k[idx].copy(),
        "dot": float(dots[idx]),
        "binary_map": float(m_bin[idx]),
        "ternary_map": float(m_ter[idx]),
    }
    return {
        "trials": trials,
        "d": d,
        "positive_dot_rate": float(np.mean(positive)),
        "violation_rate": float(np.mean(violations[positive])) if positive.any() else 0.0,
        "ternary_nonzero_rate": float(np.mean(m_ter[positive] != 0)) if positive.any() else 0.0,
        "witness": witness,
    }


# --------------------------------------------------------------------------
# Spike density accounting
# --------------------------------------------------------------------------


@dataclass
class LayerDensity:
    events: int = 0
    element_steps: int = 0

    @property
    def density(self) -> float:
        return self.events / self.element_steps if self.element_steps else 0.0


@dataclass
class SpikeStats:
    per_layer: dict = field(default_factory=dict)

    @property
    def total_events(self) -> int:
        return sum(v.events for v in self.per_layer.values())

    @property
    def total_element_steps(self) -> int:
        return sum(v.element_steps for v in self.per_layer.values())

    @property
    def mean_density(self) -> float:
        total = self.total_element_steps
        return self.total_events / total if total else 0.0

    def to_csv(self) -> str:
        lines = ["layer,events,element_steps,density"]
        for name in sorted(self.per_layer):
            d = self.per_layer[name]
            lines.append(f"{name},{d.events},{d.element_steps},{d.density:.6g}")
        return "\n".join(lines) + "\n"


class DensityRecorder:
    """Accumulates nonzero spike events per layer tag; a ternary -1 counts
    as one event."""

    def __init__(self):
        self._layers: dict[str, LayerDensity] = {}

    def record(self, tag: str, values: np.ndarray) -> None:
        entry = self._layers.setdefault(tag, LayerDensity())
        entry.events += int(np.count_nonzero(values))
        entry.element_steps += int(values.size)

    def stats(self) -> SpikeStats:
        return SpikeStats(per_layer=dict(self._layers))


def record_density(net, observations, encoder_seed: int = 0) -> SpikeStats:
    """Run a spiking forward with density hooks and return the statistics."""
    if not net.spec.spiking:
        raise UsageError(f"density recording needs a spiking variant, got {net.spec.variant!r}")
    recorder = DensityRecorder()
    was_training = net.training
    net.eval()
    set_active_recorder(recorder)
    try:
        net.forward_q(observations, encoder_seed=encoder_seed)
    finally:
        set_active_recorder(None)
        if was_training:
            net.train()
    return recorder.stats()


# --------------------------------------------------------------------------
# Energy model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    flops_equivalent: int
    t_len: int
    mean_density: float
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ
    e_ann: float = 0.0  # picojoules, flops * e_mac
    e_snn: float = 0.0  # picojoules, flops * t_len * density * e_ac

    @property
    def e_ann_per_op(self) -> float:
        return self.e_ann / self.flops_equivalent

    @property
    def e_snn_per_op(self) -> float:
        return self.e_snn / self.flops_equivalent

    @property
    def ratio(self) -> float:
        return self.e_snn / self.e_ann if self.e_ann else 0.0

    def as_dict(self) -> dict:
        return {
            "flops_equivalent": self.flops_equivalent,
            "t_len": self.t_len,
            "mean_density": self.mean_density,
            "e_mac_pj": self.e_mac,
            "e_ac_pj": self.e_ac,
            "e_ann_pj": self.e_ann,
            "e_snn_pj": self.e_snn,
            "e_ann_per_op_pj": self.e_ann_per_op,
            "e_snn_per_op_pj": self.e_snn_per_op,
            "snn_to_ann_ratio": self.ratio,
        }


def energy_estimate(flops: int, density: float, t_len: int,
                    e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> EnergyReport:
    """Estimated energy of one forward pass under the MAC/AC cost model."""
    if flops <= 0:
        raise ConfigError("flops must be positive")
    if not 0.0 <= density <= 1.0:
        raise ConfigError("density must lie in [0, 1]")
    if t_len < 1:
        raise ConfigError("t_len must be >= 1")
    return EnergyReport(
        flops_equivalent=int(flops),
        t_len=int(t_len),
        mean_density=float(density),
        e_mac=e_mac,
        e_ac=e_ac,
        e_ann=flops * e_mac,
        e_snn=flops * t_len * density * e_ac,
    )


def format_report(mapping: dict, title: str | None = None) -> str:
    """Flat ``key: value`` structured text block."""
    lines = [f"[{title}]"] if title else []
    for key, value in mapping.items():
        if isinstance(value, float):
            lines.append(f"{key}: {value:.6g}")
        elif isinstance(value, np.ndarray):
            lines.append(f"{key}: {np.array2string(value, precision=4, separator=', ')}")
        else:
            lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
