"""Cross-attention in three flavors plus the transformer-style fusion layer.

* dense        — softmax(Q K^T / sqrt(d_k)) V with learned projections.
* ssa          — binary-spike Q/K/V; the map Q K^T and the product with V are
                 computed by the add-only spike kernels, scaled by omega, and
                 re-spiked through a stateful output neuron.
* ttsa         — ternary-spike Q/K so negative-negative alignment survives;
                 the signed map is converted to a {0,1} mask by a binary
                 neuron whose membrane state carries across the time window
                 (the temporal-awareness mechanism), and the mask gates a
                 real-valued V by row selection.

The fusion layer wraps one attention sublayer and one feed-forward sublayer,
each with a residual connection and layer normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError
from .modules import BatchNorm, LayerNorm, Linear, Module, kaiming_uniform
from .neurons import BSN, TSN, SpikeTrain
from .tensor import (
    Tensor,
    _accum,
    _record,
    _unbroadcast,
    add,
    matmul,
    mul_const,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "AttentionConfig",
    "FusionWeights",
    "CrossFusionLayer",
    "cross_attention_dense",
    "ssa",
    "ttsa",
    "split_heads",
    "merge_heads",
    "spike_attention_map",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and mode configuration shared by all attention variants."""

    d_model: int = 32
    n_heads: int = 8
    d_ff: int = 128
    omega: float = 0.125
    t_len: int = 5
    mode: str = "dense"  # dense | ssa | ttsa
    stateless_mask: bool = False  # ablation: reset the ttsa mask neuron every step

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not self.omega > 0:
            raise ConfigError("omega must be positive")
        if self.mode not in ("dense", "ssa", "ttsa"):
            raise ConfigError(f"unknown attention mode: {self.mode!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


# --------------------------------------------------------------------------
# Head bookkeeping
# --------------------------------------------------------------------------


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., N, d] -> [..., H, N, d/H]."""
    *lead, n, d = x.shape
    if d % n_heads:
        raise DimensionError(f"feature dim {d} not divisible by {n_heads} heads")
    y = reshape(x, (*lead, n, n_heads, d // n_heads))
    k = len(lead)
    perm = tuple(range(k)) + (k + 1, k, k + 2)
    return transpose(y, perm)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, N, d_k] -> [..., N, H*d_k]; inverse of split_heads."""
    *lead, h, n, dk = x.shape
    k = len(lead)
    perm = tuple(range(k)) + (k + 1, k, k + 2)
    y = transpose(x, perm)
    return reshape(y, (*lead, n, h * dk))


def _swap_last2(x: Tensor) -> Tensor:
    perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, perm)


# --------------------------------------------------------------------------
# Spike-map ops: add-only kernels forward, standard matmul rules backward
# --------------------------------------------------------------------------

_ALPHABETS = {
    "binary": (0.0, 1.0),
    "ternary": (-1.0, 0.0, 1.0),
}


def _check_alphabet(data: np.ndarray, kind: str, what: str) -> None:
    allowed = _ALPHABETS[kind]
    ok = np.isin(data, allowed).all() if data.size else True
    if not ok:
        raise ContractError(f"{what} contains values outside the {kind} alphabet")


def spike_attention_map(q: Tensor, k: Tensor, kind: str) -> Tensor:
    """Attention map Q K^T computed by signed accumulation only.

    ``q``/``k`` are [..., N, d_k] spike tensors over the given alphabet; the
    forward pass routes through the add/sub kernel backend (never a general
    multiply), while the backward pass uses ordinary matrix products.
    """
    _check_alphabet(q.data, kind, "attention query")
    _check_alphabet(k.data, kind, "attention key")
    fn = kernels.ternary_map if kind == "ternary" else kernels.binary_map
    out = Tensor._wrap(fn(q.data, k.data), q.requires_grad or k.requires_grad)

    def backward(g):
        if q.requires_grad:
            _accum(q, _unbroadcast(np.matmul(g, k.data), q.shape))
        if k.requires_grad:
            _accum(k, _unbroadcast(np.matmul(np.swapaxes(g, -1, -2), q.data), k.shape))

    return _record(out, backward)


def gated_value_sum(mask: Tensor, v: Tensor) -> Tensor:
    """Row-selection sum of ``v`` under a {0,1} mask, via the add-only kernel."""
    _check_alphabet(mask.data, "binary", "attention mask")
    out = Tensor._wrap(kernels.masked_value_sum(mask.data, v.data),
                       mask.requires_grad or v.requires_grad)

    def backward(g):
        if mask.requires_grad:
            _accum(mask, _unbroadcast(np.matmul(g, np.swapaxes(v.data, -1, -2)), mask.shape))
        if v.requires_grad:
            _accum(v, _unbroadcast(np.matmul(np.swapaxes(mask.data, -1, -2), g), v.shape))

    return _record(out, backward)


def map_times_binary_values(a: Tensor, v: Tensor) -> Tensor:
    """Product A V for binary ``v``, accumulated by gated additions."""
    _check_alphabet(v.data, "binary", "attention values")
    out = Tensor._wrap(kernels.weighted_value_sum(a.data, v.data),
                       a.requires_grad or v.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(v.data, -1, -2)), a.shape))
        if v.requires_grad:
            _accum(v, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), v.shape))

    return _record(out, backward)


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


class FusionWeights(Module):
    """Learned state of one fusion layer.

    Projections carry no bias (normalization or softmax absorbs shifts);
    positional encodings are learnable and start at zero.  Dense mode owns an
    output projection; spiking modes own the batchnorms in front of their
    Q/K/V neurons instead.
    """

    def __init__(self, cfg: AttentionConfig, n_q_tokens: int, n_kv_tokens: int,
                 rng: np.random.Generator):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.w_q = Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True)
        self.w_k = Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True)
        self.w_v = Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True)
        if cfg.mode == "dense":
            self.w_o = Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True)
        else:
            self.bn_q = BatchNorm(d, feature_axis=-1)
            self.bn_k = BatchNorm(d, feature_axis=-1)
            self.bn_v = BatchNorm(d, feature_axis=-1)
        self.ffn1 = Linear(d, cfg.d_ff, rng)
        self.ffn2 = Linear(cfg.d_ff, d, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.pos_q = Tensor(np.zeros((n_q_tokens, d), np.float32), requires_grad=True)
        self.pos_kv = Tensor(np.zeros((n_kv_tokens, d), np.float32), requires_grad=True)


# --------------------------------------------------------------------------
# The three attention variants
# --------------------------------------------------------------------------


def cross_attention_dense(x1: Tensor, x2: Tensor, w: FusionWeights,
                          cfg: AttentionConfig) -> Tensor:
    """Multi-head softmax cross-attention; ``x1`` queries attend to ``x2``."""
    if x1.shape[-1] != cfg.d_model or x2.shape[-1] != cfg.d_model:
        raise DimensionError(
            f"expected feature dim {cfg.d_model}, got {x1.shape[-1]}/{x2.shape[-1]}"
        )
    q = split_heads(matmul(x1, w.w_q), cfg.n_heads)
    k = split_heads(matmul(x2, w.w_k), cfg.n_heads)
    v = split_heads(matmul(x2, w.w_v), cfg.n_heads)
    scores = mul_const(matmul(q, _swap_last2(k)), 1.0 / np.sqrt(cfg.d_k))
    counters = kernels.active_counters()
    if counters is not None:
        n1, n2 = q.shape[-2], k.shape[-2]
        lead = int(np.prod(scores.shape[:-2], dtype=np.int64))  # heads and batch
        counters.multiplies += lead * n1 * n2 * cfg.d_k
    weights = softmax(scores)
    out = merge_heads(matmul(weights, v))
    return matmul(out, w.w_o)


def _window_values(x, kind: str | None) -> Tensor:
    if isinstance(x, SpikeTrain):
        x = x.values
    if kind is not None:
        _check_alphabet(x.data, kind, "attention input train")
    return x


def ssa(x1_spikes, x2_spikes, w: FusionWeights, cfg: AttentionConfig,
        tag: str = "ssa") -> SpikeTrain:
    """Binary spiking cross-attention over a [T, ..., N, d] window.

    Per step: Q/K/V are re-spiked through independent neurons after a
    batch-normalized projection; the map Q K^T (non-negative integers) and
    its product with the binary V are accumulated by the add-only kernels,
    scaled by omega, and passed through an output neuron whose membrane
    state persists across the window.
    """
    v1 = _window_values(x1_spikes, "binary")
    v2 = _window_values(x2_spikes, "binary")
    q = BSN(tag=f"{tag}.q").run(w.bn_q(matmul(v1, w.w_q)))
    k = BSN(tag=f"{tag}.k").run(w.bn_k(matmul(v2, w.w_k)))
    v = BSN(tag=f"{tag}.v").run(w.bn_v(matmul(v2, w.w_v)))
    qh = split_heads(q, cfg.n_heads)
    kh = split_heads(k, cfg.n_heads)
    vh = split_heads(v, cfg.n_heads)
    amap = spike_attention_map(qh, kh, "binary")
    scaled = mul_const(map_times_binary_values(amap, vh), cfg.omega)
    out = BSN(tag=f"{tag}.out").run(scaled)
    return SpikeTrain(values=merge_heads(out), kind="binary")


def ttsa(x1_spikes, x2_feats, w: FusionWeights, cfg: AttentionConfig,
         tag: str = "ttsa") -> Tensor:
    """Temporal-aware ternary spiking cross-attention.

    Q and K are ternary spike trains, so anti-aligned negative features
    still produce positive map entries.  The signed integer map is converted
    to a {0,1} mask by a binary neuron that carries membrane state across
    the window (disabled by ``cfg.stateless_mask`` for ablations), and each
    query's output is the sum of the real-valued V rows its mask selects.
    """
    v1 = _window_values(x1_spikes, None)
    v2 = _window_values(x2_feats, None)
    q = TSN(tag=f"{tag}.q").run(w.bn_q(matmul(v1, w.w_q)))
    k = TSN(tag=f"{tag}.k").run(w.bn_k(matmul(v2, w.w_k)))
    v = w.bn_v(matmul(v2, w.w_v))  # stays real-valued: the mask does the gating
    qh = split_heads(q, cfg.n_heads)
    kh = split_heads(k, cfg.n_heads)
    vh = split_heads(v, cfg.n_heads)
    amap = spike_attention_map(qh, kh, "ternary")
    if cfg.stateless_mask:
        from .tensor import index_axis0, stack

        steps = []
        for t in range(amap.shape[0]):
            fresh = BSN(tag=f"{tag}.mask")
            steps.append(fresh.step(index_axis0(amap, t)))
        mask = stack(steps, axis=0)
    else:
        mask = BSN(tag=f"{tag}.mask").run(amap)
    gated = gated_value_sum(mask, vh)
    return merge_heads(gated)


# --------------------------------------------------------------------------
# Cross-fusion layer
# --------------------------------------------------------------------------


class CrossFusionLayer(Module):
    """Attention sublayer + feed-forward sublayer, each residual + layernorm.

    Dense mode maps [..., N1, d] x [..., N2, d] -> [..., N1, d].  Spiking
    modes map real-valued per-step token currents [T, ..., N, d]: positional
    encodings are added to the currents, a binary neuron converts them to
    spike trains for the attention variant, and residuals operate on the
    real-valued currents.
    """

    def __init__(self, cfg: AttentionConfig, n_q_tokens: int, n_kv_tokens: int,
                 rng: np.random.Generator, tag: str = "cfl"):
        super().__init__()
        self.cfg = cfg
        self.tag = tag
        self.w = FusionWeights(cfg, n_q_tokens, n_kv_tokens, rng)

    def __call__(self, e1: Tensor, e2: Tensor) -> Tensor:
        cfg, w = self.cfg, self.w
        e1p = add(e1, w.pos_q)
        e2p = add(e2, w.pos_kv)
        if cfg.mode == "dense":
            attended = cross_attention_dense(e1p, e2p, w, cfg)
            y1 = w.ln1(add(e1p, attended))
            f = w.ffn2(relu(w.ffn1(y1)))
            return w.ln2(add(y1, f))
        s1 = BSN(tag=f"{self.tag}.enc1").run(e1p)
        s2 = BSN(tag=f"{self.tag}.enc2").run(e2p)
        if cfg.mode == "ssa":
            attended = ssa(s1, s2, w, cfg, tag=f"{self.tag}.ssa").values
        else:
            attended = ttsa(s1, s2, w, cfg, tag=f"{self.tag}.ttsa")
        y1 = w.ln1(add(e1p, attended))
        h = BSN(tag=f"{self.tag}.ffn").run(w.ffn1(y1))
        return w.ln2(add(y1, w.ffn2(h)))
