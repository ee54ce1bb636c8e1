"""The multi-modal Q-network, its spiking variants, and checkpoint I/O.

Pipeline per modality: conv feature extractor -> token embedding -> cross
fusion -> flatten -> decision head.  Variants:

* ``dense``      — ReLU activations, softmax cross-attention.
* ``ssa``        — Bernoulli-encoded inputs, binary LIF activations, binary
                   spiking attention.
* ``ttsa``       — as ssa but with the temporal-aware ternary attention.
* ``unimodal4``  — baseline: a stack of 4 grayscale frames through the
                   top-down-view conv geometry, no fusion.
* ``unimodal1``  — same with a single frame.

Spiking variants unroll the T-step window by folding time into the batch for
the stateless layers and scanning it in the neuron layers; the Q readout is
a per-step linear layer averaged over the window, which preserves the
argmax of the summed-spikes readout.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionConfig, CrossFusionLayer
from .errors import ConfigError, DimensionError, IntegrityError
from .lidar_image import LidarImageSpec, lidar_to_image
from .modules import BatchNorm, Conv2d, Linear, Module
from .neurons import BSN, EncoderSpec, encode_rate
from .tensor import Tensor, conv_output_size, reduce_mean, relu, reshape, transpose

__all__ = [
    "NetworkSpec",
    "MMDQN",
    "Checkpoint",
    "infer_shapes",
    "save_checkpoint",
    "load_checkpoint",
    "build_from_checkpoint",
    "parameter_report",
    "count_network_flops",
    "prepare_inputs",
]

VARIANTS = ("dense", "ssa", "ttsa", "unimodal4", "unimodal1")

# Distinguishes the two modalities' Bernoulli streams for one forward seed.
_LIDAR_SEED_SALT = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyperparameters; defaults are the reference configuration."""

    variant: str = "dense"
    input_hw: int = 64
    conv_channels: tuple = (8, 16, 16)
    bev_kernels: tuple = (5, 3, 3)
    bev_strides: tuple = (3, 2, 1)
    lidar_kernels: tuple = (7, 5, 3)
    lidar_strides: tuple = (3, 3, 1)
    d_model: int = 32
    n_heads: int = 8
    d_ff: int = 128
    decision_ff: int = 512
    n_actions: int = 5
    t_len: int = 5
    omega: float = 0.125
    stateless_mask: bool = False
    lidar_d_max: float = 60.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        infer_shapes(self)  # raises ConfigError on degenerate grids

    @property
    def multimodal(self) -> bool:
        return self.variant in ("dense", "ssa", "ttsa")

    @property
    def spiking(self) -> bool:
        return self.variant in ("ssa", "ttsa")

    @property
    def frame_stack(self) -> int:
        return {"unimodal4": 4, "unimodal1": 1}.get(self.variant, 1)


def _conv_grid(hw: int, kernels, strides) -> int:
    n = hw
    for k, s in zip(kernels, strides):
        if k > n:
            raise ConfigError(f"conv kernel {k} exceeds input size {n}")
        n = conv_output_size(n, k, s)
        if n < 1:
            raise ConfigError("conv stack collapses the grid below 1x1")
    return n


def infer_shapes(spec: NetworkSpec) -> dict:
    """Dry-run shape inference; raises ConfigError on inconsistency."""
    bev_grid = _conv_grid(spec.input_hw, spec.bev_kernels, spec.bev_strides)
    lidar_grid = _conv_grid(spec.input_hw, spec.lidar_kernels, spec.lidar_strides)
    c_out = spec.conv_channels[-1]
    return {
        "bev_grid": bev_grid,
        "lidar_grid": lidar_grid,
        "bev_tokens": bev_grid * bev_grid,
        "lidar_tokens": lidar_grid * lidar_grid,
        "token_features": c_out,
        "flat_dim": bev_grid * bev_grid * spec.d_model,
        "unimodal_flat_dim": bev_grid * bev_grid * c_out,
    }


# --------------------------------------------------------------------------
# Observation -> network input arrays
# --------------------------------------------------------------------------


def lidar_raster_spec(spec: NetworkSpec) -> LidarImageSpec:
    """Raster spec whose grid matches the network's input resolution."""
    voxel = 2.0 * spec.lidar_d_max / spec.input_hw
    return LidarImageSpec(d_max=spec.lidar_d_max, voxel_size=voxel)


def prepare_inputs(observations, spec: NetworkSpec) -> np.ndarray | tuple:
    """Stack a batch of observations into the arrays the network consumes.

    Multi-modal variants return (bev [B,1,H,W], lidar [B,1,H,W]); the lidar
    beams are rasterized to a velocity-intensity image and collapsed to one
    luminance channel.  Unimodal variants return the stacked frames
    [B,k,H,W] and require k frames in the observation's raster.
    """
    if not isinstance(observations, (list, tuple)):
        observations = [observations]
    hw = spec.input_hw
    bev = np.stack([np.asarray(o.bev, np.float32) for o in observations])
    if not spec.multimodal:
        k = spec.frame_stack
        if bev.shape[1] != k:
            raise ConfigError(
                f"variant {spec.variant!r} needs {k} stacked frames, got {bev.shape[1]}"
            )
        if bev.shape[2:] != (hw, hw):
            raise ConfigError(f"expected {hw}x{hw} rasters, got {bev.shape[2:]}")
        return bev
    if bev.shape[1:] != (1, hw, hw):
        raise ConfigError(f"expected bev shape (1, {hw}, {hw}), got {bev.shape[1:]}")
    raster = lidar_raster_spec(spec)
    imgs = []
    for o in observations:
        # Observations are sampled repeatedly from the replay buffer, so the
        # rasterization is memoized on the observation object.
        cached = getattr(o, "_lidar_raster", None)
        if cached is None or cached[0] != raster.voxel_size:
            rgb = lidar_to_image(o.lidar_beams, o.ego_speed, o.ego_heading, raster)
            cached = (raster.voxel_size, rgb[:1].copy())  # equal channels: keep one
            try:
                o._lidar_raster = cached
            except AttributeError:
                pass
        imgs.append(cached[1])
    lidar = np.stack(imgs)
    return bev, lidar


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


class _ConvStack(Module):
    def __init__(self, in_channels: int, spec: NetworkSpec, kernels, strides,
                 rng, spiking: bool, tag: str):
        super().__init__()
        chans = (in_channels,) + tuple(spec.conv_channels)
        self.conv1 = Conv2d(chans[0], chans[1], kernels[0], strides[0], rng)
        self.conv2 = Conv2d(chans[1], chans[2], kernels[1], strides[1], rng)
        self.conv3 = Conv2d(chans[2], chans[3], kernels[2], strides[2], rng)
        self.spiking = spiking
        if spiking:
            # Spiking stacks need normalized membrane drive or activity dies
            # within a layer or two; batchnorm precedes every neuron, the
            # same arrangement the spiking attention paths use.
            self.bn1 = BatchNorm(chans[1], feature_axis=1)
            self.bn2 = BatchNorm(chans[2], feature_axis=1)
            self.bn3 = BatchNorm(chans[3], feature_axis=1)
        self.tag = tag

    def _apply(self, conv, bn, x):
        if not self.spiking:
            return conv(x)
        t, b = x.shape[0], x.shape[1]
        y = bn(conv(reshape(x, (t * b,) + tuple(x.shape[2:]))))
        return reshape(y, (t, b) + tuple(y.shape[1:]))

    def __call__(self, x: Tensor) -> Tensor:
        # Dense: x[B,C,H,W] with ReLU; spiking: x[T,B,C,H,W], time folded
        # into the batch for the convs and scanned by the neurons.
        stages = ((self.conv1, getattr(self, "bn1", None)),
                  (self.conv2, getattr(self, "bn2", None)),
                  (self.conv3, getattr(self, "bn3", None)))
        for i, (conv, bn) in enumerate(stages, start=1):
            x = self._apply(conv, bn, x)
            if self.spiking:
                x = BSN(tag=f"{self.tag}.lif{i}").run(x)
            else:
                x = relu(x)
        return x


def _to_tokens(x: Tensor, spiking: bool) -> Tensor:
    """[.., C, h, w] feature map -> [.., h*w, C] token matrix."""
    *lead, c, h, w = x.shape
    flat = reshape(x, (*lead, c, h * w))
    k = len(lead)
    return transpose(flat, tuple(range(k)) + (k + 1, k))


class MMDQN(Module):
    """Action-value network mapping an observation to one value per action."""

    def __init__(self, spec: NetworkSpec, init_seed: int = 0):
        super().__init__()
        self.spec = spec
        self.shapes = infer_shapes(spec)
        rng = np.random.default_rng(init_seed)
        sp = spec.spiking
        if spec.multimodal:
            self.bev_extractor = _ConvStack(1, spec, spec.bev_kernels, spec.bev_strides,
                                            rng, sp, "bev")
            self.lidar_extractor = _ConvStack(1, spec, spec.lidar_kernels, spec.lidar_strides,
                                              rng, sp, "lidar")
            c = self.shapes["token_features"]
            self.emb_bev = Linear(c, spec.d_model, rng)
            self.emb_lidar = Linear(c, spec.d_model, rng)
            if sp:
                self.emb_bn_bev = BatchNorm(spec.d_model, feature_axis=-1)
                self.emb_bn_lidar = BatchNorm(spec.d_model, feature_axis=-1)
                self.head_bn = BatchNorm(spec.decision_ff, feature_axis=-1)
            att_mode = spec.variant if sp else "dense"
            self.cfl = CrossFusionLayer(
                AttentionConfig(d_model=spec.d_model, n_heads=spec.n_heads,
                                d_ff=spec.d_ff, omega=spec.omega, t_len=spec.t_len,
                                mode=att_mode, stateless_mask=spec.stateless_mask),
                n_q_tokens=self.shapes["bev_tokens"],
                n_kv_tokens=self.shapes["lidar_tokens"],
                rng=rng,
            )
            head_in = self.shapes["flat_dim"]
        else:
            self.frames_extractor = _ConvStack(spec.frame_stack, spec, spec.bev_kernels,
                                               spec.bev_strides, rng, False, "frames")
            head_in = self.shapes["unimodal_flat_dim"]
        self.head1 = Linear(head_in, spec.decision_ff, rng)
        self.head2 = Linear(spec.decision_ff, spec.n_actions, rng)

    # -- forward ----------------------------------------------------------

    def forward_q(self, observations, encoder_seed: int = 0) -> Tensor:
        """Q-values [B, n_actions] for a batch of observations."""
        inputs = prepare_inputs(observations, self.spec)
        if not self.spec.multimodal:
            return self._forward_unimodal_arrays(inputs)
        bev, lidar = inputs
        if self.spec.spiking:
            return self._forward_spiking(bev, lidar, encoder_seed)
        return self._forward_dense(bev, lidar)

    def forward_unimodal(self, frames) -> Tensor:
        """Q-values from stacked grayscale frames [B,k,H,W] or [k,H,W]."""
        arr = np.asarray(frames, np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        k = self.spec.frame_stack
        if self.spec.multimodal or arr.shape[1] != k:
            raise ConfigError(
                f"variant {self.spec.variant!r} expects {k} stacked frames, got shape {arr.shape}"
            )
        return self._forward_unimodal_arrays(arr)

    def _forward_unimodal_arrays(self, frames: np.ndarray) -> Tensor:
        x = self.frames_extractor(Tensor(frames))
        flat = reshape(x, (x.shape[0], -1))
        return self.head2(relu(self.head1(flat)))

    def _forward_dense(self, bev: np.ndarray, lidar: np.ndarray) -> Tensor:
        t1 = self.emb_bev(_to_tokens(self.bev_extractor(Tensor(bev)), False))
        t2 = self.emb_lidar(_to_tokens(self.lidar_extractor(Tensor(lidar)), False))
        fused = self.cfl(t1, t2)
        flat = reshape(fused, (fused.shape[0], -1))
        return self.head2(relu(self.head1(flat)))

    def _forward_spiking(self, bev: np.ndarray, lidar: np.ndarray, encoder_seed: int) -> Tensor:
        t_len = self.spec.t_len
        bev_train = encode_rate(bev, EncoderSpec(t_len=t_len, seed=encoder_seed))
        lidar_train = encode_rate(
            lidar, EncoderSpec(t_len=t_len, seed=encoder_seed ^ _LIDAR_SEED_SALT))
        s1 = self.bev_extractor(bev_train.values)
        s2 = self.lidar_extractor(lidar_train.values)
        e1 = self.emb_bn_bev(self.emb_bev(_to_tokens(s1, True)))
        e2 = self.emb_bn_lidar(self.emb_lidar(_to_tokens(s2, True)))
        fused = self.cfl(e1, e2)  # [T, B, N1, d]
        t, b = fused.shape[0], fused.shape[1]
        flat = reshape(fused, (t, b, -1))
        h = BSN(tag="head.lif").run(self.head_bn(self.head1(flat)))
        q_per_step = self.head2(h)  # [T, B, n_actions]
        return reduce_mean(q_per_step, 0, keepdims=False)

    # -- persistence --------------------------------------------------------

    def state_blobs(self) -> "OrderedDict[str, np.ndarray]":
        blobs = OrderedDict()
        for name, p in self.named_parameters():
            blobs[name] = p.data
        for name, b in self.named_buffers():
            blobs[name] = b
        return blobs

    def load_blobs(self, blobs: "OrderedDict[str, np.ndarray]") -> None:
        own = self.state_blobs()
        for name, target in own.items():
            if name not in blobs:
                raise DimensionError(f"checkpoint is missing blob {name!r}")
            src = blobs[name]
            if tuple(src.shape) != tuple(target.shape):
                raise DimensionError(
                    f"blob {name!r} has shape {tuple(src.shape)}, expected {tuple(target.shape)}"
                )
            target[...] = src

    def copy_from(self, other: "MMDQN") -> None:
        self.load_blobs(other.state_blobs())


def parameter_report(net: MMDQN) -> str:
    """Structured text listing every parameter blob and the total count."""
    lines = [f"variant: {net.spec.variant}"]
    total = 0
    for name, p in net.named_parameters():
        lines.append(f"{name}: shape={tuple(p.shape)} count={p.size}")
        total += p.size
    lines.append(f"total_parameters: {total}")
    return "\n".join(lines)


def count_network_flops(spec: NetworkSpec) -> int:
    """MAC count of one non-spiking-equivalent forward pass (batch of one).

    One multiply-accumulate counts as one FLOP-equivalent; the energy model
    applies time-step and firing-rate factors separately.
    """
    shapes = infer_shapes(spec)
    total = 0

    def conv_stack(in_ch, kernels, strides):
        nonlocal total
        n = spec.input_hw
        chans = (in_ch,) + tuple(spec.conv_channels)
        for k, s, ci, co in zip(kernels, strides, chans[:-1], chans[1:]):
            n = conv_output_size(n, k, s)
            total += n * n * co * ci * k * k

    if spec.multimodal:
        conv_stack(1, spec.bev_kernels, spec.bev_strides)
        conv_stack(1, spec.lidar_kernels, spec.lidar_strides)
        n1, n2 = shapes["bev_tokens"], shapes["lidar_tokens"]
        c, d = shapes["token_features"], spec.d_model
        total += (n1 + n2) * c * d                      # embeddings
        total += n1 * d * d + 2 * n2 * d * d            # Q/K/V projections
        total += spec.n_heads * n1 * n2 * (spec.d_model // spec.n_heads) * 2  # map + AV
        if spec.variant == "dense":
            total += n1 * d * d                         # output projection
        total += 2 * n1 * d * spec.d_ff                 # feed-forward
        total += shapes["flat_dim"] * spec.decision_ff
    else:
        conv_stack(spec.frame_stack, spec.bev_kernels, spec.bev_strides)
        total += shapes["unimodal_flat_dim"] * spec.decision_ff
    total += spec.decision_ff * spec.n_actions
    return total


# --------------------------------------------------------------------------
# Checkpoint format: magic "MMDQN1", version, JSON header, raw float32 blobs
# --------------------------------------------------------------------------

MAGIC = b"MMDQN1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: dict
    step: int
    seed: int
    blobs: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def save(self, path) -> None:
        header = {
            "blobs": [{"name": n, "shape": list(a.shape)} for n, a in self.blobs.items()],
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "spec": self.spec,
            "step": self.step,
        }
        payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(FORMAT_VERSION).tobytes())
            f.write(np.uint64(len(payload)).tobytes())
            f.write(payload)
            for arr in self.blobs.values():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, net: MMDQN, step: int, seed: int) -> Checkpoint:
    ckpt = Checkpoint(spec=_spec_dict(net.spec), step=step, seed=seed,
                      blobs=net.state_blobs())
    ckpt.save(path)
    return ckpt


def _spec_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    for key, val in d.items():
        if isinstance(val, tuple):
            d[key] = list(val)
    return d


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0
    if raw[:6] != MAGIC:
        raise IntegrityError(f"bad magic header at offset 0: {raw[:6]!r}")
    off = 6
    if len(raw) < off + 12:
        raise IntegrityError(f"truncated header at offset {len(raw)}")
    version = int(np.frombuffer(raw[off:off + 4], np.uint32)[0])
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {version}")
    off += 4
    hlen = int(np.frombuffer(raw[off:off + 8], np.uint64)[0])
    off += 8
    if len(raw) < off + hlen:
        raise IntegrityError(f"truncated JSON header at offset {len(raw)}")
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    blobs = OrderedDict()
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if len(raw) < off + nbytes:
            raise IntegrityError(
                f"truncated blob {entry['name']!r} at offset {off} "
                f"(need {nbytes} bytes, have {len(raw) - off})"
            )
        arr = np.frombuffer(raw[off:off + nbytes], "<f4").reshape(shape).copy()
        blobs[entry["name"]] = arr
        off += nbytes
    if off != len(raw):
        raise IntegrityError(f"{len(raw) - off} trailing bytes after blob payload")
    return Checkpoint(spec=header["spec"], step=header["step"], seed=header["seed"],
                      blobs=blobs)


def spec_from_dict(d: dict) -> NetworkSpec:
    kwargs = dict(d)
    for key, val in kwargs.items():
        if isinstance(val, list):
            kwargs[key] = tuple(val)
    return NetworkSpec(**kwargs)


def build_from_checkpoint(ckpt: Checkpoint, init_seed: int = 0) -> MMDQN:
    net = MMDQN(spec_from_dict(ckpt.spec), init_seed=init_seed)
    net.load_blobs(ckpt.blobs)
    return net


def restore_into(net: MMDQN, ckpt: Checkpoint) -> None:
    """Load a checkpoint into an existing network of the same architecture."""
    net.load_blobs(ckpt.blobs)
    own = _spec_dict(net.spec)
    if ckpt.spec != own:
        for key in sorted(set(own) | set(ckpt.spec)):
            if own.get(key) != ckpt.spec.get(key):
                raise ConfigError(
                    f"checkpoint spec mismatch on {key!r}: "
                    f"{ckpt.spec.get(key)!r} vs {own.get(key)!r}"
                )
