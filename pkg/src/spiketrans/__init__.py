"""spiketrans: spiking multi-modal cross-attention Q-networks at desk scale.

The package bundles a float32 tensor engine with surrogate-gradient
autodiff, binary/ternary LIF layers, three cross-attention variants (dense
softmax, binary spiking, temporal-aware ternary spiking), the multi-modal
Q-network built from them, a deterministic highway/roundabout simulator,
a DQN training loop, and analysis tools for spike density, representational
capacity, and MAC/AC energy accounting.

The spike attention-map kernels run on a compiled core when available and
on a pure-numpy fallback otherwise; ``spiketrans.kernels.BACKEND`` reports
which one is active (force the fallback with ``SPIKETRANS_PURE=1``).
"""

__version__ = "0.1.0"

from . import analysis, attention, kernels, lidar_image, network, neurons, optim, sim, tensor, trainer
from .attention import AttentionConfig, CrossFusionLayer, cross_attention_dense, ssa, ttsa
from .network import MMDQN, NetworkSpec, load_checkpoint, save_checkpoint
from .neurons import BSN, TSN, EncoderSpec, SpikeTrain, encode_rate, run_window
from .sim import Observation, ScenarioConfig, default_config, make_env
from .tensor import SurrogateSpec, Tape, Tensor
from .trainer import ReplayBuffer, TrainConfig, Transition, evaluate, td_loss, train

__all__ = [
    "__version__",
    "analysis", "attention", "kernels", "lidar_image", "network", "neurons",
    "optim", "sim", "tensor", "trainer",
    "AttentionConfig", "CrossFusionLayer", "cross_attention_dense", "ssa", "ttsa",
    "MMDQN", "NetworkSpec", "load_checkpoint", "save_checkpoint",
    "BSN", "TSN", "EncoderSpec", "SpikeTrain", "encode_rate", "run_window",
    "Observation", "ScenarioConfig", "default_config", "make_env",
    "SurrogateSpec", "Tape", "Tensor",
    "ReplayBuffer", "TrainConfig", "Transition", "evaluate", "td_loss", "train",
]
