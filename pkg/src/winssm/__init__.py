"""winssm: windowed-scan selective state-space vision models, desk scale.

A from-scratch stack: numpy-backed tensors with a reverse-mode tape, scan
order permutations (horizontal / vertical / window-local, flipped), selective
scan numerics with exact zero-order-hold discretization, gated multi-direction
blocks, plain and hierarchical backbones, differentiable scan-direction
search, toy training, and a CLI (search / train / eval / inspect / ablate /
verify).
"""

from . import blocks, cli_io, models, ndtensor, scan_paths, search, ssm_core, training
from .cli_io import cli_main
from .models import Model, ModelConfig, build_model, model_forward
from .ndtensor import Tape, Tensor
from .scan_paths import Permutation, ScanDirection

__version__ = "0.1.0"

__all__ = [
    "ndtensor",
    "scan_paths",
    "ssm_core",
    "blocks",
    "models",
    "search",
    "training",
    "cli_io",
    "Tensor",
    "Tape",
    "ScanDirection",
    "Permutation",
    "Model",
    "ModelConfig",
    "build_model",
    "model_forward",
    "cli_main",
    "__version__",
]
