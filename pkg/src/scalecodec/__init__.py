"""Scalable human-machine image coding at desk scale.

A base layer trained as an information bottleneck serves a frozen machine
task through a latent space transform; a residual enhancement layer on top
of the frozen base restores the image for human viewing.
"""

from .codec import decode_image, encode_image, evaluate_base, evaluate_reconstruction
from .config import ConfigError, ExperimentConfig, parse_config
from .entropy import EntropyModel, decode_layer, encode_layer, estimate_rate_bits, pmf, quantize
from .evaluation import (RateQualityCurve, bd_rate, break_even, build_curve, emit_report,
                         ib_discrete_check, psnr)
from .params import ParameterStore, init_params
from .taskproxy import TaskProxy, train_task_proxy
from .training import (Checkpoint, base_loss, enhancement_loss, joint_loss, train_base,
                       train_enhancement, train_joint)

__version__ = "0.1.0"
