"""Rigid CT-to-X-ray registration with a learned correlation encoder."""

from .se3 import Pose, TangentVec, exp_map, log_map, perturb, geodesic_sq, geodesic_grad
from .volume import Volume, make_phantom, load_volume, save_volume
from .drr import ProjectionGeometry, Image2D, project, project_with_jacobian, toy_geometry
from .similarity import ncc, gradient_correlation
from .encoder import EncoderConfig, init_params, encoder_forward, encoder_pose_gradient
from .training import TrainConfig, toy_train_config, train, train_step
from .cmaes import CmaesConfig, cmaes_minimize
from .registration import RegistrationResult, net_register, metric_register_cmaes, pipeline_register
from .evaluation import mtre, percentile_stats, success_rate, batch_evaluate, overlay_edges

__version__ = "0.1.0"


def shipped_checkpoint():
    """Path (without suffix) of the encoder trained with ``scripts/train_toy.py`` defaults."""
    from pathlib import Path
    return Path(__file__).parent / "data" / "toy_encoder"
