# sceneslots_core/__init__.py
from .config_manager import ConfigError, ConfigManager
from .logger_setup import setup_logging
from .tensor import Tensor, Parameter, backward, grad, no_grad, precision, set_precision
from .camera import CameraView, orbit_views
from .encoder import SceneEncoder, SlotSet
from .fields import LocalityBox, NeuralSceneFields, SceneFields
from .renderer import VolumeRenderer, compose, integrate
from .losses import FeatureExtractor, Discriminator, LossWeights
from .scene_model import SceneModel
from .checkpoint import Checkpoint, CheckpointError, checkpoint_save, read_checkpoint
from .scenegen import AnalyticSceneFields, SceneDataset, generate_dataset, load_dataset, write_dataset
from .trainer import Trainer, progressive_run
from .evaluator import SceneEvaluator, ari, eval_run, psnr, ssim
from .editor import EditError, EditPlan, apply_edits, select_slot_by_mask
from .gradcheck import run_gradcheck
from .run_state import RunState
from .user_interaction import UserInteraction
from .workflow_controller import WorkflowController

__all__ = [
    "ConfigError",
    "ConfigManager",
    "setup_logging",
    "Tensor",
    "Parameter",
    "backward",
    "grad",
    "no_grad",
    "precision",
    "set_precision",
    "CameraView",
    "orbit_views",
    "SceneEncoder",
    "SlotSet",
    "LocalityBox",
    "NeuralSceneFields",
    "SceneFields",
    "VolumeRenderer",
    "compose",
    "integrate",
    "FeatureExtractor",
    "Discriminator",
    "LossWeights",
    "SceneModel",
    "Checkpoint",
    "CheckpointError",
    "checkpoint_save",
    "read_checkpoint",
    "AnalyticSceneFields",
    "SceneDataset",
    "generate_dataset",
    "load_dataset",
    "write_dataset",
    "Trainer",
    "progressive_run",
    "SceneEvaluator",
    "ari",
    "eval_run",
    "psnr",
    "ssim",
    "EditError",
    "EditPlan",
    "apply_edits",
    "select_slot_by_mask",
    "run_gradcheck",
    "RunState",
    "UserInteraction",
    "WorkflowController",
]
