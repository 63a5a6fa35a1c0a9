"""Generator architectures: the multi-branch HRNet3D and the 3D U-Net baseline."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .hrnet import REFERENCE_WIDTHS, ConfigError, HRNet3D, ModelConfig, build_hrnet
from .layers import Module
from .unet import UNet3D, UNet3DConfig, build_unet3d, forward_unet

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "HRNet3D",
    "Module",
    "ModelConfig",
    "REFERENCE_WIDTHS",
    "UNet3D",
    "UNet3DConfig",
    "build_hrnet",
    "build_unet3d",
    "forward_unet",
    "load_checkpoint",
    "save_checkpoint",
]
