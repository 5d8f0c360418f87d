"""Domain-composition calibration for multi-domain segmentation: DCA block,
U-Net backbone, losses, synthetic domains, metrics and training harness."""
from .dca import DCABlock, dca_forward, init_dca_params
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .losses import LossConfig, total_loss
from .network import DCAUNet, NetworkConfig, build_baseline_unet, build_dca_unet
from .trainer import TrainConfig, run_lodo_experiment, train

__version__ = "0.1.0"
