"""Light field compression with a kernel-modulated convolutional representation."""

__version__ = "0.1.0"

from .bitstream import FormatError, compute_bpp, deserialize, serialize
from .lightfield import LightField, load_lightfield, make_synthetic_lf, psnr, save_lightfield
from .model import NetworkConfig, forward, init_bank, make_noise, param_count, render_all
from .quantizer import quantize_model, raw_model
from .trainer import TrainSchedule, evaluate, train
from .transfer import pattern, transfer

__all__ = [
    "FormatError",
    "LightField",
    "NetworkConfig",
    "TrainSchedule",
    "compute_bpp",
    "deserialize",
    "evaluate",
    "forward",
    "init_bank",
    "load_lightfield",
    "make_noise",
    "make_synthetic_lf",
    "param_count",
    "pattern",
    "psnr",
    "quantize_model",
    "raw_model",
    "render_all",
    "save_lightfield",
    "serialize",
    "train",
    "transfer",
]
