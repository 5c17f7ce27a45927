"""Learned variational compression for hyperspectral image cubes."""

__version__ = "0.1.0"

from .codec import Bitstream, compress, compression_ratio, decompress
from .data import CubeFile, load_cube, synth_dataset
from .metrics import RDCurve, bd_psnr, psnr, spectral_angle, ssim
from .model import HyvicConfig, ModelParams, forward
from .training import TrainConfig, rd_loss, train

__all__ = [
    "Bitstream", "CubeFile", "HyvicConfig", "ModelParams", "RDCurve", "TrainConfig", "bd_psnr", "compress",
    "compression_ratio", "decompress", "forward", "load_cube", "psnr", "rd_loss", "spectral_angle", "ssim",
    "synth_dataset", "train",
]
