"""Single-pixel imaging with learned binary masks and GAN-trained reconstruction."""

from spigan.imaging import (
    ConvergenceError,
    MaskSet,
    MeasurementVector,
    NoiseConfig,
    binarize,
    classical_reconstruct,
    decompose_mask,
    forward_measure,
    hadamard_reconstruct_full,
    sampling_count,
    walsh_hadamard_masks,
)

__all__ = [
    "ConvergenceError",
    "MaskSet",
    "MeasurementVector",
    "NoiseConfig",
    "binarize",
    "classical_reconstruct",
    "decompose_mask",
    "forward_measure",
    "hadamard_reconstruct_full",
    "sampling_count",
    "walsh_hadamard_masks",
]
__version__ = "0.1.0"
