"""Structure recovery from first- and second-order projection moments under
paired uniform and non-uniform orientation distributions."""

__version__ = "0.1.0"

from .model import (
    BlockOrthogonal,
    DistributionCoefficients,
    PolarGrid,
    VolumeCoefficients,
    density_at,
    random_distribution,
    random_volume,
    validate,
)

__all__ = [
    "BlockOrthogonal",
    "DistributionCoefficients",
    "PolarGrid",
    "VolumeCoefficients",
    "density_at",
    "random_distribution",
    "random_volume",
    "validate",
    "__version__",
]
