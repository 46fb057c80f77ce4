"""Hand-rolled 3D convolutional network stack with manual backprop.

Tensors are plain numpy arrays of shape (channels, nx, ny, nz).  Every layer
implements forward (optionally recording what backward needs) and backward
(accumulating parameter gradients and returning the input gradient); training
runs in float64 so analytic gradients can be checked against central finite
differences.
"""

from .layers import (
    Conv3d,
    ConvTranspose3d,
    InstanceNorm3d,
    LeakyReLU,
    MaxPool3d,
)
from .generator import GeneratorConfig, UNet3D
from .discriminator import (
    DiscriminatorConfig,
    MultiScaleDiscriminator,
    PatchDiscriminator,
    crop_offsets,
    crop_patch,
    crop_scale_patches,
    embed_patch_grad,
)
from .losses import (
    cycle_loss,
    cycle_term,
    gradient_loss,
    gradient_loss_with_grad,
    l1_mean,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    total_generator_objective,
)
from .optim import Adam
from .train import (
    DESK_EMBRYO_TILE,
    DESK_NUCLEI_TILE,
    MODE_SELF,
    MODE_SEMI,
    TrainConfig,
    TrainingError,
    TrainResult,
    load_generator,
    save_params,
    train,
)
from .infer import infer

__all__ = [
    "Adam",
    "Conv3d",
    "ConvTranspose3d",
    "DESK_EMBRYO_TILE",
    "DESK_NUCLEI_TILE",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "InstanceNorm3d",
    "LeakyReLU",
    "MODE_SELF",
    "MODE_SEMI",
    "MaxPool3d",
    "MultiScaleDiscriminator",
    "PatchDiscriminator",
    "TrainConfig",
    "TrainingError",
    "TrainResult",
    "UNet3D",
    "crop_offsets",
    "crop_patch",
    "crop_scale_patches",
    "cycle_loss",
    "cycle_term",
    "embed_patch_grad",
    "gradient_loss",
    "gradient_loss_with_grad",
    "infer",
    "l1_mean",
    "load_generator",
    "lsgan_discriminator_loss",
    "lsgan_generator_loss",
    "save_params",
    "total_generator_objective",
    "train",
]
