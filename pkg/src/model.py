import math
from typing import Tuple

import torch
from torch import (
    Tensor,
    nn,
)

from src.config import TrainConfig
from src.errors import InvalidArgumentError
from src.geometry import (
    DTYPE,
    lift_tangent,
)
from src.quantizer import (
    Codebook,
    init_codebooks,
)


class Model(nn.Module):
    """Linear projector followed by the hyperbolic product quantizer."""

    projector: nn.Linear
    """Linear map D_in => M*(d+1), with bias."""
    codebook: Codebook
    config: TrainConfig

    def __init__(
        self,
        input_dim: int,
        config: TrainConfig,
        codebook: Codebook,
    ) -> None:
        """
        Constructor.

        Args:
            input_dim (int): Dimension D_in of the feature vectors.
            config (TrainConfig): The configuration the model is trained with.
            codebook (Codebook): The codebook.
        """
        super().__init__()

        if input_dim < 1:
            raise InvalidArgumentError(f'Input dimension must be >= 1, got {input_dim}')

        self.config = config
        self.codebook = codebook
        self.projector = nn.Linear(input_dim, codebook.M * (codebook.d + 1), dtype=DTYPE)

    @classmethod
    def create(
        cls,
        input_dim: int,
        config: TrainConfig,
    ) -> 'Model':
        """
        Build a freshly initialized model, deterministically from `config.seed`.

        Args:
            input_dim (int): Dimension D_in of the feature vectors.
            config (TrainConfig): The configuration.
        """
        codebook = init_codebooks(
            config.M,
            config.K,
            config.d,
            theta_init=config.theta_init,
            seed=config.seed,
            tau=config.tau,
            learnable_curvature=config.learnable_curvature,
        )
        model = cls(input_dim, config, codebook)

        # Same bounds as the default initialization, drawn from a private generator
        generator = torch.Generator().manual_seed(config.seed + 1)
        bound = 1.0 / math.sqrt(input_dim)
        with torch.no_grad():
            for tensor in (model.projector.weight, model.projector.bias):
                tensor.copy_((torch.rand(tensor.shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound)

        return model

    @property
    def input_dim(self) -> int:
        """Dimension D_in of the feature vectors."""
        return self.projector.in_features

    @property
    def curvatures(self) -> Tensor:
        """Curvatures theta of shape `(M,)`."""
        return self.codebook.curvatures

    def embed(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Embed feature vectors on the product manifold.

        Args:
            x (Tensor): Features of shape `(..., D_in)`.

        Returns:
            Tuple[Tensor, Tensor]: The clipped tangent vectors, shape `(..., M*(d+1))`,
                and the product points, shape `(..., M, d+1)`.
        """
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.input_dim:
            raise InvalidArgumentError(f'Expected features of dimension {self.input_dim}, got {x.shape[-1]}')

        projected = self.projector(x).reshape(*x.shape[:-1], self.codebook.M, self.codebook.d + 1)
        tangent, points = lift_tangent(projected, self.curvatures)

        return tangent.flatten(start_dim=-2), points
