import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import (
    Tensor,
    nn,
)

from src.constants import (
    CODEWORD_INIT_STD,
    DEGENERATE_EPS,
)
from src.errors import (
    DegenerateAggregationError,
    InvalidArgumentError,
)
from src.geometry import (
    DTYPE,
    Curvature,
    exp_map,
    lorentz_distance,
    lorentz_inner,
    origin,
    reproject,
    sq_lorentz_distance,
)
from src.logger import logger

DEFAULT_TAU = 0.2


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def exact_log(theta: Tensor) -> Tensor:
    """
    Logarithm of positive values, nudged so that exp() gives the values back bit-for-bit.

    Args:
        theta (Tensor): Positive values.
    """
    rho = torch.log(theta)
    for _ in range(8):
        back = torch.exp(rho)
        if torch.equal(back, theta):
            break
        rho = torch.where(
            back < theta,
            torch.nextafter(rho, torch.full_like(rho, math.inf)),
            torch.where(back > theta, torch.nextafter(rho, torch.full_like(rho, -math.inf)), rho),
        )

    if not torch.equal(torch.exp(rho), theta):
        logger.warning(f'Curvature log-parameters do not map back exactly to {theta.tolist()}')

    return rho


class Codebook(nn.Module):
    """M sub-codebooks of K hyperbolic codewords, one Lorentz manifold per subspace."""

    codewords: nn.Parameter
    """Codewords of shape `(M, K, d+1)`."""
    log_curvatures: nn.Parameter
    """Curvature log-parameters rho, with theta = exp(rho)."""
    tau: float
    """Temperature of the codebook attention."""

    def __init__(
        self,
        codewords: Tensor,
        curvatures: Tensor,
        tau: float = DEFAULT_TAU,
        learnable_curvature: bool = True,
    ) -> None:
        """
        Constructor.

        Args:
            codewords (Tensor): Codewords of shape `(M, K, d+1)`.
            curvatures (Tensor): Positive curvatures of shape `(M,)`.
            tau (float): Temperature of the codebook attention.
            learnable_curvature (bool): Whether the curvatures are trained.
        """
        super().__init__()

        curvatures = torch.as_tensor(curvatures, dtype=DTYPE)
        if codewords.dim() != 3 or codewords.shape[-1] < 3:
            raise InvalidArgumentError(
                f'Codewords must be shaped (M, K, d+1) with d >= 2, got {tuple(codewords.shape)}'
            )
        if curvatures.shape != (codewords.shape[0],):
            raise InvalidArgumentError(f'Expected {codewords.shape[0]} curvatures, got {tuple(curvatures.shape)}')
        if not bool(torch.all(curvatures > 0)):
            raise InvalidArgumentError(f'Curvatures must be positive, got {curvatures.tolist()}')
        if not _is_power_of_two(codewords.shape[1]):
            raise InvalidArgumentError(f'K must be a power of two, got {codewords.shape[1]}')
        if tau <= 0:
            raise InvalidArgumentError(f'Attention temperature must be positive, got {tau}')

        self.codewords = nn.Parameter(codewords.to(DTYPE).clone())
        self.log_curvatures = nn.Parameter(exact_log(curvatures), requires_grad=learnable_curvature)
        self.tau = tau

    @property
    def M(self) -> int:
        """Number of subspaces."""
        return self.codewords.shape[0]

    @property
    def K(self) -> int:
        """Number of codewords per subspace."""
        return self.codewords.shape[1]

    @property
    def d(self) -> int:
        """Dimension of each Lorentz manifold."""
        return self.codewords.shape[2] - 1

    @property
    def bits(self) -> int:
        """Code length B = M * log2(K)."""
        return self.M * int(math.log2(self.K))

    @property
    def curvatures(self) -> Tensor:
        """Curvatures theta of shape `(M,)`."""
        return torch.exp(self.log_curvatures)

    @torch.no_grad()
    def project_(self) -> None:
        """Put the codewords back on their manifolds after an update."""
        self.codewords.copy_(reproject(self.codewords, self.curvatures.unsqueeze(-1)))

    def content_hash(self) -> bytes:
        """SHA-256 of the curvatures and codewords (little-endian f64)."""
        digest = hashlib.sha256()
        digest.update(self.curvatures.detach().numpy().astype('<f8').tobytes())
        digest.update(self.codewords.detach().numpy().astype('<f8').tobytes())

        return digest.digest()


@dataclass
class QuantCode:
    """Codeword indices of one or several items."""

    indices: np.ndarray
    """Indices of shape `(..., M)`, each in [0, K)."""
    K: int

    def __post_init__(self) -> None:
        """Check the index range."""
        if not _is_power_of_two(self.K):
            raise InvalidArgumentError(f'K must be a power of two, got {self.K}')
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.K):
            raise InvalidArgumentError(f'Codeword indices must lie in [0, {self.K})')

    @property
    def M(self) -> int:
        """Number of subspaces."""
        return self.indices.shape[-1]

    @property
    def bits(self) -> int:
        """Bits per item, M * log2(K)."""
        return self.M * int(math.log2(self.K))


def attention_weights(
    h: Tensor,
    codewords: Tensor,
    theta: Curvature,
    tau: float,
) -> Tensor:
    """
    Softmax over the codewords of -d^2_L(c_k, h) / tau.

    Args:
        h (Tensor): Points of shape `(..., d+1)`.
        codewords (Tensor): Codewords of shape `(K, d+1)`, or `(M, K, d+1)` when `h` is `(..., M, d+1)`.
        theta (Curvature): Curvature, broadcastable with `h[..., 0]`.
        tau (float): Attention temperature.

    Returns:
        Tensor: Weights of shape `(..., K)`.
    """
    if tau <= 0:
        raise InvalidArgumentError(f'Attention temperature must be positive, got {tau}')

    theta = torch.as_tensor(theta, dtype=DTYPE)
    logits = -sq_lorentz_distance(codewords, h.unsqueeze(-2), theta.unsqueeze(-1)) / tau

    # softmax subtracts the max logit
    return torch.softmax(logits, dim=-1)


def soft_quantize_sub(
    h: Tensor,
    codewords: Tensor,
    theta: Curvature,
    tau: float,
) -> Tensor:
    """
    Attention-weighted Lorentzian centroid of the codewords.

    The weighted sum s of the codewords is rescaled to s / (sqrt(theta) * sqrt(|<s, s>_L|)),
    which minimizes the expected squared Lorentzian distance to the codewords.

    Args:
        h (Tensor): Points of shape `(..., d+1)`.
        codewords (Tensor): Codewords of shape `(K, d+1)`, or `(M, K, d+1)` when `h` is `(..., M, d+1)`.
        theta (Curvature): Curvature, broadcastable with `h[..., 0]`.
        tau (float): Attention temperature.
    """
    theta = torch.as_tensor(theta, dtype=DTYPE)
    weights = attention_weights(h, codewords, theta, tau)
    aggregate = (weights.unsqueeze(-1) * codewords).sum(dim=-2)

    modulus = lorentz_inner(aggregate, aggregate).abs()
    smallest = float(modulus.detach().min()) if modulus.numel() else math.inf
    if smallest < DEGENERATE_EPS:
        raise DegenerateAggregationError(f'Codeword aggregate has a Lorentzian norm of {smallest:.3g}')

    sign = torch.sign(aggregate[..., :1])

    return sign * aggregate / (torch.sqrt(theta) * torch.sqrt(modulus)).unsqueeze(-1)


def hard_quantize_sub(
    h: Tensor,
    codewords: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Index of the nearest codeword, the smallest index on ties.

    Args:
        h (Tensor): Points of shape `(..., d+1)`.
        codewords (Tensor): Codewords of shape `(K, d+1)`, or `(M, K, d+1)` when `h` is `(..., M, d+1)`.
        theta (Curvature): Curvature, broadcastable with `h[..., 0]`.
    """
    theta = torch.as_tensor(theta, dtype=DTYPE)
    distances = lorentz_distance(codewords, h.unsqueeze(-2), theta.unsqueeze(-1))

    # argmin returns the first minimal index
    return torch.argmin(distances, dim=-1)


def soft_quantize(
    h: Tensor,
    codebook: Codebook,
) -> Tensor:
    """
    Soft-quantize product points, each subspace against its own sub-codebook.

    Args:
        h (Tensor): Product points of shape `(..., M, d+1)`.
        codebook (Codebook): The codebook.
    """
    _check_points(h, codebook)

    return soft_quantize_sub(h, codebook.codewords, codebook.curvatures, codebook.tau)


@torch.no_grad()
def encode(
    h: Tensor,
    codebook: Codebook,
) -> QuantCode:
    """
    Hard-quantize product points into codeword indices.

    Args:
        h (Tensor): Product points of shape `(..., M, d+1)`.
        codebook (Codebook): The codebook.
    """
    _check_points(h, codebook)

    indices = hard_quantize_sub(h, codebook.codewords, codebook.curvatures)

    return QuantCode(indices.numpy().astype(np.int64), codebook.K)


@torch.no_grad()
def decode(
    code: QuantCode,
    codebook: Codebook,
) -> Tensor:
    """
    Codeword tuples selected by codes.

    Args:
        code (QuantCode): Codes of shape `(..., M)`.
        codebook (Codebook): The codebook.

    Returns:
        Tensor: Product points of shape `(..., M, d+1)`.
    """
    if code.M != codebook.M or code.K != codebook.K:
        raise InvalidArgumentError(
            f'Codes (M={code.M}, K={code.K}) do not match the codebook (M={codebook.M}, K={codebook.K})'
        )

    indices = torch.from_numpy(code.indices)
    subspaces = torch.arange(codebook.M)

    return codebook.codewords.detach()[subspaces, indices]


def init_codebooks(
    M: int,
    K: int,
    d: int,
    theta_init: float = 1.0,
    seed: int = 0,
    tau: float = DEFAULT_TAU,
    learnable_curvature: bool = True,
) -> Codebook:
    """
    Codewords drawn as exponential maps at the origin of small Gaussian tangent vectors.

    Args:
        M (int): Number of subspaces.
        K (int): Number of codewords per subspace (a power of two).
        d (int): Dimension of each Lorentz manifold.
        theta_init (float): Initial curvature of every subspace.
        seed (int): Seed of the draw.
        tau (float): Attention temperature.
        learnable_curvature (bool): Whether the curvatures are trained.
    """
    if M < 1:
        raise InvalidArgumentError(f'M must be >= 1, got {M}')
    if not _is_power_of_two(K):
        raise InvalidArgumentError(f'K must be a power of two, got {K}')
    if d < 2:
        raise InvalidArgumentError(f'd must be >= 2, got {d}')

    generator = torch.Generator().manual_seed(seed)
    curvatures = torch.full((M,), float(theta_init), dtype=DTYPE)

    spatial = torch.randn((M, K, d), generator=generator, dtype=DTYPE) * CODEWORD_INIT_STD
    tangent = torch.cat([torch.zeros((M, K, 1), dtype=DTYPE), spatial], dim=-1)
    o = origin(d, curvatures).unsqueeze(1)
    codewords = exp_map(o, tangent, curvatures.unsqueeze(-1))

    return Codebook(codewords, curvatures, tau=tau, learnable_curvature=learnable_curvature)


def _check_points(
    h: Tensor,
    codebook: Codebook,
) -> None:
    if h.dim() < 2 or h.shape[-2:] != codebook.codewords.shape[::2]:
        raise InvalidArgumentError(
            f'Product points of shape {tuple(h.shape)} do not match the codebook {tuple(codebook.codewords.shape)}'
        )
