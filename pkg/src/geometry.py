"""
Lorentz model primitives.

Points of a Lorentz manifold of curvature -theta are tensors whose last axis holds
the `d+1` ambient coordinates, with <x, x>_L = -1/theta and x[0] > 0.
Points of the product manifold are tensors of shape `(..., M, d+1)`, paired with a
curvature tensor of shape `(M,)`.
"""

from typing import (
    Tuple,
    Union,
)

import torch
from torch import Tensor

from src.constants import (
    ACOSH_EPS,
    EXP_MAP_EPS,
    MAX_TANGENT_NORM,
    TANGENT_EPS,
)
from src.errors import InvalidArgumentError

Curvature = Union[float, Tensor]

DTYPE = torch.float64


def _curvature(theta: Curvature) -> Tensor:
    return torch.as_tensor(theta, dtype=DTYPE)


def _check_same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise InvalidArgumentError(f'Coordinate length mismatch: {x.shape[-1]} != {y.shape[-1]}')
    if x.shape[-1] < 2:
        raise InvalidArgumentError(f'Lorentz vectors need at least 2 coordinates, got {x.shape[-1]}')


def _check_product(x: Tensor, theta: Tensor) -> None:
    if x.dim() < 2 or theta.dim() != 1 or theta.shape[0] != x.shape[-2]:
        raise InvalidArgumentError(
            f'Curvatures of shape {tuple(theta.shape)} do not match product points of shape {tuple(x.shape)}'
        )


def lorentz_inner(
    x: Tensor,
    y: Tensor,
    keepdim: bool = False,
) -> Tensor:
    """
    Lorentzian inner product -x0*y0 + sum_i xi*yi over the last axis.

    Args:
        x (Tensor): Vectors of shape `(..., d+1)`.
        y (Tensor): Vectors broadcastable with `x`.
        keepdim (bool): Whether the reduced axis is kept.
    """
    _check_same_shape(x, y)

    xy = x * y
    inner = xy[..., 1:].sum(dim=-1) - xy[..., 0]

    return inner.unsqueeze(-1) if keepdim else inner


def _acosh(z: Tensor) -> Tensor:
    """acosh on [1, inf), flushed to 0 (with a zero gradient) right above 1."""
    z = torch.clamp(z, min=1.0)
    far = z > 1.0 + ACOSH_EPS
    # The inner where keeps the derivative of acosh away from its pole at 1
    z_safe = torch.where(far, z, torch.full_like(z, 2.0))

    return torch.where(far, torch.acosh(z_safe), torch.zeros_like(z))


def lorentz_distance(
    x: Tensor,
    y: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Geodesic distance sqrt(1/theta) * acosh(-theta * <x, y>_L).

    Args:
        x (Tensor): Points of shape `(..., d+1)`.
        y (Tensor): Points broadcastable with `x`, on the same manifold.
        theta (Curvature): Curvature, broadcastable with `x[..., 0]`.
    """
    theta = _curvature(theta)

    return _acosh(-theta * lorentz_inner(x, y)) / torch.sqrt(theta)


def sq_lorentz_distance(
    x: Tensor,
    y: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Squared Lorentzian distance <x-y, x-y>_L = -2/theta - 2<x, y>_L.

    Args:
        x (Tensor): Points of shape `(..., d+1)`.
        y (Tensor): Points broadcastable with `x`, on the same manifold.
        theta (Curvature): Curvature, broadcastable with `x[..., 0]`.
    """
    theta = _curvature(theta)

    # Rounding can push coincident points slightly below 0
    return torch.clamp(-2.0 / theta - 2.0 * lorentz_inner(x, y), min=0.0)


def origin(
    d: int,
    theta: Curvature,
) -> Tensor:
    """
    Origin (sqrt(1/theta), 0, ..., 0) of the manifold, used as the reference point of exponential maps.

    Args:
        d (int): Dimension of the manifold (the point has `d+1` coordinates).
        theta (Curvature): Curvature; a tensor of shape `(M,)` gives the origin of the product manifold.

    Returns:
        Tensor: Tensor of shape `theta.shape + (d+1,)`.
    """
    theta = _curvature(theta)
    if d < 1:
        raise InvalidArgumentError(f'Manifold dimension must be >= 1, got {d}')
    if not bool(torch.all(theta > 0)):
        raise InvalidArgumentError(f'Curvature must be positive, got {theta.tolist()}')

    spatial = torch.zeros(theta.shape + (d,), dtype=DTYPE)

    return torch.cat([torch.sqrt(1.0 / theta).unsqueeze(-1), spatial], dim=-1)


def tangent_project(
    p: Tensor,
    u: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Orthogonal projection u + theta * <p, u>_L * p of an ambient vector onto the tangent space at p.

    Args:
        p (Tensor): Base points of shape `(..., d+1)`.
        u (Tensor): Ambient vectors broadcastable with `p`.
        theta (Curvature): Curvature, broadcastable with `p[..., 0]`.
    """
    theta = _curvature(theta)

    return u + theta.unsqueeze(-1) * lorentz_inner(p, u, keepdim=True) * p


def exp_map(
    p: Tensor,
    v: Tensor,
    theta: Curvature,
    check: bool = True,
) -> Tensor:
    """
    Exponential map of the tangent vector v at p.

    Args:
        p (Tensor): Base points of shape `(..., d+1)`.
        v (Tensor): Tangent vectors at `p`.
        theta (Curvature): Curvature, broadcastable with `p[..., 0]`.
        check (bool): Whether `v` is checked to be tangent at `p`.

    Returns:
        Tensor: Points reached by the geodesics, `p` itself where the tangent norm is below 1e-12.
    """
    theta = _curvature(theta)

    if check:
        residual = lorentz_inner(v.detach(), p.detach()).abs()
        if residual.numel() and float(residual.max()) > TANGENT_EPS:
            raise InvalidArgumentError(
                f'Vector is not tangent at its base point (<v, p>_L = {float(residual.max()):.3g})'
            )

    norm = torch.sqrt(torch.clamp(lorentz_inner(v, v, keepdim=True), min=1e-30))
    scaled = torch.sqrt(theta).unsqueeze(-1) * norm
    point = torch.cosh(scaled) * p + torch.sinh(scaled) / scaled * v

    return torch.where(norm < EXP_MAP_EPS, p, point)


def clip_tangent(
    v: Tensor,
    max_norm: float = MAX_TANGENT_NORM,
) -> Tensor:
    """
    Rescale the spatial part of tangent vectors at the origin to a norm of at most `max_norm`.

    The derivative is the one of the rescale map: identity inside the ball,
    radial component removed outside of it.

    Args:
        v (Tensor): Tangent vectors at the origin, of shape `(..., d+1)`.
        max_norm (float): Bound on the Euclidean norm of `v[..., 1:]`.
    """
    spatial = v[..., 1:]
    norm = torch.sqrt(torch.clamp((spatial * spatial).sum(dim=-1, keepdim=True), min=1e-300))
    scale = torch.clamp(max_norm / norm, max=1.0)

    return torch.cat([v[..., :1], spatial * scale], dim=-1)


def product_distance(
    x: Tensor,
    y: Tensor,
    theta: Tensor,
) -> Tensor:
    """
    Distance on the product manifold, the sum of the M Lorentzian distances.

    Args:
        x (Tensor): Product points of shape `(..., M, d+1)`.
        y (Tensor): Product points broadcastable with `x`.
        theta (Tensor): Curvatures of shape `(M,)`.
    """
    theta = _curvature(theta)
    _check_product(x, theta)
    _check_product(y, theta)

    return lorentz_distance(x, y, theta).sum(dim=-1)


def pairwise_product_distance(
    x: Tensor,
    y: Tensor,
    theta: Tensor,
) -> Tensor:
    """
    Product-manifold distances between every row of `x` and every row of `y`.

    Args:
        x (Tensor): Product points of shape `(A, M, d+1)`.
        y (Tensor): Product points of shape `(B, M, d+1)`.
        theta (Tensor): Curvatures of shape `(M,)`.

    Returns:
        Tensor: Distances of shape `(A, B)`.
    """
    return product_distance(x.unsqueeze(1), y.unsqueeze(0), theta)


def lift_tangent(
    u: Tensor,
    theta: Tensor,
    max_norm: float = MAX_TANGENT_NORM,
) -> Tuple[Tensor, Tensor]:
    """
    Map ambient vectors to the product manifold through the tangent space at the origin.

    Each of the M segments is projected on the tangent space at the origin, clipped,
    then sent to the manifold by the exponential map.

    Args:
        u (Tensor): Ambient vectors of shape `(..., M, d+1)`.
        theta (Tensor): Curvatures of shape `(M,)`.
        max_norm (float): Bound on the spatial norm of the tangent vectors.

    Returns:
        Tuple[Tensor, Tensor]: The clipped tangent vectors and the product points, both shaped like `u`.
    """
    theta = _curvature(theta)
    _check_product(u, theta)

    o = origin(u.shape[-1] - 1, theta)
    tangent = clip_tangent(tangent_project(o, u, theta), max_norm)

    return tangent, exp_map(o, tangent, theta, check=False)


def reproject(
    x: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Put points back on the manifold by recomputing their time coordinate from the spatial ones.

    Args:
        x (Tensor): Points of shape `(..., d+1)`.
        theta (Curvature): Curvature, broadcastable with `x[..., 0]`.
    """
    theta = _curvature(theta)
    spatial = x[..., 1:]
    time = torch.sqrt(1.0 / theta + (spatial * spatial).sum(dim=-1))

    return torch.cat([time.unsqueeze(-1), spatial], dim=-1)


def manifold_residual(
    x: Tensor,
    theta: Curvature,
) -> Tensor:
    """
    Relative violation |theta * <x, x>_L + 1| of the manifold constraint.

    Args:
        x (Tensor): Points of shape `(..., d+1)`.
        theta (Curvature): Curvature, broadcastable with `x[..., 0]`.
    """
    theta = _curvature(theta)

    return (theta * lorentz_inner(x, x) + 1.0).abs()
