"""
Contrastive objectives over quantized hyperbolic embeddings.

Similarities are exp(-d_S / tau_qc); every ratio is evaluated in log-space,
logits being -d_S / tau_qc.
"""

import math
from dataclasses import dataclass
from typing import (
    Dict,
    Optional,
    Tuple,
)

import numpy as np
import torch
from torch import Tensor

from src.errors import (
    InternalConsistencyError,
    InvalidArgumentError,
    NumericalFailureError,
)
from src.geometry import (
    DTYPE,
    pairwise_product_distance,
    product_distance,
)
from src.hierarchy import Hierarchy
from src.model import Model
from src.quantizer import soft_quantize


@dataclass
class LossWeights:
    """Weights of the hierarchical losses and contrastive temperature."""

    lambda_prot: float = 1.0
    lambda_ins: float = 0.1
    tau_qc: float = 0.2

    def __post_init__(self) -> None:
        """Check the weights."""
        if self.tau_qc <= 0:
            raise InvalidArgumentError(f'Contrastive temperature must be positive, got {self.tau_qc}')
        if self.lambda_prot < 0 or self.lambda_ins < 0:
            raise InvalidArgumentError('Loss weights must be >= 0')


@dataclass
class BatchEmbeddings:
    """Embeddings of the two augmented views of a batch."""

    continuous: Tensor
    """Continuous product points, shape `(2, N_B, M, d+1)`."""
    quantized: Tensor
    """Soft-quantized product points, shape `(2, N_B, M, d+1)`."""
    tangents: Tensor
    """Clipped tangent vectors, shape `(2, N_B, M*(d+1))`."""
    items: np.ndarray
    """Dataset ids of the batch items, shape `(N_B,)`."""
    curvatures: Tensor

    @property
    def size(self) -> int:
        """Batch size N_B."""
        return self.quantized.shape[1]


@dataclass
class LossBreakdown:
    """Loss components of a batch."""

    aug: Tensor
    prot: Tensor
    ins: Tensor
    total: Tensor


def embed_batch(
    model: Model,
    views: Tensor,
    items: np.ndarray,
) -> BatchEmbeddings:
    """
    Embed and soft-quantize the two views of a batch.

    Args:
        model (Model): The model.
        views (Tensor): Features of shape `(2, N_B, D_in)`.
        items (np.ndarray): Dataset ids of the batch items.
    """
    tangents, points = model.embed(views)

    return BatchEmbeddings(
        continuous=points,
        quantized=soft_quantize(points, model.codebook),
        tangents=tangents,
        items=np.asarray(items),
        curvatures=model.curvatures,
    )


def similarity(
    a: Tensor,
    b: Tensor,
    theta: Tensor,
    tau_qc: float,
) -> Tensor:
    """
    Similarity exp(-d_S(a, b) / tau_qc) of product points.

    Args:
        a (Tensor): Product points of shape `(..., M, d+1)`.
        b (Tensor): Product points broadcastable with `a`.
        theta (Tensor): Curvatures of shape `(M,)`.
        tau_qc (float): Contrastive temperature.
    """
    if tau_qc <= 0:
        raise InvalidArgumentError(f'Contrastive temperature must be positive, got {tau_qc}')

    return torch.exp(-product_distance(a, b, theta) / tau_qc)


def loss_aug(
    batch: BatchEmbeddings,
    tau_qc: float,
) -> Tensor:
    """
    View-augmented contrastive loss.

    Each quantized view is an anchor whose positive is the other view of its item,
    the 2*N_B - 2 views of the other items being negatives.

    Args:
        batch (BatchEmbeddings): The batch.
        tau_qc (float): Contrastive temperature.
    """
    n = batch.size
    views = batch.quantized.reshape(2 * n, *batch.quantized.shape[2:])
    logits = -pairwise_product_distance(views, views, batch.curvatures) / tau_qc
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), -math.inf)

    rows = torch.arange(2 * n)
    positives = (rows + n) % (2 * n)
    terms = torch.logsumexp(logits, dim=1) - logits[rows, positives]

    return terms.sum() / n


def _anchor_views(anchor_views: str) -> Tuple[int, ...]:
    if anchor_views == 'first':
        return (0,)
    if anchor_views == 'both':
        return (0, 1)

    raise InvalidArgumentError(f'Unknown anchor views `{anchor_views}`')


def loss_prot(
    batch: BatchEmbeddings,
    hierarchy: Hierarchy,
    tau_qc: float,
    anchor_views: str = 'first',
) -> Tensor:
    """
    Prototype-wise contrastive loss over every level of the hierarchy.

    The assigned prototype of an item is its positive, the other prototypes of the
    level are negatives. Prototypes are constants.

    Args:
        batch (BatchEmbeddings): The batch.
        hierarchy (Hierarchy): The hierarchy of the epoch.
        tau_qc (float): Contrastive temperature.
        anchor_views (str): `first` to anchor on view 1, `both` to average over the two views.
    """
    views = _anchor_views(anchor_views)
    rows = torch.arange(batch.size)
    total = torch.zeros((), dtype=DTYPE)

    for level in hierarchy.levels:
        if level.lifted_prototypes is None or batch.items.max(initial=-1) >= level.assignments.shape[0]:
            raise InternalConsistencyError(f'Level {level.index} has no assignment for some batch items')

        prototypes = level.lifted_prototypes.detach()
        assigned = torch.from_numpy(level.assignments[batch.items].astype(np.int64))
        for view in views:
            logits = -pairwise_product_distance(batch.quantized[view], prototypes, batch.curvatures) / tau_qc
            total = total + (torch.logsumexp(logits, dim=1) - logits[rows, assigned]).sum()

    return total / (hierarchy.depth * len(views))


def loss_ins(
    batch: BatchEmbeddings,
    hierarchy: Hierarchy,
    positives: np.ndarray,
    tau_qc: float,
    anchor_views: str = 'first',
) -> Tensor:
    """
    Hierarchical instance-wise contrastive loss.

    At every level, the positive of an item is a batch member of its cluster, or its
    other view when it has none; the other batch items are negatives.

    Args:
        batch (BatchEmbeddings): The batch.
        hierarchy (Hierarchy): The hierarchy of the epoch.
        positives (np.ndarray): Positive item ids of shape `(N_B, L)`; an item's own id selects its other view.
        tau_qc (float): Contrastive temperature.
        anchor_views (str): `first` to anchor on view 1, `both` to average over the two views.
    """
    n = batch.size
    if n < 2:
        return torch.zeros((), dtype=DTYPE)
    if positives.shape != (n, hierarchy.depth):
        raise InternalConsistencyError(f'Expected positives of shape {(n, hierarchy.depth)}, got {positives.shape}')

    positions = {int(item): i for i, item in enumerate(batch.items)}
    own = positives == batch.items[:, None]
    try:
        slots = np.array([[positions[int(p)] for p in row] for row in positives], dtype=np.int64)
    except KeyError as error:
        raise InternalConsistencyError(f'Positive item {error} is not in the batch') from None

    sentinel = torch.from_numpy(own)
    slots_t = torch.from_numpy(slots)
    rows = torch.arange(n).unsqueeze(1)

    views = _anchor_views(anchor_views)
    total = torch.zeros((), dtype=DTYPE)
    for view in views:
        anchors = batch.quantized[view]
        logits = -pairwise_product_distance(anchors, anchors, batch.curvatures) / tau_qc
        logits = logits.masked_fill(torch.eye(n, dtype=torch.bool), -math.inf)
        negatives = torch.logsumexp(logits, dim=1, keepdim=True)

        # Similarity to the other view, for the items with no cluster mate in the batch
        other = -product_distance(anchors, batch.quantized[1 - view], batch.curvatures) / tau_qc
        other = other.unsqueeze(1).expand(n, hierarchy.depth)

        positive = torch.where(sentinel, other, logits[rows, slots_t])
        # The other view is not among the negatives: it joins the denominator
        denominator = torch.where(sentinel, torch.logaddexp(negatives, other), negatives.expand_as(other))
        total = total + (denominator - positive).sum()

    return total / (hierarchy.depth * len(views))


def total_loss(
    batch: BatchEmbeddings,
    hierarchy: Optional[Hierarchy],
    weights: LossWeights,
    positives: Optional[np.ndarray] = None,
    anchor_views: str = 'first',
) -> LossBreakdown:
    """
    L_aug + lambda_prot * L_prot + lambda_ins * L_ins.

    Components with a zero weight are not evaluated, so the hierarchy is only required
    when a weight is positive.

    Args:
        batch (BatchEmbeddings): The batch.
        hierarchy (Optional[Hierarchy]): The hierarchy of the epoch.
        weights (LossWeights): Loss weights and temperature.
        positives (Optional[np.ndarray]): Positive item ids of shape `(N_B, L)` for the instance-wise loss.
        anchor_views (str): `first` to anchor on view 1, `both` to average over the two views.
    """
    zero = torch.zeros((), dtype=DTYPE)

    aug = loss_aug(batch, weights.tau_qc)
    prot = ins = zero
    if weights.lambda_prot > 0:
        if hierarchy is None:
            raise InternalConsistencyError('The prototype-wise loss needs a hierarchy')
        prot = loss_prot(batch, hierarchy, weights.tau_qc, anchor_views)
    if weights.lambda_ins > 0:
        if hierarchy is None or positives is None:
            raise InternalConsistencyError('The instance-wise loss needs a hierarchy and sampled positives')
        ins = loss_ins(batch, hierarchy, positives, weights.tau_qc, anchor_views)

    return LossBreakdown(aug, prot, ins, aug + weights.lambda_prot * prot + weights.lambda_ins * ins)


def gradients(
    model: Model,
    views: Tensor,
    items: np.ndarray,
    hierarchy: Optional[Hierarchy],
    weights: LossWeights,
    positives: Optional[np.ndarray] = None,
    anchor_views: str = 'first',
) -> Tuple[LossBreakdown, Dict[str, Tensor]]:
    """
    Loss of a batch and its derivatives with respect to every trainable parameter.

    Args:
        model (Model): The model.
        views (Tensor): Features of shape `(2, N_B, D_in)`.
        items (np.ndarray): Dataset ids of the batch items.
        hierarchy (Optional[Hierarchy]): The hierarchy of the epoch.
        weights (LossWeights): Loss weights and temperature.
        positives (Optional[np.ndarray]): Positive item ids of shape `(N_B, L)`.
        anchor_views (str): `first` to anchor on view 1, `both` to average over the two views.

    Returns:
        Tuple[LossBreakdown, Dict[str, Tensor]]: The losses (detached) and the gradients by parameter name.
    """
    model.zero_grad(set_to_none=True)

    batch = embed_batch(model, views, items)
    losses = total_loss(batch, hierarchy, weights, positives, anchor_views)
    if not bool(torch.isfinite(losses.total)):
        raise NumericalFailureError(
            f'Non-finite loss (aug={float(losses.aug)}, prot={float(losses.prot)}, ins={float(losses.ins)})'
        )

    losses.total.backward()

    grads: Dict[str, Tensor] = {}
    for name, parameter in model.named_parameters():
        if not parameter.requires_grad:
            continue
        grad = parameter.grad if parameter.grad is not None else torch.zeros_like(parameter)
        if not bool(torch.all(torch.isfinite(grad))):
            raise NumericalFailureError(f'Non-finite gradient for `{name}`')
        grads[name] = grad.detach().clone()

    return (
        LossBreakdown(losses.aug.detach(), losses.prot.detach(), losses.ins.detach(), losses.total.detach()),
        grads,
    )
