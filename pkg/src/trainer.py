import math
import os
from typing import (
    Dict,
    List,
    Optional,
    Tuple,
)

import numpy as np
import torch
from torch import Tensor

from src.config import TrainConfig
from src.errors import (
    InvalidArgumentError,
    NumericalFailureError,
)
from src.geometry import (
    DTYPE,
    Curvature,
    exp_map,
    product_distance,
    reproject,
    tangent_project,
)
from src.hierarchy import (
    Hierarchy,
    build_hierarchy,
)
from src.logger import logger
from src.metadata import EpochMetrics
from src.model import Model
from src.objective import (
    LossWeights,
    gradients,
)
from src.quantizer import (
    decode,
    encode,
)
from src.report import add_metrics_csv

_EMBED_CHUNK = 4096


def augment_views(
    x: np.ndarray,
    feature_std: np.ndarray,
    noise_std: float,
    mask_prob: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two independent noisy, masked views of feature vectors.

    Args:
        x (np.ndarray): Features of shape `(..., D)`.
        feature_std (np.ndarray): Per-dimension std of the dataset, shape `(D,)`.
        noise_std (float): Std of the Gaussian noise, relative to `feature_std`.
        mask_prob (float): Probability for a coordinate to be zeroed.
        rng (np.random.Generator): Random generator.
    """
    if noise_std < 0 or not 0 <= mask_prob < 1:
        raise InvalidArgumentError(f'Invalid augmentation (noise_std={noise_std}, mask_prob={mask_prob})')

    x = np.asarray(x, dtype=np.float64)
    views = np.stack([x, x])
    if noise_std > 0:
        views = views + rng.normal(size=views.shape) * (noise_std * np.asarray(feature_std, dtype=np.float64))
    if mask_prob > 0:
        views = np.where(rng.random(views.shape) < mask_prob, 0.0, views)

    return views[0], views[1]


def riemannian_step(
    codeword: Tensor,
    euclid_grad: Tensor,
    lr: float,
    theta: Curvature,
) -> Tensor:
    """
    One Riemannian SGD step on the manifold.

    The Euclidean gradient is turned into the Riemannian one by flipping the sign of its
    time coordinate and projecting it on the tangent space; the point then follows the
    exponential map and is re-projected onto the manifold.

    Args:
        codeword (Tensor): Points of shape `(..., d+1)`.
        euclid_grad (Tensor): Euclidean gradients shaped like `codeword`.
        lr (float): Learning rate.
        theta (Curvature): Curvature, broadcastable with `codeword[..., 0]`.
    """
    if not bool(torch.all(torch.isfinite(euclid_grad))):
        raise NumericalFailureError('Non-finite gradient in Riemannian step')

    flipped = torch.cat([-euclid_grad[..., :1], euclid_grad[..., 1:]], dim=-1)
    riemannian = tangent_project(codeword, flipped, theta)
    moved = exp_map(codeword, -lr * riemannian, theta, check=False)

    return reproject(moved, theta)


def lr_at(
    step: int,
    total_steps: int,
    config: TrainConfig,
) -> float:
    """
    Cosine decay from `lr_start` to `lr_end`.

    Args:
        step (int): The current step, in [0, total_steps].
        total_steps (int): The number of steps of the run.
        config (TrainConfig): The configuration.
    """
    if total_steps <= 0:
        return config.lr_start

    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


@torch.no_grad()
def embed_all(
    model: Model,
    features: np.ndarray,
) -> Tuple[Tensor, Tensor]:
    """
    Embed a feature matrix without augmentation.

    Args:
        model (Model): The model.
        features (np.ndarray): Features of shape `(N, D_in)`.

    Returns:
        Tuple[Tensor, Tensor]: Tangent vectors `(N, M*(d+1))` and product points `(N, M, d+1)`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        codebook = model.codebook
        return (
            torch.zeros((0, codebook.M * (codebook.d + 1)), dtype=DTYPE),
            torch.zeros((0, codebook.M, codebook.d + 1), dtype=DTYPE),
        )

    chunks = [
        model.embed(torch.from_numpy(features[i : i + _EMBED_CHUNK])) for i in range(0, len(features), _EMBED_CHUNK)
    ]

    return torch.cat([c[0] for c in chunks]), torch.cat([c[1] for c in chunks])


@torch.no_grad()
def mean_quantization_error(
    model: Model,
    features: np.ndarray,
) -> float:
    """
    Mean distance between the embeddings and their hard-quantized codeword tuples.

    Args:
        model (Model): The model.
        features (np.ndarray): Features of shape `(N, D_in)`.
    """
    _, points = embed_all(model, features)
    quantized = decode(encode(points, model.codebook), model.codebook)

    return float(product_distance(points, quantized, model.curvatures).mean())


class Trainer:
    """Training loop."""

    config: TrainConfig
    metrics_path: Optional[str]
    history: List[EpochMetrics]
    """One record per completed epoch."""

    def __init__(
        self,
        config: TrainConfig,
        metrics_path: Optional[str] = None,
    ) -> None:
        """
        Constructor.

        Args:
            config (TrainConfig): The configuration.
            metrics_path (Optional[str]): The path to the metrics CSV.
        """
        self.config = config.validate()
        self.metrics_path = metrics_path
        self.history = []

    def _batches_per_epoch(self, n: int) -> int:
        full, rest = divmod(n, self.config.batch_size)
        # A last batch of one item can't be contrasted
        return full + (1 if rest >= 2 else 0)

    def _sample_positives(
        self,
        hierarchy: Hierarchy,
        items: np.ndarray,
        rng: np.random.Generator,
    ) -> np.ndarray:
        return np.array(
            [
                [hierarchy.sample_instance_positive(int(i), level, rng, pool=items) for level in range(hierarchy.depth)]
                for i in items
            ],
            dtype=np.int64,
        ).reshape(len(items), hierarchy.depth)

    @torch.no_grad()
    def _step(
        self,
        model: Model,
        grads: Dict[str, Tensor],
        lr: float,
    ) -> None:
        codebook = model.codebook
        codeword_lr = lr * self.config.codeword_lr_scale

        model.projector.weight.sub_(lr * grads['projector.weight'])
        model.projector.bias.sub_(lr * grads['projector.bias'])
        codebook.codewords.copy_(
            riemannian_step(
                codebook.codewords, grads['codebook.codewords'], codeword_lr, codebook.curvatures.unsqueeze(-1)
            )
        )
        if codebook.log_curvatures.requires_grad:
            codebook.log_curvatures.sub_(lr * grads['codebook.log_curvatures'])
            # The codewords follow their manifolds
            codebook.project_()

    def train(self, features: np.ndarray) -> Model:
        """
        Train a model on a feature matrix.

        Args:
            features (np.ndarray): Features of shape `(N, D_in)`, with N >= batch size.

        Returns:
            Model: The trained model.
        """
        config = self.config
        features = np.asarray(features, dtype=np.float64)
        n, input_dim = features.shape
        if n < config.batch_size:
            raise InvalidArgumentError(f'Dataset has {n} items, fewer than the batch size {config.batch_size}')

        model = Model.create(input_dim, config)
        self.history = []
        if self.metrics_path and os.path.exists(self.metrics_path):
            # Start from a fresh metrics file
            os.remove(self.metrics_path)

        rng = np.random.default_rng(config.seed)
        feature_std = features.std(axis=0)
        lambda_prot, lambda_ins = config.loss_weights
        weights = LossWeights(lambda_prot, lambda_ins, config.tau_qc)
        total_steps = config.epochs * self._batches_per_epoch(n)
        step = 0
        lr = lr_at(0, total_steps, config)

        for epoch in range(1, config.epochs + 1):
            hierarchy: Optional[Hierarchy] = None
            if config.uses_hierarchy:
                tangents, _ = embed_all(model, features)
                hierarchy = build_hierarchy(
                    tangents.numpy(),
                    config.levels,
                    model.curvatures.detach(),
                    seed=config.seed + epoch,
                    iters=config.kmeans_iters,
                )

            sums = np.zeros(4)
            batches = 0
            order = rng.permutation(n)
            for batch_index, start in enumerate(range(0, n, config.batch_size)):
                items = order[start : start + config.batch_size]
                if len(items) < 2:
                    continue

                view_1, view_2 = augment_views(features[items], feature_std, config.noise_std, config.mask_prob, rng)
                views = torch.from_numpy(np.stack([view_1, view_2]))
                positives = self._sample_positives(hierarchy, items, rng) if hierarchy and lambda_ins > 0 else None

                lr = lr_at(step, total_steps, config)
                try:
                    losses, grads = gradients(model, views, items, hierarchy, weights, positives, config.anchor_views)
                    self._step(model, grads, lr)
                except NumericalFailureError as error:
                    logger.error(f'Numerical failure at epoch {epoch}, batch {batch_index}: {error}')
                    raise NumericalFailureError(f'Epoch {epoch}, batch {batch_index}: {error}') from error

                sums += [float(losses.aug), float(losses.prot), float(losses.ins), float(losses.total)]
                batches += 1
                step += 1

            means = sums / max(batches, 1)
            metrics = EpochMetrics(
                epoch=epoch,
                loss_aug=float(means[0]),
                loss_prot=float(means[1]),
                loss_ins=float(means[2]),
                total=float(means[3]),
                mean_quant_error=mean_quantization_error(model, features),
                lr=lr,
            )
            self.history.append(metrics)

            curvatures = model.curvatures.detach()
            logger.info(
                f'Epoch {epoch}: total={metrics.total:.6f} aug={metrics.loss_aug:.6f} prot={metrics.loss_prot:.6f}'
                f' ins={metrics.loss_ins:.6f} mean_quant_error={metrics.mean_quant_error:.6f} lr={lr:.3g}'
                f' curvature=[{float(curvatures.min()):.4f}, {float(curvatures.max()):.4f}]'
            )
            if self.metrics_path:
                add_metrics_csv(self.metrics_path, metrics)

        return model
