from dataclasses import dataclass


@dataclass
class EpochMetrics:
    """Training metrics of one epoch."""

    epoch: int
    loss_aug: float
    """Mean over the batches of the view-augmented loss."""
    loss_prot: float
    loss_ins: float
    total: float
    mean_quant_error: float
    """Mean product-manifold distance between the embeddings and their hard-quantized codewords."""
    lr: float
    """Learning rate of the last step of the epoch."""


@dataclass
class SearchHit:
    """One ranked search result."""

    item_id: int
    distance: float
