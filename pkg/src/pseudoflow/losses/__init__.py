"""Loss functions for flow training."""

from .losses import LossConfig, contrastive_flow_loss, sequence_loss, total_loss

__all__ = ["LossConfig", "contrastive_flow_loss", "sequence_loss", "total_loss"]
