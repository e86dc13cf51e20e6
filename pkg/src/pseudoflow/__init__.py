"""pseudoflow: desk-scale semi-supervised optical flow.

Iterative pseudo labeling around a minimal recurrent correlation-volume
flow network, with a contrastive loss on flow-warped features and a
synthetic data generator that emulates a source->target domain gap.
"""

__version__ = "0.1.0"
