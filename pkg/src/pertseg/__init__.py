"""Open-vocabulary segmentation over pixel-text cost volumes.

The pipeline matches dense visual features against class-prompt embeddings,
refines the resulting cost volume with alternating spatial/class attention,
and decodes it to full-resolution logits.  Two learnable perturbation modules
inject structured noise into the embeddings during training only; at eval
time they are exact identities.
"""

__version__ = "0.1.0"
