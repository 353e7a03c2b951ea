"""trajmatch: pairwise co-movement detection from time-layered trajectory images.

Location traces of a pair are split into per-day time layers, rasterized to
a shared canvas with a blue-to-red time gradient, pruned geometrically
(pixel-count filter, bounding-box overlap), and the surviving layer pairs
are scored by a weight-shared convolutional embedder trained with a
contrastive loss. Also ships a GRU sequence baseline, an evaluation and
ablation harness, a synthetic scenario generator, and routine-pattern
analysis tools.
"""

__version__ = "0.1.0"
