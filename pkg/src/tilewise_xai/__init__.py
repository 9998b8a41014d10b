"""Contextual attribution toolkit for weakly supervised tile classifiers.

Subpackages:
  engine    - float64 compute graph with reverse-mode gradients
  nets      - tile classifier, slide-level max pooling, segmentation net
  synthdata - synthetic slides, tiling grids, stain handling, storage
  harness   - configuration, experiment pipeline, stability study, reports

Top-level modules:
  xai       - attribution maps, aggregation, normalization, thresholding
  metrics   - agreement scores, rank correlation, analytic noise baseline
"""

__version__ = "0.1.0"
