"""Binarized dual-stream road segmentation with bit-packed inference kernels.

Subpackages:
  bitcore   -- bit-packed {-1,+1} tensors and XNOR/PopCount kernels
  autograd  -- minimal reverse-mode tape, STE, batch norm, optimizers
  blocks    -- binary convolution unit and the fusion/encoder/decoder blocks
  network   -- the assembled dual-stream segmentation model
  losses    -- focal, variant focal, Lovasz and pixel-interaction losses
  geom      -- point-cloud accumulation, projection, rasterization
  metrics   -- segmentation metrics and complexity accounting
  osmmaker  -- mask stitching, skeletonization, road-graph and OSM export
  cli       -- command-line entry point
"""

__version__ = "0.1.0"
