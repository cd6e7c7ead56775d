"""Memory-efficient cascaded shape regression with tree-leaf encodings.

Forests of pixel-difference trees turn an image into a sparse indicator
vector; compact decoders (full linear, reduced-rank, small tanh networks)
map it to shape updates, and the large projection matrices can be
quantized row by row.
"""
__version__ = "0.1.0"

from .cascade import CascadeModel, TrainConfig, predict, predict_batch, train_cascade
from .geometry import FaceBox, normalized_error

__all__ = ["CascadeModel", "FaceBox", "TrainConfig", "normalized_error", "predict",
           "predict_batch", "train_cascade", "__version__"]
