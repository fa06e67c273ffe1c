"""SOM-guided hierarchical feature learning on point clouds."""

from .data import AugmentParams, Dataset, PointCloud, augment, normalize_unit_cube, synth_shapes
from .grouping import Assignment, knn_assign, node_knn
from .model import (
    AutoEncoder,
    Classifier,
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    Segmenter,
    retrieve,
)
from .som import SomGrid, SomTrainConfig, build_som, potential_init, quantization_error, som_train

__version__ = "0.1.0"
