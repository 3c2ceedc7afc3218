"""Learnable global transformations for dynamic point-cloud neighborhoods.

A small float64 autodiff core drives networks whose layers re-learn their
k-NN neighborhoods through affine, projective, and deformable warps of the
input cloud; a synthetic part-segmentation benchmark, training harness, and
analysis CLI sit on top.
"""

from .autograd import Tape, Tensor, backward, no_grad
from .geometry import (
    AffineParams,
    DeformableParams,
    PointCloud,
    ProjectiveParams,
    apply_affine,
    apply_deformable,
    apply_projective,
    normalize_cloud,
    random_rigid,
)
from .metrics import miou, neighborhood_std_stats, welch_t_test
from .neighborhood import AffinityGraph, knn_graph, knn_oracle, pairwise_sq_dist
from .network import (
    BlockConfig,
    Network,
    NetworkConfig,
    TransformerSpec,
    default_network_config,
    freeze_transforms,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pointconv import EdgeConvWeights, MlpParams, edge_conv, pointwise_mlp
from .shapes import (
    Dataset,
    DatasetConfig,
    gen_shape,
    load_dataset,
    make_dataset,
    read_cloud,
    write_cloud,
    write_dataset,
)
from .training import RunReport, TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph", "AffineParams", "BlockConfig", "Dataset", "DatasetConfig",
    "DeformableParams", "EdgeConvWeights", "MlpParams", "Network", "NetworkConfig",
    "PointCloud", "ProjectiveParams", "RunReport", "Tape", "Tensor", "TrainConfig",
    "TransformerSpec", "adam_step", "apply_affine", "apply_deformable",
    "apply_projective", "backward", "default_network_config", "edge_conv",
    "evaluate", "freeze_transforms", "gen_shape", "init_params", "knn_graph",
    "knn_oracle", "load_checkpoint", "load_dataset", "make_dataset", "miou",
    "neighborhood_std_stats", "no_grad", "normalize_cloud", "pairwise_sq_dist",
    "pointwise_mlp", "random_rigid", "read_cloud", "save_checkpoint", "train",
    "welch_t_test", "write_cloud", "write_dataset",
]
