"""Edge convolution over an affinity graph, plus the shared pointwise MLP.

The edge feature of a center/neighbor pair is [x_i ; x_j - x_i] where x_i is
the point's previous features with its (transformed) coordinates appended.
Appending the transformed coordinates is what lets gradients reach the
transform matrices: the neighbor indices themselves are constants.
Aggregation over a point's k edges is channel-wise max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    DimensionError,
    Tensor,
    add_bias,
    concat,
    edge_pairs,
    leaky_relu,
    matmul,
    max_over_axis,
    reshape,
)
from .neighborhood import AffinityGraph

LEAKY_SLOPE = 0.2


@dataclass
class MlpParams:
    """Weights of a shared MLP applied to every column independently.

    ``weights[l]`` has shape (out_l, in_l); layers are chained with a leaky
    ReLU between them and no activation after the last.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("MLP needs one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: bias {b.shape} does not fit weight {w.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(f"layer {l}: input width {w.shape[1]} does not chain from "
                                     f"{self.weights[l - 1].shape[0]}")

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


# Edge-convolution weights are a shared MLP over edge features of width
# 2 * (f_in + 3); the name records the role.
EdgeConvWeights = MlpParams


def pointwise_mlp(features: Tensor, mlp: MlpParams) -> Tensor:
    """Apply the same MLP to every column of an (f, N) feature map."""
    if features.ndim != 2 or features.shape[0] != mlp.in_width:
        raise DimensionError(f"pointwise_mlp: features {features.shape} do not match "
                             f"MLP input width {mlp.in_width}")
    h = features
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = add_bias(matmul(w, h), b)
        if l != last:
            h = leaky_relu(h, mlp.slope)
    return h


def edge_conv(features: Tensor, coords: Tensor, graph: AffinityGraph,
              weights: EdgeConvWeights) -> Tensor:
    """Per-point max over MLP([x_i ; x_j - x_i]) for the k neighbors j of i.

    ``features`` is (f_in, N), ``coords`` the (3, N) transformed coordinates,
    ``graph`` the neighborhood built from those coordinates.
    """
    if features.ndim != 2 or coords.ndim != 2 or coords.shape[0] != 3:
        raise DimensionError(f"edge_conv: need (f,N) features and (3,N) coordinates, "
                             f"got {features.shape} and {coords.shape}")
    n = features.shape[1]
    if coords.shape[1] != n or graph.n_points != n:
        raise DimensionError(f"edge_conv: point counts disagree: features {n}, "
                             f"coords {coords.shape[1]}, graph {graph.n_points}")
    k = graph.k
    x = concat([features, coords], axis=0)          # (d, N) with d = f_in + 3
    d = x.shape[0]
    if weights.in_width != 2 * d:
        raise DimensionError(f"edge_conv: MLP expects width {weights.in_width}, "
                             f"edge features have 2*{d}")
    edges = edge_pairs(x, graph.idx)                # (2d, N, k)
    flat = reshape(edges, (2 * d, n * k))
    out = pointwise_mlp(flat, weights)
    return max_over_axis(reshape(out, (weights.out_width, n, k)), axis=2)


def mlp_params(widths: list[int], rng: np.random.Generator, slope: float = LEAKY_SLOPE,
               final_scale: float = 1.0) -> MlpParams:
    """He-initialized MLP for a chain of widths; biases start at zero.

    ``final_scale`` shrinks the last layer's weights (heads use a small value
    so initial logits stay near uniform).
    """
    weights, biases = [], []
    for l in range(len(widths) - 1):
        fan_in, fan_out = widths[l], widths[l + 1]
        std = np.sqrt(2.0 / fan_in)
        if l == len(widths) - 2:
            std *= final_scale
        weights.append(Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpParams(weights, biases, slope=slope)
