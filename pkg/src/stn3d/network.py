"""Transformation-learning blocks assembled into segmentation/classification nets.

Each block holds several transformers.  A transformer warps the cloud, the
warped coordinates define a fresh k-NN graph, and an edge convolution learns a
sub-feature on that graph; the block output is the concatenation of all
sub-features.  Affine and projective transformers always act on the original
input coordinates; deformable transformers consume the previous feature map as
well, so their warp is learned progressively.

All block outputs are concatenated (skip connections) before the head: a
pointwise MLP down to per-point part logits, or a global max-pool followed by
the MLP for per-shape class logits.
"""

from __future__ import annotations

import io
import json
import struct
import weakref
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    clamp_away_from_zero,
    concat,
    div,
    frobenius_norm,
    max_over_axis,
    no_grad,
    reshape,
    scale,
)
from .geometry import (
    AffineParams,
    DeformableParams,
    PointCloud,
    ProjectiveParams,
    apply_affine,
    apply_deformable,
    apply_projective,
)
from .neighborhood import knn_graph
from .pointconv import MlpParams, edge_conv, mlp_params, pointwise_mlp

FAMILIES = ("affine", "projective", "deformable", "fixed")

CHECKPOINT_MAGIC = b"STN3DCKPT"
CHECKPOINT_VERSION = 1

DEFORMABLE_FEATURE_INIT_STD = 0.01  # feature block starts near affine behavior
HEAD_FINAL_SCALE = 0.01             # keeps initial logits near uniform


class CheckpointError(ValueError):
    """Unreadable or mismatched checkpoint file."""


@dataclass
class TransformerSpec:
    """One transformer inside a block: its family and sub-feature width."""

    family: str
    feature_width: int = 32
    hidden: tuple[int, ...] = (64,)  # edge-MLP hidden widths

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown transformer family {self.family!r}; expected one of {FAMILIES}")
        if self.feature_width < 1:
            raise ValueError("feature_width must be >= 1")
        self.hidden = tuple(self.hidden)


@dataclass
class BlockConfig:
    """The transformers of one layer plus its neighborhood size."""

    transformers: list[TransformerSpec]
    k_nn: int = 10

    def __post_init__(self):
        if not self.transformers:
            raise ValueError("a block needs at least one transformer")
        if self.k_nn < 1:
            raise ValueError("k_nn must be >= 1")

    @property
    def width(self) -> int:
        """Output width: the sum of all sub-feature widths."""
        return sum(t.feature_width for t in self.transformers)


@dataclass
class NetworkConfig:
    """Block stack plus head; ``head`` is 'segmentation' or 'classification'."""

    blocks: list[BlockConfig]
    num_classes: int
    head: str = "segmentation"
    head_widths: tuple[int, ...] = (256, 256)
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("segmentation", "classification"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not self.blocks:
            raise ValueError("need at least one block")
        self.head_widths = tuple(self.head_widths)

    def block_input_widths(self) -> list[int]:
        """Feature width entering each block (raw coordinates feed block 0)."""
        widths, current = [], 3
        for block in self.blocks:
            widths.append(current)
            current = block.width
        return widths

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "k_nn": b.k_nn,
                    "transformers": [
                        {"family": t.family, "feature_width": t.feature_width,
                         "hidden": list(t.hidden)}
                        for t in b.transformers
                    ],
                }
                for b in self.blocks
            ],
            "num_classes": self.num_classes,
            "head": self.head,
            "head_widths": list(self.head_widths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        blocks = [
            BlockConfig(
                transformers=[TransformerSpec(t["family"], t["feature_width"],
                                              tuple(t["hidden"]))
                              for t in b["transformers"]],
                k_nn=b["k_nn"],
            )
            for b in d["blocks"]
        ]
        return cls(blocks=blocks, num_classes=d["num_classes"], head=d["head"],
                   head_widths=tuple(d["head_widths"]), seed=d["seed"])


def default_network_config(family: str = "deformable", num_classes: int = 4, *,
                           n_blocks: int = 3, n_transformers: int = 4,
                           feature_width: int = 32, hidden: tuple[int, ...] = (64,),
                           k_nn: int = 10, head: str = "segmentation",
                           head_widths: tuple[int, ...] = (256, 256),
                           seed: int = 0) -> NetworkConfig:
    """Uniform stack of identical blocks; defaults give 4 transformers x width 32."""
    blocks = [
        BlockConfig([TransformerSpec(family, feature_width, hidden)
                     for _ in range(n_transformers)], k_nn=k_nn)
        for _ in range(n_blocks)
    ]
    return NetworkConfig(blocks=blocks, num_classes=num_classes, head=head,
                         head_widths=head_widths, seed=seed)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: NetworkConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Freshly initialized parameters, keyed by name, deterministic per seed.

    Transform matrices draw from the standard normal; the deformable feature
    block uses a much smaller scale so early graphs stay geometry-driven.
    MLP weights are He-scaled with zero biases.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    in_widths = cfg.block_input_widths()
    for t, block in enumerate(cfg.blocks):
        f_in = in_widths[t]
        for i, spec in enumerate(block.transformers):
            prefix = f"block{t}.tr{i}"
            if spec.family == "affine":
                params[f"{prefix}.matrix"] = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            elif spec.family == "projective":
                params[f"{prefix}.matrix"] = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            elif spec.family == "deformable":
                coord_block = rng.normal(size=(3, 3))
                feature_block = rng.normal(0.0, DEFORMABLE_FEATURE_INIT_STD, size=(3, f_in))
                params[f"{prefix}.matrix"] = Tensor(np.hstack([coord_block, feature_block]),
                                                    requires_grad=True)
            edge_mlp = mlp_params([2 * (f_in + 3), *spec.hidden, spec.feature_width], rng)
            for l, (w, b) in enumerate(zip(edge_mlp.weights, edge_mlp.biases)):
                params[f"{prefix}.mlp.w{l}"] = w
                params[f"{prefix}.mlp.b{l}"] = b
    head_in = sum(b.width for b in cfg.blocks)
    head = mlp_params([head_in, *cfg.head_widths, cfg.num_classes], rng,
                      final_scale=HEAD_FINAL_SCALE)
    for l, (w, b) in enumerate(zip(head.weights, head.biases)):
        params[f"head.w{l}"] = w
        params[f"head.b{l}"] = b
    return params


def transform_matrix_names(params: dict[str, Tensor]) -> list[str]:
    return [name for name in params if name.endswith(".matrix")]


def freeze_transforms(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Exclude all transform matrices from gradient tracking and updates."""
    for name in transform_matrix_names(params):
        params[name].requires_grad = False
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    out = {}
    for name, t in params.items():
        c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        out[name] = c
    return out


# ---------------------------------------------------------------------------
# forward passes


class Network:
    """A config bound to a parameter set, exposing the forward passes.

    Fixed-family graphs depend only on the raw input coordinates, so they are
    memoized per cloud (clouds are treated as immutable).
    """

    def __init__(self, cfg: NetworkConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._fixed_graphs = weakref.WeakKeyDictionary()

    def _edge_mlp(self, t: int, i: int, hidden_len: int) -> MlpParams:
        prefix = f"block{t}.tr{i}.mlp"
        layers = hidden_len + 1
        return MlpParams([self.params[f"{prefix}.w{l}"] for l in range(layers)],
                         [self.params[f"{prefix}.b{l}"] for l in range(layers)])

    def _head_mlp(self) -> MlpParams:
        layers = len(self.cfg.head_widths) + 1
        return MlpParams([self.params[f"head.w{l}"] for l in range(layers)],
                         [self.params[f"head.b{l}"] for l in range(layers)])

    def _transform(self, t: int, i: int, spec: TransformerSpec, coords: Tensor,
                   features: Tensor) -> Tensor:
        if spec.family == "fixed":
            return coords
        matrix = self.params[f"block{t}.tr{i}.matrix"]
        if spec.family == "affine":
            return apply_affine(AffineParams(matrix), coords)
        if spec.family == "projective":
            return apply_projective(ProjectiveParams(matrix), coords)
        # The deformable warp sees an RMS-normalized copy of the feature map:
        # affinity graphs are invariant to coordinate scale, and pinning the
        # feature scale keeps the feature block's influence on the graph from
        # drifting as feature magnitudes grow during training.
        rms = scale(frobenius_norm(features), 1.0 / np.sqrt(features.data.size))
        normalized = div(features, clamp_away_from_zero(rms, 1e-8))
        return apply_deformable(DeformableParams(matrix), coords, normalized)

    def block_forward(self, coords: Tensor, features: Tensor, t: int,
                      collect=None, fixed_cache: dict | None = None) -> Tensor:
        """One block: transform, rebuild graphs, convolve, concatenate."""
        block = self.cfg.blocks[t]
        subs = []
        for i, spec in enumerate(block.transformers):
            g = self._transform(t, i, spec, coords, features)
            if spec.family == "fixed" and fixed_cache is not None:
                graph = fixed_cache.get(block.k_nn)
                if graph is None:
                    graph = fixed_cache.setdefault(block.k_nn, knn_graph(g.data, block.k_nn))
            else:
                graph = knn_graph(g.data, block.k_nn)
            if collect is not None:
                collect.append((f"block{t}.tr{i}", spec.family, g.data.copy(), graph))
            subs.append(edge_conv(features, g, graph, self._edge_mlp(t, i, len(spec.hidden))))
        return subs[0] if len(subs) == 1 else concat(subs, axis=0)

    def _backbone(self, cloud: PointCloud, collect=None) -> Tensor:
        coords = cloud.coords()
        features = coords  # layer 1 consumes raw coordinates as features
        fixed_cache = self._fixed_graphs.setdefault(cloud, {})
        outputs = []
        for t in range(len(self.cfg.blocks)):
            features = self.block_forward(coords, features, t, collect=collect,
                                          fixed_cache=fixed_cache)
            outputs.append(features)
        return outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)

    def seg_logits(self, cloud: PointCloud) -> Tensor:
        """Per-point part logits of shape (C, N)."""
        if self.cfg.head != "segmentation":
            raise ValueError("network head is not segmentation")
        return pointwise_mlp(self._backbone(cloud), self._head_mlp())

    def cls_logits(self, cloud: PointCloud) -> Tensor:
        """Per-shape class logits of shape (C, 1)."""
        if self.cfg.head != "classification":
            raise ValueError("network head is not classification")
        skip = self._backbone(cloud)
        pooled = max_over_axis(skip, axis=1)
        return pointwise_mlp(reshape(pooled, (skip.shape[0], 1)), self._head_mlp())

    def logits(self, cloud: PointCloud) -> Tensor:
        return self.seg_logits(cloud) if self.cfg.head == "segmentation" else self.cls_logits(cloud)

    def transformed_clouds(self, cloud: PointCloud) -> list[tuple[str, str, np.ndarray, object]]:
        """(name, family, (3,N) coordinates, graph) for every transformer, gradient-free."""
        collected: list = []
        with no_grad():
            self._backbone(cloud, collect=collected)
        return collected


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, cfg: NetworkConfig, params: dict[str, Tensor]) -> None:
    """Versioned binary checkpoint: magic, version, config echo, named tensors."""
    blob = io.BytesIO()
    blob.write(CHECKPOINT_MAGIC)
    blob.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    blob.write(struct.pack("<Q", len(cfg_bytes)))
    blob.write(cfg_bytes)
    blob.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        name_bytes = name.encode()
        blob.write(struct.pack("<I", len(name_bytes)))
        blob.write(name_bytes)
        blob.write(struct.pack("<B", 1 if tensor.requires_grad else 0))
        blob.write(struct.pack("<I", tensor.data.ndim))
        for extent in tensor.data.shape:
            blob.write(struct.pack("<Q", extent))
        blob.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path) -> tuple[NetworkConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    if view.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", view.read(8))
    cfg = NetworkConfig.from_dict(json.loads(view.read(cfg_len).decode()))
    (count,) = struct.unpack("<I", view.read(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", view.read(4))
        name = view.read(name_len).decode()
        (grad_flag,) = struct.unpack("<B", view.read(1))
        (ndim,) = struct.unpack("<I", view.read(4))
        shape = tuple(struct.unpack("<Q", view.read(8))[0] for _ in range(ndim))
        n_bytes = 8 * int(np.prod(shape)) if shape else 8
        data = np.frombuffer(view.read(n_bytes), dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=bool(grad_flag))
    return cfg, params
