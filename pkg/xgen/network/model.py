"""
Sparse convolutional autoencoder for cross fields.

Data flow:
    cloud -> quantize -> linear lift -> [stride-2 conv, convs, residual] per level
          -> (mean, logvar) per latent voxel
    latent sample -> [upsample, occupancy gate, convs, residual] per level
          -> feature grid -> SDF head at queries, cross-field head at surface points

Parameters live in one flat, ordered dict of named Tensors so checkpoints and
the optimizer can walk them by name.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from xgen.config.errors import EmptyShapeError, XGenError
from xgen.config.settings import NetworkConfig
from xgen.geometry.mesh import OrientedPointCloud
from xgen.grids.sparse_grid import (
    CHILD_OFFSETS,
    KERNEL_OFFSETS,
    RAW_CHANNELS,
    GridPyramid,
    SparseVoxelGrid,
    child_keys,
    conv_rulebook,
    downsample_keys,
    pack_keys,
    quantize,
    trilinear_weights,
    upsample_rulebook,
)
from xgen.network.autograd import (
    Tensor,
    add,
    clamp,
    concat,
    cos,
    cross_rows,
    dot_rows,
    exp,
    gather_rows,
    getitem,
    leaky_relu,
    linear,
    mul,
    normalize_rows,
    parameter,
    reshape,
    sin,
    sparse_conv,
    trilinear,
)

logger = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0
REFERENCE_FALLBACK = 0.99


# ============================================================================
# Sparse feature maps
# ============================================================================

@dataclass
class SparseFeatures:
    """Keys of a sparse grid plus one differentiable feature row per key"""

    grid: SparseVoxelGrid
    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 2 or len(self.values.data) != len(self.grid):
            raise XGenError(f"{len(self.grid)} keys but features of shape {self.values.shape}")

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    def to_grid(self) -> SparseVoxelGrid:
        return SparseVoxelGrid(self.grid.resolution, self.grid.keys, self.values.data)


def _keys_only(resolution: int, keys: np.ndarray) -> SparseVoxelGrid:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    return SparseVoxelGrid(resolution, keys, np.zeros((len(keys), 0)))


def sparse_conv3(features: SparseFeatures, weight: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> SparseFeatures:
    """
    3x3x3 sparse convolution.

    stride 1 keeps the input keys (submanifold); stride 2 writes to the parent
    keys of the input and reads the 27 fine neighbours around 2*parent.
    """
    if stride == 1:
        out_grid = features.grid
    elif stride == 2:
        out_grid = downsample_keys(features.grid)
    else:
        raise XGenError(f"stride must be 1 or 2, got {stride}")
    if weight.data.shape[0] != len(KERNEL_OFFSETS):
        raise XGenError(f"conv kernel needs {len(KERNEL_OFFSETS)} taps, got {weight.data.shape[0]}")
    rules = conv_rulebook(features.grid, out_grid.keys, stride)
    values = sparse_conv(features.values, weight, rules, len(out_grid), bias)
    return SparseFeatures(_keys_only(out_grid.resolution, out_grid.keys), values)


def query_features(features: SparseFeatures, points: np.ndarray) -> Tensor:
    """Trilinear blend of vertex features at arbitrary points"""
    index, weights = trilinear_weights(features.grid, points)
    return trilinear(features.values, index, weights)


def reference_axis(normals: np.ndarray) -> np.ndarray:
    """Global x projected onto the tangent plane, or y where n is nearly along x"""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    axis = np.tile([1.0, 0.0, 0.0], (len(normals), 1))
    axis[np.abs(normals[:, 0]) > REFERENCE_FALLBACK] = [0.0, 1.0, 0.0]
    projected = axis - np.sum(axis * normals, axis=1, keepdims=True) * normals
    return projected / np.linalg.norm(projected, axis=1, keepdims=True)


# ============================================================================
# Outputs
# ============================================================================

@dataclass
class LatentGrid:
    """Per-voxel Gaussian posterior at the latent resolution"""

    grid: SparseVoxelGrid
    mean: Tensor
    logvar: Tensor

    def __len__(self) -> int:
        return len(self.grid)

    def to_grid(self) -> SparseVoxelGrid:
        return SparseVoxelGrid(self.grid.resolution, self.grid.keys, np.hstack([self.mean.data, self.logvar.data]))


@dataclass
class DecoderLevel:
    """
    One decoder level: every child of the previous level's kept voxels is a
    candidate; `kept` marks the candidates that survive gating.
    """

    resolution: int
    candidates: np.ndarray
    logits: Tensor
    kept: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def kept_keys(self) -> np.ndarray:
        return self.candidates[self.kept]


@dataclass
class DecoderOutput:
    levels: List[DecoderLevel]
    features: SparseFeatures

    def pyramid(self) -> GridPyramid:
        """Candidate grids, finest first, with the occupancy logit as the feature"""
        grids = [
            SparseVoxelGrid(level.resolution, level.candidates, level.logits.data.reshape(-1, 1), level.kept)
            for level in reversed(self.levels)
        ]
        return GridPyramid(grids)


# ============================================================================
# Model
# ============================================================================

class CrossFieldAutoencoder:
    """
    Encoder, decoder and the two point heads over a shared parameter dict.

    Parameter names:
        enc.in, enc.{l}.down, enc.{l}.conv{j}, enc.{l}.res{k}.{a,b}, enc.head
        dec.{j}.up, dec.{j}.occ, dec.{j}.conv{i}, dec.{j}.res{k}.{a,b}
        sdf.{0,1,2}, cf.{0,1,2}
    each with a `.w` weight and a `.b` bias.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self._build()
        if params is not None:
            self.load_params(params)

    # ------------------------------------------------------------------
    # Parameter construction
    # ------------------------------------------------------------------

    def _add(self, name: str, shape: Tuple[int, ...], fan_in: int) -> None:
        scale = np.sqrt(2.0 / max(fan_in, 1))
        self.params[f"{name}.w"] = parameter(self._rng.standard_normal(shape) * scale)
        self.params[f"{name}.b"] = parameter(np.zeros(shape[-1]))

    def _conv(self, name: str, c_in: int, c_out: int) -> None:
        self._add(name, (len(KERNEL_OFFSETS), c_in, c_out), len(KERNEL_OFFSETS) * c_in)

    def _linear(self, name: str, c_in: int, c_out: int) -> None:
        self._add(name, (c_in, c_out), c_in)

    def _build(self) -> None:
        cfg = self.config
        enc = cfg.encoder_channels
        self._linear("enc.in", RAW_CHANNELS, enc[0])
        for level in range(1, len(enc)):
            self._conv(f"enc.{level}.down", enc[level - 1], enc[level])
            for j in range(1, cfg.encoder_convs_per_level):
                self._conv(f"enc.{level}.conv{j}", enc[level], enc[level])
            for k in range(cfg.residual_blocks_per_level):
                self._conv(f"enc.{level}.res{k}.a", enc[level], enc[level])
                self._conv(f"enc.{level}.res{k}.b", enc[level], enc[level])
        self._linear("enc.head", enc[-1], 2 * cfg.latent_dim)

        previous = cfg.latent_dim
        for j, channels in enumerate(cfg.decoder_channels):
            self._add(f"dec.{j}.up", (len(CHILD_OFFSETS), previous, channels), previous)
            self._linear(f"dec.{j}.occ", channels, 1)
            for i in range(cfg.decoder_convs_per_level):
                self._conv(f"dec.{j}.conv{i}", channels, channels)
            for k in range(cfg.residual_blocks_per_level):
                self._conv(f"dec.{j}.res{k}.a", channels, channels)
                self._conv(f"dec.{j}.res{k}.b", channels, channels)
            previous = channels

        width = cfg.decoder_channels[-1]
        hidden = cfg.head_hidden
        for prefix, c_in, c_out in (
            ("sdf", width, 1),
            ("cf", width + (3 if cfg.field_head_uses_normal else 0), 3 if cfg.field_head_kind == "direction" else 1),
        ):
            self._linear(f"{prefix}.0", c_in, hidden)
            self._linear(f"{prefix}.1", hidden, hidden)
            self._linear(f"{prefix}.2", hidden, c_out)

    def load_params(self, values: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(values))
        extra = sorted(set(values) - set(self.params))
        if missing or extra:
            raise XGenError(f"parameter names do not match the config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, tensor in self.params.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != tensor.data.shape:
                raise XGenError(f"parameter {name}: shape {value.shape}, config expects {tensor.data.shape}")
            tensor.data = value.copy()

    def state(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    @property
    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        return leaky_relu(x, self.config.leaky_slope)

    def _apply_conv(self, name: str, features: SparseFeatures, stride: int = 1) -> SparseFeatures:
        out = sparse_conv3(features, self.params[f"{name}.w"], stride, self.params[f"{name}.b"])
        return SparseFeatures(out.grid, self._act(out.values))

    def _residual(self, name: str, features: SparseFeatures) -> SparseFeatures:
        # conv-act-conv plus skip, activated after the sum
        inner = self._apply_conv(f"{name}.a", features)
        inner = sparse_conv3(inner, self.params[f"{name}.b.w"], 1, self.params[f"{name}.b.b"])
        return SparseFeatures(features.grid, self._act(add(features.values, inner.values)))

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        hidden = self._act(self._dense(f"{prefix}.0", x))
        hidden = self._act(self._dense(f"{prefix}.1", hidden))
        return self._dense(f"{prefix}.2", hidden)

    # ------------------------------------------------------------------
    # Encoder
    # ------------------------------------------------------------------

    def encode(self, cloud: OrientedPointCloud) -> LatentGrid:
        cfg = self.config
        raw = quantize(cloud, cfg.input_resolution)
        if not len(raw):
            raise EmptyShapeError("point cloud quantised to an empty grid")
        lifted = self._act(self._dense("enc.in", Tensor(raw.features)))
        features = SparseFeatures(_keys_only(raw.resolution, raw.keys), lifted)
        for level in range(1, len(cfg.encoder_channels)):
            features = self._apply_conv(f"enc.{level}.down", features, stride=2)
            for j in range(1, cfg.encoder_convs_per_level):
                features = self._apply_conv(f"enc.{level}.conv{j}", features)
            for k in range(cfg.residual_blocks_per_level):
                features = self._residual(f"enc.{level}.res{k}", features)

        head = self._dense("enc.head", features.values)
        m = cfg.latent_dim
        mean = getitem(head, (slice(None), slice(0, m)))
        logvar = clamp(getitem(head, (slice(None), slice(m, 2 * m))), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        logger.debug("encode: %d input voxels -> %d latent voxels at %d^3", len(raw), len(features), features.resolution)
        return LatentGrid(features.grid, mean, logvar)

    def reparameterize(self, latent: LatentGrid, seed: Optional[int] = None, sample: bool = True) -> SparseFeatures:
        """mean + exp(logvar / 2) * eta; eval mode (sample=False) returns the mean"""
        if not sample:
            return SparseFeatures(latent.grid, latent.mean)
        if seed is None:
            raise XGenError("sampling the latent needs a seed")
        eta = np.random.Generator(np.random.Philox(seed)).standard_normal(latent.mean.data.shape)
        sigma = exp(mul(latent.logvar, 0.5))
        return SparseFeatures(latent.grid, add(latent.mean, mul(sigma, Tensor(eta))))

    # ------------------------------------------------------------------
    # Decoder
    # ------------------------------------------------------------------

    def decode(
        self,
        sample: SparseFeatures,
        gt_levels: Optional[List[np.ndarray]] = None,
        threshold: float = 0.5,
    ) -> DecoderOutput:
        """
        With `gt_levels` (one key array per decoder level) gating follows the
        ground truth; otherwise a candidate is kept when sigmoid(logit) > threshold.
        """
        cfg = self.config
        if gt_levels is not None and len(gt_levels) != len(cfg.decoder_channels):
            raise XGenError(f"{len(cfg.decoder_channels)} decoder levels but {len(gt_levels)} ground-truth levels")
        if not 0.0 < threshold < 1.0:
            raise XGenError("occupancy threshold must lie in (0, 1)")
        cutoff = np.log(threshold / (1.0 - threshold))

        features = sample
        levels: List[DecoderLevel] = []
        for j in range(len(cfg.decoder_channels)):
            resolution = features.resolution * 2
            candidates = child_keys(features.grid.keys)
            rules = upsample_rulebook(features.grid, candidates)
            lifted = sparse_conv(features.values, self.params[f"dec.{j}.up.w"], rules, len(candidates), self.params[f"dec.{j}.up.b"])
            lifted = self._act(lifted)
            logits = reshape(self._dense(f"dec.{j}.occ", lifted), (-1,))

            labels = None
            if gt_levels is not None:
                labels = np.isin(pack_keys(candidates), pack_keys(gt_levels[j]))
                kept = labels.copy()
            else:
                kept = logits.data > cutoff
            if not kept.any():
                raise EmptyShapeError(f"every candidate pruned at decoder level {j} ({resolution}^3)")
            levels.append(DecoderLevel(resolution, candidates, logits, kept, labels))

            rows = np.flatnonzero(kept)
            features = SparseFeatures(_keys_only(resolution, candidates[rows]), gather_rows(lifted, rows))
            for i in range(cfg.decoder_convs_per_level):
                features = self._apply_conv(f"dec.{j}.conv{i}", features)
            for k in range(cfg.residual_blocks_per_level):
                features = self._residual(f"dec.{j}.res{k}", features)
            logger.debug("decode level %d: kept %d of %d candidates", j, len(rows), len(candidates))
        return DecoderOutput(levels, features)

    # ------------------------------------------------------------------
    # Heads
    # ------------------------------------------------------------------

    def sdf_head(self, features: Tensor) -> Tensor:
        return reshape(self._mlp("sdf", features), (-1,))

    def field_head(self, features: Tensor, normals: np.ndarray) -> Tuple[Tensor, Tensor]:
        """(alpha, beta = alpha x n) per row; both unit and tangent to n"""
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        n = Tensor(normals)
        inputs = concat([features, n], axis=1) if self.config.field_head_uses_normal else features
        raw = self._mlp("cf", inputs)
        if self.config.field_head_kind == "direction":
            tangent = add(raw, mul(reshape(dot_rows(raw, n), (-1, 1)), Tensor(-normals)))
            alpha = normalize_rows(tangent)
        else:
            theta = raw
            ref = reference_axis(normals)
            alpha = add(mul(Tensor(ref), cos(theta)), mul(Tensor(np.cross(normals, ref)), sin(theta)))
        return alpha, cross_rows(alpha, n)
