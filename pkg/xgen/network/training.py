"""
Training loop, checkpoints and inference for the cross-field autoencoder.

Randomness:
- epoch order from SeedSequence([seed, epoch])
- per-sample augmentation and latent noise from SeedSequence([seed, step, slot])
so a rerun with the same seed and data produces the same checkpoint bytes.
"""

import json
import logging
import math
import struct
import sys
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from xgen.config.errors import (
    FormatVersionError,
    ManifestError,
    TrainingDivergedError,
    TruncatedFileError,
    XGenError,
)
from xgen.config.settings import PipelineConfig, TrainConfig
from xgen.fields.crossfield import FieldOnMesh
from xgen.geometry.mesh import OrientedPointCloud, TriangleMesh
from xgen.geometry.mesh_io import (
    add_noise,
    drop_points,
    normalize_cloud,
    normalize_to_unit_cube,
    random_rotation,
    sample_surface,
)
from xgen.grids.sparse_grid import child_keys, pack_keys, shell_occupancy
from xgen.network.autograd import Tensor, mul, no_grad
from xgen.network.losses import ForwardOutputs, LossBreakdown, loss_total
from xgen.network.model import CrossFieldAutoencoder, DecoderOutput, SparseFeatures, query_features
from xgen.sdf.tsdf import DenseSdfGrid, load_tsdf, marching_cubes, sample_thin_shell, sdf_at
from xgen.storage.artifacts import atomic_write_bytes, atomic_write_text
from xgen.storage.dataset_store import DatasetStore, ManifestEntry, PreparedShape

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"XGCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sII")
_CHECKPOINT_STATE = struct.Struct("<QII")
_TENSOR_HEADER = struct.Struct("<HB")

# rotated copies are shrunk back inside this half-extent
MAX_EXTENT = 0.49
EXAMPLE_CACHE = 8


# ============================================================================
# Training data
# ============================================================================

@dataclass(frozen=True)
class TrainingExample:
    """Supervision for one shape: surface set P with GT directions, shell set Q, TSDF"""

    entry_id: str
    surface: OrientedPointCloud
    mu: np.ndarray
    nu: np.ndarray
    q_points: np.ndarray
    q_values: np.ndarray
    tsdf: DenseSdfGrid
    shell_epsilon: float

    @classmethod
    def from_prepared(cls, entry_id: str, prepared: PreparedShape) -> "TrainingExample":
        return cls(
            entry_id,
            prepared.surface,
            prepared.mu,
            prepared.nu,
            prepared.queries.points,
            prepared.queries.values,
            prepared.tsdf,
            prepared.queries.shell_epsilon,
        )

    @classmethod
    def from_store(cls, store: DatasetStore, entry: ManifestEntry) -> "TrainingExample":
        samples = store.load_samples(entry)
        required = ("p_points", "p_normals", "p_mu", "p_nu", "q_points", "q_values", "shell_epsilon")
        missing = [name for name in required if name not in samples]
        if missing:
            raise ManifestError(f"entry {entry.id}: samples file lacks {missing}")
        return cls(
            entry.id,
            OrientedPointCloud(samples["p_points"], samples["p_normals"]),
            samples["p_mu"],
            samples["p_nu"],
            samples["q_points"],
            samples["q_values"],
            load_tsdf(store.path(entry, "tsdf")),
            float(samples["shell_epsilon"]),
        )


class StoreExamples:
    """Lazy, lightly cached sequence of the examples of one split"""

    def __init__(self, store: DatasetStore, split: Optional[str] = "train"):
        self.store = store
        self.entries = store.search(split)
        self._cache: "OrderedDict[int, TrainingExample]" = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> TrainingExample:
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        example = TrainingExample.from_store(self.store, self.entries[index])
        self._cache[index] = example
        if len(self._cache) > EXAMPLE_CACHE:
            self._cache.popitem(last=False)
        return example


@dataclass
class StepSample:
    """One augmented, subsampled view of an example"""

    cloud: OrientedPointCloud
    p_points: np.ndarray
    p_normals: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    q_points: np.ndarray
    q_values: np.ndarray
    sdf_values: np.ndarray
    shell_epsilon: float


def ground_truth_levels(values: np.ndarray, epsilon: float, resolutions: Sequence[int], root_keys: np.ndarray) -> List[np.ndarray]:
    """
    Occupied keys per decoder level: shell cells that are children of the
    previous level's occupied keys, starting from the latent keys.
    """
    levels = []
    parents = np.asarray(root_keys, dtype=np.int64).reshape(-1, 3)
    for resolution in resolutions:
        shell = shell_occupancy(values, epsilon, resolution)
        reachable = np.isin(pack_keys(shell), pack_keys(child_keys(parents)))
        parents = shell[reachable]
        levels.append(parents)
    return levels


def rotated_sdf_values(tsdf: DenseSdfGrid, rotation: np.ndarray, scale: float) -> np.ndarray:
    """Dense values of the rotated, uniformly scaled shape on the same lattice"""
    lattice = tsdf.vertex_positions().reshape(-1, 3)
    source = (lattice @ rotation) / scale
    return (scale * sdf_at(tsdf, source)).reshape(tsdf.values.shape)


def _subset(count: int, wanted: int, rng: np.random.Generator) -> np.ndarray:
    if count <= wanted:
        return np.arange(count)
    return np.sort(rng.choice(count, size=wanted, replace=False))


def augment(example: TrainingExample, config: TrainConfig, rng: np.random.Generator) -> StepSample:
    points, normals = example.surface.points, example.surface.normals
    mu, nu = example.mu, example.nu
    q_points, q_values = example.q_points, example.q_values
    sdf_values = example.tsdf.values

    if config.augment_rotation:
        rotation = random_rotation(rng)
        points, normals, mu, nu = (a @ rotation.T for a in (points, normals, mu, nu))
        q_points = q_points @ rotation.T
        extent = max(float(np.abs(points).max()), float(np.abs(q_points).max()))
        scale = min(1.0, MAX_EXTENT / extent)
        points, q_points, q_values = points * scale, q_points * scale, q_values * scale
        sdf_values = rotated_sdf_values(example.tsdf, rotation, scale)

    cloud = OrientedPointCloud(points, normals)
    rate = float(rng.uniform(0.0, config.max_drop_rate)) if config.max_drop_rate > 0 else 0.0
    kept = drop_points(cloud, rate, int(rng.integers(2**31 - 1)))
    p_rows = kept[_subset(len(kept), config.cf_points_per_step, rng)]
    q_rows = _subset(len(q_points), config.sdf_points_per_step, rng)
    return StepSample(
        cloud=cloud.subset(kept),
        p_points=points[p_rows],
        p_normals=normals[p_rows],
        mu=mu[p_rows],
        nu=nu[p_rows],
        q_points=q_points[q_rows],
        q_values=q_values[q_rows],
        sdf_values=sdf_values,
        shell_epsilon=example.shell_epsilon,
    )


def forward_step(model: CrossFieldAutoencoder, sample: StepSample, noise_seed: int) -> ForwardOutputs:
    """Ground-truth-gated forward pass over one augmented sample"""
    latent = model.encode(sample.cloud)
    z = model.reparameterize(latent, noise_seed)
    levels = ground_truth_levels(sample.sdf_values, sample.shell_epsilon, model.config.decoder_resolutions, latent.grid.keys)
    decoded = model.decode(z, gt_levels=levels)
    alpha, _ = model.field_head(query_features(decoded.features, sample.p_points), sample.p_normals)
    sdf = model.sdf_head(query_features(decoded.features, sample.q_points))
    return ForwardOutputs(latent, decoded.levels, alpha, sample.mu, sample.nu, sdf, sample.q_values)


# ============================================================================
# Optimizer
# ============================================================================

class Adam:
    """Adam with bias correction; moments are kept per parameter name"""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params: Dict[str, Tensor], config: TrainConfig) -> "Adam":
        return cls(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def load_state(self, t: int, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray]) -> None:
        if set(m) != set(self.params) or set(v) != set(self.params):
            raise XGenError("optimizer state does not cover the model parameters")
        self.t = int(t)
        self.m = {name: np.asarray(m[name], dtype=np.float64).copy() for name in self.params}
        self.v = {name: np.asarray(v[name], dtype=np.float64).copy() for name in self.params}


# ============================================================================
# Checkpoints
# ============================================================================

@dataclass
class Checkpoint:
    config: PipelineConfig
    params: Dict[str, np.ndarray]
    step: int
    epoch: int
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> CrossFieldAutoencoder:
        return CrossFieldAutoencoder(self.config.network, seed=self.config.seed, params=self.params)


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    blob = checkpoint.config.canonical_json().encode("utf-8")
    tensors = [(f"param/{n}", a) for n, a in checkpoint.params.items()]
    tensors += [(f"adam.m/{n}", a) for n, a in checkpoint.adam_m.items()]
    tensors += [(f"adam.v/{n}", a) for n, a in checkpoint.adam_v.items()]
    parts = [
        _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)),
        blob,
        _CHECKPOINT_STATE.pack(checkpoint.step, checkpoint.epoch, len(tensors)),
    ]
    for name, array in tensors:
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f4")
        parts.append(_TENSOR_HEADER.pack(len(encoded), array.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    atomic_write_bytes(path, checkpoint_bytes(checkpoint))


def _take(data: bytes, offset: int, size: int, path) -> Tuple[bytes, int]:
    if offset + size > len(data):
        raise TruncatedFileError(f"{path}: checkpoint ends early at byte {len(data)}")
    return data[offset:offset + size], offset + size


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    data = Path(path).read_bytes()
    chunk, offset = _take(data, 0, _CHECKPOINT_HEADER.size, path)
    magic, version, config_length = _CHECKPOINT_HEADER.unpack(chunk)
    if magic != CHECKPOINT_MAGIC:
        raise FormatVersionError(f"{path}: not a checkpoint")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    blob, offset = _take(data, offset, config_length, path)
    config = PipelineConfig.model_validate_json(blob.decode("utf-8"))
    chunk, offset = _take(data, offset, _CHECKPOINT_STATE.size, path)
    step, epoch, count = _CHECKPOINT_STATE.unpack(chunk)

    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(count):
        chunk, offset = _take(data, offset, _TENSOR_HEADER.size, path)
        name_length, ndim = _TENSOR_HEADER.unpack(chunk)
        chunk, offset = _take(data, offset, name_length, path)
        name = chunk.decode("utf-8")
        chunk, offset = _take(data, offset, 4 * ndim, path)
        shape = struct.unpack(f"<{ndim}I", chunk)
        chunk, offset = _take(data, offset, 4 * int(np.prod(shape, dtype=np.int64)), path)
        group, _, key = name.partition("/")
        if group not in groups or not key:
            raise FormatVersionError(f"{path}: unexpected tensor name {name!r}")
        groups[group][key] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
    return Checkpoint(config, groups["param"], int(step), int(epoch), groups["adam.m"], groups["adam.v"])


# ============================================================================
# Training loop
# ============================================================================

@dataclass
class TrainingResult:
    checkpoint_path: Path
    steps: int
    epochs: int
    history: List[Dict[str, float]]
    wall_time: float

    def summary(self) -> Dict:
        last = self.history[-1] if self.history else {}
        return {
            "checkpoint": str(self.checkpoint_path),
            "steps": self.steps,
            "epochs": self.epochs,
            "final_loss": last.get("total"),
            "final_cross_field": last.get("cross_field"),
            "wall_time": self.wall_time,
        }


class Trainer:
    """
    Owns the model, the optimizer and the step counter.
    Each step:
    1. Augment and subsample every sample of the batch
    2. GT-gated forward pass and loss, backward scaled by 1/batch
    3. One Adam update
    """

    def __init__(self, config: PipelineConfig, examples: Sequence[TrainingExample], checkpoint: Optional[Checkpoint] = None):
        if not len(examples):
            raise ManifestError("no training entries")
        self.config = config
        self.examples = examples
        self.model = CrossFieldAutoencoder(config.network, seed=config.seed)
        self.optimizer = Adam.from_config(self.model.params, config.train)
        self.step = 0
        self.epoch = 0
        self._queries: Dict[str, Tuple[int, np.ndarray, np.ndarray]] = {}
        if checkpoint is not None:
            if checkpoint.config.network != config.network:
                raise XGenError("checkpoint network config differs from the training config")
            self.model.load_params(checkpoint.params)
            self.optimizer.load_state(checkpoint.step, checkpoint.adam_m, checkpoint.adam_v)
            self.step = checkpoint.step
            self.epoch = checkpoint.epoch

    @classmethod
    def from_store(cls, store: DatasetStore, config: PipelineConfig, checkpoint: Optional[Checkpoint] = None) -> "Trainer":
        return cls(config, StoreExamples(store, "train"), checkpoint)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.config, self.model.state(), self.step, self.epoch,
                          dict(self.optimizer.m), dict(self.optimizer.v))

    def _with_epoch_queries(self, example: TrainingExample) -> TrainingExample:
        """Fresh shell queries once per epoch when configured"""
        if not self.config.tsdf.resample_per_epoch:
            return example
        cached = self._queries.get(example.entry_id)
        if cached is None or cached[0] != self.epoch:
            seed = np.random.SeedSequence([self.config.seed, self.epoch, zlib.crc32(example.entry_id.encode("utf-8"))])
            queries = sample_thin_shell(
                example.tsdf,
                example.shell_epsilon,
                self.config.tsdf.shell_samples,
                int(seed.generate_state(1)[0]),
                surface=example.surface if self.config.tsdf.include_surface else None,
            )
            cached = (self.epoch, queries.points, queries.values)
            self._queries[example.entry_id] = cached
        return TrainingExample(example.entry_id, example.surface, example.mu, example.nu,
                               cached[1], cached[2], example.tsdf, example.shell_epsilon)

    def sample_loss(self, example: TrainingExample, slot: int) -> Tuple[Tensor, LossBreakdown]:
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, self.step, slot]))
        sample = augment(self._with_epoch_queries(example), self.config.train, rng)
        outputs = forward_step(self.model, sample, int(rng.integers(2**63 - 1)))
        return loss_total(outputs, self.config.train.loss_weights)

    def _diverged(self, out_path: Path, example: TrainingExample, breakdown: LossBreakdown) -> None:
        dump = out_path.with_name(out_path.name + ".diverged.json")
        document = {
            "step": self.step,
            "epoch": self.epoch,
            "entry": example.entry_id,
            "loss": breakdown.to_dict(),
            "config_hash": self.config.config_hash(),
            "param_norms": {name: float(np.linalg.norm(p.data)) for name, p in self.model.params.items()},
            "grad_norms": {name: float(np.linalg.norm(p.grad)) for name, p in self.model.params.items() if p.grad is not None},
        }
        atomic_write_text(dump, json.dumps(document, sort_keys=True, indent=2))
        logger.error("non-finite loss at step %d on %s; diagnostics in %s", self.step, example.entry_id, dump)
        raise TrainingDivergedError(f"non-finite loss at step {self.step} on {example.entry_id}", str(dump))

    def train_step(self, batch: Sequence[int], out_path: Path) -> LossBreakdown:
        self.model.zero_grad()
        breakdowns = []
        for slot, index in enumerate(batch):
            example = self.examples[int(index)]
            loss, breakdown = self.sample_loss(example, slot)
            if not math.isfinite(breakdown.total):
                self._diverged(out_path, example, breakdown)
            # batch members accumulate in slot order
            mul(loss, 1.0 / len(batch)).backward()
            breakdowns.append(breakdown)
        self.optimizer.step()
        self.step += 1
        averaged = {key: float(np.mean([b.to_dict()[key] for b in breakdowns])) for key in breakdowns[0].to_dict()}
        return LossBreakdown(**averaged)

    def train(self, out_path: Union[str, Path], max_steps: Optional[int] = None, progress: bool = True) -> TrainingResult:
        out_path = Path(out_path)
        cfg = self.config.train
        limit = max_steps if max_steps is not None else cfg.max_steps
        per_epoch = math.ceil(len(self.examples) / cfg.batch_size)
        planned = max(0, cfg.epochs - self.epoch) * per_epoch
        if limit is not None:
            planned = min(planned, max(0, limit - self.step))

        started = time.perf_counter()
        history: List[Dict[str, float]] = []
        bar = tqdm(total=planned, desc="train", unit="step", disable=not progress or not sys.stderr.isatty())
        logger.info("training %d parameters on %d examples for up to %d steps",
                    self.model.parameter_count, len(self.examples), planned)
        finished = False
        while self.epoch < cfg.epochs and not finished:
            order = np.random.default_rng(np.random.SeedSequence([self.config.seed, self.epoch])).permutation(len(self.examples))
            for start in range(0, len(order), cfg.batch_size):
                if limit is not None and self.step >= limit:
                    finished = True
                    break
                breakdown = self.train_step(order[start:start + cfg.batch_size], out_path)
                history.append(breakdown.to_dict())
                bar.update(1)
                bar.set_postfix(loss=f"{breakdown.total:.4g}", cf=f"{breakdown.cross_field:.4g}")
                logger.debug("step %d: %s", self.step, breakdown.to_dict())
            if finished:
                break
            self.epoch += 1
            if self.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), out_path)
                logger.info("epoch %d done at step %d; checkpoint %s", self.epoch, self.step, out_path)
        bar.close()
        save_checkpoint(self.checkpoint(), out_path)
        return TrainingResult(out_path, self.step, self.epoch, history, time.perf_counter() - started)


def train(
    store: DatasetStore,
    config: PipelineConfig,
    out_path: Union[str, Path],
    max_steps: Optional[int] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = True,
) -> TrainingResult:
    return Trainer.from_store(store, config, resume).train(out_path, max_steps, progress)


# ============================================================================
# Inference
# ============================================================================

@dataclass
class InferenceResult:
    field: FieldOnMesh
    mesh: TriangleMesh
    sdf: Optional[DenseSdfGrid]
    wall_time: float
    occupied_voxels: int

    def summary(self) -> Dict:
        return {
            "site_tag": self.field.site_tag,
            "sites": len(self.field),
            "faces": int(len(self.mesh.faces)),
            "reconstructed": self.sdf is not None,
            "occupied_voxels": self.occupied_voxels,
            "wall_time": self.wall_time,
        }


def decode_cloud(model: CrossFieldAutoencoder, cloud: OrientedPointCloud, threshold: float = 0.5) -> DecoderOutput:
    """Encoder mean, then threshold-gated decoding"""
    latent = model.encode(cloud)
    return model.decode(model.reparameterize(latent, sample=False), threshold=threshold)


def dense_sdf(model: CrossFieldAutoencoder, features: SparseFeatures, truncation: float) -> DenseSdfGrid:
    """
    SDF head at the lattice vertex of every occupied output key (where its
    feature lives). The rest of the lattice takes +truncation when its
    connected region reaches the grid boundary, -truncation otherwise.
    """
    r = features.resolution
    vertices = features.grid.keys
    predicted = model.sdf_head(query_features(features, -0.5 + vertices / r)).data

    values = np.full((r, r, r), np.nan)
    values[tuple(vertices.T)] = np.clip(predicted, -truncation, truncation)
    unknown = np.isnan(values)
    labels, _ = ndimage.label(unknown)
    faces = np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
        labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ])
    outside = np.isin(labels, faces[faces > 0]) & unknown
    values[outside] = truncation
    values[unknown & ~outside] = -truncation
    return DenseSdfGrid(r, values, truncation)


def face_field(model: CrossFieldAutoencoder, features: SparseFeatures, mesh: TriangleMesh) -> np.ndarray:
    alpha, _ = model.field_head(query_features(features, mesh.face_centers), mesh.face_normals)
    return alpha.data


def infer(
    model: CrossFieldAutoencoder,
    source: Union[TriangleMesh, OrientedPointCloud],
    config: PipelineConfig,
    seed: int = 0,
    threshold: float = 0.5,
    noise: float = 0.0,
    drop_rate: float = 0.0,
) -> InferenceResult:
    """
    Mesh input: field at the mesh's face centres. Cloud input: the surface is
    reconstructed from the SDF head first and the field lives on its faces.
    Results are returned in the input's coordinates.

    For mesh input, `noise` and `drop_rate` perturb the encoded samples (in
    normalised space) while the field is still read at the clean faces.
    """
    started = time.perf_counter()
    with no_grad():
        if isinstance(source, TriangleMesh):
            normalized, _ = normalize_to_unit_cube(source, config.normalize.margin)
            cloud = perturb_cloud(sample_surface(normalized, config.dataset.surface_samples, seed), noise, drop_rate, seed)
            decoded = decode_cloud(model, cloud, threshold)
            alpha = face_field(model, decoded.features, normalized)
            result_mesh, sdf = source, None
        elif isinstance(source, OrientedPointCloud):
            cloud, transform = normalize_cloud(source, config.normalize.margin)
            decoded = decode_cloud(model, cloud, threshold)
            sdf = dense_sdf(model, decoded.features, config.tsdf.truncation)
            surface = marching_cubes(sdf)
            alpha = face_field(model, decoded.features, surface)
            result_mesh = TriangleMesh(transform.inverse(surface.vertices), surface.faces)
        else:
            raise XGenError(f"cannot infer a field for {type(source).__name__}")
    field_out = FieldOnMesh("face", result_mesh.face_centers, result_mesh.face_normals, alpha, mesh=result_mesh)
    wall_time = time.perf_counter() - started
    logger.info("inference: %d faces in %.3f s", len(result_mesh.faces), wall_time)
    return InferenceResult(field_out, result_mesh, sdf, wall_time, len(decoded.features))


def perturb_cloud(cloud: OrientedPointCloud, noise: float, drop_rate: float, seed: int) -> OrientedPointCloud:
    """Noisy, partially dropped copy of a cloud for robustness checks"""
    noise_seed, drop_seed = np.random.SeedSequence([seed, 0xD209]).generate_state(2)
    noisy = add_noise(cloud, noise, int(noise_seed)) if noise > 0 else cloud
    if drop_rate <= 0:
        return noisy
    return noisy.subset(drop_points(noisy, drop_rate, int(drop_seed)))
