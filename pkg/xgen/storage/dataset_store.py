"""
Prepared-shape dataset on disk.

Layout:
    <root>/manifest.jsonl              one JSON object per entry, sorted by id
    <root>/shapes/<entry_id>/mesh.obj   normalised (and possibly rotated) mesh
    <root>/shapes/<entry_id>/tsdf.bin   dense truncated SDF
    <root>/shapes/<entry_id>/field.xfld ground-truth vertex field
    <root>/shapes/<entry_id>/samples.npz surface set P and shell query set Q
"""

import io
import json
import logging
import shutil
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from xgen.config.errors import ManifestError
from xgen.config.settings import PipelineConfig
from xgen.fields.crossfield import FieldOnMesh, field_bytes, generate_gt_field, interpolate_field
from xgen.geometry.mesh import CurvatureFrames, OrientedPointCloud, TriangleMesh
from xgen.geometry.mesh_io import (
    load_mesh,
    normalize_to_unit_cube,
    obj_bytes,
    principal_curvatures,
    random_rotation,
    rotate_mesh,
    sample_surface_with_faces,
)
from xgen.sdf.tsdf import DenseSdfGrid, SdfSamples, compute_tsdf, sample_thin_shell, tsdf_bytes
from xgen.storage.artifacts import atomic_write_bytes, atomic_write_text, provenance_path, sha256_bytes

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SHAPE_FILES = {"mesh": "mesh.obj", "tsdf": "tsdf.bin", "field": "field.xfld", "samples": "samples.npz"}
SPLITS = ("train", "test")
NPZ_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    source: str
    augmentation: int
    split: str
    files: Dict[str, str]
    config_hash: str
    metadata: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str, where: str = "manifest") -> "ManifestEntry":
        try:
            document = json.loads(line)
            return cls(**document)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"{where}: malformed manifest line ({exc})")


def split_for(source_id: str, test_fraction: float) -> str:
    """Deterministic split from a hash of the source shape id; rotated copies share it"""
    bucket = zlib.crc32(source_id.encode("utf-8")) / 2**32
    return "test" if bucket < test_fraction else "train"


def shape_seed(seed: int, source_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(source_id.encode("utf-8"))])


class DatasetStore:
    """
    Manages a prepared-shape dataset directory.
    Workflow:
    1. Shape files -> shapes/<entry_id>/
    2. One manifest line per entry (split, files, config hash)
    3. Query entries by split
    """

    def __init__(self, root: Union[str, Path]):
        """
        Open (or start) a dataset directory

        Args:
            root: dataset directory; created on the first write
        """
        self.root = Path(root)
        self.entries: Dict[str, ManifestEntry] = {}
        if self.manifest_path.exists():
            for entry in self._read_manifest():
                self.entries[entry.id] = entry

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _read_manifest(self) -> List[ManifestEntry]:
        entries = []
        with open(self.manifest_path, "r", encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if line.strip():
                    entries.append(ManifestEntry.from_json(line, f"{self.manifest_path}:{number}"))
        return entries

    def add_entry(self, entry: ManifestEntry, payloads: Dict[str, bytes]) -> ManifestEntry:
        """
        Write an entry's files and register it

        Args:
            entry: manifest record; its `files` are paths relative to the root
            payloads: file kind -> bytes, one per key of `entry.files`

        Returns:
            The registered entry
        """
        if set(payloads) != set(entry.files):
            raise ManifestError(f"entry {entry.id}: payloads {sorted(payloads)} do not match files {sorted(entry.files)}")
        for kind, relative in entry.files.items():
            atomic_write_bytes(self.root / relative, payloads[kind])
        self.entries[entry.id] = entry
        return entry

    def register(self, entry: ManifestEntry) -> None:
        """Register an entry whose files already exist (written by a worker)"""
        self.entries[entry.id] = entry

    def write_manifest(self) -> Path:
        lines = [self.entries[key].to_json() for key in sorted(self.entries)]
        atomic_write_text(self.manifest_path, "".join(line + "\n" for line in lines))
        return self.manifest_path

    def manifest_hash(self) -> str:
        if not self.manifest_path.exists():
            raise ManifestError(f"{self.manifest_path} does not exist")
        return sha256_bytes(self.manifest_path.read_bytes())

    def search(self, split: Optional[str] = None) -> List[ManifestEntry]:
        """Entries sorted by id, optionally restricted to one split"""
        if split is not None and split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [self.entries[key] for key in sorted(self.entries) if split is None or self.entries[key].split == split]

    def path(self, entry: ManifestEntry, kind: str) -> Path:
        if kind not in entry.files:
            raise ManifestError(f"entry {entry.id} has no {kind} file")
        resolved = self.root / entry.files[kind]
        if not resolved.exists():
            raise ManifestError(f"entry {entry.id}: missing {kind} file {resolved}")
        return resolved

    def load_samples(self, entry: ManifestEntry) -> Dict[str, np.ndarray]:
        with np.load(self.path(entry, "samples"), allow_pickle=False) as data:
            return {name: data[name] for name in data.files}

    def delete_all(self) -> None:
        """
        Clear every entry and its files.

        Only a dataset directory is cleared: a non-empty root without a
        manifest raises ManifestError and nothing is removed.
        """
        if self.root.is_dir() and any(self.root.iterdir()) and not self.manifest_path.exists():
            raise ManifestError(f"{self.root} is not empty and holds no {MANIFEST_NAME}; refusing to clear it")
        shapes = self.root / "shapes"
        if shapes.exists():
            shutil.rmtree(shapes)
        if self.manifest_path.exists():
            self.manifest_path.unlink()
        provenance_path(self.manifest_path).unlink(missing_ok=True)
        self.entries.clear()


# ============================================================================
# Per-shape preparation
# ============================================================================

def samples_bytes(surface: OrientedPointCloud, mu: np.ndarray, nu: np.ndarray, queries: SdfSamples) -> bytes:
    """.npz archive with fixed entry timestamps so reruns hash the same"""
    arrays = dict(
        p_points=surface.points,
        p_normals=surface.normals,
        p_mu=mu,
        p_nu=nu,
        q_points=queries.points,
        q_values=queries.values,
        q_surface_count=np.array(queries.surface_count),
        shell_epsilon=np.array(queries.shell_epsilon),
    )
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_TIMESTAMP)
            with archive.open(info, "w") as handle:
                np.lib.format.write_array(handle, np.asanyarray(value), allow_pickle=False)
    return buffer.getvalue()


@dataclass(frozen=True)
class PreparedShape:
    """Everything one entry stores, kept in memory"""

    mesh: TriangleMesh
    tsdf: DenseSdfGrid
    surface: OrientedPointCloud
    mu: np.ndarray
    nu: np.ndarray
    queries: SdfSamples
    gt_field: FieldOnMesh
    frames: CurvatureFrames

    def payloads(self) -> Dict[str, bytes]:
        # the stored field carries the principal directions as its reference block
        stored = FieldOnMesh("vertex", self.gt_field.points, self.gt_field.normals, self.gt_field.alpha,
                             self.frames.dir_max, self.frames.dir_min)
        return {
            "mesh": obj_bytes(self.mesh),
            "tsdf": tsdf_bytes(self.tsdf),
            "field": field_bytes(stored),
            "samples": samples_bytes(self.surface, self.mu, self.nu, self.queries),
        }

    def metadata(self) -> Dict:
        energy = self.gt_field.metadata.get("energy", [])
        return {
            "vertices": int(len(self.mesh.vertices)),
            "faces": int(len(self.mesh.faces)),
            "tsdf_degraded": bool(self.tsdf.degraded),
            "gt_energy": float(energy[-1]) if len(energy) else None,
        }


def prepare_shape(mesh: TriangleMesh, config: PipelineConfig, rng: np.random.Generator) -> PreparedShape:
    """
    One dataset entry from a normalised mesh: TSDF, surface set P with GT
    directions interpolated from the vertex field, shell query set Q.
    """
    seeds = rng.integers(0, 2**31 - 1, size=2)
    tsdf = compute_tsdf(mesh, config.tsdf.resolution, config.tsdf.truncation)
    surface, face_index, barycentric = sample_surface_with_faces(mesh, config.dataset.surface_samples, int(seeds[0]))
    frames = principal_curvatures(mesh)
    gt = generate_gt_field(
        mesh,
        frames,
        iterations=config.gt_field.iterations,
        smooth_weight=config.gt_field.smooth_weight,
        umbilic_threshold=config.gt_field.umbilic_threshold,
    )
    mu, nu = interpolate_field(gt, mesh, face_index, barycentric, surface.normals)
    queries = sample_thin_shell(
        tsdf,
        config.tsdf.shell_epsilon,
        config.tsdf.shell_samples,
        int(seeds[1]),
        surface=surface if config.tsdf.include_surface else None,
    )
    return PreparedShape(mesh, tsdf, surface, mu, nu, queries, gt, frames)


def build_shape_entries(path: Union[str, Path], root: Union[str, Path], config: PipelineConfig) -> List[ManifestEntry]:
    """
    Every augmentation copy of one source mesh, written under `root`.
    Copy 0 is the unrotated shape; the others are uniformly rotated and
    renormalised.
    """
    path = Path(path)
    source_id = path.stem
    store = DatasetStore(root)
    base, _ = normalize_to_unit_cube(load_mesh(path), config.normalize.margin)
    split = split_for(source_id, config.dataset.test_fraction)
    children = shape_seed(config.seed, source_id).spawn(config.dataset.augmentations)

    entries = []
    for augmentation, child in enumerate(children):
        rng = np.random.default_rng(child)
        mesh = base
        if augmentation:
            mesh, _ = normalize_to_unit_cube(rotate_mesh(base, random_rotation(rng)), config.normalize.margin)
        entry_id = f"{source_id}__r{augmentation:02d}"
        prepared = prepare_shape(mesh, config, rng)
        files = {kind: f"shapes/{entry_id}/{name}" for kind, name in SHAPE_FILES.items()}
        entry = ManifestEntry(entry_id, source_id, augmentation, split, files, config.config_hash(), prepared.metadata())
        entries.append(store.add_entry(entry, prepared.payloads()))
        logger.debug("prepared %s (%s)", entry_id, split)
    return entries
