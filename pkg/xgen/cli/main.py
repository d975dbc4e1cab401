"""
Command-line entry point.

    python -m xgen.cli.main dataset  MESH_DIR --out DATASET_DIR
    python -m xgen.cli.main gt-field MESH --out FIELD.xfld
    python -m xgen.cli.main train    DATASET_DIR --out MODEL.xgck
    python -m xgen.cli.main infer    INPUT MODEL.xgck --out FIELD.xfld [--cloud]
    python -m xgen.cli.main eval-field FIELD.xfld MESH
    python -m xgen.cli.main eval-quad  QUAD.obj [--reference MESH] [--out REPORT.json]
    python -m xgen.cli.main mc       TSDF.bin --out MESH.obj

Every command prints one JSON line on stdout. Exit codes: 0 ok, 1 partial
failures, 2 fatal.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from xgen.config.errors import ManifestError, XGenError
from xgen.config.settings import PipelineConfig, RuntimeSettings, configure_logging
from xgen.fields.crossfield import generate_gt_field, load_field, save_field, singularity_indices
from xgen.geometry.mesh import TriangleMesh
from xgen.geometry.mesh_io import load_mesh, load_point_cloud, load_quad_mesh, obj_bytes, principal_curvatures
from xgen.metrics.field_metrics import angular_error, frames_at_faces, ground_truth_deviation
from xgen.metrics.quad_metrics import evaluate_quad_mesh
from xgen.network.training import infer, load_checkpoint, perturb_cloud, train
from xgen.sdf.tsdf import load_tsdf, marching_cubes
from xgen.storage.artifacts import atomic_write_bytes, atomic_write_text, write_provenance
from xgen.storage.dataset_store import DatasetStore, ManifestEntry, build_shape_entries

logger = logging.getLogger("xgen.cli")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2
MESH_SUFFIXES = (".obj", ".ply")


class ShapeLogger(logging.LoggerAdapter):
    """Prefixes every record with the shape id"""

    def process(self, msg, kwargs):
        return f"[{self.extra['shape']}] {msg}", kwargs


def _stamp(path: Path, config: PipelineConfig, command: str, extra: Optional[Dict] = None) -> None:
    write_provenance(path, config.config_hash(), command, extra)


def _require_out(args) -> Path:
    if args.out is None:
        raise XGenError(f"{args.command} needs --out")
    return Path(args.out)


# ============================================================================
# dataset
# ============================================================================

def _build_one(path: Path, root: Path, config: PipelineConfig) -> Tuple[str, List[ManifestEntry], Optional[str]]:
    shape_log = ShapeLogger(logger, {"shape": path.stem})
    try:
        entries = build_shape_entries(path, root, config)
        shape_log.info("%d entries", len(entries))
        return path.stem, entries, None
    except (ValueError, OSError) as exc:
        shape_log.error("skipped: %s", exc)
        return path.stem, [], f"{type(exc).__name__}: {exc}"


def cmd_dataset(args, config: PipelineConfig) -> Tuple[Dict, int]:
    in_dir = Path(args.input)
    root = _require_out(args)
    paths = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in MESH_SUFFIXES) if in_dir.is_dir() else []
    if not paths:
        raise ManifestError(f"no .obj or .ply meshes in {in_dir}")

    store = DatasetStore(root)
    store.delete_all()
    results = []
    show = sys.stderr.isatty()
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_build_one, p, root, config) for p in paths]
            for future in tqdm(futures, desc="shapes", disable=not show):
                results.append(future.result())
    else:
        for p in tqdm(paths, desc="shapes", disable=not show):
            results.append(_build_one(p, root, config))

    failures = []
    for source, entries, error in results:
        for entry in entries:
            store.register(entry)
        if error is not None:
            failures.append({"shape": source, "error": error})
    manifest = store.write_manifest()
    _stamp(manifest, config, "dataset", {"seed": config.seed})
    result = {
        "manifest": str(manifest),
        "manifest_sha256": store.manifest_hash(),
        "entries": len(store.search()),
        "train": len(store.search("train")),
        "test": len(store.search("test")),
        "failures": failures,
    }
    return result, EXIT_PARTIAL if failures else EXIT_OK


# ============================================================================
# gt-field
# ============================================================================

def cmd_gt_field(args, config: PipelineConfig) -> Tuple[Dict, int]:
    out = _require_out(args)
    mesh = load_mesh(args.input)
    frames = principal_curvatures(mesh)
    field = generate_gt_field(
        mesh,
        frames,
        iterations=config.gt_field.iterations,
        smooth_weight=config.gt_field.smooth_weight,
        umbilic_threshold=config.gt_field.umbilic_threshold,
    )
    energy = field.metadata["energy"]
    save_field(field.with_ground_truth(frames.dir_max, frames.dir_min), out)
    _stamp(out, config, "gt-field")
    singular = singularity_indices(field)
    return {
        "field": str(out),
        "sites": len(field),
        "energy_start": energy[0],
        "energy_end": energy[-1],
        "angular_error": angular_error(field, frames, config.metrics.anisotropy_mask),
        "singularities": singular.count,
        "index_sum": singular.total,
    }, EXIT_OK


# ============================================================================
# train / infer
# ============================================================================

def cmd_train(args, config: PipelineConfig) -> Tuple[Dict, int]:
    out = _require_out(args)
    store = DatasetStore(args.input)
    if not store.entries:
        raise ManifestError(f"{store.manifest_path} has no entries")
    stale = {entry.config_hash for entry in store.search()} - {config.config_hash()}
    if stale:
        logger.warning("dataset was built with a different config (%d hash(es))", len(stale))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(store, config, out, max_steps=args.max_steps, resume=resume)
    _stamp(out, config, "train", {"steps": result.steps, "manifest_sha256": store.manifest_hash()})
    return result.summary(), EXIT_OK


def cmd_infer(args, config: PipelineConfig) -> Tuple[Dict, int]:
    out = _require_out(args)
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()
    run_config = checkpoint.config
    noise, drop = 0.0, 0.0
    if args.cloud:
        source = load_point_cloud(args.input)
        if args.noise > 0 or args.drop > 0:
            source = perturb_cloud(source, args.noise, args.drop, config.seed)
    else:
        source = load_mesh(args.input)
        noise, drop = args.noise, args.drop
    result = infer(model, source, run_config, seed=config.seed, threshold=args.threshold, noise=noise, drop_rate=drop)

    save_field(result.field, out)
    _stamp(out, run_config, "infer")
    summary = {"field": str(out), **result.summary()}
    if result.sdf is not None:
        mesh_path = out.with_suffix(".obj")
        atomic_write_bytes(mesh_path, obj_bytes(result.mesh))
        _stamp(mesh_path, run_config, "infer")
        summary["mesh"] = str(mesh_path)
    return summary, EXIT_OK


# ============================================================================
# evaluation
# ============================================================================

def cmd_eval_field(args, config: PipelineConfig) -> Tuple[Dict, int]:
    mesh = load_mesh(args.mesh)
    field = load_field(args.input, mesh)
    frames = principal_curvatures(mesh)
    if field.site_tag == "face":
        frames = frames_at_faces(mesh, frames)
    singular = singularity_indices(field)
    result = {
        "sites": len(field),
        "site_tag": field.site_tag,
        "angular_error": angular_error(field, frames, config.metrics.anisotropy_mask),
        "singularities": singular.count,
        "index_sum": singular.total,
    }
    if field.gt_mu is not None:
        result["gt_deviation"] = ground_truth_deviation(field)
    return result, EXIT_OK


def cmd_eval_quad(args, config: PipelineConfig) -> Tuple[Dict, int]:
    quad = load_quad_mesh(args.input)
    reference = load_mesh(args.reference) if args.reference else None
    report = evaluate_quad_mesh(quad, reference, config.metrics, seed=config.seed)
    logger.info("quad quality\n%s", report.to_table())
    result = dict(report.summary())
    if args.out:
        out = Path(args.out)
        atomic_write_text(out, report.to_json(include_faces=True) + "\n")
        _stamp(out, config, "eval-quad")
        result["report"] = str(out)
    return result, EXIT_OK


def _boundary_edge_count(mesh: TriangleMesh) -> int:
    sides = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(sides, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def cmd_mc(args, config: PipelineConfig) -> Tuple[Dict, int]:
    out = _require_out(args)
    grid = load_tsdf(args.input)
    mesh = marching_cubes(grid)
    atomic_write_bytes(out, obj_bytes(mesh))
    _stamp(out, config, "mc")
    open_edges = _boundary_edge_count(mesh)
    return {
        "mesh": str(out),
        "vertices": int(len(mesh.vertices)),
        "faces": int(len(mesh.faces)),
        "watertight": open_edges == 0,
        "open_edges": open_edges,
    }, EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset,
    "gt-field": cmd_gt_field,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval-field": cmd_eval_field,
    "eval-quad": cmd_eval_quad,
    "mc": cmd_mc,
}


# ============================================================================
# Argument parsing
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None, help="overrides config seed")
    common.add_argument("--workers", type=int, default=None, help="shape-level worker processes")
    common.add_argument("--resolution", type=int, default=None, help="overrides every lattice resolution")
    common.add_argument("--out", type=str, default=None, help="output path")

    parser = argparse.ArgumentParser(prog="xgen", description="Cross-field generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="prepare a training dataset from a mesh directory")
    p.add_argument("input")

    p = sub.add_parser("gt-field", parents=[common], help="curvature-aligned ground-truth field for a mesh")
    p.add_argument("input")

    p = sub.add_parser("train", parents=[common], help="train the autoencoder on a prepared dataset")
    p.add_argument("input", help="dataset directory")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")

    p = sub.add_parser("infer", parents=[common], help="predict a cross field for a mesh or point cloud")
    p.add_argument("input")
    p.add_argument("checkpoint")
    p.add_argument("--cloud", action="store_true", help="treat the input as an oriented PLY point cloud")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise, fraction of the bbox diagonal")
    p.add_argument("--drop", type=float, default=0.0, help="fraction of points dropped")
    p.add_argument("--threshold", type=float, default=0.5, help="occupancy probability cutoff")

    p = sub.add_parser("eval-field", parents=[common], help="angular error and singularities of a field")
    p.add_argument("input", help="field file")
    p.add_argument("mesh")

    p = sub.add_parser("eval-quad", parents=[common], help="quad mesh quality report")
    p.add_argument("input", help="quad OBJ")
    p.add_argument("--reference", type=str, default=None, help="reference surface for Chamfer distance")

    p = sub.add_parser("mc", parents=[common], help="extract the zero level set of a TSDF file")
    p.add_argument("input")
    return parser


def resolve_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    data = config.model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    elif "XGEN_WORKERS" in os.environ:
        data["workers"] = RuntimeSettings().workers
    config = PipelineConfig.model_validate(data)
    if args.resolution is not None:
        config = config.with_resolution(args.resolution)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        result, code = COMMANDS[args.command](args, config)
        print(json.dumps({"ok": code == EXIT_OK, "command": args.command, **result}, sort_keys=True))
        return code
    except (ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(json.dumps({"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}, sort_keys=True))
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
