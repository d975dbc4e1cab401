"""
Atomic artifact writes and provenance sidecars.

Every file is written to a temporary sibling, fsynced and renamed into place,
so an interrupted run never leaves a half-written artifact behind.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Union

PathLike = Union[str, Path]

PROVENANCE_SUFFIX = ".prov.json"


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(handle, "wb") as temp:
            temp.write(data)
            temp.flush()
            os.fsync(temp.fileno())
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_dumps(document: Any) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def provenance_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + PROVENANCE_SUFFIX)


def write_provenance(path: PathLike, config_hash: str, command: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Stamp an existing artifact with the config hash and its own content hash"""
    record = {"config_hash": config_hash, "sha256": sha256_file(path), "command": command}
    if extra:
        record.update(extra)
    atomic_write_text(provenance_path(path), canonical_dumps(record) + "\n")
    return record


def read_provenance(path: PathLike) -> Dict[str, Any]:
    with open(provenance_path(path), "r", encoding="utf-8") as handle:
        return json.load(handle)


def verify_provenance(path: PathLike, config_hash: str) -> bool:
    """True when the sidecar exists, names this config and matches the file content"""
    sidecar = provenance_path(path)
    if not sidecar.exists():
        return False
    record = read_provenance(path)
    return record.get("config_hash") == config_hash and record.get("sha256") == sha256_file(path)
