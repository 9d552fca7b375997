"""On-disk formats: the tensor container and the dataset manifest.

Tensor container
    ``<stem>.f32``  raw little-endian float32, C order
    ``<stem>.json`` sidecar ``{"dims", "spacing_mm", "domain", "dtype": "f32le", "version": 1}``

Manifest
    one JSON file listing every volume with its mask (or ``null``), domain tag,
    split, spacing and the phantom seed it was generated from. Paths are stored
    relative to the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError

TENSOR_VERSION = 1
MANIFEST_VERSION = 1
DOMAINS = ("low", "high")


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".f32", ".json"):
        path = path.with_suffix("")
    return path


def write_tensor(path, array: np.ndarray, spacing_mm, domain: str) -> Path:
    """Write ``array`` as a tensor container; returns the ``.f32`` path."""
    stem = _stem(path)
    raw = stem.with_suffix(".f32")
    meta = {
        "dims": [int(d) for d in array.shape],
        "spacing_mm": [float(s) for s in spacing_mm],
        "domain": domain,
        "dtype": "f32le",
        "version": TENSOR_VERSION,
    }
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(raw, "wb") as fh:
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
        with open(stem.with_suffix(".json"), "w") as fh:
            json.dump(meta, fh)
    except OSError as exc:
        raise DatasetError(f"cannot write tensor {raw}: {exc}") from exc
    return raw


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Read a tensor container; returns ``(float32 array, sidecar dict)``.

    Uses builtin ``open`` so that reads are visible to ``sys.addaudithook``.
    """
    stem = _stem(path)
    raw = stem.with_suffix(".f32")
    try:
        with open(stem.with_suffix(".json")) as fh:
            meta = json.load(fh)
        with open(raw, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read tensor {raw}: {exc}") from exc
    if meta.get("dtype") != "f32le" or meta.get("version") != TENSOR_VERSION:
        raise DatasetError(f"unsupported tensor format in {raw}: {meta}")
    dims = tuple(meta["dims"])
    if len(buf) != 4 * int(np.prod(dims)):
        raise DatasetError(f"size mismatch in {raw}: {len(buf)} bytes for dims {dims}")
    arr = np.frombuffer(buf, dtype="<f4").reshape(dims).astype(np.float32)
    return arr, meta


@dataclass
class ManifestEntry:
    id: str
    volume_path: str
    mask_path: Optional[str]
    domain: str
    split: str
    spacing_mm: tuple
    seed: int

    def __post_init__(self):
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def select(self, domain: Optional[str] = None, split: Optional[str] = None) -> list[ManifestEntry]:
        return [
            e for e in self.entries
            if (domain is None or e.domain == domain) and (split is None or e.split == split)
        ]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_volume(self, entry: ManifestEntry) -> np.ndarray:
        return read_tensor(self.resolve(entry.volume_path))[0]

    def load_mask(self, entry: ManifestEntry) -> np.ndarray:
        if entry.mask_path is None:
            raise DatasetError(f"entry {entry.id} ({entry.domain}/{entry.split}) has no mask")
        return read_tensor(self.resolve(entry.mask_path))[0].astype(np.uint8)

    def validate(self) -> None:
        """Check the unpaired-setting invariants; raises :class:`DatasetError`."""
        for e in self.entries:
            if e.domain not in DOMAINS:
                raise DatasetError(f"entry {e.id}: unknown domain {e.domain!r}")
            if e.split not in ("train", "test"):
                raise DatasetError(f"entry {e.id}: unknown split {e.split!r}")
            if e.domain == "high" and e.mask_path is None:
                raise DatasetError(f"high-quality entry {e.id} has no mask")
            if e.domain == "low" and e.split == "train" and e.mask_path is not None:
                raise DatasetError(f"low-quality training entry {e.id} carries a mask")
        seeds = [e.seed for e in self.entries]
        if len(set(seeds)) != len(seeds):
            raise DatasetError("phantom seeds are not unique across entries")

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "meta": self.meta,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=1)
        except OSError as exc:
            raise DatasetError(f"cannot write manifest {path}: {exc}") from exc
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version in {path}")
    entries = [ManifestEntry(**e) for e in doc["entries"]]
    manifest = DatasetManifest(entries=entries, root=path.parent, meta=doc.get("meta", {}))
    manifest.validate()
    return manifest
