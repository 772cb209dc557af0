"""On-disk cache of frozen-backbone features.

Layout of a cache directory::

    manifest.txt            plain text: spec hash, layers, grid shape, image ids
    <image_id>.L<layer>.f32 raw little-endian float32, H x W x C row-major
    <image_id>.cls.f32      raw little-endian float32, C (final-layer CLS)

The manifest is replaced atomically, so readers never see a half-written one.
"""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .backbone import DenseFeatureGrid, PretrainedBackbone
from .errors import InputError, StaleCacheError

MANIFEST = "manifest.txt"
HEADER = "spawnnet-feature-cache v1"
_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass
class CacheManifest:
    spec_hash: str
    layers: tuple[int, ...]
    grid: tuple[int, int, int]  # H, W, C
    has_cls: bool = True
    image_ids: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.image_ids)

    def render(self) -> str:
        lines = [
            HEADER,
            f"spec_hash: {self.spec_hash}",
            "layers: " + " ".join(str(l) for l in self.layers),
            "grid: " + " ".join(str(g) for g in self.grid),
            f"cls: {int(self.has_cls)}",
            f"count: {self.count}",
            "images:",
            *self.image_ids,
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "CacheManifest":
        lines = text.splitlines()
        if not lines or lines[0] != HEADER:
            raise StaleCacheError("unrecognized cache manifest")
        fields = {}
        i = 1
        while i < len(lines) and lines[i] != "images:":
            key, _, value = lines[i].partition(":")
            fields[key.strip()] = value.strip()
            i += 1
        ids = [l for l in lines[i + 1:] if l]
        m = cls(
            spec_hash=fields["spec_hash"],
            layers=tuple(int(x) for x in fields["layers"].split()),
            grid=tuple(int(x) for x in fields["grid"].split()),
            has_cls=fields.get("cls", "0") == "1",
            image_ids=ids,
        )
        if int(fields["count"]) != m.count:
            raise StaleCacheError("manifest count does not match its image list")
        return m


def _blob(root: Path, image_id: str, layer) -> Path:
    tag = "cls" if layer == "cls" else f"L{int(layer)}"
    return root / f"{image_id}.{tag}.f32"


def _write_atomic(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_manifest(cache_path) -> CacheManifest:
    path = Path(cache_path) / MANIFEST
    if not path.exists():
        raise StaleCacheError(f"no cache manifest at {path}")
    return CacheManifest.parse(path.read_text())


def build_cache(
    backbone: PretrainedBackbone,
    dataset: Iterable[tuple[str, np.ndarray]],
    cache_path,
    batch_size: int = 32,
    with_cls: bool = True,
) -> CacheManifest:
    """Extract features for every (image_id, image) and store them; existing entries are kept."""
    root = Path(cache_path)
    root.mkdir(parents=True, exist_ok=True)
    layers = backbone.spec.extraction_layers
    manifest = None
    if (root / MANIFEST).exists():
        manifest = read_manifest(root)
        if manifest.spec_hash != backbone.spec_hash or manifest.layers != layers:
            raise StaleCacheError(f"cache at {root} was built for backbone {manifest.spec_hash}")
    known = set(manifest.image_ids) if manifest else set()
    ids = list(manifest.image_ids) if manifest else []
    grid_shape = manifest.grid if manifest else None

    def flush(batch_ids, batch_imgs):
        nonlocal grid_shape
        grids, cls = backbone.extract(np.stack(batch_imgs), layers, with_cls=with_cls)
        for l, g in grids.items():
            grid_shape = tuple(g.shape[1:])
            for j, image_id in enumerate(batch_ids):
                _blob(root, image_id, l).write_bytes(g[j].numpy().astype("<f4").tobytes())
        if with_cls:
            for j, image_id in enumerate(batch_ids):
                _blob(root, image_id, "cls").write_bytes(cls[j].numpy().astype("<f4").tobytes())
        ids.extend(batch_ids)

    batch_ids, batch_imgs = [], []
    for image_id, image in dataset:
        if not _ID_RE.match(image_id):
            raise InputError(f"image id {image_id!r} is not filename-safe")
        if image_id in known:
            continue
        known.add(image_id)
        batch_ids.append(image_id)
        batch_imgs.append(np.asarray(image)[..., :3])
        if len(batch_ids) == batch_size:
            flush(batch_ids, batch_imgs)
            batch_ids, batch_imgs = [], []
    if batch_ids:
        flush(batch_ids, batch_imgs)
    if grid_shape is None:
        raise InputError("cannot build a cache from an empty dataset")
    manifest = CacheManifest(backbone.spec_hash, tuple(layers), tuple(grid_shape), with_cls, ids)
    _write_atomic(root / MANIFEST, manifest.render().encode())
    return manifest


def _check(manifest: CacheManifest, spec_hash: str | None):
    if spec_hash is not None and manifest.spec_hash != spec_hash:
        raise StaleCacheError(f"cache built for backbone {manifest.spec_hash}, expected {spec_hash}")


def read_cache(cache_path, image_id: str, layer, spec_hash: str | None = None,
               manifest: CacheManifest | None = None) -> DenseFeatureGrid | torch.Tensor:
    """Load one grid (layer int) or the CLS vector (layer == "cls")."""
    root = Path(cache_path)
    manifest = manifest or read_manifest(root)
    _check(manifest, spec_hash)
    path = _blob(root, image_id, layer)
    if not path.exists():
        raise KeyError(f"image {image_id!r} layer {layer} not in cache {root}")
    data = torch.from_numpy(np.fromfile(path, dtype="<f4").astype(np.float32))
    if layer == "cls":
        return data
    return DenseFeatureGrid(data.reshape(manifest.grid), int(layer), source_image_id=image_id)


class FeatureStore:
    """In-memory feature table indexed by image id; rows feed training batches.

    Grids are kept channel-first, ``(N, C, H, W)``, ready for the adapters.
    """

    def __init__(self, layers: Sequence[int] = (), with_cls: bool = False):
        self.layers = tuple(layers)
        self.with_cls = with_cls
        self.index: dict[str, int] = {}
        self._pending: dict = {k: [] for k in self._keys()}
        self._tables: dict = {}

    def _keys(self):
        return list(self.layers) + (["cls"] if self.with_cls else [])

    def __len__(self):
        return len(self.index)

    def __contains__(self, image_id):
        return image_id in self.index

    def add(self, ids: Sequence[str], grids: dict, cls: torch.Tensor | None = None):
        """grids: {layer: (n, H, W, C)} channel-last, as the backbone emits them."""
        for l in self.layers:
            self._pending[l].append(grids[l].permute(0, 3, 1, 2).contiguous())
        if self.with_cls:
            self._pending["cls"].append(cls)
        for image_id in ids:
            if image_id in self.index:
                raise InputError(f"duplicate image id {image_id}")
            self.index[image_id] = len(self.index)

    def add_live(self, backbone: PretrainedBackbone, ids: Sequence[str], images, batch_size: int = 32):
        if not self._keys():
            for image_id in ids:
                self.index.setdefault(image_id, len(self.index))
            return
        images = np.asarray(images)
        for s in range(0, len(ids), batch_size):
            grids, cls = backbone.extract(images[s:s + batch_size], self.layers or None, with_cls=self.with_cls)
            self.add(ids[s:s + batch_size], grids, cls)

    def _table(self, key):
        if self._pending[key]:
            parts = ([self._tables[key]] if key in self._tables else []) + self._pending[key]
            self._tables[key] = torch.cat(parts)
            self._pending[key] = []
        return self._tables[key]

    def rows(self, ids: Sequence[str]) -> torch.Tensor:
        try:
            return torch.tensor([self.index[i] for i in ids], dtype=torch.long)
        except KeyError as e:
            raise StaleCacheError(f"no cached features for image {e.args[0]}") from None

    def gather(self, rows: torch.Tensor) -> dict:
        """rows: integer tensor of any shape -> {key: rows.shape + feature shape}."""
        return {k: self._table(k)[rows] for k in self._keys()}

    @classmethod
    def from_cache(cls, cache_path, ids: Sequence[str], layers: Sequence[int] = (), with_cls: bool = False,
                   spec_hash: str | None = None) -> "FeatureStore":
        manifest = read_manifest(cache_path)
        if spec_hash is not None and manifest.spec_hash != spec_hash:
            raise StaleCacheError(f"cache built for backbone {manifest.spec_hash}, expected {spec_hash}")
        missing = [l for l in layers if l not in manifest.layers]
        if missing or (with_cls and not manifest.has_cls):
            raise StaleCacheError(f"cache lacks layers {missing or ['cls']}")
        store = cls(layers, with_cls)
        known = set(manifest.image_ids)
        H, W, C = manifest.grid
        for image_id in ids:
            if image_id not in known:
                raise StaleCacheError(f"image {image_id} missing from cache {cache_path}")
        root = Path(cache_path)
        for l in layers:
            arr = np.empty((len(ids), C, H, W), dtype=np.float32)
            for j, image_id in enumerate(ids):
                g = np.fromfile(_blob(root, image_id, l), dtype="<f4").reshape(H, W, C)
                arr[j] = g.transpose(2, 0, 1)
            store._tables[l] = torch.from_numpy(arr)
        if with_cls:
            store._tables["cls"] = torch.from_numpy(
                np.stack([np.fromfile(_blob(root, i, "cls"), dtype="<f4") for i in ids]).astype(np.float32))
        store.index = {image_id: j for j, image_id in enumerate(ids)}
        return store
