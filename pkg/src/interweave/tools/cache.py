"""Content-addressed asset cache keyed by params digest.

Layout: one ``<digest>.<ext>`` file per asset plus an ``index.json`` mapping
digest to media type and provenance details. Writes are last-writer-wins;
identical keys carry identical content, so ordering is irrelevant.
"""
from __future__ import annotations

import json
import threading
from pathlib import Path

from ..tags import SourceKind
from .base import ImageAsset, ToolProvenance

INDEX_NAME = "index.json"


class AssetCache:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index = self._load_index()

    def get(self, digest: str) -> ImageAsset | None:
        with self._lock:
            entry = self._index.get(digest)
        if entry is None:
            return None
        path = self.root / f"{digest}.{entry['extension']}"
        try:
            content = path.read_bytes()
        except OSError:
            return None
        provenance = ToolProvenance(
            source=SourceKind(entry["source"]),
            params_digest=digest,
            backend=entry["backend"],
            latency=0.0,
            attempts=int(entry["attempts"]),
        )
        return ImageAsset(content, entry["media_type"], provenance)

    def put(self, digest: str, asset: ImageAsset) -> None:
        path = self.root / f"{digest}.{asset.extension}"
        path.write_bytes(asset.content)
        with self._lock:
            self._index[digest] = {
                "media_type": asset.media_type,
                "extension": asset.extension,
                "source": asset.provenance.source.value,
                "backend": asset.provenance.backend,
                "attempts": asset.provenance.attempts,
            }
            (self.root / INDEX_NAME).write_text(json.dumps(self._index, indent=2, sort_keys=True))

    def _load_index(self) -> dict:
        path = self.root / INDEX_NAME
        if not path.exists():
            return {}
        try:
            data = json.loads(path.read_text())
        except ValueError:
            return {}
        return data if isinstance(data, dict) else {}
