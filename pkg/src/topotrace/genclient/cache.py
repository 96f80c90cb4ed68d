"""Content-addressed on-disk cache for generated responses."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from topotrace.genclient.templates import TEMPLATE_VERSION
from topotrace.trace import TopologyKind


@dataclass(frozen=True)
class CacheKey:
    question_id: str
    topology: TopologyKind
    sample_index: int
    model_name: str
    temperature: float
    template_version: str = TEMPLATE_VERSION

    @property
    def digest(self) -> str:
        payload = json.dumps(
            [
                self.question_id,
                self.topology.value,
                self.sample_index,
                self.model_name,
                repr(float(self.temperature)),
                self.template_version,
            ],
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def request_seed(self) -> int:
        """Per-sample seed forwarded to the endpoint, derived from the digest."""
        return int(self.digest[:8], 16)


class ResponseCache:
    """``{root}/{digest[:2]}/{digest}.txt``; entries are written once and never rewritten."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, key: CacheKey) -> Path:
        d = key.digest
        return self.root / d[:2] / f"{d}.txt"

    def get(self, key: CacheKey) -> str | None:
        p = self.path(key)
        try:
            return p.read_bytes().decode("utf-8")
        except FileNotFoundError:
            return None

    def __contains__(self, key: CacheKey) -> bool:
        return self.path(key).exists()

    def put(self, key: CacheKey, text: str) -> None:
        p = self.path(key)
        if p.exists():
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-", suffix=".txt")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(text.encode("utf-8"))
            os.replace(tmp, p)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
