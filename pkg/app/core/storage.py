"""
Data directory layout and request-scoped access to it
"""

from pathlib import Path
from typing import List

from app.core.config import settings
from app.core.errors import StorageError

KINDS = ("datasets", "models", "runs", "evaluations")


class DataStore:
    """Named artifacts grouped by kind under one root directory"""

    def __init__(self, root):
        self.root = Path(root).resolve()

    def resolve(self, relative: str) -> Path:
        """Path under the root; anything escaping it is rejected"""
        if not relative or Path(relative).is_absolute():
            raise StorageError(f"'{relative}' is not a relative path")
        path = (self.root / relative).resolve()
        if path != self.root and self.root not in path.parents:
            raise StorageError(f"'{relative}' escapes the data directory")
        return path

    def artifact(self, kind: str, name: str) -> Path:
        if kind not in KINDS:
            raise StorageError(f"unknown collection '{kind}'")
        if not name or "/" in name or "\\" in name or name in (".", ".."):
            raise StorageError(f"invalid name '{name}'")
        return self.resolve(f"{kind}/{name}")

    def names(self, kind: str) -> List[str]:
        directory = self.root / kind
        if kind not in KINDS or not directory.is_dir():
            return []
        return sorted(p.name for p in directory.iterdir() if p.is_dir())


def get_store():
    """Dependency returning the store rooted at DATA_DIR"""
    store = DataStore(settings.DATA_DIR)
    store.root.mkdir(parents=True, exist_ok=True)
    yield store
