"""
Scene, mesh and class taxonomy models
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.core.errors import TaxonomyError

VOID_ID = 255
MAX_CLASSES = 15


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class list with dense ids 0..K-1"""

    classes: Tuple[Tuple[int, str], ...]
    void_id: int = VOID_ID

    def __post_init__(self):
        if not self.classes:
            raise TaxonomyError("taxonomy has no classes")
        if len(self.classes) > MAX_CLASSES:
            raise TaxonomyError(f"at most {MAX_CLASSES} classes, got {len(self.classes)}")
        ids = [cid for cid, _ in self.classes]
        names = [name for _, name in self.classes]
        if ids != list(range(len(ids))):
            raise TaxonomyError(f"class ids must be dense 0..K-1, got {ids}")
        if len(set(names)) != len(names):
            raise TaxonomyError("class names must be unique")
        if self.void_id in ids:
            raise TaxonomyError(f"{self.void_id} is reserved for void")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassTaxonomy":
        return cls(tuple((i, name) for i, name in enumerate(names)))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> List[str]:
        return [name for _, name in self.classes]

    def id_of(self, name: str) -> int:
        """Class id for a name (raises KeyError when absent)"""
        for cid, cname in self.classes:
            if cname == name:
                return cid
        raise KeyError(name)

    def name_of(self, class_id: int) -> str:
        if class_id == self.void_id:
            return "void"
        return self.classes[class_id][1]

    def condense(self, mapping: Dict[str, str]) -> Dict[str, str]:
        """Validate a fine->coarse name map against this taxonomy.

        Returns the map restricted to coarse names known here; fine names
        that already are taxonomy names map to themselves.
        """
        condensed = {name: name for name in self.names}
        for fine, coarse in mapping.items():
            if coarse not in self.names:
                raise TaxonomyError(f"condensation target '{coarse}' not in taxonomy")
            condensed[fine] = coarse
        return condensed


def default_taxonomy() -> ClassTaxonomy:
    """The five desk-scale classes"""
    return ClassTaxonomy.from_names(["chair", "table", "floor", "ceiling", "wall"])


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in metric world coordinates"""

    vertices: np.ndarray  # (V, 3) float64, meters
    triangles: np.ndarray  # (T, 3) int64
    object_name: str

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError(f"mesh '{self.object_name}': triangle index out of range")
        object.__setattr__(self, "vertices", _freeze(vertices))
        object.__setattr__(self, "triangles", _freeze(triangles))

    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices[self.triangles])

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def triangle_areas(soup: np.ndarray) -> np.ndarray:
    """Areas of a (T, 3, 3) triangle soup"""
    edges_a = soup[:, 1] - soup[:, 0]
    edges_b = soup[:, 2] - soup[:, 0]
    return 0.5 * np.linalg.norm(np.cross(edges_a, edges_b), axis=1)


@dataclass(frozen=True, eq=False)
class Scene:
    """Labelled meshes; immutable and shareable across workers"""

    meshes: Tuple[Mesh, ...]
    labels: Tuple[int, ...]
    taxonomy: ClassTaxonomy
    bounds: Tuple[np.ndarray, np.ndarray] = field(default=None)

    def __post_init__(self):
        meshes = tuple(self.meshes)
        labels = tuple(int(label) for label in self.labels)
        if len(meshes) != len(labels):
            raise ValueError("one label per mesh required")
        for label in labels:
            if not 0 <= label < self.taxonomy.num_classes:
                raise ValueError(f"label {label} outside taxonomy")
        object.__setattr__(self, "meshes", meshes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "bounds", self._tight_bounds(meshes))

    @staticmethod
    def _tight_bounds(meshes: Sequence[Mesh]) -> Tuple[np.ndarray, np.ndarray]:
        populated = [m.vertices for m in meshes if len(m.vertices)]
        if not populated:
            zero = np.zeros(3)
            return _freeze(zero.copy()), _freeze(zero.copy())
        stacked = np.concatenate(populated)
        return _freeze(stacked.min(axis=0)), _freeze(stacked.max(axis=0))

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.bounds[0] + self.bounds[1])

    @property
    def num_triangles(self) -> int:
        return sum(len(m.triangles) for m in self.meshes)

    def triangle_soup(self) -> "TriangleSoup":
        """Concatenated triangles with mesh / local index / class per triangle"""
        cached = self.__dict__.get("_soup")
        if cached is None:
            cached = TriangleSoup.from_scene(self)
            object.__setattr__(self, "_soup", cached)
        return cached

    def mesh_aabbs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [m.bounds() for m in self.meshes]


@dataclass(frozen=True, eq=False)
class TriangleSoup:
    """Flat triangle arrays used by the renderer"""

    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    mesh_index: np.ndarray
    local_index: np.ndarray
    class_id: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene) -> "TriangleSoup":
        soups, mesh_index, local_index, class_id = [], [], [], []
        for i, (mesh, label) in enumerate(zip(scene.meshes, scene.labels)):
            n = len(mesh.triangles)
            if n == 0:
                continue
            soups.append(mesh.vertices[mesh.triangles])
            mesh_index.append(np.full(n, i, dtype=np.int64))
            local_index.append(np.arange(n, dtype=np.int64))
            class_id.append(np.full(n, label, dtype=np.uint8))
        if soups:
            soup = np.concatenate(soups)
        else:
            soup = np.zeros((0, 3, 3))
        cat = (lambda parts, dtype: np.concatenate(parts) if parts else np.zeros(0, dtype=dtype))
        return cls(
            v0=_freeze(np.ascontiguousarray(soup[:, 0])),
            v1=_freeze(np.ascontiguousarray(soup[:, 1])),
            v2=_freeze(np.ascontiguousarray(soup[:, 2])),
            mesh_index=_freeze(cat(mesh_index, np.int64)),
            local_index=_freeze(cat(local_index, np.int64)),
            class_id=_freeze(cat(class_id, np.uint8)),
        )

    def __len__(self) -> int:
        return len(self.v0)
