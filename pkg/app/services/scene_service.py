"""
Scene ingestion, annotation and procedural room generation
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import (
    AnnotationError, ObjParseError, PlacementError, TaxonomyError, UnknownClassError, UnmappedObjectError,
)
from app.core.logging import get_logger
from app.models.scene import ClassTaxonomy, Mesh, Scene, default_taxonomy, triangle_areas
from app.schemas.config import RoomSpec

logger = get_logger(__name__)

DEGENERATE_AREA = 1e-12

SCENE_OBJ = "scene.obj"
ANNOTATIONS_FILE = "annotations.tsv"
TAXONOMY_FILE = "taxonomy.tsv"

# Furniture dimensions (meters)
TABLE_TOP_HEIGHT = 0.75
TABLE_TOP_THICKNESS = 0.03
CHAIR_SEAT_HEIGHT = 0.45
CHAIR_SEAT_THICKNESS = 0.04
CHAIR_BACK_HEIGHT = 0.45
LEG_SIZE = 0.05
WALL_CLEARANCE = 0.1
FOOTPRINT_GAP = 0.05


# OBJ ingestion

def _resolve_index(token: str, vertex_count: int, line: int) -> int:
    head = token.split("/", 1)[0]
    try:
        index = int(head)
    except ValueError:
        raise ObjParseError(f"bad face index '{token}'", line)
    if index > 0:
        resolved = index - 1
    elif index < 0:
        resolved = vertex_count + index
    else:
        raise ObjParseError("face index 0 is invalid", line)
    if not 0 <= resolved < vertex_count:
        raise ObjParseError(f"face index {index} out of range ({vertex_count} vertices)", line)
    return resolved


def parse_obj(data: Union[bytes, str]) -> List[Mesh]:
    """Parse OBJ text into one mesh per object / group.

    Supported records: v, vn, f, o, g, usemtl. Polygons are fan-triangulated,
    negative indices are resolved against the vertices read so far, normals
    are ignored and zero-area triangles are dropped.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, bytes) else data
    vertices: List[Tuple[float, float, float]] = []
    groups: Dict[str, List[Tuple[int, int, int]]] = {}
    order: List[str] = []
    current = "default"

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        record, args = parts[0], parts[1:]
        if record == "v":
            if len(args) < 3:
                raise ObjParseError("vertex needs 3 coordinates", number)
            try:
                x, y, z = (float(a) for a in args[:3])
            except ValueError:
                raise ObjParseError(f"non-numeric vertex coordinate in '{line}'", number)
            if not all(np.isfinite((x, y, z))):
                raise ObjParseError(f"non-finite vertex coordinate in '{line}'", number)
            vertices.append((x, y, z))
        elif record in ("o", "g"):
            current = " ".join(args) if args else "default"
        elif record == "f":
            if len(args) < 3:
                raise ObjParseError(f"face with {len(args)} vertices", number)
            indices = [_resolve_index(a, len(vertices), number) for a in args]
            if current not in groups:
                groups[current] = []
                order.append(current)
            faces = groups[current]
            for i in range(1, len(indices) - 1):
                faces.append((indices[0], indices[i], indices[i + 1]))
        # vn, usemtl and everything else carry no geometry we use

    all_vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    meshes = []
    dropped = 0
    for name in order:
        faces = np.asarray(groups[name], dtype=np.int64)
        areas = triangle_areas(all_vertices[faces])
        keep = areas > DEGENERATE_AREA
        dropped += int((~keep).sum())
        faces = faces[keep]
        if len(faces) == 0:
            continue
        used, local = np.unique(faces, return_inverse=True)
        meshes.append(Mesh(all_vertices[used], local.reshape(-1, 3), name))
    if dropped:
        logger.warning("obj.degenerate_dropped", count=dropped)
    logger.debug("obj.parsed", meshes=len(meshes), vertices=len(vertices))
    return meshes


def serialize_obj(scene: Scene) -> str:
    """OBJ text with one `o` block per mesh; coordinates round-trip exactly"""
    lines = ["# semfusion scene"]
    offset = 0
    for mesh in scene.meshes:
        lines.append(f"o {mesh.object_name}")
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
        for a, b, c in mesh.triangles + offset + 1:
            lines.append(f"f {a} {b} {c}")
        offset += len(mesh.vertices)
    return "\n".join(lines) + "\n"


# Annotation and taxonomy

def read_taxonomy(text: str) -> ClassTaxonomy:
    """Parse `id<TAB>name` lines"""
    classes = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaxonomyError(f"taxonomy line {number}: expected id<TAB>name")
        try:
            classes.append((int(parts[0]), parts[1].strip()))
        except ValueError:
            raise TaxonomyError(f"taxonomy line {number}: non-integer id")
    classes.sort()
    return ClassTaxonomy(tuple(classes))


def write_taxonomy(taxonomy: ClassTaxonomy) -> str:
    return "".join(f"{cid}\t{name}\n" for cid, name in taxonomy.classes)


def read_annotations(text: str) -> Dict[str, str]:
    """Parse `object_name<TAB>class_name` lines"""
    mapping = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"annotation line {number}: expected object<TAB>class")
        mapping[parts[0].strip()] = parts[1].strip()
    return mapping


def write_annotations(scene: Scene) -> str:
    return "".join(
        f"{mesh.object_name}\t{scene.taxonomy.name_of(label)}\n"
        for mesh, label in zip(scene.meshes, scene.labels)
    )


def attach_labels(meshes: Sequence[Mesh], annotation_map: Dict[str, str], taxonomy: ClassTaxonomy,
                  condensation: Optional[Dict[str, str]] = None) -> Scene:
    """Label meshes by object name; optional fine->coarse condensation map"""
    names = taxonomy.condense(condensation or {})
    labels = []
    for mesh in meshes:
        if mesh.object_name not in annotation_map:
            raise UnmappedObjectError(f"object '{mesh.object_name}' has no annotation")
        class_name = annotation_map[mesh.object_name]
        if class_name not in names:
            raise UnknownClassError(f"class '{class_name}' not in taxonomy")
        labels.append(taxonomy.id_of(names[class_name]))
    return Scene(tuple(meshes), tuple(labels), taxonomy)


def write_scene(scene: Scene, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / SCENE_OBJ).write_text(serialize_obj(scene), encoding="utf-8")
    (directory / ANNOTATIONS_FILE).write_text(write_annotations(scene), encoding="utf-8")
    (directory / TAXONOMY_FILE).write_text(write_taxonomy(scene.taxonomy), encoding="utf-8")


def load_scene(obj_path: Union[str, Path], annotation_path: Union[str, Path],
               taxonomy_path: Optional[Union[str, Path]] = None,
               condensation_path: Optional[Union[str, Path]] = None) -> Scene:
    """Load an OBJ file with its annotation sidecar"""
    meshes = parse_obj(Path(obj_path).read_bytes())
    annotations = read_annotations(Path(annotation_path).read_text(encoding="utf-8"))
    taxonomy = (
        read_taxonomy(Path(taxonomy_path).read_text(encoding="utf-8"))
        if taxonomy_path else default_taxonomy()
    )
    condensation = (
        read_annotations(Path(condensation_path).read_text(encoding="utf-8"))
        if condensation_path else None
    )
    return attach_labels(meshes, annotations, taxonomy, condensation)


def load_scene_dir(directory: Union[str, Path]) -> Scene:
    directory = Path(directory)
    return load_scene(directory / SCENE_OBJ, directory / ANNOTATIONS_FILE, directory / TAXONOMY_FILE)


# Procedural rooms

def _quad(corners: np.ndarray, name: str) -> Mesh:
    return Mesh(corners, np.array([[0, 1, 2], [0, 2, 3]]), name)


_BOX_TRIANGLES = np.array([
    [0, 2, 1], [0, 3, 2],  # bottom
    [4, 5, 6], [4, 6, 7],  # top
    [0, 1, 5], [0, 5, 4],  # front
    [2, 3, 7], [2, 7, 6],  # back
    [1, 2, 6], [1, 6, 5],  # right
    [3, 0, 4], [3, 4, 7],  # left
])


def _box(lo: Sequence[float], hi: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1],
        [x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1],
    ], dtype=np.float64)
    return vertices, _BOX_TRIANGLES.copy()


def _merge_boxes(boxes: List[Tuple[np.ndarray, np.ndarray]], name: str) -> Mesh:
    vertices, triangles, offset = [], [], 0
    for v, t in boxes:
        vertices.append(v)
        triangles.append(t + offset)
        offset += len(v)
    return Mesh(np.concatenate(vertices), np.concatenate(triangles), name)


def _legs(x0: float, z0: float, x1: float, z1: float, top: float):
    s = LEG_SIZE
    return [
        _box((x0, 0.0, z0), (x0 + s, top, z0 + s)),
        _box((x1 - s, 0.0, z0), (x1, top, z0 + s)),
        _box((x1 - s, 0.0, z1 - s), (x1, top, z1)),
        _box((x0, 0.0, z1 - s), (x0 + s, top, z1)),
    ]


def _table(x0: float, z0: float, w: float, d: float, name: str) -> Mesh:
    x1, z1 = x0 + w, z0 + d
    top = TABLE_TOP_HEIGHT - TABLE_TOP_THICKNESS
    boxes = [_box((x0, top, z0), (x1, TABLE_TOP_HEIGHT, z1))] + _legs(x0, z0, x1, z1, top)
    return _merge_boxes(boxes, name)


def _chair(x0: float, z0: float, s: float, back_side: int, name: str) -> Mesh:
    x1, z1 = x0 + s, z0 + s
    seat_lo = CHAIR_SEAT_HEIGHT - CHAIR_SEAT_THICKNESS
    boxes = [_box((x0, seat_lo, z0), (x1, CHAIR_SEAT_HEIGHT, z1))] + _legs(x0, z0, x1, z1, seat_lo)
    t = CHAIR_SEAT_THICKNESS
    back_top = CHAIR_SEAT_HEIGHT + CHAIR_BACK_HEIGHT
    if back_side == 0:
        boxes.append(_box((x0, CHAIR_SEAT_HEIGHT, z0), (x1, back_top, z0 + t)))
    elif back_side == 1:
        boxes.append(_box((x1 - t, CHAIR_SEAT_HEIGHT, z0), (x1, back_top, z1)))
    elif back_side == 2:
        boxes.append(_box((x0, CHAIR_SEAT_HEIGHT, z1 - t), (x1, back_top, z1)))
    else:
        boxes.append(_box((x0, CHAIR_SEAT_HEIGHT, z0), (x0 + t, back_top, z1)))
    return _merge_boxes(boxes, name)


def _footprints_overlap(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> bool:
    ax0, az0, ax1, az1 = a
    bx0, bz0, bx1, bz1 = b
    return ax0 < bx1 + FOOTPRINT_GAP and bx0 < ax1 + FOOTPRINT_GAP and az0 < bz1 + FOOTPRINT_GAP and bz0 < az1 + FOOTPRINT_GAP


def _place(rng: np.random.Generator, spec: RoomSpec, w: float, d: float,
           taken: List[Tuple[float, float, float, float]], what: str) -> Tuple[float, float]:
    for _ in range(spec.max_retries):
        x_span = spec.width - 2 * WALL_CLEARANCE - w
        z_span = spec.depth - 2 * WALL_CLEARANCE - d
        if x_span <= 0 or z_span <= 0:
            break
        x0 = WALL_CLEARANCE + rng.uniform(0.0, x_span)
        z0 = WALL_CLEARANCE + rng.uniform(0.0, z_span)
        footprint = (x0, z0, x0 + w, z0 + d)
        if not any(_footprints_overlap(footprint, other) for other in taken):
            taken.append(footprint)
            return x0, z0
    raise PlacementError(
        f"could not place {what} in a {spec.width}x{spec.depth} m room after {spec.max_retries} tries"
    )


def generate_room(spec: RoomSpec, taxonomy: Optional[ClassTaxonomy] = None) -> Scene:
    """Room shell plus tables and chairs; a pure function of spec.

    Floor at y=0, ceiling at y=height, walls at x=0, x=width, z=0, z=depth.
    """
    taxonomy = taxonomy or default_taxonomy()
    W, D, H = spec.width, spec.depth, spec.height
    meshes = [
        _quad(np.array([[0, 0, 0], [W, 0, 0], [W, 0, D], [0, 0, D]], float), "floor"),
        _quad(np.array([[0, H, 0], [0, H, D], [W, H, D], [W, H, 0]], float), "ceiling"),
        _quad(np.array([[0, 0, 0], [0, H, 0], [W, H, 0], [W, 0, 0]], float), "wall_south"),
        _quad(np.array([[W, 0, 0], [W, H, 0], [W, H, D], [W, 0, D]], float), "wall_east"),
        _quad(np.array([[W, 0, D], [W, H, D], [0, H, D], [0, 0, D]], float), "wall_north"),
        _quad(np.array([[0, 0, D], [0, H, D], [0, H, 0], [0, 0, 0]], float), "wall_west"),
    ]
    names = ["floor", "ceiling", "wall", "wall", "wall", "wall"]

    rng = np.random.default_rng(spec.seed)
    taken: List[Tuple[float, float, float, float]] = []
    for i in range(spec.n_tables):
        w = rng.uniform(0.8, 1.4)
        d = rng.uniform(0.6, 0.9)
        x0, z0 = _place(rng, spec, w, d, taken, f"table {i}")
        meshes.append(_table(x0, z0, w, d, f"table_{i:02d}"))
        names.append("table")
    for i in range(spec.n_chairs):
        s = rng.uniform(0.42, 0.5)
        back_side = int(rng.integers(0, 4))
        x0, z0 = _place(rng, spec, s, s, taken, f"chair {i}")
        meshes.append(_chair(x0, z0, s, back_side, f"chair_{i:02d}"))
        names.append("chair")

    scene = Scene(tuple(meshes), tuple(taxonomy.id_of(n) for n in names), taxonomy)
    logger.info("scene.generated", meshes=len(meshes), triangles=scene.num_triangles, seed=spec.seed)
    return scene
