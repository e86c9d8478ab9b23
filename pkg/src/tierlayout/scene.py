"""Object, layout and scene-graph data model.

Slot layout of one object row (``D = C + 8``)::

    [0, C)        class one-hot (index ``taxonomy.empty_index`` marks padding)
    [C, C+3)      translation (x, y, z), y is up
    [C+3, C+6)    half-size
    [C+6, C+8)    (cos theta, sin theta), rotation about +y
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

PRIMARY = "primary"
SECONDARY = "secondary"

DEFAULT_PRIMARY = (
    "bed", "wardrobe", "nightstand", "desk", "chair", "sofa",
    "coffee_table", "tv_stand", "bookshelf", "dining_table", "armchair", "cabinet",
)
DEFAULT_SECONDARY = (
    "lamp", "book", "pillow", "plant", "vase", "laptop", "monitor", "cup", "clock", "box",
)

RELATION_NAMES = (
    "left_of", "right_of", "in_front_of", "behind", "close_to", "on_top_of", "facing",
)
NUM_RELATIONS = len(RELATION_NAMES)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Ordered class list split into a primary and a secondary vocabulary.

    Class indices follow ``classes``; the empty token sits right after the
    last real class.
    """

    classes: tuple[str, ...]
    primary_vocab: frozenset[str]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise TaxonomyError("duplicate class names")
        unknown = set(self.primary_vocab) - set(self.classes)
        if unknown:
            raise TaxonomyError(f"primary classes not in taxonomy: {sorted(unknown)}")

    @classmethod
    def default(cls) -> "CategoryTaxonomy":
        return cls(DEFAULT_PRIMARY + DEFAULT_SECONDARY, frozenset(DEFAULT_PRIMARY))

    @classmethod
    def from_config(cls, cfg: dict) -> "CategoryTaxonomy":
        primary = tuple(cfg["primary"])
        return cls(primary + tuple(cfg["secondary"]), frozenset(primary))

    @property
    def secondary_vocab(self) -> frozenset[str]:
        return frozenset(self.classes) - self.primary_vocab

    @property
    def empty_index(self) -> int:
        return len(self.classes)

    @property
    def num_classes(self) -> int:
        """Width of the class block, including the empty token."""
        return len(self.classes) + 1

    @property
    def dim(self) -> int:
        return self.num_classes + 8

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise TaxonomyError(f"unknown class {name!r}") from None

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.classes):
            raise TaxonomyError(f"unknown class index {index}")
        return self.classes[index]

    def is_primary(self, index: int) -> bool:
        return self.name(index) in self.primary_vocab

    def tier(self, index: int) -> str:
        return PRIMARY if self.is_primary(index) else SECONDARY

    def digest(self) -> str:
        payload = json.dumps(
            {"classes": list(self.classes), "primary": sorted(self.primary_vocab)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- angles -----------------------------------------------------------------

def encode_angle(theta: float) -> tuple[float, float]:
    return math.cos(theta), math.sin(theta)


def decode_angle(cos_sin: Sequence[float], return_flag: bool = False):
    """Inverse of :func:`encode_angle`, result in (-pi, pi].

    Vectors shorter than 1e-3 are still decoded (after normalization) but
    flagged as degenerate when ``return_flag`` is set.
    """
    c, s = float(cos_sin[0]), float(cos_sin[1])
    norm = math.hypot(c, s)
    degenerate = norm < 1e-3
    theta = math.atan2(s, c) if norm > 0 else 0.0
    if return_flag:
        return theta, degenerate
    return theta


# -- objects and layouts ----------------------------------------------------

@dataclass(frozen=True)
class ObjectRecord:
    label: int
    translation: tuple[float, float, float]
    half_size: tuple[float, float, float]
    theta: float = 0.0

    @property
    def orientation(self) -> tuple[float, float]:
        return encode_angle(self.theta)

    def to_row(self, taxonomy: CategoryTaxonomy) -> np.ndarray:
        row = np.zeros(taxonomy.dim)
        row[self.label] = 1.0
        C = taxonomy.num_classes
        row[C:C + 3] = self.translation
        row[C + 3:C + 6] = self.half_size
        row[C + 6:C + 8] = self.orientation
        return row

    def aabb_extent(self) -> np.ndarray:
        """Half extents of the world-axis-aligned box enclosing this object."""
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        sx, sy, sz = self.half_size
        return np.array([c * sx + s * sz, sy, s * sx + c * sz])

    def bottom(self) -> float:
        return self.translation[1] - self.half_size[1]

    def top(self) -> float:
        return self.translation[1] + self.half_size[1]

    def footprint(self) -> np.ndarray:
        """Corners of the oriented footprint in the (x, z) plane, CCW."""
        return box_footprint(self.translation, self.half_size, self.theta)


def box_footprint(t, s, theta) -> np.ndarray:
    c, sn = math.cos(theta), math.sin(theta)
    local = np.array([[-s[0], -s[2]], [s[0], -s[2]], [s[0], s[2]], [-s[0], s[2]]])
    # rotation about +y maps local (x, z) -> (x c + z s, -x s + z c)
    rot = np.array([[c, sn], [-sn, c]])
    return local @ rot.T + np.array([t[0], t[2]])


def split_scene(objects: Iterable[ObjectRecord], taxonomy: CategoryTaxonomy):
    primary, secondary = [], []
    for obj in objects:
        if not 0 <= obj.label < len(taxonomy.classes):
            raise TaxonomyError(f"object class index {obj.label} not in taxonomy")
        (primary if taxonomy.is_primary(obj.label) else secondary).append(obj)
    return primary, secondary


@dataclass
class LayoutTensor:
    slots: np.ndarray
    tier: str
    occupancy: int

    @property
    def capacity(self) -> int:
        return self.slots.shape[0]


class CapacityError(ValueError):
    pass


def encode_layout(objects: Sequence[ObjectRecord], tier: str, caps: tuple[int, int],
                  taxonomy: CategoryTaxonomy) -> LayoutTensor:
    cap = caps[0] if tier == PRIMARY else caps[1]
    if len(objects) > cap:
        raise CapacityError(f"{len(objects)} {tier} objects exceed capacity {cap}")
    slots = np.zeros((cap, taxonomy.dim))
    slots[:, taxonomy.empty_index] = 1.0
    for i, obj in enumerate(objects):
        slots[i] = obj.to_row(taxonomy)
    return LayoutTensor(slots, tier, len(objects))


def decode_rows(rows: np.ndarray, taxonomy: CategoryTaxonomy, tier: str | None = None) -> list[ObjectRecord]:
    """Turn (possibly continuous) slot rows back into objects.

    A slot holds an object iff the argmax of its class block is not the empty
    token; the empty token wins ties. With ``tier`` set, classes of the other
    tier are excluded from the argmax.
    """
    C = taxonomy.num_classes
    allowed = np.ones(C, dtype=bool)
    if tier is not None:
        allowed[:len(taxonomy.classes)] = [taxonomy.tier(i) == tier for i in range(len(taxonomy.classes))]
    out = []
    for row in np.asarray(rows, dtype=float):
        cls_block = np.where(allowed, row[:C], -np.inf)
        best = cls_block.max()
        if cls_block[taxonomy.empty_index] >= best:
            continue
        label = int(np.argmax(cls_block))
        theta = decode_angle(row[C + 6:C + 8])
        out.append(ObjectRecord(
            label,
            tuple(float(v) for v in row[C:C + 3]),
            tuple(float(v) for v in row[C + 3:C + 6]),
            theta,
        ))
    return out


def decode_layout(layout: LayoutTensor, taxonomy: CategoryTaxonomy) -> list[ObjectRecord]:
    return decode_rows(layout.slots, taxonomy, layout.tier)


# -- scene graph ------------------------------------------------------------

@dataclass
class SceneGraph:
    """Directed typed graph over the primary objects, index-aligned with slots."""

    vertices: list[tuple[int, int]]
    edges: list[tuple[int, int, int]]

    def __post_init__(self):
        n = len(self.vertices)
        if len(set(self.vertices)) != n:
            raise ValueError("(category, instance) pairs must be unique")
        for i, j, r in self.edges:
            if i == j:
                raise ValueError(f"self-edge on vertex {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) references a missing vertex")
            if not 0 <= r < NUM_RELATIONS:
                raise ValueError(f"relation type {r} out of range")

    @staticmethod
    def vertices_for(objects: Sequence[ObjectRecord]) -> list[tuple[int, int]]:
        seen: dict[int, int] = {}
        verts = []
        for obj in objects:
            k = seen.get(obj.label, 0)
            seen[obj.label] = k + 1
            verts.append((obj.label, k))
        return verts


# -- room mask run-length codec ---------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating 0/1 and starting with a 0-run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs, current, count = [], False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return runs


def rle_decode(runs: Sequence[int], h: int, w: int) -> np.ndarray:
    if sum(runs) != h * w:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {h * w}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(h, w)


# -- scenes -----------------------------------------------------------------

@dataclass
class Scene:
    """One room. Objects stay in world meters unless ``normalized`` is set."""

    primary: list[ObjectRecord]
    secondary: list[ObjectRecord]
    graph: SceneGraph
    room_mask: np.ndarray
    text: str = ""
    source: str = ""
    frame_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frame_scale: float = 1.0
    normalized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def objects(self) -> list[ObjectRecord]:
        return self.primary + self.secondary

    def layouts(self, caps: tuple[int, int], taxonomy: CategoryTaxonomy):
        return (encode_layout(self.primary, PRIMARY, caps, taxonomy),
                encode_layout(self.secondary, SECONDARY, caps, taxonomy))


def _map_objects(objects, center, scale, forward: bool):
    c = np.asarray(center, dtype=float)
    out = []
    for o in objects:
        t = np.asarray(o.translation, dtype=float)
        s = np.asarray(o.half_size, dtype=float)
        if forward:
            t, s = (t - c) / scale, s / scale
        else:
            t, s = t * scale + c, s * scale
        out.append(ObjectRecord(o.label, tuple(t.tolist()), tuple(s.tolist()), o.theta))
    return out


def normalize_scene(scene: Scene, center=None, scale=None) -> Scene:
    """Map geometry into the scene's reference frame (or an explicit one)."""
    center = scene.frame_center if center is None else tuple(center)
    scale = scene.frame_scale if scale is None else scale
    if scale <= 0:
        raise ValueError(f"frame scale must be positive, got {scale}")
    if scene.normalized:
        raise ValueError("scene is already normalized")
    return replace(
        scene,
        primary=_map_objects(scene.primary, center, scale, True),
        secondary=_map_objects(scene.secondary, center, scale, True),
        frame_center=tuple(center), frame_scale=scale, normalized=True,
    )


def denormalize_scene(scene: Scene) -> Scene:
    if not scene.normalized:
        raise ValueError("scene is not normalized")
    if scene.frame_scale <= 0:
        raise ValueError(f"frame scale must be positive, got {scene.frame_scale}")
    return replace(
        scene,
        primary=_map_objects(scene.primary, scene.frame_center, scene.frame_scale, False),
        secondary=_map_objects(scene.secondary, scene.frame_center, scene.frame_scale, False),
        normalized=False,
    )


# -- corpus record schema ---------------------------------------------------

def scene_to_record(scene: Scene, taxonomy: CategoryTaxonomy) -> dict:
    if scene.normalized:
        scene = denormalize_scene(scene)
    objects = []
    for tier, group in ((PRIMARY, scene.primary), (SECONDARY, scene.secondary)):
        for o in group:
            objects.append({
                "class": taxonomy.name(o.label),
                "tier": tier,
                "t": list(o.translation),
                "s": list(o.half_size),
                "theta": o.theta,
            })
    h, w = scene.room_mask.shape
    return {
        "objects": objects,
        "graph": {"edges": [list(e) for e in scene.graph.edges]},
        "room_mask": {"h": h, "w": w, "rle": rle_encode(scene.room_mask)},
        "text": scene.text,
        "source": scene.source,
        "frame": {"center": list(scene.frame_center), "scale": scene.frame_scale},
    }


def scene_from_record(record: dict, taxonomy: CategoryTaxonomy) -> Scene:
    primary, secondary = [], []
    for o in record["objects"]:
        label = taxonomy.index(o["class"])
        obj = ObjectRecord(label, tuple(o["t"]), tuple(o["s"]), o["theta"])
        expected = taxonomy.tier(label)
        if o.get("tier", expected) != expected:
            raise ValueError(f"class {o['class']!r} recorded as {o['tier']}, taxonomy says {expected}")
        (primary if expected == PRIMARY else secondary).append(obj)
    rm = record["room_mask"]
    graph = SceneGraph(SceneGraph.vertices_for(primary),
                       [tuple(e) for e in record["graph"]["edges"]])
    frame = record["frame"]
    return Scene(
        primary, secondary, graph,
        rle_decode(rm["rle"], rm["h"], rm["w"]),
        text=record["text"], source=record["source"],
        frame_center=tuple(frame["center"]), frame_scale=frame["scale"],
    )


def dumps_scene(scene: Scene, taxonomy: CategoryTaxonomy) -> str:
    return json.dumps(scene_to_record(scene, taxonomy), separators=(",", ":"))
