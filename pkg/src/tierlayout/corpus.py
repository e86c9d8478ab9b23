"""Procedural relation-consistent room corpus and JSONL ingestion."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .scene import (
    NUM_RELATIONS, RELATION_NAMES, CategoryTaxonomy, ObjectRecord, Scene, SceneGraph,
    dumps_scene, scene_from_record,
)

log = logging.getLogger(__name__)

ROOM_TYPES = ("bedroom", "living", "office")
PAPER_LIMITS = (20, 100)  # keep iff n_primary < 20 and n_secondary < 100
MASK_RES = 64


# -- relation predicates ----------------------------------------------------

@dataclass(frozen=True)
class RelationThresholds:
    max_directional: float = 3.0
    close_gap: float = 0.5
    contact_tol: float = 1e-2
    facing_range: float = 4.0


def _aabb(o: ObjectRecord):
    t = np.asarray(o.translation)
    e = o.aabb_extent()
    return t - e, t + e


def _axis_relation(a, b, axis, sign, th):
    # a is `sign`-side of b along axis: separated by more than the summed extents
    ta, tb = np.asarray(a.translation), np.asarray(b.translation)
    if np.linalg.norm(ta - tb) > th.max_directional:
        return False
    gap = sign * (tb[axis] - ta[axis])
    return gap > a.aabb_extent()[axis] + b.aabb_extent()[axis]


def left_of(a, b, th):
    return _axis_relation(a, b, 0, 1.0, th)


def right_of(a, b, th):
    return _axis_relation(a, b, 0, -1.0, th)


def in_front_of(a, b, th):
    # front is +z in the room frame
    return _axis_relation(a, b, 2, -1.0, th)


def behind(a, b, th):
    return _axis_relation(a, b, 2, 1.0, th)


def surface_gap(a: ObjectRecord, b: ObjectRecord) -> float:
    lo_a, hi_a = _aabb(a)
    lo_b, hi_b = _aabb(b)
    d = np.maximum(0.0, np.maximum(lo_a - hi_b, lo_b - hi_a))
    return float(np.linalg.norm(d))


def close_to(a, b, th):
    return surface_gap(a, b) < th.close_gap


def on_top_of(a, b, th):
    if abs(a.bottom() - b.top()) > th.contact_tol:
        return False
    lo_a, hi_a = _aabb(a)
    lo_b, hi_b = _aabb(b)
    tol = th.contact_tol
    return bool(np.all(lo_a[[0, 2]] >= lo_b[[0, 2]] - tol) and np.all(hi_a[[0, 2]] <= hi_b[[0, 2]] + tol))


def ray_box_distance(origin, direction, lo, hi):
    """Entry distance of a 2D ray into an axis-aligned box, or inf."""
    t_near, t_far = -math.inf, math.inf
    for k in range(2):
        if abs(direction[k]) < 1e-12:
            if origin[k] < lo[k] or origin[k] > hi[k]:
                return math.inf
            continue
        t1 = (lo[k] - origin[k]) / direction[k]
        t2 = (hi[k] - origin[k]) / direction[k]
        t_near = max(t_near, min(t1, t2))
        t_far = min(t_far, max(t1, t2))
    if t_far < max(t_near, 0.0):
        return math.inf
    return max(t_near, 0.0)


def facing(a, b, th):
    origin = (a.translation[0], a.translation[2])
    direction = (math.sin(a.theta), math.cos(a.theta))
    lo, hi = _aabb(b)
    return ray_box_distance(origin, direction, lo[[0, 2]], hi[[0, 2]]) <= th.facing_range


PREDICATES: tuple[Callable, ...] = (left_of, right_of, in_front_of, behind, close_to, on_top_of, facing)
assert len(PREDICATES) == NUM_RELATIONS


def relation_holds(rel: int, a: ObjectRecord, b: ObjectRecord, th: RelationThresholds | None = None) -> bool:
    return bool(PREDICATES[rel](a, b, th or RelationThresholds()))


def extract_graph(primary: Sequence[ObjectRecord], th: RelationThresholds | None = None) -> SceneGraph:
    """Apply every predicate to every ordered pair of primary objects."""
    th = th or RelationThresholds()
    edges = []
    for i, a in enumerate(primary):
        for j, b in enumerate(primary):
            if i == j:
                continue
            for r, pred in enumerate(PREDICATES):
                if pred(a, b, th):
                    edges.append((i, j, r))
    return SceneGraph(SceneGraph.vertices_for(primary), edges)


# -- room specs and the placement model -------------------------------------

@dataclass(frozen=True)
class RoomSpec:
    width: float
    depth: float
    room_type: str
    target_primary_count: int
    target_secondary_count: int
    notch: tuple[float, float] | None = None  # (w, d) cut from the +x,+z corner: L-shape

    def __post_init__(self):
        if self.room_type not in ROOM_TYPES:
            raise ValueError(f"unknown room type {self.room_type!r}")
        if not (self.width > 0 and self.depth > 0):
            raise ValueError("room dimensions must be positive")
        if not (0 <= self.target_primary_count < 20 and 0 <= self.target_secondary_count < 100):
            raise ValueError("target counts outside caps")
        if self.notch is not None:
            nw, nd = self.notch
            if not (0 < nw < self.width and 0 < nd < self.depth):
                raise ValueError("notch must be strictly inside the room")

    def polygon(self) -> np.ndarray:
        """Footprint vertices in (x, z), room spans [0, width] x [0, depth]."""
        w, d = self.width, self.depth
        if self.notch is None:
            return np.array([[0, 0], [w, 0], [w, d], [0, d]], dtype=float)
        nw, nd = self.notch
        return np.array([[0, 0], [w, 0], [w, d - nd], [w - nw, d - nd], [w - nw, d], [0, d]], dtype=float)

    def contains_rect(self, lo, hi) -> bool:
        if lo[0] < 0 or lo[1] < 0 or hi[0] > self.width or hi[1] > self.depth:
            return False
        if self.notch is None:
            return True
        nw, nd = self.notch
        # rectangle must miss the open corner [w-nw, w] x [d-nd, d]
        return not (hi[0] > self.width - nw and hi[1] > self.depth - nd)

    def contains_point(self, x, z) -> bool:
        if not (0 <= x <= self.width and 0 <= z <= self.depth):
            return False
        if self.notch is None:
            return True
        nw, nd = self.notch
        return not (x > self.width - nw and z > self.depth - nd)


@dataclass(frozen=True)
class Prototype:
    size: tuple[float, float, float]  # half-size (x, y, z) in meters
    jitter: float = 0.1
    top_slots: tuple[str, ...] = ()  # secondary classes that may rest on top
    floor_slots: tuple[str, ...] = ()  # secondary classes placed beside it
    wall: bool = False  # pushed against a wall, facing inward


PRIMARY_PROTOTYPES = {
    "bed": Prototype((0.8, 0.25, 1.0), 0.12, ("pillow", "book"), ("plant", "box"), wall=True),
    "wardrobe": Prototype((0.6, 1.0, 0.3), 0.1, ("box",), (), wall=True),
    "nightstand": Prototype((0.25, 0.28, 0.22), 0.08, ("lamp", "clock", "book", "cup"), ()),
    "desk": Prototype((0.65, 0.38, 0.35), 0.1, ("laptop", "monitor", "lamp", "book", "cup"), ("box",), wall=True),
    "chair": Prototype((0.25, 0.45, 0.25), 0.05, (), ()),
    "sofa": Prototype((1.0, 0.4, 0.45), 0.12, ("pillow",), ("plant", "lamp"), wall=True),
    "coffee_table": Prototype((0.55, 0.22, 0.35), 0.1, ("vase", "book", "cup", "plant"), ()),
    "tv_stand": Prototype((0.8, 0.25, 0.25), 0.1, ("monitor", "vase", "clock", "box"), (), wall=True),
    "bookshelf": Prototype((0.5, 0.9, 0.18), 0.1, ("vase", "plant", "box", "clock"), ("plant",), wall=True),
    "dining_table": Prototype((0.8, 0.38, 0.5), 0.1, ("cup", "vase", "book", "laptop"), ()),
    "armchair": Prototype((0.4, 0.4, 0.4), 0.08, ("pillow",), ("lamp",)),
    "cabinet": Prototype((0.45, 0.45, 0.25), 0.1, ("lamp", "vase", "box", "clock"), (), wall=True),
}

SECONDARY_PROTOTYPES = {
    "lamp": (0.12, 0.22, 0.12),
    "book": (0.11, 0.02, 0.15),
    "pillow": (0.25, 0.08, 0.17),
    "plant": (0.15, 0.3, 0.15),
    "vase": (0.07, 0.14, 0.07),
    "laptop": (0.17, 0.012, 0.12),
    "monitor": (0.26, 0.2, 0.08),
    "cup": (0.04, 0.05, 0.04),
    "clock": (0.09, 0.09, 0.04),
    "box": (0.18, 0.14, 0.15),
}

# anchor class -> [(companion class, placement mode, count range)]
COMPANIONS = {
    "bed": [("nightstand", "side", (0, 2))],
    "desk": [("chair", "front", (1, 1))],
    "sofa": [("coffee_table", "front", (0, 1))],
    "dining_table": [("chair", "front", (1, 2)), ("chair", "back", (0, 2))],
}
PLANTED_RELATIONS = ("left_of", "right_of", "in_front_of", "behind", "facing")

ROOM_WEIGHTS = {
    "bedroom": {"bed": 5, "wardrobe": 3, "desk": 1.5, "bookshelf": 1, "cabinet": 1.5, "armchair": 1, "tv_stand": 0.5},
    "living": {"sofa": 5, "tv_stand": 3, "bookshelf": 2, "armchair": 2, "cabinet": 1.5, "dining_table": 1.5},
    "office": {"desk": 5, "bookshelf": 3, "cabinet": 2, "armchair": 1, "sofa": 0.5, "dining_table": 0.5},
}

# co-occurrence weight of each secondary class, keyed by room type
SECONDARY_WEIGHTS = {
    "bedroom": {"pillow": 3, "lamp": 2, "book": 2, "clock": 1.5, "cup": 1, "plant": 1, "box": 1, "vase": 0.5, "laptop": 0.5, "monitor": 0.3},
    "living": {"vase": 2, "plant": 2.5, "book": 1.5, "cup": 2, "pillow": 2, "lamp": 1.5, "clock": 1, "box": 0.7, "monitor": 1, "laptop": 0.5},
    "office": {"monitor": 3, "laptop": 2.5, "book": 3, "cup": 2, "lamp": 1.5, "box": 1.5, "plant": 1, "clock": 1, "vase": 0.5, "pillow": 0.2},
}

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
                "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
                "seventeen", "eighteen", "nineteen")
TEMPLATE_WORDS = ("a", "room", "with", "and", "small", "objects", "no", "furniture", "empty")


def prompt_vocabulary(taxonomy: CategoryTaxonomy) -> list[str]:
    words = list(TEMPLATE_WORDS) + list(ROOM_TYPES) + list(NUMBER_WORDS)
    words += [str(i) for i in range(100)]
    words += [c for c in taxonomy.classes if c in taxonomy.primary_vocab]
    seen, out = set(), []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def describe(room_type: str, primary: Sequence[ObjectRecord], n_secondary: int,
             taxonomy: CategoryTaxonomy) -> str:
    counts: dict[str, int] = {}
    for o in primary:
        name = taxonomy.name(o.label)
        counts[name] = counts.get(name, 0) + 1
    if counts:
        parts = [f"{NUMBER_WORDS[min(n, 19)]} {name}" for name, n in sorted(counts.items())]
        body = " ".join(parts)
    else:
        body = "no furniture"
    return f"a {room_type} room with {body} and {n_secondary} small objects"


def room_frame(spec: RoomSpec) -> tuple[tuple[float, float, float], float]:
    """Bounding-square center and half-diagonal of the footprint; floor stays at y=0."""
    side = max(spec.width, spec.depth)
    return (spec.width / 2, 0.0, spec.depth / 2), side * math.sqrt(2) / 2


def room_mask(spec: RoomSpec, res: int = MASK_RES) -> np.ndarray:
    """Footprint raster over the normalized [-1, 1]^2 square (rows follow z, columns x)."""
    center, scale = room_frame(spec)
    coords = -1 + (np.arange(res) + 0.5) * 2 / res
    xs = coords * scale + center[0]
    zs = coords * scale + center[2]
    mask = np.zeros((res, res), dtype=bool)
    for r, z in enumerate(zs):
        for c, x in enumerate(xs):
            mask[r, c] = spec.contains_point(x, z)
    return mask


def _r(v: float) -> float:
    return round(float(v), 4)


class _Placer:
    CLEARANCE = 0.02

    def __init__(self, spec: RoomSpec, rng: np.random.Generator, taxonomy: CategoryTaxonomy):
        self.spec, self.rng, self.tax = spec, rng, taxonomy
        self.rects: list[tuple[np.ndarray, np.ndarray]] = []  # floor occupancy in (x, z)

    def free(self, lo, hi) -> bool:
        if not self.spec.contains_rect(lo, hi):
            return False
        c = self.CLEARANCE
        for lo2, hi2 in self.rects:
            if lo[0] < hi2[0] + c and lo2[0] < hi[0] + c and lo[1] < hi2[1] + c and lo2[1] < hi[1] + c:
                return False
        return True

    def sized(self, base, jitter):
        f = 1.0 + self.rng.uniform(-jitter, jitter, size=3)
        return tuple(_r(b * k) for b, k in zip(base, f))

    def make(self, name, center_xz, half, theta, y_bottom=0.0):
        t = (_r(center_xz[0]), _r(y_bottom + half[1]), _r(center_xz[1]))
        return ObjectRecord(self.tax.index(name), t, half, theta)

    @staticmethod
    def rect_of(obj):
        e = obj.aabb_extent()
        t = obj.translation
        return np.array([t[0] - e[0], t[2] - e[2]]), np.array([t[0] + e[0], t[2] + e[2]])

    def try_add(self, obj) -> bool:
        lo, hi = self.rect_of(obj)
        if self.free(lo, hi):
            self.rects.append((lo, hi))
            return True
        return False

    def place_free(self, name, tries=40):
        proto = PRIMARY_PROTOTYPES[name]
        for _ in range(tries):
            half = self.sized(proto.size, proto.jitter)
            if proto.wall:
                obj = self._against_wall(name, half)
            else:
                theta = float(self.rng.integers(4)) * math.pi / 2
                ext = ObjectRecord(0, (0, 0, 0), half, theta).aabb_extent()
                if 2 * ext[0] > self.spec.width or 2 * ext[2] > self.spec.depth:
                    continue
                x = self.rng.uniform(ext[0], self.spec.width - ext[0])
                z = self.rng.uniform(ext[2], self.spec.depth - ext[2])
                obj = self.make(name, (x, z), half, theta)
            if obj is not None and self.try_add(obj):
                return obj
        return None

    def _against_wall(self, name, half):
        w, d = self.spec.width, self.spec.depth
        if min(w, d) < 2 * max(half[0], half[2]):
            return None
        wall = int(self.rng.integers(4))
        # theta points the object's local +z (front) into the room
        if wall == 0:  # z = 0 wall, face +z
            theta, x, z = 0.0, self.rng.uniform(half[0], w - half[0]), half[2]
        elif wall == 1:  # z = d wall, face -z
            theta, x, z = math.pi, self.rng.uniform(half[0], w - half[0]), d - half[2]
        elif wall == 2:  # x = 0 wall, face +x
            theta, x, z = math.pi / 2, half[2], self.rng.uniform(half[0], d - half[0])
        else:  # x = w wall, face -x
            theta, x, z = -math.pi / 2, w - half[2], self.rng.uniform(half[0], d - half[0])
        return self.make(name, (x, z), half, theta)

    def place_companion(self, anchor: ObjectRecord, name, mode):
        """Place ``name`` beside ("side"), in front of ("front") or behind ("back") the anchor."""
        proto = PRIMARY_PROTOTYPES[name]
        fwd = np.array([math.sin(anchor.theta), math.cos(anchor.theta)])
        lat = np.array([fwd[1], -fwd[0]])
        fwd_axis = 0 if abs(fwd[0]) > 0.5 else 1
        ae = anchor.aabb_extent()[[0, 2]]
        a = np.array([anchor.translation[0], anchor.translation[2]])
        for _ in range(20):
            half = self.sized(proto.size, proto.jitter)
            theta = anchor.theta
            if mode == "front" and name == "chair":
                theta = anchor.theta + math.pi
            theta = math.remainder(theta, 2 * math.pi)
            ce = ObjectRecord(0, (0, 0, 0), half, theta).aabb_extent()[[0, 2]]
            gap = self.rng.uniform(0.08, 0.35)
            if mode == "side":
                lat_axis = 1 - fwd_axis
                sign = self.rng.choice([-1.0, 1.0])
                # flush with the anchor's back edge
                pos = a + sign * lat * (ae[lat_axis] + ce[lat_axis] + gap)
                pos = pos - fwd * (ae[fwd_axis] - ce[fwd_axis])
            else:
                sign = 1.0 if mode == "front" else -1.0
                pos = a + sign * fwd * (ae[fwd_axis] + ce[fwd_axis] + gap)
                pos = pos + lat * self.rng.uniform(-0.3, 0.3) * ae[1 - fwd_axis]
            obj = self.make(name, pos, half, theta)
            if self.try_add(obj):
                return obj
        return None


def _support_slots(primary: Sequence[ObjectRecord], taxonomy: CategoryTaxonomy):
    slots = []
    for idx, p in enumerate(primary):
        proto = PRIMARY_PROTOTYPES[taxonomy.name(p.label)]
        for cls in proto.top_slots:
            slots.append(("top", idx, cls))
        for cls in proto.floor_slots:
            slots.append(("floor", idx, cls))
    return slots


def generate_scene(spec: RoomSpec, seed: int, taxonomy: CategoryTaxonomy | None = None,
                   thresholds: RelationThresholds | None = None, max_rounds: int = 4) -> Scene:
    """Sample one furnished room; identical (spec, seed) gives an identical scene.

    If fewer primary objects than requested can be placed, the room is
    regenerated with a smaller target and ``meta['reduced']`` is set.
    """
    taxonomy = taxonomy or CategoryTaxonomy.default()
    th = thresholds or RelationThresholds()
    rng = np.random.default_rng([seed, 0x5CE7E])
    target = spec.target_primary_count
    reduced = False
    for _ in range(max_rounds):
        result = _generate_once(spec, target, rng, taxonomy, th)
        if result is not None:
            break
        reduced = True
        target = max(0, target - max(1, target // 4))
    else:
        result = _generate_once(spec, 0, rng, taxonomy, th)
        reduced = True
    primary, secondary, planted = result
    graph = extract_graph(primary, th)
    center, scale = room_frame(spec)
    return Scene(
        primary, secondary, graph, room_mask(spec),
        text=describe(spec.room_type, primary, len(secondary), taxonomy),
        source=f"synthetic/{spec.room_type}",
        frame_center=center, frame_scale=scale,
        meta={"planted_edges": planted, "reduced": reduced, "tiers": (
            ["primary"] * len(primary) + ["secondary"] * len(secondary))},
    )


def _generate_once(spec, target, rng, taxonomy, th):
    placer = _Placer(spec, rng, taxonomy)
    primary: list[ObjectRecord] = []
    planted: list[tuple[int, int, int]] = []
    weights = ROOM_WEIGHTS[spec.room_type]
    names = sorted(weights)
    p = np.array([weights[n] for n in names], dtype=float)
    p /= p.sum()
    failures = 0
    while len(primary) < target and failures < 3 * target + 5:
        name = names[int(rng.choice(len(names), p=p))]
        obj = placer.place_free(name)
        if obj is None:
            failures += 1
            continue
        primary.append(obj)
        anchor_idx = len(primary) - 1
        for comp, mode, (lo, hi) in COMPANIONS.get(name, []):
            for _ in range(int(rng.integers(lo, hi + 1))):
                if len(primary) >= target:
                    break
                c = placer.place_companion(obj, comp, mode)
                if c is None:
                    continue
                primary.append(c)
                for rel in PLANTED_RELATIONS:
                    r = RELATION_NAMES.index(rel)
                    if relation_holds(r, c, obj, th):
                        planted.append((len(primary) - 1, anchor_idx, r))
    if len(primary) < target:
        return None
    secondary = _place_secondary(spec, primary, placer, rng, taxonomy)
    return primary, secondary, planted


def _place_secondary(spec, primary, placer, rng, taxonomy):
    slots = _support_slots(primary, taxonomy)
    out: list[ObjectRecord] = []
    if not slots:
        return out
    sw = SECONDARY_WEIGHTS[spec.room_type]
    w = np.array([sw[cls] for _, _, cls in slots], dtype=float)
    w /= w.sum()
    surface_rects: dict[int, list] = {}
    attempts = 0
    while len(out) < spec.target_secondary_count and attempts < 6 * spec.target_secondary_count + 10:
        attempts += 1
        kind, idx, cls = slots[int(rng.choice(len(slots), p=w))]
        host = primary[idx]
        half = placer.sized(SECONDARY_PROTOTYPES[cls], 0.15)
        theta = host.theta
        ext = ObjectRecord(0, (0, 0, 0), half, theta).aabb_extent()
        he = host.aabb_extent()
        hx, hz = host.translation[0], host.translation[2]
        if kind == "top":
            if ext[0] > he[0] or ext[2] > he[2]:
                continue
            x = rng.uniform(hx - he[0] + ext[0], hx + he[0] - ext[0])
            z = rng.uniform(hz - he[2] + ext[2], hz + he[2] - ext[2])
            obj = placer.make(cls, (x, z), half, theta, y_bottom=host.top())
            # re-derive y from the rounded values so the contact is exact
            obj = ObjectRecord(obj.label, (obj.translation[0], host.top() + half[1], obj.translation[2]),
                               half, theta)
            lo, hi = placer.rect_of(obj)
            hlo, hhi = placer.rect_of(host)
            if np.any(lo < hlo) or np.any(hi > hhi):
                continue
            taken = surface_rects.setdefault(idx, [])
            if any(lo[0] < h2[0] and l2[0] < hi[0] and lo[1] < h2[1] and l2[1] < hi[1] for l2, h2 in taken):
                continue
            taken.append((lo, hi))
            out.append(obj)
        else:
            side = rng.choice([-1.0, 1.0])
            offset = he[0] + ext[0] + rng.uniform(0.05, 0.2)
            along = rng.uniform(-he[2], he[2])
            x, z = hx + side * offset, hz + along
            obj = placer.make(cls, (x, z), half, theta)
            if placer.try_add(obj):
                out.append(obj)
    return out


def sample_room_spec(rng: np.random.Generator, room_types: Sequence[str] = ROOM_TYPES,
                     caps: tuple[int, int] = (12, 32)) -> RoomSpec:
    room_type = room_types[int(rng.integers(len(room_types)))]
    w = round(float(rng.uniform(3.5, 6.5)), 2)
    d = round(float(rng.uniform(3.5, 6.5)), 2)
    notch = None
    if rng.random() < 0.3:
        notch = (round(w * float(rng.uniform(0.25, 0.45)), 2), round(d * float(rng.uniform(0.25, 0.45)), 2))
    n_l = int(rng.integers(3, min(caps[0], 19) + 1))
    n_s = int(rng.integers(min(8, caps[1]), min(caps[1], 99) + 1))
    return RoomSpec(w, d, room_type, n_l, n_s, notch)


def generate_corpus(count: int, seed: int, room_types: Sequence[str] = ROOM_TYPES,
                    caps: tuple[int, int] = (12, 32),
                    taxonomy: CategoryTaxonomy | None = None) -> list[Scene]:
    taxonomy = taxonomy or CategoryTaxonomy.default()
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        spec = sample_room_spec(rng, room_types, caps)
        scene_seed = int(rng.integers(2**31))
        scenes.append(generate_scene(spec, scene_seed, taxonomy))
    return scenes


def write_corpus(scenes: Sequence[Scene], path, taxonomy: CategoryTaxonomy | None = None,
                 vocab: bool = True) -> None:
    taxonomy = taxonomy or CategoryTaxonomy.default()
    path = Path(path)
    with open(path, "w") as f:
        for s in scenes:
            f.write(dumps_scene(s, taxonomy))
            f.write("\n")
    if vocab:
        path.with_suffix(".vocab.txt").write_text("\n".join(prompt_vocabulary(taxonomy)) + "\n")


class CorpusFormatError(ValueError):
    pass


@dataclass
class CorpusSplit:
    train: list[Scene]
    val: list[Scene]
    dropped: int = 0
    reasons: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.val))


def read_corpus(path, taxonomy: CategoryTaxonomy | None = None) -> list[Scene]:
    taxonomy = taxonomy or CategoryTaxonomy.default()
    scenes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line), taxonomy))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return scenes


def load_corpus(path, split_ratio: float = 0.9, seed: int = 0,
                taxonomy: CategoryTaxonomy | None = None,
                limits: tuple[int, int] = PAPER_LIMITS) -> CorpusSplit:
    """Read a JSONL corpus, drop over-limit scenes and split deterministically.

    A scene is kept iff ``n_primary < limits[0]`` and ``n_secondary < limits[1]``.
    """
    if not 0 < split_ratio <= 1:
        raise ValueError("split_ratio must lie in (0, 1]")
    kept, reasons = [], []
    for i, s in enumerate(read_corpus(path, taxonomy)):
        if len(s.primary) < limits[0] and len(s.secondary) < limits[1]:
            kept.append(s)
        else:
            reasons.append(f"scene {i}: {len(s.primary)} primary / {len(s.secondary)} secondary")
    if reasons:
        log.warning("dropped %d scenes over limits %s", len(reasons), limits)
    order = np.random.default_rng(seed).permutation(len(kept))
    n_train = int(round(split_ratio * len(kept)))
    train = [kept[i] for i in order[:n_train]]
    val = [kept[i] for i in order[n_train:]]
    return CorpusSplit(train, val, len(reasons), reasons)


def read_m3dlayout(path):
    """Placeholder reader for real multi-source archives.

    Field mapping: ``model_id``/``category`` -> ``class`` (requires a taxonomy
    with the full class list), ``bbox.center`` -> ``t``, ``bbox.size / 2`` ->
    ``s``, ``bbox.angle`` -> ``theta``; room polygon rasterized with
    :func:`room_mask` semantics. Untested against real data.
    """
    raise NotImplementedError("real archive ingestion is not shipped")
