"""Projection rasters, raster-feature distribution distances and plausibility checks."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import binary_dilation
from shapely.geometry import Polygon

from .pipeline import generate_scenes, load_checkpoint
from .scene import ObjectRecord, Scene, denormalize_scene, normalize_scene

log = logging.getLogger(__name__)

PLANES = ("XZ", "XY", "YZ")
OVERLAP_IOU = 1e-3
SUPPORT_GAP = 0.02  # meters


def _pixel_centers(R: int) -> np.ndarray:
    return -1 + (np.arange(R) + 0.5) * 2 / R


def _normalized(scene: Scene) -> Scene:
    return scene if scene.normalized else normalize_scene(scene)


def rasterize(scene: Scene, plane: str = "XZ", R: int = 64, oriented: bool = True,
              counts: bool = False) -> np.ndarray:
    """Fill every box footprint projected onto ``plane`` into an R x R grid over [-1, 1]^2.

    A pixel is covered iff its center lies inside the projected footprint.
    Rows follow the second plane axis, columns the first.
    """
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {PLANES}")
    scene = _normalized(scene)
    img = np.zeros((R, R), dtype=np.int32)
    c = _pixel_centers(R)
    U, V = np.meshgrid(c, c)  # U varies along columns
    for o in scene.objects:
        t, s = np.asarray(o.translation), np.asarray(o.half_size)
        if plane == "XZ" and oriented:
            cos, sin = math.cos(o.theta), math.sin(o.theta)
            du, dv = U - t[0], V - t[2]
            # back into the box frame (inverse rotation about +y)
            lx = cos * du - sin * dv
            lz = sin * du + cos * dv
            inside = (np.abs(lx) < s[0]) & (np.abs(lz) < s[2])
        else:
            # rotation about +y leaves the side views axis-aligned
            e = o.aabb_extent() if oriented else s
            a, b = {"XZ": (0, 2), "XY": (0, 1), "YZ": (2, 1)}[plane]
            inside = (np.abs(U - t[a]) < e[a]) & (np.abs(V - t[b]) < e[b])
        img += inside
    return img if counts else (img > 0).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    """Binary PGM (P5) dump scaled to 0..255."""
    arr = np.asarray(img, dtype=float)
    top = arr.max() or 1.0
    data = np.clip(np.round(arr / top * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


# -- distribution distances -------------------------------------------------

def raster_features(images: Sequence[np.ndarray], pool: int = 16) -> np.ndarray:
    """Average-pooled raster plus six moments (mass, centroid, second moments)."""
    feats = []
    for img in images:
        a = np.asarray(img, dtype=float)
        R = a.shape[0]
        k = R // pool
        pooled = a[:k * pool, :k * pool].reshape(pool, k, pool, k).mean(axis=(1, 3))
        mass = a.mean()
        c = _pixel_centers(R)
        U, V = np.meshgrid(c, c)
        tot = a.sum()
        if tot > 0:
            mu_u, mu_v = (a * U).sum() / tot, (a * V).sum() / tot
            suu = (a * (U - mu_u) ** 2).sum() / tot
            svv = (a * (V - mu_v) ** 2).sum() / tot
            suv = (a * (U - mu_u) * (V - mu_v)).sum() / tot
        else:
            mu_u = mu_v = suu = svv = suv = 0.0
        feats.append(np.concatenate([pooled.ravel(), [mass, mu_u, mu_v, suu, svv, suv]]))
    return np.asarray(feats)


class Distance(NamedTuple):
    frechet: float
    mmd: float
    regularized: bool = False


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(fa: np.ndarray, fb: np.ndarray, ridge: float = 1e-6):
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    ca = np.atleast_2d(np.cov(fa, rowvar=False)) if len(fa) > 1 else np.zeros((fa.shape[1],) * 2)
    cb = np.atleast_2d(np.cov(fb, rowvar=False)) if len(fb) > 1 else np.zeros((fb.shape[1],) * 2)
    regularized = False
    if np.linalg.matrix_rank(ca) < ca.shape[0] or np.linalg.matrix_rank(cb) < cb.shape[0]:
        ca = ca + ridge * np.eye(len(ca))
        cb = cb + ridge * np.eye(len(cb))
        regularized = True
    sa = _sqrtm_psd(ca)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(sa @ cb @ sa), 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * cross)
    return max(d, 0.0), regularized


def polynomial_mmd(fa: np.ndarray, fb: np.ndarray, degree: int = 3) -> float:
    """Unbiased squared MMD with the (x.y / d + 1)^3 kernel, clamped at zero."""
    d = fa.shape[1]
    kxx = (fa @ fa.T / d + 1) ** degree
    kyy = (fb @ fb.T / d + 1) ** degree
    kxy = (fa @ fb.T / d + 1) ** degree
    m, n = len(fa), len(fb)
    if m < 2 or n < 2:
        raise ValueError("need at least two samples per set")
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return max(float(xx + yy - 2 * kxy.mean()), 0.0)


def distribution_distance(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray]) -> Distance:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both raster sets must be non-empty")
    fa, fb = raster_features(set_a), raster_features(set_b)
    fr, reg = frechet_distance(fa, fb)
    if reg:
        log.debug("covariance regularized with ridge")
    return Distance(fr, polynomial_mmd(fa, fb), reg)


# -- plausibility -----------------------------------------------------------

def _prism(o: ObjectRecord):
    return Polygon(o.footprint()), o.bottom(), o.top()


def box_iou(a: ObjectRecord, b: ObjectRecord) -> float:
    """Exact IoU of two boxes rotated about +y."""
    ea, eb = a.aabb_extent(), b.aabb_extent()
    if np.any(np.abs(np.subtract(a.translation, b.translation)) >= ea + eb):
        return 0.0
    pa, a0, a1 = _prism(a)
    pb, b0, b1 = _prism(b)
    h = max(0.0, min(a1, b1) - max(a0, b0))
    inter = pa.intersection(pb).area * h if h > 0 else 0.0
    va = 8 * np.prod(a.half_size)
    vb = 8 * np.prod(b.half_size)
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


def _mask_lookup(mask: np.ndarray, x: float, z: float) -> bool:
    R = mask.shape[0]
    col = int(math.floor((x + 1) / 2 * R))
    row = int(math.floor((z + 1) / 2 * R))
    if not (0 <= row < R and 0 <= col < R):
        return False
    return bool(mask[row, col])


def tolerant_mask(mask: np.ndarray, tolerance_px: int = 1) -> np.ndarray:
    """Dilate so boxes flush with a wall are not penalized for raster quantization."""
    return binary_dilation(mask, iterations=tolerance_px) if tolerance_px > 0 else mask


def out_of_bounds(o: ObjectRecord, mask: np.ndarray, tolerance_px: int = 1) -> bool:
    """Object (normalized frame) whose center or a footprint corner leaves the room mask."""
    mask = tolerant_mask(mask, tolerance_px)
    points = [(o.translation[0], o.translation[2])] + [tuple(c) for c in o.footprint()]
    return any(not _mask_lookup(mask, x, z) for x, z in points)


def support_gap(o: ObjectRecord, primary: Sequence[ObjectRecord]) -> float:
    """Smallest vertical gap from ``o``'s bottom to the floor or to the top face of a primary
    whose footprint horizontally overlaps ``o``'s (meters)."""
    best = abs(o.bottom())
    own = Polygon(o.footprint())
    for p in primary:
        if own.intersection(Polygon(p.footprint())).area > 0:
            best = min(best, abs(o.bottom() - p.top()))
    return best


@dataclass
class PlausibilityReport:
    overlap_rate: float
    oob_rate: float
    support_violation_rate: float
    pairs: int
    objects: int
    secondary_objects: int
    mean_primary: float
    mean_secondary: float
    max_primary: int
    max_secondary: int

    def to_dict(self) -> dict:
        return asdict(self)


def plausibility(scenes: Sequence[Scene]) -> PlausibilityReport:
    overlaps = pairs = oob = objects = violations = n_sec = 0
    n_p, n_s = [], []
    for scene in scenes:
        world = denormalize_scene(scene) if scene.normalized else scene
        norm = _normalized(scene)
        objs = world.objects
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                pairs += 1
                overlaps += box_iou(objs[i], objs[j]) > OVERLAP_IOU
        mask = tolerant_mask(scene.room_mask)
        for o in norm.objects:
            objects += 1
            oob += out_of_bounds(o, mask, tolerance_px=0)
        for o in world.secondary:
            n_sec += 1
            violations += support_gap(o, world.primary) > SUPPORT_GAP
        n_p.append(len(world.primary))
        n_s.append(len(world.secondary))
    rate = lambda a, b: a / b if b else 0.0  # noqa: E731
    return PlausibilityReport(
        rate(overlaps, pairs), rate(oob, objects), rate(violations, n_sec),
        pairs, objects, n_sec,
        float(np.mean(n_p)) if n_p else 0.0, float(np.mean(n_s)) if n_s else 0.0,
        max(n_p, default=0), max(n_s, default=0),
    )


# -- reports ----------------------------------------------------------------

def rasters(scenes: Sequence[Scene], plane: str, R: int = 64) -> list[np.ndarray]:
    return [rasterize(s, plane, R) for s in scenes]


def evaluate_scenes(generated: Sequence[Scene], reference: Sequence[Scene], R: int = 64) -> dict:
    row = {}
    for plane in PLANES:
        d = distribution_distance(rasters(generated, plane, R), rasters(reference, plane, R))
        row[f"{plane}_frechet"] = d.frechet
        row[f"{plane}_mmd"] = d.mmd
    rep = plausibility(generated)
    row.update({"overlap_rate": rep.overlap_rate, "oob_rate": rep.oob_rate,
                "support_violation_rate": rep.support_violation_rate,
                "mean_primary": rep.mean_primary, "mean_secondary": rep.mean_secondary})
    return row


def format_table(rows: dict[str, dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(next(iter(rows.values())).keys())
    width = max(len("config"), *(len(k) for k in rows))
    head = "config".ljust(width) + "".join(f"  {c:>22}" for c in cols)
    lines = [head, "-" * len(head)]
    for name, row in rows.items():
        lines.append(name.ljust(width) + "".join(f"  {row[c]:>22.6f}" for c in cols))
    return "\n".join(lines) + "\n"


def metric_lines(rows: dict[str, dict]) -> str:
    """One ``config plane metric value`` line per entry."""
    out = []
    for name, row in rows.items():
        for key, val in row.items():
            plane, _, metric = key.partition("_") if key.split("_")[0] in PLANES else ("-", "", key)
            out.append(f"{name} {plane} {metric} {val:.10g}")
    return "\n".join(out) + "\n"


def ablation_report(configs: dict, val_corpus, seed: int = 0, steps: int | None = None,
                    out_prefix=None, R: int = 64) -> tuple[dict, list[str]]:
    """Sample each configuration against ``val_corpus`` and tabulate metrics.

    ``configs`` maps a row name to a dict with any of the checkpoint paths
    ``slg``, ``clg``, ``single``. Rows whose checkpoints are missing are
    skipped and noted.
    """
    rows, notes = {}, []
    reference = val_corpus.scenes
    for name, paths in configs.items():
        missing = [p for p in paths.values() if p is not None and not Path(p).exists()]
        if missing:
            notes.append(f"{name}: skipped, missing {', '.join(map(str, missing))}")
            continue
        states = {k: load_checkpoint(p, val_corpus.taxonomy) for k, p in paths.items() if p is not None}
        scenes = generate_scenes(states.get("slg"), states.get("clg"), val_corpus, seed, steps,
                                 single=states.get("single"))
        rows[name] = evaluate_scenes(scenes, reference, R)
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        Path(str(out_prefix) + ".txt").write_text(format_table(rows) + "".join(f"# {n}\n" for n in notes))
        Path(str(out_prefix) + ".metrics").write_text(metric_lines(rows))
        Path(str(out_prefix) + ".json").write_text(json.dumps({"rows": rows, "notes": notes}, indent=1, sort_keys=True))
    return rows, notes
