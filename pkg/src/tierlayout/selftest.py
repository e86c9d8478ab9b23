"""Fast in-package property checks, runnable without the test suite.

Each property is a zero-argument function that raises ``AssertionError`` on
failure. ``run_properties`` returns the name of the first failing property.
"""
from __future__ import annotations

import json
import logging
import math
from typing import Callable

import numpy as np
import torch

from .conditions import ConditionBundle, GraphEncoder
from .corpus import extract_graph, generate_corpus
from .denoiser import LayoutDenoiser
from .diffusion import (
    build_schedule, eps_from_v, forward_noise, pairwise_iou_loss, reverse_step, v_target, x0_from_v,
)
from .evaluation import distribution_distance, plausibility, rasterize
from .scene import (
    PRIMARY, CategoryTaxonomy, ObjectRecord, Scene, SceneGraph, decode_angle, decode_layout, dumps_scene,
    encode_angle, encode_layout, scene_from_record,
)

log = logging.getLogger(__name__)

PROPERTIES: dict[str, Callable[[], None]] = {}


def prop(fn):
    PROPERTIES[fn.__name__] = fn
    return fn


@prop
def schedule_endpoints():
    s = build_schedule()
    assert abs(s.alpha_bar(1).item() - 0.9999) < 1e-15
    assert 3e-5 <= s.alpha_bar(1000).item() <= 5e-5
    assert bool(torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1]))


@prop
def v_algebra():
    s = build_schedule()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(64, 31, generator=g, dtype=torch.float64)
    eps = torch.randn(64, 31, generator=g, dtype=torch.float64)
    t = torch.randint(1, 1001, (64,), generator=g)
    xt = forward_noise(s, x0, t, eps)
    v = v_target(s, x0, eps, t)
    assert torch.allclose(x0_from_v(s, xt, v, t), x0, atol=1e-9)
    assert torch.allclose(eps_from_v(s, xt, v, t), eps, atol=1e-9)


@prop
def oracle_rollout():
    s = build_schedule()
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(2, 12, 31, generator=g, dtype=torch.float64) * 2 - 1
    x = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    for t in range(1000, 0, -1):
        ab = s.alpha_bar(t)
        eps = (x - ab.sqrt() * x0) / (1 - ab).sqrt()
        x = reverse_step(s, x, v_target(s, x0, eps, t), t, generator=g)
    assert (x - x0).abs().max().item() < 1e-3


@prop
def iou_canonical():
    h = torch.tensor([[0.5] * 3, [0.5] * 3], dtype=torch.float64)
    cs = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 0, 0], [0.5, 0, 0]], dtype=torch.float64)
    assert abs(pairwise_iou_loss(t, h, cs).item() - 1 / 3) < 1e-3
    assert pairwise_iou_loss(t * 10, h, cs).item() < 1e-12


@prop
def denoiser_equivariance():
    torch.manual_seed(0)
    tax = CategoryTaxonomy.default()
    model = LayoutDenoiser(tax.num_classes, 32, 2, 4).eval()
    g = torch.Generator().manual_seed(2)
    x = torch.randn(2, 10, tax.dim, generator=g)
    cond = ConditionBundle.empty(2, 32)
    perm = torch.randperm(10, generator=g)
    with torch.no_grad():
        a = model(x, 50, cond)[:, perm]
        b = model(x[:, perm], 50, cond)
    assert (a - b).abs().max().item() < 1e-5


@prop
def graph_edge_order():
    torch.manual_seed(0)
    enc = GraphEncoder(23, 16).eval()
    edges = torch.tensor([[[0, 1, 0], [1, 2, 4], [2, 0, 6]]])
    verts = torch.tensor([[[0, 0], [3, 0], [3, 1]]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    with torch.no_grad():
        g1, _ = enc(edges, mask, verts)
        g2, _ = enc(edges[:, [2, 0, 1]], mask, verts)
        g0, present = enc(edges, torch.zeros_like(mask), verts)
    assert (g1 - g2).abs().max().item() <= 1e-6
    assert not present.item() and torch.all(g0 == 0)


@prop
def layout_round_trip():
    tax = CategoryTaxonomy.default()
    rng = np.random.default_rng(0)
    objs = [ObjectRecord(int(rng.integers(12)), tuple(rng.normal(size=3)), tuple(rng.uniform(0.1, 1, 3)),
                         float(rng.uniform(-math.pi, math.pi))) for _ in range(7)]
    back = decode_layout(encode_layout(objs, PRIMARY, (12, 32), tax), tax)
    assert [o.label for o in back] == [o.label for o in objs]
    for a, b in zip(objs, back):
        assert np.allclose(a.translation, b.translation) and abs(math.remainder(a.theta - b.theta, 2 * math.pi)) < 1e-9
    for k in range(360):
        th = 2 * math.pi * k / 360
        assert abs(math.remainder(decode_angle(encode_angle(th)) - th, 2 * math.pi)) < 1e-6


@prop
def corpus_plausible_and_consistent():
    tax = CategoryTaxonomy.default()
    scenes = generate_corpus(8, 0)
    rep = plausibility(scenes)
    assert rep.overlap_rate == 0 and rep.oob_rate == 0 and rep.support_violation_rate == 0
    for s in scenes:
        assert set(s.graph.edges) == set(extract_graph(s.primary).edges)
        line = dumps_scene(s, tax)
        assert dumps_scene(scene_from_record(json.loads(line), tax), tax) == line


@prop
def raster_count():
    s = Scene([ObjectRecord(0, (0, 0, 0), (0.5, 0.5, 0.5))], [], SceneGraph([(0, 0)], []),
              np.ones((64, 64), bool), normalized=True)
    assert rasterize(s, "XZ").sum() == 1024
    imgs = [rasterize(x) for x in generate_corpus(6, 1)]
    d = distribution_distance(imgs, imgs)
    assert d.frechet < 1e-6 and d.mmd == 0


def run_properties(names=None) -> str | None:
    """Run the selected (default: all) properties; return the first failing name or None."""
    for name, fn in PROPERTIES.items():
        if names and name not in names:
            continue
        try:
            fn()
        except AssertionError as exc:
            log.error("property %s FAILED %s", name, exc)
            return name
        log.info("property %s ok", name)
    return None
