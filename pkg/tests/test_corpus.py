import json
import math

import numpy as np
import pytest

from tierlayout.corpus import (
    CorpusFormatError, RelationThresholds, RoomSpec, extract_graph, generate_corpus, generate_scene,
    load_corpus, read_corpus, relation_holds, room_mask, write_corpus,
)
from tierlayout.evaluation import plausibility
from tierlayout.scene import RELATION_NAMES, CategoryTaxonomy, ObjectRecord, dumps_scene

TAX = CategoryTaxonomy.default()
REL = {n: i for i, n in enumerate(RELATION_NAMES)}


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(60, 7)


def box(x, z, y=0.5, s=(0.5, 0.5, 0.5), theta=0.0, label=0):
    return ObjectRecord(label, (x, y, z), s, theta)


def test_directional_predicates_toy():
    a, b = box(0, 0), box(2, 0)
    assert relation_holds(REL["left_of"], a, b)
    assert relation_holds(REL["right_of"], b, a)
    assert not relation_holds(REL["right_of"], a, b)
    front, back = box(0, 2), box(0, 0)
    assert relation_holds(REL["in_front_of"], front, back)
    assert relation_holds(REL["behind"], back, front)
    # overlapping along x: neither side
    assert not relation_holds(REL["left_of"], box(0, 0), box(0.8, 0))
    # too far apart
    assert not relation_holds(REL["left_of"], box(0, 0), box(5, 0))


def test_close_to_and_on_top_toy():
    a, b = box(0, 0), box(1.2, 0)
    assert relation_holds(REL["close_to"], a, b)
    assert not relation_holds(REL["close_to"], a, box(2.5, 0))
    table = box(0, 0, y=0.4, s=(0.6, 0.4, 0.6))
    cup = box(0.1, 0.1, y=0.85, s=(0.05, 0.05, 0.05))
    assert relation_holds(REL["on_top_of"], cup, table)
    assert not relation_holds(REL["on_top_of"], table, cup)
    floating = box(0.1, 0.1, y=1.0, s=(0.05, 0.05, 0.05))
    assert not relation_holds(REL["on_top_of"], floating, table)


def test_facing_toy():
    sofa = box(0, 0, theta=0.0)  # forward is +z
    tv = box(0, 2)
    assert relation_holds(REL["facing"], sofa, tv)
    assert not relation_holds(REL["facing"], box(0, 0, theta=math.pi), tv)
    assert not relation_holds(REL["facing"], sofa, box(0, 6))
    assert relation_holds(REL["facing"], box(0, 0, theta=math.pi / 2), box(2, 0))


def test_extract_graph_consistency(small_corpus):
    th = RelationThresholds()
    for s in small_corpus:
        assert set(s.graph.edges) == set(extract_graph(s.primary, th).edges)
        for i, j, r in s.graph.edges:
            assert relation_holds(r, s.primary[i], s.primary[j], th)
        # planted edges are a subset of what the predicates report
        assert set(map(tuple, s.meta["planted_edges"])) <= set(s.graph.edges)


def test_generator_deterministic():
    a = [dumps_scene(s, TAX) for s in generate_corpus(5, 42)]
    b = [dumps_scene(s, TAX) for s in generate_corpus(5, 42)]
    c = [dumps_scene(s, TAX) for s in generate_corpus(5, 43)]
    assert a == b and a != c


def test_generator_is_plausible(small_corpus):
    rep = plausibility(small_corpus)
    assert rep.overlap_rate == 0
    assert rep.oob_rate == 0
    assert rep.support_violation_rate == 0


def test_generator_dense_and_tiered(small_corpus):
    n_l = [len(s.primary) for s in small_corpus]
    n_s = [len(s.secondary) for s in small_corpus]
    assert max(n_l) <= 12 and max(n_s) <= 32
    assert np.mean(n_s) > np.mean(n_l)
    for s in small_corpus:
        assert all(TAX.is_primary(o.label) for o in s.primary)
        assert not any(TAX.is_primary(o.label) for o in s.secondary)


def test_l_shaped_mask():
    spec = RoomSpec(4.0, 4.0, "office", 3, 8, notch=(2.0, 2.0))
    m = room_mask(spec)
    full = room_mask(RoomSpec(4.0, 4.0, "office", 3, 8))
    assert m.sum() < full.sum()
    assert 0.65 < m.sum() / full.sum() < 0.85


def test_unsatisfiable_spec_reduces():
    spec = RoomSpec(1.0, 1.0, "bedroom", 10, 8)
    s = generate_scene(spec, 1)
    assert s.meta["reduced"] and len(s.primary) < 10


def test_room_spec_validation():
    with pytest.raises(ValueError):
        RoomSpec(3, 3, "garage", 3, 3)
    with pytest.raises(ValueError):
        RoomSpec(3, 3, "office", 25, 3)


def test_write_read_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    write_corpus(small_corpus, path)
    back = read_corpus(path)
    assert [dumps_scene(s, TAX) for s in back] == [dumps_scene(s, TAX) for s in small_corpus]
    assert (tmp_path / "c.vocab.txt").exists()


def test_load_corpus_filters_and_splits(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    write_corpus(small_corpus, path)
    split = load_corpus(path, split_ratio=0.8, seed=1)
    assert len(split.train) + len(split.val) == len(small_corpus)
    assert len(split.train) == 48
    again = load_corpus(path, split_ratio=0.8, seed=1)
    assert [s.text for s in split.train] == [s.text for s in again.train]
    # a limit below the densest scene drops something and says why
    strict = load_corpus(path, limits=(5, 100))
    assert strict.dropped > 0 and len(strict.reasons) == strict.dropped
    assert all(len(s.primary) < 5 for s in strict.train + strict.val)


def test_load_corpus_boundary(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    write_corpus(small_corpus, path)
    k = max(len(s.primary) for s in small_corpus)
    # strict inequality: scenes with exactly k primaries go when the limit is k
    split = load_corpus(path, limits=(k, 100))
    assert all(len(s.primary) < k for s in split.train + split.val)
    assert load_corpus(path, limits=(k + 1, 100)).dropped == 0


def test_malformed_line_reports_location(tmp_path, small_corpus):
    path = tmp_path / "bad.jsonl"
    lines = [dumps_scene(s, TAX) for s in small_corpus[:3]]
    rec = json.loads(lines[1])
    del rec["objects"][0]["t"]
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match=r"bad.jsonl:2"):
        read_corpus(path)
