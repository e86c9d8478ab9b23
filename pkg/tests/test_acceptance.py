"""Acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. The multi-seed direction checks (6, 9, 10) train
five smoke-scale models per seed and dominate the runtime.
"""
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from tierlayout import cli
from tierlayout.conditions import ConditionBundle, GraphEncoder, Vocabulary
from smoke_runs import SEEDS
from tierlayout.corpus import generate_corpus, prompt_vocabulary
from tierlayout.denoiser import LayoutDenoiser, TokenBuilder
from tierlayout.diffusion import (
    build_schedule, eps_from_v, forward_noise, pairwise_iou_loss, reverse_step, v_target, x0_from_v,
)
from tierlayout.evaluation import distribution_distance, plausibility, rasters
from tierlayout.pipeline import EncodedCorpus, loss_on_batch, new_state, sample_clg, train
from tierlayout.scene import CategoryTaxonomy, ObjectRecord, Scene, SceneGraph

TAX = CategoryTaxonomy.default()
C, D = TAX.num_classes, TAX.dim
VOCAB = Vocabulary(prompt_vocabulary(TAX))
ROOT = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = ROOT / "configs" / "smoke.json"


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1. schedule -------------------------------------------------------------

@criterion(1, "schedule correctness")
def test_schedule_correctness():
    start = time.perf_counter()
    s = build_schedule()
    betas = s.betas.tolist()
    assert len(betas) == 1000 and betas[0] == 1e-4 and betas[-1] == 2e-2
    steps = np.diff(betas)
    assert np.allclose(steps, (2e-2 - 1e-4) / 999, rtol=1e-9, atol=0)
    prod, oracle = 1.0, []
    for b in betas:
        prod *= 1.0 - b
        oracle.append(prod)
    assert np.allclose(s.alpha_bars.numpy(), oracle, rtol=1e-12, atol=0)
    assert bool(torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1]))
    assert s.alpha_bar(1).item() == 0.9999
    assert 3e-5 <= s.alpha_bar(1000).item() <= 5e-5
    assert time.perf_counter() - start < 1.0


# -- 2. v algebra ------------------------------------------------------------

@criterion(2, "v-parameterization algebra")
def test_v_algebra():
    start = time.perf_counter()
    s = build_schedule()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(1000, D, generator=g, dtype=torch.float64)
    eps = torch.randn(1000, D, generator=g, dtype=torch.float64)
    t = torch.randint(1, 1001, (1000,), generator=g)
    xt = forward_noise(s, x0, t, eps)
    v = v_target(s, x0, eps, t)
    assert (x0_from_v(s, xt, v, t) - x0).abs().max().item() < 1e-6
    assert (eps_from_v(s, xt, v, t) - eps).abs().max().item() < 1e-6
    assert time.perf_counter() - start < 1.0


# -- 3. oracle rollout -------------------------------------------------------

@criterion(3, "oracle reverse rollout")
def test_oracle_rollout():
    start = time.perf_counter()
    s = build_schedule()
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(10, 12, D, generator=g, dtype=torch.float64) * 2 - 1
    x = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    for t in range(1000, 0, -1):
        ab = s.alpha_bar(t)
        eps = (x - ab.sqrt() * x0) / (1 - ab).sqrt()
        x = reverse_step(s, x, v_target(s, x0, eps, t), t, generator=g)
    assert (x - x0).abs().max().item() < 1e-3
    assert time.perf_counter() - start < 30.0


# -- 4. IoU loss -------------------------------------------------------------

def _pair(t2, half=0.5):
    t = torch.tensor([[0.0, 0.0, 0.0], t2], dtype=torch.float64)
    h = torch.full((2, 3), half, dtype=torch.float64)
    cs = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    return t, h, cs


@criterion(4, "IoU loss values and gradient")
def test_iou_values():
    assert pairwise_iou_loss(*_pair([3.0, 0.0, 0.0])).item() == pytest.approx(0.0, abs=1e-12)
    assert pairwise_iou_loss(*_pair([0.0, 0.0, 0.0])).item() == pytest.approx(1.0, abs=1e-3)
    assert pairwise_iou_loss(*_pair([0.5, 0.0, 0.0])).item() == pytest.approx(1 / 3, abs=1e-3)


@criterion(4, "IoU loss values and gradient")
def test_iou_gradient():
    g = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(100):
        t = (torch.rand(2, 3, generator=g, dtype=torch.float64) - 0.5) * 0.8
        h = torch.rand(2, 3, generator=g, dtype=torch.float64) * 0.4 + 0.1
        ang = torch.rand(2, generator=g, dtype=torch.float64) * 2 * math.pi
        x = torch.cat([t.flatten(), h.flatten(), torch.stack([ang.cos(), ang.sin()], -1).flatten()])
        x.requires_grad_(True)

        def f(v):
            return pairwise_iou_loss(v[:6].view(2, 3), v[6:12].view(2, 3), v[12:].view(2, 2))

        (grad,) = torch.autograd.grad(f(x), x)
        fd = torch.zeros_like(x)
        with torch.no_grad():
            for k in range(x.numel()):
                e = torch.zeros_like(x)
                e[k] = 1e-6
                fd[k] = (f(x + e) - f(x - e)) / 2e-6
        worst = max(worst, (grad - fd).norm().item() / max(grad.norm().item(), fd.norm().item(), 1e-12))
    assert worst < 1e-4


# -- 5. equivariance ---------------------------------------------------------

@criterion(5, "denoiser permutation equivariance")
def test_denoiser_equivariance():
    torch.manual_seed(5)
    model = LayoutDenoiser(C, d_model=64, depth=2, heads=4).eval()
    g = torch.Generator().manual_seed(5)
    worst = 0.0
    with torch.no_grad():
        for _ in range(50):
            x = torch.randn(2, 16, D, generator=g)
            t = torch.randint(1, 1001, (2,), generator=g)
            cond = ConditionBundle(torch.randn(2, 64, generator=g), torch.ones(2, dtype=torch.bool),
                                   torch.randn(2, 64, generator=g), torch.ones(2, dtype=torch.bool),
                                   torch.randn(2, 6, 64, generator=g), torch.ones(2, 6, dtype=torch.bool),
                                   torch.ones(2, dtype=torch.bool))
            perm = torch.randperm(16, generator=g)
            worst = max(worst, (model(x, t, cond)[:, perm] - model(x[:, perm], t, cond)).abs().max().item())
    assert worst < 1e-5


# -- 6. gamma_pos ------------------------------------------------------------

@criterion(6, "gamma_pos mechanism")
def test_gamma_zero_is_attribute_embedding():
    torch.manual_seed(6)
    tb = TokenBuilder(C, 64, gamma_init=0.0)
    rows = torch.randn(4, 9, D)
    assert torch.equal(tb(rows), tb.attribute_embedding(rows))


@criterion(6, "gamma_pos mechanism")
def test_gamma_gradient_finite_difference():
    torch.manual_seed(6)
    model = LayoutDenoiser(C, d_model=32, depth=2, heads=4).double()
    g = torch.Generator().manual_seed(6)
    x = torch.randn(2, 8, D, generator=g, dtype=torch.float64)
    target = torch.randn(2, 8, D, generator=g, dtype=torch.float64)
    cond = ConditionBundle.empty(2, 32)
    cond = ConditionBundle(**{k: (v.double() if v.is_floating_point() else v) for k, v in vars(cond).items()})

    def loss():
        return ((model(x, torch.tensor([20, 700]), cond) - target) ** 2).mean()

    gamma = model.tokens.gamma_pos
    analytic = torch.autograd.grad(loss(), gamma)[0].item()
    with torch.no_grad():
        gamma += 1e-6
        up = loss().item()
        gamma -= 2e-6
        down = loss().item()
        gamma += 1e-6
    fd = (up - down) / 2e-6
    assert abs(analytic - fd) / max(abs(fd), 1e-12) < 1e-3


@pytest.mark.slow
@criterion(6, "gamma_pos mechanism")
def test_gamma_learnable_beats_frozen(smoke, note):
    wins = []
    for seed in SEEDS:
        run = smoke(seed)
        learnable, frozen = run.val_loss["single"], run.val_loss["single_gamma1"]
        note(f"seed {seed}: held-out loss learnable {learnable:.5f} frozen-at-1 {frozen:.5f}")
        wins.append(learnable < frozen)
    assert sum(wins) >= 2, wins


# -- 7. graph encoder --------------------------------------------------------

def _graph(edges, pad_to=None):
    E = max(len(edges), 1) if pad_to is None else pad_to
    e = torch.zeros(1, E, 3, dtype=torch.long)
    m = torch.zeros(1, E, dtype=torch.bool)
    for i, edge in enumerate(edges):
        e[0, i], m[0, i] = torch.tensor(edge), True
    verts = torch.tensor([[(0, 0), (3, 0), (3, 1), (5, 0), (8, 0)]])
    return e, m, verts


@criterion(7, "scene-graph encoder")
def test_graph_encoder_properties():
    torch.manual_seed(7)
    enc = GraphEncoder(C, 64).double().eval()
    edges = [(0, 1, 0), (1, 2, 3), (2, 0, 6), (3, 4, 4), (4, 1, 2), (1, 3, 5)]
    with torch.no_grad():
        g0, present = enc(*_graph(edges))
        assert present.item()
        gen = torch.Generator().manual_seed(7)
        for _ in range(20):
            perm = torch.randperm(len(edges), generator=gen).tolist()
            g, _ = enc(*_graph([edges[i] for i in perm]))
            assert (g - g0).abs().max().item() <= 1e-6
        e, m, v = _graph(edges, pad_to=15)
        e[0, len(edges):] = torch.tensor([4, 2, 6])
        assert (enc(e, m, v)[0] - g0).abs().max().item() <= 1e-6
        fwd = enc.edge_features(*(torch.tensor([x]) for x in (3, 0, 5, 0, 1)))
        rev = enc.edge_features(*(torch.tensor([x]) for x in (5, 0, 3, 0, 1)))
        assert (fwd - rev).abs().max().item() > 0
        empty, present = enc(*_graph([], pad_to=3))
        assert not present.item() and torch.equal(empty, torch.zeros_like(empty))


# -- 8. CLG anchoring --------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    return EncodedCorpus(generate_corpus(32, 8), TAX, (12, 32), VOCAB)


def _tiny_clg(corpus, steps=4):
    from tierlayout.diffusion import LossConfig
    from tierlayout.pipeline import ModelConfig, StageConfig
    cfg = StageConfig.for_stage("clg", model=ModelConfig(d_model=32, depth=2, heads=4), batch_size=8,
                                max_steps=steps, lr=1e-3, loss=LossConfig(iou_warmup_step=1))
    return train(corpus, cfg)


@criterion(8, "second-stage anchoring")
def test_clg_anchors_immutable_and_influential(small_corpus):
    state = _tiny_clg(small_corpus)
    b = small_corpus.batch(range(6))
    anchors, amask = b["xl"].clone(), b["xl_real"].clone()
    before = anchors.numpy().tobytes()
    out = sample_clg(state, anchors, amask, b, seed=8, steps=20)
    assert anchors.numpy().tobytes() == before
    moved = anchors.clone()
    moved[:, 0, C:C + 3] += torch.tensor([0.3, 0.0, -0.2])
    out2 = sample_clg(state, moved, amask, b, seed=8, steps=20)
    assert (out - out2).abs().max().item() > 0


@criterion(8, "second-stage anchoring")
def test_clg_loss_mask_zero_over_primaries(small_corpus):
    state = new_state(_tiny_clg(small_corpus, steps=1).config, TAX, VOCAB)
    for step in range(3):
        b = small_corpus.batch(range(step * 8, step * 8 + 8))
        _, mask = loss_on_batch(state, b, torch.Generator().manual_seed(step), step=step)
        assert torch.all(mask[:, :12] == 0) and torch.all(mask[:, 12:] == 1)


# -- 9 / 10. multi-seed direction checks ---------------------------------------

@pytest.mark.slow
@criterion(9, "two-stage beats single-stage (XZ Frechet and support violations)")
def test_two_stage_beats_single_stage(smoke, note):
    frechet_wins, support_wins = [], []
    for seed in SEEDS:
        run = smoke(seed)
        ref = rasters(run.val.scenes, "XZ")
        d_two = distribution_distance(rasters(run.two, "XZ"), ref).frechet
        d_one = distribution_distance(rasters(run.one, "XZ"), ref).frechet
        p_two = plausibility(run.two).support_violation_rate
        p_one = plausibility(run.one).support_violation_rate
        budget = run.data_seconds + sum(run.seconds[k] for k in ("slg", "clg", "single", "sample_two_vs_one"))
        note(f"seed {seed}: XZ frechet two-stage {d_two:.4f} single {d_one:.4f}; "
             f"support violations two-stage {p_two:.4f} single {p_one:.4f}; "
             f"{budget / 60:.1f} min{' (cached checkpoints)' if run.cached else ''}")
        frechet_wins.append(d_two < d_one)
        support_wins.append(p_two < p_one)
    assert sum(frechet_wins) >= 2, f"frechet ordering held in {frechet_wins}"
    assert sum(support_wins) >= 2, f"support ordering held in {support_wins}"


@pytest.mark.slow
@criterion(10, "graph condition improves first-stage layouts")
def test_graph_condition_helps(smoke, note):
    wins = []
    for seed in SEEDS:
        run = smoke(seed)
        ref = rasters([replace(s, secondary=[]) for s in run.val.scenes], "XZ")
        with_graph = distribution_distance(rasters(run.primary_graph, "XZ"), ref).frechet
        without = distribution_distance(rasters(run.primary_nograph, "XZ"), ref).frechet
        note(f"seed {seed}: primary XZ frechet with graph {with_graph:.4f} without {without:.4f}")
        wins.append(with_graph < without)
    assert sum(wins) >= 2, wins


# -- 11. metric sanity -------------------------------------------------------

def _random_layouts(templates, seed):
    rng = np.random.default_rng(seed)
    out = []
    for s in templates:
        objs = [ObjectRecord(int(rng.integers(TAX.num_classes - 1)), tuple(rng.uniform(-1, 1, 3)),
                             tuple(rng.uniform(0.02, 0.3, 3)), float(rng.uniform(-math.pi, math.pi)))
                for _ in range(len(s.objects))]
        out.append(Scene(objs, [], SceneGraph([], []), s.room_mask, normalized=True))
    return out


@criterion(11, "metric sanity")
def test_metric_sanity(note):
    val = generate_corpus(200, 11)
    train_set = generate_corpus(200, 12)
    a = rasters(val, "XZ")
    same = distribution_distance(a, a)
    assert same.frechet == pytest.approx(0.0, abs=1e-6) and same.mmd == 0.0
    d_real = distribution_distance(a, rasters(train_set, "XZ"))
    d_rand = distribution_distance(a, rasters(_random_layouts(val, 11), "XZ"))
    note(f"frechet val-train {d_real.frechet:.4f} val-random {d_rand.frechet:.4f}")
    assert d_real.frechet < d_rand.frechet and d_real.mmd < d_rand.mmd


# -- 12. reproducibility -----------------------------------------------------

@criterion(12, "end-to-end reproducibility")
def test_cli_reproducible(tmp_path):
    import shutil
    outputs = []
    d = tmp_path / "run"  # same location both times: metadata records input paths
    for _ in range(2):
        shutil.rmtree(d, ignore_errors=True)
        common = ["--config", str(SMOKE_CONFIG), "--seed", "12"]
        corpus, slg, clg = d / "corpus.jsonl", d / "slg.ckpt", d / "clg.ckpt"
        scenes, report = d / "scenes.jsonl", d / "report"
        assert cli.run(["datagen", *common, "--count", "40", "--out", str(corpus)]) == 0
        for stage, out in (("slg", slg), ("clg", clg)):
            assert cli.run(["train", *common, "--stage", stage, "--corpus", str(corpus), "--out", str(out),
                            "--max-steps", "15"]) == 0
        assert cli.run(["sample", *common, "--slg", str(slg), "--clg", str(clg), "--conditions", str(corpus),
                        "--steps", "10", "--out", str(scenes)]) == 0
        assert cli.run(["eval", *common, "--generated", str(scenes), "--reference", str(corpus),
                        "--out", str(report)]) == 0
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append({p.relative_to(d).as_posix(): p.read_bytes() for p in files})
    assert outputs[0].keys() == outputs[1].keys() and len(outputs[0]) >= 8
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name
    meta = json.loads(outputs[0]["corpus.jsonl.meta.json"])
    assert meta["config_hash"] == cli.config_hash(meta["config"])
