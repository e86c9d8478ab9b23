"""Two-stage (structural, then contextual) training and sampling.

Stages:

``slg``     denoise primary slots under graph / room-mask / text conditions
``clg``     denoise secondary slots; clean primary slots ride along as anchors
``single``  ablation baseline, all slots denoised jointly in one sequence
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .conditions import ConditionBundle, GraphEncoder, RoomEncoder, TextEncoder, Vocabulary
from .corpus import extract_graph, prompt_vocabulary
from .denoiser import LayoutDenoiser
from .diffusion import (
    LossConfig, build_schedule, forward_noise, reverse_step, training_loss, v_target, x0_from_v,
)
from .scene import (
    PRIMARY, RELATION_NAMES, SECONDARY, CategoryTaxonomy, ObjectRecord, Scene, SceneGraph, decode_rows,
    denormalize_scene, encode_layout, normalize_scene,
)

log = logging.getLogger(__name__)

STAGES = ("slg", "clg", "single")


@dataclass
class ModelConfig:
    d_model: int = 256
    depth: int = 4
    heads: int = 4
    num_freqs: int = 8
    gamma_init: float = 0.01
    learn_gamma: bool = True
    max_instances: int = 8
    graph_depth: int = 2
    text_depth: int = 2
    text_len: int = 32
    room_width: int = 32


@dataclass
class StageConfig:
    stage: str = "slg"
    caps: tuple[int, int] = (12, 32)
    use_graph: bool = True
    use_mask: bool = True
    use_text: bool = True
    zero_anchors: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    lr: float = 1e-4
    lr_halving_epochs: float = 10000
    grad_clip: float = 10.0
    batch_size: int = 64
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        self.caps = tuple(self.caps)
        if self.stage == "clg" and min(self.caps) <= 0:
            raise ValueError("contextual stage needs both caps > 0")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "StageConfig":
        # graph condition defaults on only for the structural stage
        defaults = {"use_graph": stage == "slg"}
        defaults.update(overrides)
        return cls(stage=stage, **defaults)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["caps"] = list(self.caps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def learning_rate(lr0: float, epoch: int, halving_epochs: float) -> float:
    return lr0 * 0.5 ** math.floor(epoch / halving_epochs)


# -- data -------------------------------------------------------------------

class EncodedCorpus:
    """Normalized scenes packed into fixed-shape tensors."""

    def __init__(self, scenes: Sequence[Scene], taxonomy: CategoryTaxonomy, caps: tuple[int, int],
                 vocab: Vocabulary, text_len: int = 32, max_instances: int = 8):
        self.taxonomy, self.caps, self.vocab = taxonomy, tuple(caps), vocab
        kept = []
        for s in scenes:
            if len(s.primary) > caps[0] or len(s.secondary) > caps[1]:
                continue
            if any(k >= max_instances for _, k in s.graph.vertices):
                continue
            kept.append(s)
        if len(kept) < len(scenes):
            log.warning("skipped %d scenes exceeding slot caps %s", len(scenes) - len(kept), caps)
        self.scenes = [s if s.normalized else normalize_scene(s) for s in kept]
        S = len(self.scenes)
        D = taxonomy.dim
        self.xl = torch.zeros(S, caps[0], D)
        self.xs = torch.zeros(S, caps[1], D)
        E = max([len(s.graph.edges) for s in self.scenes] + [1])
        self.edges = torch.zeros(S, E, 3, dtype=torch.long)
        self.edge_mask = torch.zeros(S, E, dtype=torch.bool)
        self.vertices = torch.zeros(S, caps[0], 2, dtype=torch.long)
        masks = []
        for i, s in enumerate(self.scenes):
            lp, ls = s.layouts(caps, taxonomy)
            self.xl[i] = torch.from_numpy(lp.slots).float()
            self.xs[i] = torch.from_numpy(ls.slots).float()
            if s.graph.edges:
                self.edges[i, :len(s.graph.edges)] = torch.tensor(s.graph.edges)
                self.edge_mask[i, :len(s.graph.edges)] = True
            if s.graph.vertices:
                self.vertices[i, :len(s.graph.vertices)] = torch.tensor(s.graph.vertices)
            masks.append(torch.from_numpy(np.asarray(s.room_mask, dtype=np.float32)))
        self.masks = torch.stack(masks) if masks else torch.zeros(0, 64, 64)
        ids, tmask = vocab.encode([s.text for s in self.scenes], text_len)
        self.text_ids, self.text_mask = ids, tmask
        empty = taxonomy.empty_index
        self.xl_real = self.xl[..., empty] < 0.5
        self.xs_real = self.xs[..., empty] < 0.5

    def __len__(self):
        return len(self.scenes)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        em = self.edge_mask[idx]
        n_e = max(1, int(em.sum(1).max())) if len(idx) else 1
        tm = self.text_mask[idx]
        n_t = max(1, int(tm.sum(1).max())) if len(idx) else 1
        return {
            "xl": self.xl[idx], "xs": self.xs[idx],
            "xl_real": self.xl_real[idx], "xs_real": self.xs_real[idx],
            "edges": self.edges[idx, :n_e], "edge_mask": em[:, :n_e],
            "vertices": self.vertices[idx], "masks": self.masks[idx],
            "text_ids": self.text_ids[idx, :n_t], "text_mask": tm[:, :n_t],
        }


# -- model ------------------------------------------------------------------

class StageModel(nn.Module):
    """Condition encoders plus the denoiser for one stage."""

    def __init__(self, taxonomy: CategoryTaxonomy, vocab_size: int, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        C = taxonomy.num_classes
        self.graph = GraphEncoder(C, d, cfg.max_instances, len(RELATION_NAMES), cfg.graph_depth, cfg.heads)
        self.room = RoomEncoder(d, cfg.room_width)
        self.text = TextEncoder(vocab_size, d, cfg.text_len, cfg.text_depth, cfg.heads)
        self.denoiser = LayoutDenoiser(C, d, cfg.depth, cfg.heads, cfg.num_freqs, cfg.gamma_init, cfg.learn_gamma)

    def encode_conditions(self, batch: dict, use_graph=True, use_mask=True, use_text=True) -> ConditionBundle:
        B = batch["xl"].shape[0]
        d = self.denoiser.d_model
        off = torch.zeros(B, dtype=torch.bool)
        if use_graph:
            g, g_on = self.graph(batch["edges"], batch["edge_mask"], batch["vertices"])
        else:
            g, g_on = torch.zeros(B, d), off
        room = self.room(batch["masks"]) if use_mask else torch.zeros(B, d)
        if use_text:
            txt = self.text(batch["text_ids"], batch["text_mask"])
            t_mask, t_on = batch["text_mask"], torch.ones(B, dtype=torch.bool)
        else:
            txt, t_mask, t_on = torch.zeros(B, 1, d), torch.zeros(B, 1, dtype=torch.bool), off
        return ConditionBundle(g, g_on, room, torch.full((B,), bool(use_mask)), txt, t_mask, t_on)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class StageTensors:
    x0: torch.Tensor
    real: torch.Tensor
    anchors: torch.Tensor | None
    anchor_mask: torch.Tensor | None


def stage_tensors(stage: str, batch: dict, zero_anchors: bool = False) -> StageTensors:
    if stage == "slg":
        return StageTensors(batch["xl"], batch["xl_real"], None, None)
    if stage == "clg":
        anchors = torch.zeros_like(batch["xl"]) if zero_anchors else batch["xl"]
        return StageTensors(batch["xs"], batch["xs_real"], anchors, batch["xl_real"])
    return StageTensors(torch.cat([batch["xl"], batch["xs"]], 1),
                        torch.cat([batch["xl_real"], batch["xs_real"]], 1), None, None)


# -- training ---------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    config: StageConfig
    taxonomy: CategoryTaxonomy
    vocab: Vocabulary
    model: StageModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def schedule(self):
        c = self.config
        return build_schedule(c.T, c.beta_start, c.beta_end)


def new_state(config: StageConfig, taxonomy: CategoryTaxonomy | None = None,
              vocab: Vocabulary | None = None) -> TrainState:
    taxonomy = taxonomy or CategoryTaxonomy.default()
    vocab = vocab or Vocabulary(prompt_vocabulary(taxonomy))
    torch.manual_seed(_derive_seed(config.seed, "init"))
    model = StageModel(taxonomy, len(vocab), config.model)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    return TrainState(config, taxonomy, vocab, model, opt)


def _derive_seed(seed: int, *names) -> int:
    h = hashlib.sha256(json.dumps([seed, *names]).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def loss_on_batch(state: TrainState, batch: dict, generator: torch.Generator, step: int | None = None):
    """Noise the stage's slots, predict v, return loss components and the sequence loss mask."""
    cfg = state.config
    sched = state.schedule
    st = stage_tensors(cfg.stage, batch, cfg.zero_anchors)
    B, N, _ = st.x0.shape
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(st.x0.shape, generator=generator)
    x_t = forward_noise(sched, st.x0, t, eps).float()
    v_true = v_target(sched, st.x0, eps, t).float()
    cond = state.model.encode_conditions(batch, cfg.use_graph, cfg.use_mask, cfg.use_text)
    v_hat = state.model.denoiser(x_t, t, cond, st.anchors, st.anchor_mask)
    M = 0 if st.anchors is None else st.anchors.shape[1]
    # anchors take no part in the v-loss: their mask entries are fixed at zero
    seq_mask = torch.cat([torch.zeros(B, M), torch.ones(B, N)], dim=1)
    x0_hat = x0_from_v(sched, x_t, v_hat, t).float()
    boxes, box_mask = x0_hat, st.real
    if st.anchors is not None:
        boxes = torch.cat([st.anchors, x0_hat], 1)
        box_mask = torch.cat([st.anchor_mask, st.real], 1)
    comps = training_loss(v_hat, v_true, boxes, seq_mask[:, M:], box_mask, cfg.loss,
                          state.taxonomy.num_classes, step)
    return comps, seq_mask


def train(corpus: EncodedCorpus | Sequence[Scene], config: StageConfig, state: TrainState | None = None,
          metrics_path=None, dump_dir=None, progress=None) -> TrainState:
    """Run (or resume) training until ``config.epochs`` / ``config.max_steps``."""
    if state is None:
        state = new_state(config)
    cfg = state.config
    if not isinstance(corpus, EncodedCorpus):
        corpus = EncodedCorpus(corpus, state.taxonomy, cfg.caps, state.vocab, cfg.model.text_len,
                               cfg.model.max_instances)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if cfg.stage == "clg" and not bool(corpus.xs_real.any()):
        raise ValueError("contextual stage needs scenes with secondary objects")
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    metrics = open(metrics_path, "a") if metrics_path else None
    model = state.model
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    try:
        while state.step < total:
            epoch, pos = divmod(state.step, steps_per_epoch)
            order = np.random.default_rng(_derive_seed(cfg.seed, "order", epoch)).permutation(len(corpus))
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            lr = learning_rate(cfg.lr, epoch, cfg.lr_halving_epochs)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            gen = torch.Generator().manual_seed(_derive_seed(cfg.seed, "noise", state.step))
            batch = corpus.batch(idx)
            comps, _ = loss_on_batch(state, batch, gen, state.step)
            if not torch.isfinite(comps["total"]):
                _dump(dump_dir, state, idx, comps)
                raise TrainingDiverged(f"non-finite loss at step {state.step}: "
                                       f"{ {k: v.item() for k, v in comps.items()} }")
            state.optimizer.zero_grad(set_to_none=True)
            comps["total"].backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            state.optimizer.step()
            record = {"step": state.step, "epoch": epoch, "lr": lr,
                      "mse": comps["mse"].item(), "iou": comps["iou"].item(),
                      "total": comps["total"].item(), "grad_norm": float(grad_norm)}
            state.history.append(record)
            if metrics:
                metrics.write(json.dumps(record) + "\n")
            state.step += 1
            state.epoch = state.step // steps_per_epoch
            if progress:
                progress(record)
    finally:
        if metrics:
            metrics.close()
    model.eval()
    return state


def _dump(dump_dir, state, idx, comps):
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"diverged_step{state.step}.json"
    path.write_text(json.dumps({"step": state.step, "batch": [int(i) for i in idx],
                                "loss": {k: v.item() for k, v in comps.items()}}))


def train_slg(corpus, config: StageConfig, **kw) -> TrainState:
    return train(corpus, replace(config, stage="slg"), **kw)


def train_clg(corpus, config: StageConfig, **kw) -> TrainState:
    return train(corpus, replace(config, stage="clg"), **kw)


def train_single_stage(corpus, config: StageConfig, **kw) -> TrainState:
    return train(corpus, replace(config, stage="single"), **kw)


@torch.no_grad()
def evaluate_loss(state: TrainState, corpus: EncodedCorpus, seed: int = 0, repeats: int = 1) -> float:
    """Mean v-MSE over a held-out corpus with fixed noise draws."""
    state.model.eval()
    total, n = 0.0, 0
    bs = state.config.batch_size
    for r in range(repeats):
        for start in range(0, len(corpus), bs):
            idx = np.arange(start, min(start + bs, len(corpus)))
            gen = torch.Generator().manual_seed(_derive_seed(seed, "eval", r, start))
            comps, _ = loss_on_batch(state, corpus.batch(idx), gen, step=None)
            total += float(comps["mse"]) * len(idx)
            n += len(idx)
    return total / max(n, 1)


def smoothed(history: Sequence[dict], key: str = "mse", window: int = 20) -> tuple[float, float]:
    """(initial, final) means over the first and last ``window`` logged steps."""
    vals = [h[key] for h in history]
    w = max(1, min(window, len(vals) // 2 or 1))
    return float(np.mean(vals[:w])), float(np.mean(vals[-w:]))


# -- checkpoints ------------------------------------------------------------

MAGIC = b"TLAYCKPT"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: TrainState, path) -> None:
    tensors: dict[str, torch.Tensor] = {}
    for name, t in state.model.state_dict().items():
        tensors[f"model/{name}"] = t
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p, {})
            for key, val in sorted(st.items()):
                tensors[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(val)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema_version": SCHEMA_VERSION,
        "taxonomy": state.taxonomy.digest(),
        "classes": list(state.taxonomy.classes),
        "primary": sorted(state.taxonomy.primary_vocab),
        "relations": list(RELATION_NAMES),
        "vocab": state.vocab.words,
        "config": state.config.to_dict(),
        "config_hash": state.config.digest(),
        "step": state.step,
        "epoch": state.epoch,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n))


def load_checkpoint(path, taxonomy: CategoryTaxonomy | None = None) -> TrainState:
    taxonomy = taxonomy or CategoryTaxonomy.default()
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + n])
    if header["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {header['schema_version']}")
    if header["taxonomy"] != taxonomy.digest():
        raise CheckpointError("checkpoint was trained with a different taxonomy")
    body = start + n
    tensors = {}
    for entry in header["tensors"]:
        raw = data[body + entry["offset"]: body + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    config = StageConfig.from_dict(header["config"])
    state = new_state(config, taxonomy, Vocabulary(header["vocab"][3:]))
    model_sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    state.model.load_state_dict(model_sd)
    params = dict(state.model.named_parameters())
    for key, val in tensors.items():
        if not key.startswith("optim/"):
            continue
        pname, field_name = key[len("optim/"):].rsplit("/", 1)
        state.optimizer.state[params[pname]][field_name] = val
    state.step, state.epoch = header["step"], header["epoch"]
    state.model.eval()
    return state


# -- sampling ---------------------------------------------------------------

def timestep_sequence(T: int, steps: int | None = None) -> list[int]:
    if steps is None or steps >= T:
        return list(range(T, 0, -1))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


@torch.no_grad()
def _reverse_loop(state: TrainState, shape, cond, seed, steps, anchors=None, anchor_mask=None):
    sched = state.schedule
    gen = torch.Generator().manual_seed(_derive_seed(seed, "sample"))
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    ts = timestep_sequence(sched.T, steps)
    model = state.model.denoiser
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((shape[0],), t, dtype=torch.long)
        v = model(x.float(), tt, cond, anchors, anchor_mask).double()
        x = reverse_step(sched, x, v, tt, generator=gen, t_prev=torch.full((shape[0],), t_prev))
    return x.float()


def _conditions(state: TrainState, batch: dict) -> ConditionBundle:
    c = state.config
    state.model.eval()
    with torch.no_grad():
        return state.model.encode_conditions(batch, c.use_graph, c.use_mask, c.use_text)


def clean_rows(rows: torch.Tensor, taxonomy: CategoryTaxonomy, tier: str, cap: int):
    """Decode sampled rows and re-encode them as exact slot tensors plus a real-slot mask."""
    out, real = [], []
    for r in rows:
        objs = [_sanitize(o) for o in decode_rows(r.numpy(), taxonomy, tier)]
        lay = encode_layout(objs, tier, (cap, cap), taxonomy)
        out.append(torch.from_numpy(lay.slots).float())
        real.append(torch.arange(cap) < len(objs))
    return torch.stack(out), torch.stack(real)


def _sanitize(o):
    return ObjectRecord(o.label, o.translation, tuple(max(abs(v), 1e-3) for v in o.half_size), o.theta)


def sample_slg(state: TrainState, batch: dict, seed: int, steps: int | None = None) -> torch.Tensor:
    """Sample primary slot rows (B, N_L, D) from noise."""
    B = batch["xl"].shape[0]
    cond = _conditions(state, batch)
    return _reverse_loop(state, (B, state.config.caps[0], state.taxonomy.dim), cond, seed, steps)


def sample_clg(state: TrainState, anchors: torch.Tensor, anchor_mask: torch.Tensor, batch: dict,
               seed: int, steps: int | None = None) -> torch.Tensor:
    """Sample secondary rows (B, N_S, D); ``anchors`` is read, never written."""
    B = anchors.shape[0]
    cond = _conditions(state, batch)
    return _reverse_loop(state, (B, state.config.caps[1], state.taxonomy.dim), cond, seed, steps,
                         anchors, anchor_mask)


def sample_single(state: TrainState, batch: dict, seed: int, steps: int | None = None) -> torch.Tensor:
    B = batch["xl"].shape[0]
    cond = _conditions(state, batch)
    n = state.config.caps[0] + state.config.caps[1]
    return _reverse_loop(state, (B, n, state.taxonomy.dim), cond, seed, steps)


def rows_to_scenes(rows: torch.Tensor, templates: Sequence[Scene], taxonomy: CategoryTaxonomy,
                   n_primary: int, source: str = "generated") -> list[Scene]:
    """Decoded scenes in each template's normalized frame (conditions copied over).

    The first ``n_primary`` slots of every row are read as primary, the rest
    as secondary, matching how layouts are packed for training.
    """
    out = []
    for r, tpl in zip(rows, templates):
        r = r.numpy()
        primary = [_sanitize(o) for o in decode_rows(r[:n_primary], taxonomy, PRIMARY)]
        secondary = [_sanitize(o) for o in decode_rows(r[n_primary:], taxonomy, SECONDARY)]
        scene = Scene(primary, secondary, SceneGraph(SceneGraph.vertices_for(primary), []),
                      tpl.room_mask, tpl.text, source, tpl.frame_center, tpl.frame_scale, normalized=True)
        out.append(scene)
    return out


def generate_scenes(slg: TrainState | None, clg: TrainState | None, corpus: EncodedCorpus, seed: int,
                    steps: int | None = None, single: TrainState | None = None,
                    batch_size: int = 100, with_graph: bool = False) -> list[Scene]:
    """Condition on every scene in ``corpus`` and sample full layouts (normalized frame)."""
    taxonomy = corpus.taxonomy
    scenes = []
    for start in range(0, len(corpus), batch_size):
        idx = np.arange(start, min(start + batch_size, len(corpus)))
        batch = corpus.batch(idx)
        bseed = _derive_seed(seed, "batch", start)
        if single is not None:
            rows = sample_single(single, batch, bseed, steps)
            n_primary = single.config.caps[0]
        else:
            n_primary = slg.config.caps[0]
            prim = sample_slg(slg, batch, bseed, steps)
            anchors, amask = clean_rows(prim, taxonomy, PRIMARY, slg.config.caps[0])
            rows = anchors
            if clg is not None:
                if anchors.shape[1] != clg.config.caps[0]:
                    raise ValueError("stage caps disagree")
                sec = sample_clg(clg, anchors, amask, batch, _derive_seed(bseed, "clg"), steps)
                rows = torch.cat([anchors, sec], 1)
        scenes += rows_to_scenes(rows, [corpus.scenes[i] for i in idx], taxonomy, n_primary)
    if with_graph:
        for s in scenes:
            s.graph = extract_graph(denormalize_scene(s).primary)
    return scenes
