"""Command-line entry point: datagen, train, sample, eval, ablate, selftest.

Every subcommand accepts ``--config PATH`` (a JSON experiment file) and
``--seed``; flags given on the command line win over the file. Log
verbosity comes from the ``TIERLAYOUT_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .conditions import Vocabulary
from .corpus import ROOM_TYPES, generate_corpus, load_corpus, prompt_vocabulary, read_corpus, write_corpus
from .diffusion import LossConfig
from .evaluation import PLANES, ablation_report, evaluate_scenes, metric_lines, rasterize, write_pgm
from .pipeline import (
    EncodedCorpus, ModelConfig, StageConfig, generate_scenes, load_checkpoint, new_state, save_checkpoint, train,
)
from .scene import CategoryTaxonomy, dumps_scene
from .selftest import run_properties

log = logging.getLogger("tierlayout")

# Resolved experiment file; every key is optional.
DEFAULT_CONFIG = {
    "seed": 0,
    "taxonomy": None,  # {"primary": [...], "secondary": [...]} or null for the built-in one
    "corpus": {"count": 2000, "room_types": list(ROOM_TYPES), "caps": [12, 32], "split_ratio": 0.9},
    "model": {},  # ModelConfig fields
    "train": {},  # StageConfig fields shared by all stages
    "stages": {"slg": {}, "clg": {}, "single": {}},  # per-stage StageConfig overrides
    "sample": {"steps": None, "batch_size": 100},
    "eval": {"resolution": 64},
}


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    with open(path) as f:
        user = json.load(f)
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def taxonomy_of(cfg: dict) -> CategoryTaxonomy:
    return CategoryTaxonomy.from_config(cfg["taxonomy"]) if cfg.get("taxonomy") else CategoryTaxonomy.default()


def stage_config(cfg: dict, stage: str, **extra) -> StageConfig:
    fields = merge(cfg["train"], cfg["stages"].get(stage, {}))
    fields = merge(fields, extra)
    model = ModelConfig(**merge(cfg["model"], fields.pop("model", {})))
    loss = LossConfig(**fields.pop("loss", {}))
    fields.setdefault("caps", tuple(cfg["corpus"]["caps"]))
    fields.setdefault("seed", cfg["seed"])
    return StageConfig.for_stage(stage, model=model, loss=loss, **fields)


def write_meta(path, cfg: dict, **info) -> None:
    meta = {"config": cfg, "config_hash": config_hash(cfg), **info}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def setup_logging(log_file=None) -> None:
    level = os.environ.get("TIERLAYOUT_LOG", "INFO").upper()
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_tierlayout", False):
            root.removeHandler(h)
            h.close()
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w"))
    for h in handlers:
        h.setFormatter(fmt)
        h._tierlayout = True
        root.addHandler(h)
    root.setLevel(level)


# -- subcommands -------------------------------------------------------------

def cmd_datagen(args, cfg) -> int:
    c = cfg["corpus"]
    if args.count is not None:
        c["count"] = args.count
    if args.room_types:
        c["room_types"] = args.room_types.split(",")
    if args.caps:
        c["caps"] = [int(x) for x in args.caps.split(",")]
    tax = taxonomy_of(cfg)
    scenes = generate_corpus(c["count"], cfg["seed"], tuple(c["room_types"]), tuple(c["caps"]), tax)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(scenes, args.out, tax)
    write_meta(args.out, cfg, scenes=len(scenes))
    log.info("wrote %d scenes to %s (config %s)", len(scenes), args.out, config_hash(cfg))
    return 0


def _split(cfg, path, tax):
    split = load_corpus(path, cfg["corpus"]["split_ratio"], cfg["seed"], tax)
    if split.dropped:
        log.warning("dropped %d over-limit scenes", split.dropped)
    return split


def cmd_train(args, cfg) -> int:
    tax = taxonomy_of(cfg)
    extra = {}
    if args.max_steps is not None:
        extra["max_steps"] = args.max_steps
    sc = stage_config(cfg, args.stage, **extra)
    vocab = Vocabulary(prompt_vocabulary(tax))
    split = _split(cfg, args.corpus, tax)
    corpus = EncodedCorpus(split.train, tax, sc.caps, vocab, sc.model.text_len, sc.model.max_instances)
    log.info("training %s on %d scenes, config %s", sc.stage, len(corpus), sc.digest())

    def progress(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d mse %.5f iou %.5f", rec["step"], rec["mse"], rec["iou"])

    state = new_state(sc, tax, vocab)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    metrics = Path(str(args.out) + ".metrics.jsonl")
    metrics.unlink(missing_ok=True)
    train(corpus, sc, state=state, metrics_path=metrics, dump_dir=Path(args.out).parent, progress=progress)
    save_checkpoint(state, args.out)
    write_meta(args.out, cfg, stage=sc.stage, stage_config_hash=sc.digest(), steps=state.step)
    log.info("saved %s after %d steps", args.out, state.step)
    return 0


def _sample(cfg, tax, slg_path, clg_path, single_path, conditions, seed, steps):
    states = {k: load_checkpoint(p, tax) if p else None
              for k, p in (("slg", slg_path), ("clg", clg_path), ("single", single_path))}
    ref = states["single"] or states["slg"]
    caps = ref.config.caps
    corpus = EncodedCorpus(conditions, tax, caps, ref.vocab, ref.config.model.text_len,
                           ref.config.model.max_instances)
    return generate_scenes(states["slg"], states["clg"], corpus, seed, steps, single=states["single"],
                           batch_size=cfg["sample"]["batch_size"], with_graph=True)


def cmd_sample(args, cfg) -> int:
    if not args.slg and not args.single:
        log.error("sample needs --slg or --single")
        return 2
    tax = taxonomy_of(cfg)
    steps = args.steps if args.steps is not None else cfg["sample"]["steps"]
    conditions = read_corpus(args.conditions, tax)
    scenes = _sample(cfg, tax, args.slg, args.clg, args.single, conditions, cfg["seed"], steps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        for s in scenes:
            f.write(dumps_scene(s, tax) + "\n")
    write_meta(args.out, cfg, scenes=len(scenes), steps=steps)
    log.info("wrote %d sampled scenes to %s", len(scenes), args.out)
    return 0


def cmd_eval(args, cfg) -> int:
    tax = taxonomy_of(cfg)
    gen = read_corpus(args.generated, tax)
    ref = read_corpus(args.reference, tax)
    row = evaluate_scenes(gen, ref, cfg["eval"]["resolution"])
    rows = {args.name: row}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".metrics").write_text(metric_lines(rows))
    Path(str(out) + ".json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    write_meta(out, cfg, generated=str(args.generated), reference=str(args.reference))
    if args.pgm_dir:
        d = Path(args.pgm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(gen[:args.pgm_count]):
            for plane in PLANES:
                write_pgm(rasterize(s, plane, cfg["eval"]["resolution"]), d / f"scene{i:04d}_{plane}.pgm")
    sys.stdout.write(metric_lines(rows))
    return 0


# Table-3-style rows: name -> which stage checkpoints the row samples with
ABLATION_ROWS = {
    "single_naive_pos": {"single": "single_naive"},
    "single": {"single": "single"},
    "two_stage": {"slg": "slg_nograph", "clg": "clg"},
    "two_stage_graph": {"slg": "slg", "clg": "clg"},
}

ABLATION_RUNS = {
    "single_naive": ("single", {"model": {"gamma_init": 1.0, "learn_gamma": False}}),
    "single": ("single", {}),
    "slg_nograph": ("slg", {"use_graph": False}),
    "slg": ("slg", {}),
    "clg": ("clg", {}),
}


def cmd_ablate(args, cfg) -> int:
    tax = taxonomy_of(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(prompt_vocabulary(tax))
    split = _split(cfg, args.corpus, tax)
    paths = {}
    for run, (stage, over) in ABLATION_RUNS.items():
        extra = dict(over)
        if args.max_steps is not None:
            extra["max_steps"] = args.max_steps
        sc = stage_config(cfg, stage, **extra)
        ckpt = out / f"{run}.ckpt"
        if not (args.reuse and ckpt.exists()):
            corpus = EncodedCorpus(split.train, tax, sc.caps, vocab, sc.model.text_len, sc.model.max_instances)
            log.info("ablation run %s (%s), config %s", run, stage, sc.digest())
            metrics = Path(str(ckpt) + ".metrics.jsonl")
            metrics.unlink(missing_ok=True)
            state = train(corpus, sc, metrics_path=metrics)
            save_checkpoint(state, ckpt)
        paths[run] = ckpt
    configs = {name: {k: paths[v] for k, v in row.items()} for name, row in ABLATION_ROWS.items()}
    ref_caps = stage_config(cfg, "slg").caps
    val = EncodedCorpus(split.val, tax, ref_caps, vocab)
    steps = args.steps if args.steps is not None else cfg["sample"]["steps"]
    rows, notes = ablation_report(configs, val, cfg["seed"], steps, out / "ablation", cfg["eval"]["resolution"])
    write_meta(out / "ablation", cfg, rows=list(rows), notes=notes)
    sys.stdout.write((out / "ablation.txt").read_text())
    return 0


def cmd_selftest(args, cfg) -> int:
    failed = run_properties(args.only.split(",") if args.only else None)
    if failed:
        print(f"selftest FAILED: {failed}")
        return 1
    print("selftest ok")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tierlayout", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment file")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--log-file", help="also write logs here")
        return sp

    d = common(sub.add_parser("datagen", help="generate a synthetic corpus"))
    d.add_argument("--count", type=int)
    d.add_argument("--room-types", help="comma-separated subset of " + ",".join(ROOM_TYPES))
    d.add_argument("--caps", help="slot caps as N_L,N_S")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datagen)

    t = common(sub.add_parser("train", help="train one stage"))
    t.add_argument("--stage", choices=["slg", "clg", "single"], required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    s = common(sub.add_parser("sample", help="sample layouts for the scenes in a conditions file"))
    s.add_argument("--slg")
    s.add_argument("--clg")
    s.add_argument("--single")
    s.add_argument("--conditions", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = common(sub.add_parser("eval", help="compare generated scenes with a reference corpus"))
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--out", required=True, help="output prefix")
    e.add_argument("--name", default="generated")
    e.add_argument("--pgm-dir")
    e.add_argument("--pgm-count", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    a = common(sub.add_parser("ablate", help="train and evaluate the four ablation rows"))
    a.add_argument("--corpus", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--max-steps", type=int)
    a.add_argument("--steps", type=int, help="sampling steps")
    a.add_argument("--reuse", action="store_true", help="keep existing checkpoints")
    a.set_defaults(func=cmd_ablate)

    st = common(sub.add_parser("selftest", help="run in-package property checks"))
    st.add_argument("--only", help="comma-separated property names")
    st.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_file)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return args.func(args, cfg)
    finally:
        for h in list(logging.getLogger().handlers):
            if getattr(h, "_tierlayout", False) and isinstance(h, logging.FileHandler):
                h.flush()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
