import json

import pytest

from tierlayout import cli, selftest
from tierlayout.pipeline import read_checkpoint_header

TINY = {
    "seed": 3,
    "corpus": {"caps": [12, 32], "split_ratio": 0.75},
    "model": {"d_model": 16, "depth": 1, "heads": 2, "graph_depth": 1, "text_depth": 1, "room_width": 8},
    "train": {"lr": 0.001, "batch_size": 8, "max_steps": 3, "epochs": 100, "loss": {"iou_warmup_step": 1}},
    "sample": {"steps": 4, "batch_size": 8},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_unknown_flag_exits_2(capsys):
    assert cli.run(["datagen", "--out", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli.run(["frobnicate"]) == 2


def test_selftest_passes_and_reports_failure(monkeypatch, capsys):
    assert cli.run(["selftest", "--only", "schedule_endpoints,iou_canonical"]) == 0

    def broken():
        assert False, "forced"

    monkeypatch.setitem(selftest.PROPERTIES, "schedule_endpoints", broken)
    assert cli.run(["selftest", "--only", "schedule_endpoints"]) == 1
    assert "schedule_endpoints" in capsys.readouterr().out


def test_datagen_reproducible(tmp_path, config):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert cli.run(["datagen", "--config", config, "--count", "10", "--seed", "1", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 10
    meta = json.loads((tmp_path / "a.jsonl.meta.json").read_text())
    assert meta["config_hash"] == cli.config_hash(meta["config"])
    assert (tmp_path / "a.vocab.txt").exists()


def test_datagen_flags(tmp_path):
    out = tmp_path / "c.jsonl"
    assert cli.run(["datagen", "--count", "4", "--room-types", "office", "--caps", "6,20", "--out", str(out)]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert all(r["source"] == "synthetic/office" for r in recs)
    assert all(sum(o["tier"] == "primary" for o in r["objects"]) <= 6 for r in recs)


def test_log_file_written(tmp_path):
    log = tmp_path / "logs" / "run.log"
    assert cli.run(["datagen", "--count", "2", "--out", str(tmp_path / "d.jsonl"), "--log-file", str(log)]) == 0
    assert "wrote 2 scenes" in log.read_text()


def test_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"trian": {}}))
    with pytest.raises(ValueError, match="trian"):
        cli.load_config(path)


def test_stage_config_resolution():
    cfg = cli.merge(cli.load_config(None), TINY)
    cfg["stages"] = {"clg": {"lr": 0.5}}
    sc = cli.stage_config(cfg, "clg")
    assert sc.lr == 0.5 and sc.model.d_model == 16 and sc.seed == 3 and not sc.use_graph
    assert cli.stage_config(cfg, "slg").use_graph


def test_train_sample_eval_pipeline_reproducible(tmp_path, config):
    corpus = tmp_path / "corpus.jsonl"
    assert cli.run(["datagen", "--config", config, "--count", "12", "--out", str(corpus)]) == 0
    outputs = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        slg, clg = d / "slg.ckpt", d / "clg.ckpt"
        assert cli.run(["train", "--config", config, "--stage", "slg", "--corpus", str(corpus), "--out", str(slg)]) == 0
        assert cli.run(["train", "--config", config, "--stage", "clg", "--corpus", str(corpus), "--out", str(clg)]) == 0
        scenes = d / "scenes.jsonl"
        assert cli.run(["sample", "--config", config, "--slg", str(slg), "--clg", str(clg),
                        "--conditions", str(corpus), "--seed", "5", "--out", str(scenes)]) == 0
        assert cli.run(["eval", "--config", config, "--generated", str(scenes), "--reference", str(corpus),
                        "--out", str(d / "report"), "--pgm-dir", str(d / "pgm"), "--pgm-count", "1"]) == 0
        outputs.append([p.read_bytes() for p in (slg, clg, slg.with_suffix(".ckpt.metrics.jsonl"), scenes,
                                                  d / "report.metrics", d / "report.json")])
    assert outputs[0] == outputs[1]
    header = read_checkpoint_header(tmp_path / "r1" / "slg.ckpt")
    assert header["step"] == 3 and header["config"]["seed"] == 3
    lines = (tmp_path / "r1" / "report.metrics").read_text().splitlines()
    assert any(line.startswith("generated XZ frechet ") for line in lines)
    assert len(list((tmp_path / "r1" / "pgm").glob("*.pgm"))) == 3
    assert len((tmp_path / "r1" / "scenes.jsonl").read_text().splitlines()) == 12


def test_sample_requires_a_model(tmp_path):
    assert cli.run(["sample", "--conditions", "x", "--out", str(tmp_path / "o")]) == 2


def test_ablate_four_rows(tmp_path, config):
    corpus = tmp_path / "corpus.jsonl"
    assert cli.run(["datagen", "--config", config, "--count", "12", "--out", str(corpus)]) == 0
    out = tmp_path / "abl"
    assert cli.run(["ablate", "--config", config, "--corpus", str(corpus), "--out-dir", str(out),
                    "--max-steps", "2", "--steps", "3"]) == 0
    report = json.loads((out / "ablation.json").read_text())
    assert set(report["rows"]) == set(cli.ABLATION_ROWS) and len(report["rows"]) == 4
    table = (out / "ablation.txt").read_text().splitlines()
    assert len(table) == 2 + 4
    first = (out / "ablation.metrics").read_bytes()
    # rerun with the same seeds (reusing checkpoints) -> identical table
    assert cli.run(["ablate", "--config", config, "--corpus", str(corpus), "--out-dir", str(out),
                    "--steps", "3", "--reuse"]) == 0
    assert (out / "ablation.metrics").read_bytes() == first
