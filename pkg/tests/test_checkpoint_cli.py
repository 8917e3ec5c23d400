import json

import numpy as np
import pytest

from uemprompt import checkpoint as ckpt_io
from uemprompt import experiment
from uemprompt.cli import main
from uemprompt.experiment import RunLockedError

from helpers import tiny_config, tiny_flags


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = experiment.train(tiny_config(), out)
    return out, res


def test_run_directory_contents(trained):
    out, res = trained
    assert {p.name for p in out.iterdir()} >= {"config.ini", "vocab.txt", "model.ckpt", "metrics.jsonl", "timing.jsonl"}
    assert not (out / ".lock").exists()
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    train_steps = [r["step"] for r in recs if r["split"] == "train"]
    assert train_steps == sorted(train_steps) == [5, 10, 15, 20]
    assert recs[-1]["split"] == "dev" and "f1" in recs[-1]
    assert res.prompt_checks == 20 and res.step == 20


def test_checkpoint_byte_round_trip(trained, tmp_path):
    out, _ = trained
    raw = (out / "model.ckpt").read_bytes()
    ck = ckpt_io.from_bytes(raw)
    assert ckpt_io.to_bytes(ck) == raw
    ckpt_io.save(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == raw
    again = ckpt_io.load(tmp_path / "again.ckpt")
    assert all(np.array_equal(again.params[k].data, ck.params[k].data) for k in ck.params)
    assert again.step == 20 and again.rng_state == {"algorithm": "PCG64", "seed": 0}
    assert all(np.array_equal(again.opt.m[k], ck.opt.m[k]) for k in ck.opt.m)


def test_checkpoint_load_from_run_dir(trained):
    out, _ = trained
    assert ckpt_io.load(out).step == 20


def test_corrupt_checkpoints_are_rejected(trained, tmp_path):
    out, _ = trained
    raw = (out / "model.ckpt").read_bytes()
    for name, data in {"magic": b"XX" + raw[2:], "truncated": raw[: len(raw) // 2], "header": raw[:11] + b"abc\n" + raw[15:]}.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.load(tmp_path / name)


def test_shape_validation_against_config(trained):
    out, _ = trained
    ck = ckpt_io.load(out)
    other = experiment.init_params(tiny_config(**{"lm.d_mlp": 16}), len(ck.vocab))
    with pytest.raises(ckpt_io.CheckpointError, match="shape"):
        ckpt_io.validate_shapes(ck, other)
    fewer = experiment.init_params(tiny_config(**{"uem.layers": 2}), len(ck.vocab))
    with pytest.raises(ckpt_io.CheckpointError, match="missing"):
        ckpt_io.validate_shapes(ck, fewer)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_config(**{"train.steps": 120, "train.log_every": 10, "train.eval_every": 40})
    full = experiment.train(cfg, tmp_path / "full")
    part = experiment.train(cfg, tmp_path / "part", stop_at=50)
    rest = experiment.train(cfg, tmp_path / "part", resume=tmp_path / "part" / "model.ckpt")
    assert part.losses + rest.losses == full.losses
    for f in ("model.ckpt", "metrics.jsonl"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes()


def test_resume_rejects_changed_config(trained, tmp_path):
    out, _ = trained
    with pytest.raises(ckpt_io.CheckpointError, match="different config"):
        experiment.train(tiny_config(**{"train.lr": 0.01}), tmp_path / "x", resume=out)


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = tiny_config(**{"train.eval_every": 10})
    experiment.train(cfg, tmp_path / "a")
    experiment.train(cfg, tmp_path / "b")
    for f in ("model.ckpt", "metrics.jsonl", "vocab.txt", "config.ini"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_lock_prevents_concurrent_runs(tmp_path):
    (tmp_path / "r").mkdir()
    (tmp_path / "r" / ".lock").write_text("123")
    with pytest.raises(RunLockedError):
        experiment.train(tiny_config(), tmp_path / "r")
    assert main(["train", "--out", str(tmp_path / "r"), *tiny_flags()]) == 2


def test_evaluate_model_and_baseline(trained):
    out, _ = trained
    rep = experiment.evaluate_model(out, "dev")
    assert rep.meta["mode"] == "embedding" and rep.meta["p"] == 4 and rep.meta["k"] == 2
    assert rep == experiment.evaluate_model(out / "model.ckpt", "dev")
    with pytest.raises(ckpt_io.CheckpointError):
        experiment.evaluate_model(out, "dev", mode="text")
    base = experiment.evaluate_baseline(tiny_config(), "dev")
    assert base.meta["mode"] == "baseline" and 0.0 <= base.f1 <= 1.0


def test_text_mode_trains_and_evaluates(tmp_path):
    cfg = tiny_config(**{"train.mode": "text", "lm.max_input": 200, "train.steps": 5})
    experiment.train(cfg, tmp_path / "t")
    ck = ckpt_io.load(tmp_path / "t")
    assert not any(k.startswith("uem.") for k in ck.params)
    assert experiment.evaluate_model(tmp_path / "t", "dev", mode="text").meta["mode"] == "text"


def test_text_mode_overflow_is_a_config_error(tmp_path):
    cfg = tiny_config(**{"train.mode": "text", "lm.max_input": 20})
    assert main(["train", "--out", str(tmp_path / "t"), *tiny_flags(**{"train.mode": "text", "lm.max_input": 20})]) == 2


def test_ablation_sweep(tmp_path):
    cfg = tiny_config(**{"train.steps": 10})
    rows = experiment.ablate(cfg, "data.p", [2, 4, 8], tmp_path / "abl")
    assert [r.value for r in rows] == [2, 4, 8] and all(r.report is not None for r in rows)
    lines = [json.loads(x) for x in (tmp_path / "abl" / "ablation.jsonl").read_text().splitlines()]
    assert len(lines) == 3 and all(isinstance(x["f1"], float) for x in lines)
    assert "data.p=8" in (tmp_path / "abl" / "ablation.txt").read_text()


def test_sweep_of_one_equals_single_run(tmp_path):
    cfg = tiny_config(**{"train.steps": 10})
    rows = experiment.ablate(cfg, "uem.layers", [1], tmp_path / "abl")
    experiment.train(cfg, tmp_path / "single")
    assert rows[0].report == experiment.evaluate_model(tmp_path / "single", "dev")
    assert (tmp_path / "abl" / "point_00" / "model.ckpt").read_bytes() == (tmp_path / "single" / "model.ckpt").read_bytes()


def test_sweep_failure_is_recorded_and_sweep_continues(tmp_path):
    cfg = tiny_config(**{"train.steps": 5})
    rows = experiment.ablate(cfg, "lm.heads", [2, 3, 4], tmp_path / "abl")
    assert rows[0].report is not None and rows[2].report is not None
    assert rows[1].report is None and "divisible" in rows[1].error


# --- CLI --------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    shards = tmp_path / "shards"
    assert main(["synth-data", "--out", str(shards), *tiny_flags()]) == 0
    assert (shards / "users.jsonl").exists()
    flags = tiny_flags(**{"data.source": "shards", "data.shards": str(shards)})
    assert main(["train", "--out", str(tmp_path / "run"), *flags]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run"), "--out", str(tmp_path / "rep.jsonl")]) == 0
    rep = json.loads((tmp_path / "rep.jsonl").read_text())
    assert rep["meta"]["mode"] == "embedding"
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run"), "--table"]) == 0
    assert "Emb. Hist. 4" in capsys.readouterr().out
    assert main(["baseline", *flags, "--table"]) == 0
    assert "Counting baseline" in capsys.readouterr().out
    assert main(["cost-report", *flags, "--out", str(tmp_path / "cost.json"), "--curve", str(tmp_path / "curve.txt")]) == 0
    cost = json.loads((tmp_path / "cost.json").read_text())
    assert cost["reference_scenario"]["encoder_ratio"] == 25600
    n, f = (tmp_path / "curve.txt").read_text().splitlines()[1].split()
    assert (int(n), int(f)) == (2, 4 * 1 * 2 * 2 * 8)


def test_cli_config_file_and_overrides(tmp_path):
    from uemprompt import config

    (tmp_path / "run.ini").write_text(config.dumps(tiny_config()))
    assert main(["train", "--config", str(tmp_path / "run.ini"), "--train-steps", "3", "--out", str(tmp_path / "r")]) == 0
    assert config.load(tmp_path / "r" / "config.ini").train.steps == 3


def test_cli_ablate_and_sweep_validation(tmp_path):
    flags = tiny_flags(**{"train.steps": 3})
    assert main(["ablate", "--sweep", "p=2,4", "--out", str(tmp_path / "a"), *flags]) == 0
    assert len((tmp_path / "a" / "ablation.jsonl").read_text().splitlines()) == 2
    assert main(["ablate", "--sweep", "uem_layers=1,x", "--out", str(tmp_path / "b"), *flags]) == 2
    assert not (tmp_path / "b").exists()
    assert main(["ablate", "--sweep", "p=", "--out", str(tmp_path / "c"), *flags]) == 2


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_cli_exit_codes(tmp_path):
    assert main(["train", "--out", str(tmp_path / "x"), "--uem-s", "32"]) == 2
    assert not (tmp_path / "x").exists()
    assert main(["train", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "nope.ini")]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope")]) == 2
    assert main(["train", "--out", str(tmp_path / "y"), *tiny_flags(**{"data.source": "shards", "data.shards": str(tmp_path / "none")})]) == 3
    assert main(["train", "--out", str(tmp_path / "z"), *tiny_flags(**{"train.lr": 1e12, "train.steps": 30})]) == 4
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,movie_id,rating,timestamp\n1,1\n")
    (tmp_path / "m.csv").write_text("movie_id,title,genres\n1,Heat,Action\n")
    assert main(["ingest", "--ratings", str(bad), "--movies", str(tmp_path / "m.csv"), "--out", str(tmp_path / "s")]) == 3


def test_cli_ingest(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("user_id,movie_id,rating,timestamp\n" + "".join(f"1,{i % 3 + 1},4.0,{i}\n" for i in range(25)))
    (tmp_path / "m.csv").write_text("movie_id,title,genres\n1,Heat,Action|Crime\n2,Up,Children\n3,Alien,Horror|Sci-Fi\n")
    (tmp_path / "d.csv").write_text("title,description\nHeat,A heist.\n")
    code = main(["ingest", "--ratings", str(tmp_path / "r.csv"), "--movies", str(tmp_path / "m.csv"), "--descriptions", str(tmp_path / "d.csv"), "--out", str(tmp_path / "s")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["users"] == 1 and summary["missing_description"] == 2
    from uemprompt.data import read_shards

    ds = read_shards(tmp_path / "s")
    assert len(ds.users[0].items) == 25 and ds.source == "movielens"
