import json

import pytest

from blockprog import blocksworld as bw
from blockprog import instgen as ig
from blockprog import langreason as lr
from blockprog.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RunConfig, main

TINY = ["--epochs", "1,1,1", "--val-size", "5", "--n-samples", "2", "--enum-epochs", "1", "--parser-warmup-epochs", "0"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--count", "60", "--seed", "3", "--objects", "3..4", "--data", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data), "--out", str(out), *TINY]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def scenes(data, tmp_path_factory):
    path = tmp_path_factory.mktemp("scenes") / "scenes.jsonl"
    bw.save_scenes(path, [r.scene_I for r in ig.load_dataset(data / "dataset.jsonl")[:3]])
    return path


def test_gen_is_byte_identical_on_rerun(data, tmp_path):
    assert main(["gen", "--count", "60", "--seed", "3", "--objects", "3..4", "--data", str(tmp_path)]) == EXIT_OK
    for name in ("dataset.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen", "--count", "0"],
        ["gen", "--objects", "5..3"],
        ["gen", "--steps", "x"],
        ["train", "--stage", "4"],
        ["train", "--epochs", "1,2"],
        ["train", "--lr", "nosuchgroup=0.1"],
        ["nosuchcommand"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path):
    assert main(argv + (["--data", str(tmp_path)] if argv and argv[0] != "nosuchcommand" else [])) == EXIT_USAGE


def test_stage_two_without_stage_one_checkpoint(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--stage", "2", *TINY]) == EXIT_DATA
    assert "stage1" in capsys.readouterr().err


def test_missing_dataset_is_a_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path), *TINY]) == EXIT_DATA


def test_train_writes_tagged_checkpoints_and_archived_config(run):
    for k in (1, 2, 3):
        assert (run / f"stage{k}.ckpt.json").exists()
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["command"] == "train" and cfg["train"]["epochs"] == [1, 1, 1]
    assert RunConfig.from_dict({k: v for k, v in cfg.items() if k != "command"}).train.val_size == 5


def test_resume_reproduces_uninterrupted_run(data, run, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--stage", "1", *TINY]) == EXIT_OK
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--stage", "2..3", *TINY]) == EXIT_OK
    assert (tmp_path / "stage3.ckpt.json").read_bytes() == (run / "stage3.ckpt.json").read_bytes()


def test_config_file_is_overridden_by_flags(data, tmp_path):
    cfg = RunConfig(seed=11, data=str(data), out=str(tmp_path), stage="1").to_dict()
    cfg["train"].update(epochs=[1, 1, 1], val_size=5, n_samples=2, enum_epochs=1, parser_warmup_epochs=0, batch_size=8)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--batch-size", "4", "--seed", "12"]) == EXIT_OK
    archived = json.loads((tmp_path / "run_config.json").read_text())
    assert archived["seed"] == 12 and archived["train"]["seed"] == 12
    assert archived["train"]["batch_size"] == 4 and archived["train"]["val_size"] == 5


def test_nan_learning_rate_exits_3(data, tmp_path):
    argv = ["train", "--data", str(data), "--out", str(tmp_path), "--stage", "1", *TINY, "--lr", "action=nan"]
    assert main(argv) == EXIT_NUMERIC


def test_eval_json_has_every_bucket(data, run, capsys):
    assert main(["eval", "--data", str(data), "--checkpoint", str(run / "stage3.ckpt.json"), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)["report"]
    assert {r["bucket"] for r in report} >= {"all", "single/simple", "single/complex"}


def test_exec_prints_program_grounding_and_goals(run, scenes, tmp_path, capsys):
    argv = ["exec", "--checkpoint", str(run / "stage3.ckpt.json"), "--scene", str(scenes), "--json"]
    argv += ["--instruction", "put the red cube on the blue dice", "--render-dir", str(tmp_path), "--subgoals", str(tmp_path / "g.jsonl")]
    assert main(argv) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["program"].startswith("(")
    assert len(out["grounding"]) == len(out["subgoals"]) == len((tmp_path / "g.jsonl").read_text().splitlines())
    assert (tmp_path / "before.png").exists() and (tmp_path / "after.png").exists()


def test_exec_program_flag_bypasses_parser(run, scenes, capsys):
    scene = bw.load_scenes(scenes)[0]
    a, b = scene.objects[0], scene.objects[1]
    prog = f"(move mov_left (unique (filter (filter (scene) {a.color}) {a.shape})) (unique (filter (filter (scene) {b.color}) {b.shape})))"
    assert main(["exec", "--checkpoint", str(run / "stage3.ckpt.json"), "--scene", str(scenes), "--program", prog, "--json"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    # the barely trained concepts may pick any object; the program itself is taken verbatim
    assert out["program"] == prog
    assert [g[2] for g in out["grounding"]] == ["mov_left"]


def test_exec_bad_program_and_truncation_exit_nonzero(run, scenes, monkeypatch):
    base = ["exec", "--checkpoint", str(run / "stage3.ckpt.json"), "--scene", str(scenes)]
    assert main(base + ["--program", "(move mov_top scene)"]) == EXIT_DATA
    monkeypatch.setattr(lr, "MAX_DECODE", 2)
    assert main(base + ["--instruction", "put the red cube on the blue dice"]) == EXIT_DATA


def test_repl_transcript_replays_identically(run, scenes, tmp_path, capsys):
    script = tmp_path / "in.txt"
    script.write_text("put the red cube on the blue dice\n:bogus\n:reset\nput the lego behind the cube\n:quit\nignored\n")
    base = ["repl", "--checkpoint", str(run / "stage3.ckpt.json"), "--scene", str(scenes)]
    assert main(base + ["--script", str(script), "--log", str(tmp_path / "log.txt"), "--render-dir", str(tmp_path / "r")]) == EXIT_OK
    first = capsys.readouterr().out
    assert "scene reset" in first and "unknown directive :bogus" in first
    assert (tmp_path / "log.txt").read_text().splitlines()[-1] == ":quit"
    assert (tmp_path / "r" / "turn_001.png").exists()
    assert main(base + ["--script", str(tmp_path / "log.txt"), "--render-dir", str(tmp_path / "r2")]) == EXIT_OK
    assert capsys.readouterr().out == first.replace(str(tmp_path / "r"), str(tmp_path / "r2"))


def test_render_writes_png_and_bad_index_is_data_error(scenes, tmp_path):
    assert main(["render", "--scene", str(scenes), "--out", str(tmp_path / "x.png")]) == EXIT_OK
    assert (tmp_path / "x.png").read_bytes()[:4] == b"\x89PNG"
    assert main(["render", "--scene", str(scenes), "--index", "9", "--out", str(tmp_path / "y.png")]) == EXIT_DATA
