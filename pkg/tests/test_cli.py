import csv
import json

import pytest

from pathdiff import cli, verify
from pathdiff.checkpoint import read_tensors

TINY = ["--set", "blocks=1", "--set", "d=8", "--set", "d_y=8", "--set", "space_experts=2",
        "--set", "time_experts=2", "--set", "expert_hidden=8", "--set", "gate_hidden=8",
        "--set", "d_t=8", "--set", "edge_channels=2", "--batch-size", "2", "--warmup", "1"]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--count", "6", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_content_hash_is_git_blob_id():
    # `git hash-object` of an empty file and of "hello\n"
    assert cli.content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert cli.content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_gen_data_zero_count(tmp_path):
    out = tmp_path / "empty"
    assert cli.main(["gen-data", "--count", "0", "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    assert (out / "dataset.jsonl").read_text() == ""


def test_gen_data_same_seed_same_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["gen-data", "--count", "5", "--seed", "9", "--out", str(d), "--images", "2"]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] and ma["seed"] == 9
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
    assert (a / "images" / "scene_0001.ppm").read_bytes() == (b / "images" / "scene_0001.ppm").read_bytes()


def test_train_one_step_then_resume(tmp_path, data_dir):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--steps", "1"] + TINY) == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["step", "L", "L_denoise", "L_edge", "lr"] and rows[1][0] == "1"
    assert read_tensors(out / "final.pdc")["opt.step"] == 1
    out2 = tmp_path / "more"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out2), "--resume", str(out / "final.pdc"),
                     "--steps", "2", "--batch-size", "2", "--warmup", "1", "--checkpoint-every", "1"]) == 0
    steps = [r[0] for r in csv.reader(open(out2 / "metrics.csv"))][1:]
    assert steps == ["2", "3"]
    assert (out2 / "ckpt_000003.pdc").exists()
    assert read_tensors(out2 / "final.pdc")["opt.step"] == 3


def test_train_rerun_is_bit_identical(tmp_path, data_dir):
    for name in ("x", "y"):
        assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / name), "--steps", "2"]
                        + TINY) == 0
    assert (tmp_path / "x" / "final.pdc").read_bytes() == (tmp_path / "y" / "final.pdc").read_bytes()


def test_config_file_and_flag_override(tmp_path, data_dir):
    cfg = tmp_path / "c.txt"
    cfg.write_text("steps = 5\nlr = 0.5\n")
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg), "--steps", "1"]
                    + TINY) == 0
    text = (out / "config.txt").read_text()
    assert "steps = 1\n" in text and "lr = 0.5\n" in text


def test_bad_config_lists_every_problem(tmp_path, data_dir, capsys):
    code = cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--set", "bogus=1",
                     "--set", "d=0", "--lr", "-1"] + TINY[:2])
    assert code == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "lr" in err and "d must be positive" in err


def test_sample_and_trace(tmp_path, data_dir):
    run = tmp_path / "run"
    cli.main(["train", "--data", str(data_dir), "--out", str(run), "--steps", "1"] + TINY)
    ck = str(run / "final.pdc")
    out = tmp_path / "s"
    assert cli.main(["sample", "--checkpoint", ck, "--caption", "red circle", "--out", str(out),
                     "--sample-steps", "3", "--height", "16", "--width", "16"]) == 0
    assert (out / "sample.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")
    tr = tmp_path / "t"
    assert cli.main(["trace", "--checkpoint", ck, "--out", str(tr), "--concepts", "red,blue", "--per-concept", "5",
                     "--folds", "2", "--height", "16", "--width", "16", "--sample-steps", "2"]) == 0
    for name in ("traces.csv", "routes.csv", "time_table.csv", "report.txt", "manifest.json"):
        assert (tr / name).exists()
    assert cli.main(["trace", "--checkpoint", ck, "--out", str(tr), "--concepts", "circle"]) == 2


def test_ablate_alpha_rows(tmp_path, data_dir):
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--knob", "alpha", "--data", str(data_dir), "--out", str(out), "--steps", "1",
                     "--eval-prompts", "1", "--sample-steps", "2", "--height", "16", "--width", "16"] + TINY)
    assert code == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0] == ["value", "L_denoise_final", "color_alignment", "seconds_per_step"]
    assert [r[0] for r in rows[1:]] == ["0.1", "0.2", "0.4"]


def test_guidance_default_values():
    from pathdiff.ablation import DEFAULT_VALUES

    assert DEFAULT_VALUES["guidance"] == (1.5, 3.0, 4.5, 6.0, 7.5, 9.0)


def test_verify_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["verify", "--suite", "oracle", "--out", str(tmp_path / "v")]) == 0
    assert (tmp_path / "v" / "verify.txt").read_text().startswith("PASS")
    monkeypatch.setitem(verify.CHECKS, "oracle", [("always fails", lambda: (False, "x"))])
    assert cli.main(["verify", "--suite", "oracle", "--out", str(tmp_path / "w")]) == 1


def test_io_errors(tmp_path):
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "none.pdc"), "--caption", "red", "--out",
                     str(tmp_path / "s")]) == 3
    bad = tmp_path / "bad.pdc"
    bad.write_bytes(b"PDIFFCKP\x01\x00")
    assert cli.main(["sample", "--checkpoint", str(bad), "--caption", "red", "--out", str(tmp_path / "s")]) == 3


def test_unknown_flag_and_knob(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--count", "1", "--out", str(tmp_path), "--colour", "red"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["ablate", "--knob", "depth", "--data", str(tmp_path), "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--cou", "1", "--out", str(tmp_path)])
    assert exc.value.code == 2


@pytest.mark.parametrize("command,flags", [
    ("gen-data", ["--count", "--seed", "--out", "--divisor", "--n-y", "--images"]),
    ("train", ["--data", "--out", "--resume", "--config", "--set", "--steps", "--seed", "--lr", "--batch-size",
               "--warmup", "--checkpoint-every"]),
    ("sample", ["--checkpoint", "--caption", "--out", "--seed", "--sample-steps", "--sampler", "--spacing",
                "--guidance", "--height", "--width"]),
    ("trace", ["--checkpoint", "--out", "--concepts", "--per-concept", "--folds", "--reduce", "--seed"]),
    ("ablate", ["--knob", "--values", "--data", "--out", "--checkpoint", "--eval-prompts"]),
    ("verify", ["--suite", "--out"]),
])
def test_help_lists_every_flag(command, flags, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for f in flags:
        assert f in text
