import json
import subprocess
import sys

import pytest

from searchtrack.cli import main
from searchtrack.scenegen import SceneConfig, static_preset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated static sequence, a briefly trained model and its tracking output."""
    root = tmp_path_factory.mktemp("cli")
    cfg = static_preset(seed=3, width=64, height=64, size_range=(16.0, 20.0), length=8)
    (root / "cfg.json").write_text(cfg.to_json())
    assert main(["gen", "--config", str(root / "cfg.json"), "--out", str(root / "seq")]) == 0
    assert main(["train", "--data", str(root / "seq"), "--epochs", "1", "--pairs-per-epoch", "4",
                 "--out", str(root / "m.stck")]) == 0
    return root


def test_gen_layout(workspace):
    seq = workspace / "seq"
    assert len(list((seq / "img").glob("*.ppm"))) == 8
    assert (seq / "gt.csv").read_text().splitlines()[0].endswith(",1,-1,-1,-1")
    assert SceneConfig.from_json(seq / "config.json").length == 8


def test_gen_many(tmp_path):
    (tmp_path / "c.json").write_text(SceneConfig(length=2, seed=7).to_json())
    assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d"),
                 "--num-sequences", "3"]) == 0
    seeds = [SceneConfig.from_json(tmp_path / "d" / f"seq{i:04d}" / "config.json").seed for i in range(3)]
    assert seeds == [7, 8, 9]


def test_track_eval_viz(workspace, capsys):
    w = workspace
    assert main(["track", "--model", str(w / "m.stck"), "--data", str(w / "seq"), "--out", str(w / "r.csv")]) == 0
    assert main(["eval", "--gt", str(w / "seq" / "gt.csv"), "--results", str(w / "r.csv"),
                 "--report", str(w / "report.json")]) == 0
    report = json.loads((w / "report.json").read_text())
    assert set(report) == {"mota", "idf1", "idsw", "fp", "fn", "hota_at_0_5", "deta_at_0_5", "assa_at_0_5"}
    assert main(["viz", "--data", str(w / "seq"), "--results", str(w / "r.csv"), "--out", str(w / "viz")]) == 0
    assert len(list((w / "viz").glob("*.ppm"))) == 8


def test_no_motion_same_schema(workspace):
    w = workspace
    for flag, name in (([], "a"), (["--no-motion"], "b")):
        assert main(["track", "--model", str(w / "m.stck"), "--data", str(w / "seq"),
                     "--out", str(w / f"{name}.csv")] + flag) == 0
        assert main(["eval", "--gt", str(w / "seq" / "gt.csv"), "--results", str(w / f"{name}.csv"),
                     "--report", str(w / f"{name}.json")]) == 0
    a = json.loads((w / "a.json").read_text())
    b = json.loads((w / "b.json").read_text())
    assert a.keys() == b.keys()


def test_dump_responses(workspace):
    w = workspace
    d = w / "resp"
    assert main(["track", "--model", str(w / "m.stck"), "--data", str(w / "seq"), "--out", str(w / "r2.csv"),
                 "--dump-responses", str(d)]) == 0
    for p in d.glob("*.pgm"):
        assert p.read_bytes().startswith(b"P5\n16 16\n255\n")


def test_eval_frame_mismatch(workspace, tmp_path, capsys):
    bad = tmp_path / "r.csv"
    bad.write_text("99,1,0,0,10,10,0.9,-1,-1,-1\n")
    assert main(["eval", "--gt", str(workspace / "seq" / "gt.csv"), "--results", str(bad)]) == 2
    assert "frame" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["eval", "--gt", str(tmp_path / "nope.csv"), "--results", str(tmp_path / "x.csv")]) == 2
    assert "nope.csv" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero():
    proc = subprocess.run([sys.executable, "-m", "searchtrack.cli", "eval", "--gt", "a", "--results", "b", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "--bogus" in proc.stderr


def test_missing_required_argument(capsys):
    assert main(["track", "--model", "m.stck"]) == 1
    assert "--data" in capsys.readouterr().err


def test_bad_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"width": 100, "size_range": [8, 200]}))
    assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err
