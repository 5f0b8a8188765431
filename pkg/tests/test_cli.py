import json
import subprocess
import sys

import numpy as np
import pytest

from bevcomm.cli import main
from bevcomm.report import RunReport, aggregate, load_run_csv

SMALL_INI = """\
[scenario]
height = 16
width = 32
objects = 4
object_height_max = 4
object_width_max = 8
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return path


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_writes_reports(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(small_config), "--frames", "10", "--out", str(out)]) == 0
    assert {"frames.csv", "vehicles.csv", "report.json", "config.ini"} <= set(tree(out))
    assert len((out / "frames.csv").read_text().splitlines()) == 11
    assert len((out / "vehicles.csv").read_text().splitlines()) == 31
    report = RunReport.from_json((out / "report.json").read_text())
    assert report.frames == 10 and report.grid == (64, 16, 32)
    assert aggregate(load_run_csv(out), report.grid, report.fingerprint) == report
    assert "10 frames" in capsys.readouterr().out
    assert not list(out.glob(".*"))  # no temp files left behind


def test_same_invocation_is_byte_identical(small_config, tmp_path, monkeypatch):
    outs = []
    for k, threads in enumerate(("1", "4")):
        monkeypatch.setenv("EFFICOMM_THREADS", threads)
        out = tmp_path / f"run{k}"
        assert main(["run", str(small_config), "--frames", "6", "--seed", "3", "--out", str(out), "--trace", "--dump-payloads"]) == 0
        outs.append(tree(out))
    assert outs[0] == outs[1]
    assert any(name.startswith("payloads/") for name in outs[0])


def test_resolved_config_reproduces_the_run(small_config, tmp_path):
    first = tmp_path / "a"
    main(["run", str(small_config), "--frames", "3", "--out", str(first)])
    again = tmp_path / "b"
    assert main(["run", str(first / "config.ini"), "--out", str(again)]) == 0
    assert tree(first)["report.json"] == tree(again)["report.json"]


def test_zero_frames_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--frames", "0", "--out", str(tmp_path / "x")]) == 1
    assert "frames" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_config_errors_exit_one(tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.ini"
    bad.write_text("[selective]\nthreshhold = 0.2\n")
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "selective.threshhold" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "o")]) == 1
    monkeypatch.setenv("EFFICOMM_THREADS", "lots")
    assert main(["run", "--frames", "1", "--out", str(tmp_path / "o")]) == 1
    assert "EFFICOMM_THREADS" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main(["run"]) == 1
    assert main(["launch"]) == 1
    assert main(["run", "--frames", "ten", "--out", "x"]) == 1


def test_unwritable_output_exits_two(small_config, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", str(small_config), "--frames", "1", "--out", str(blocker)]) == 2
    assert "error" in capsys.readouterr().err


def test_inspect(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", str(small_config), "--frames", "4", "--out", str(out), "--trace"])
    capsys.readouterr()
    assert main(["inspect", str(out), "--frame", "2"]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    assert lines[0].startswith("frame 2 ")
    gates = [float(g) for g in lines[1].split(":")[1].split()]
    assert len(gates) == 3 and abs(sum(gates) - 1.0) <= 0.001 + 1e-12
    vehicle_lines = [ln for ln in lines if ln.startswith("vehicle")]
    assert len(vehicle_lines) == 3
    ego = [ln for ln in vehicle_lines if "(ego" in ln]
    assert len(ego) == 1 and ego[0].endswith("transmitted: 0 bytes")
    for ln in vehicle_lines:
        k = float(ln.split(" k=")[1].split()[0])
        assert 0.1 <= k <= 0.95
    # stable layout: the same frame prints the same text
    main(["inspect", str(out), "--frame", "2"])
    assert capsys.readouterr().out == text


def test_inspect_errors(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", str(small_config), "--frames", "2", "--out", str(out)])
    assert main(["inspect", str(out), "--frame", "0"]) == 1  # no trace recorded
    main(["run", str(small_config), "--frames", "2", "--out", str(out), "--trace"])
    assert main(["inspect", str(out), "--frame", "5"]) == 1
    assert "frame" in capsys.readouterr().err


def test_codec_round_trip_json_and_npy(tmp_path, capsys):
    rng = np.random.default_rng(0)
    values = rng.standard_normal((3, 4, 5)) * (rng.random((4, 5)) < 0.4)
    np.save(tmp_path / "dense.npy", values)
    (tmp_path / "dense.json").write_text(json.dumps({"values": values.tolist()}))
    expected = values.astype(np.float32).astype(np.float64)
    for src in ("dense.npy", "dense.json"):
        payload = tmp_path / f"{src}.efcm"
        assert main(["codec", "encode", str(tmp_path / src), str(payload)]) == 0
        assert main(["codec", "decode", str(payload), str(tmp_path / "back.npy")]) == 0
        assert np.array_equal(np.load(tmp_path / "back.npy"), expected)
        assert main(["codec", "decode", str(payload), str(tmp_path / "back.json")]) == 0
        doc = json.loads((tmp_path / "back.json").read_text())
        assert np.array_equal(np.array(doc["values"]), expected)
        assert (doc["channels"], doc["height"], doc["width"]) == (3, 4, 5)


def test_codec_empty_tensor_and_errors(tmp_path, capsys):
    np.save(tmp_path / "zero.npy", np.zeros((2, 3, 3)))
    assert main(["codec", "encode", str(tmp_path / "zero.npy"), str(tmp_path / "zero.efcm")]) == 0
    assert len((tmp_path / "zero.efcm").read_bytes()) == 17

    values = np.ones((2, 3, 3))
    np.save(tmp_path / "ones.npy", values)
    main(["codec", "encode", str(tmp_path / "ones.npy"), str(tmp_path / "ones.efcm")])
    data = (tmp_path / "ones.efcm").read_bytes()
    (tmp_path / "cut.efcm").write_bytes(data[:30])
    capsys.readouterr()
    assert main(["codec", "decode", str(tmp_path / "cut.efcm"), str(tmp_path / "x.npy")]) == 2
    assert "offset 30" in capsys.readouterr().err
    (tmp_path / "magic.efcm").write_bytes(b"XFCM" + data[4:])
    assert main(["codec", "decode", str(tmp_path / "magic.efcm"), str(tmp_path / "x.npy")]) == 2
    assert "offset 0" in capsys.readouterr().err

    np.save(tmp_path / "flat.npy", np.zeros(5))
    assert main(["codec", "encode", str(tmp_path / "flat.npy"), str(tmp_path / "f.efcm")]) == 2
    assert main(["codec", "encode", str(tmp_path / "nothing.npy"), str(tmp_path / "f.efcm")]) == 2


def test_report_compare(small_config, tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    main(["run", str(small_config), "--frames", "3", "--out", str(a)])
    main(["run", str(small_config), "--frames", "3", "--seed", "1", "--out", str(b)])
    main(["run", str(small_config), "--frames", "2", "--out", str(c)])
    capsys.readouterr()
    assert main(["report", "compare", str(a), str(b / "report.json")]) == 0
    table = capsys.readouterr().out
    assert table.startswith("metric") and "bandwidth_mean_mb" in table and "%" in table
    assert main(["report", "compare", str(a), str(c)]) == 2
    assert "frame counts differ" in capsys.readouterr().err
    assert main(["report", "compare", str(a), str(tmp_path / "missing")]) == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "bevcomm", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for command in ("run", "codec", "inspect", "report"):
        assert command in done.stdout
