import json
import os
import socket
import subprocess
import sys

import numpy as np
import pytest

from weevilwatch.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from weevilwatch.cqcc import load_features
from weevilwatch.ingest import AudioClip, write_wav

SUBCOMMANDS = ["features", "train", "classify", "eval-detections", "map", "ingest-listen", "run-all"]


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help(name, capsys):
    with pytest.raises(SystemExit) as info:
        main([name, "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "--config" in out and "--override" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "weevilwatch", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run-all" in res.stdout


def test_single_file_features(tmp_path, capsys):
    wav = tmp_path / "a.wav"
    wav.write_bytes(write_wav(AudioClip(8000, np.random.default_rng(0).uniform(-0.3, 0.3, 8000))))
    code = main(["features", "--input", str(wav), "--csv", str(tmp_path / "a.csv"),
                 "--image", str(tmp_path / "a.png"), "--image-size", "64", "32"])
    assert code == EXIT_OK
    assert load_features(tmp_path / "a.cqcc").shape == (30, 20)
    assert (tmp_path / "a.png").exists() and (tmp_path / "a.csv").exists()
    assert "30 frames x 20 coefficients" in capsys.readouterr().out


def test_missing_wav_is_stage_error(tmp_path):
    assert main(["features", "--input", str(tmp_path / "none.wav")]) == EXIT_STAGE


def test_bad_config_exit_code(tmp_path, capsys):
    code = main(["run-all", "--override", "fusion.radius_m=-3", "--override", "detection.iou_threshold=2"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "fusion.radius_m" in err and "detection.iou_threshold" in err


def test_run_all_on_farm(farm, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run-all", "--config", str(farm["config"]), "--override", f"paths.output_dir={out}"])
    assert code == EXIT_OK
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["metrics"]["map"] == {"infested": 5, "not_infested": 15, "unknown": 0}


def test_eval_detections_only(farm, tmp_path):
    out = tmp_path / "out"
    code = main(["eval-detections", "--config", str(farm["config"]), "--override", f"paths.output_dir={out}"])
    assert code == EXIT_OK
    report = json.loads((out / "detection_report.json").read_text())
    assert report["map50"] == pytest.approx(1.0)
    assert not (out / "model.json").exists()


def test_stage_failure_exit_code(farm, tmp_path):
    bad = tmp_path / "d.txt"
    bad.write_text("space=network\nfarm palm 0.9 1 1 5 5\n")
    code = main(["eval-detections", "--config", str(farm["config"]),
                 "--override", f"paths.output_dir={tmp_path / 'out'}",
                 "--override", f"paths.detections={bad}", "--override", "detection.image_size=null"])
    assert code == EXIT_STAGE


def test_ingest_listen_subprocess(tmp_path):
    out = tmp_path / "recv.jsonl"
    env = dict(os.environ, WEEVILWATCH_LOG_LEVEL="ERROR")
    proc = subprocess.Popen(
        [sys.executable, "-m", "weevilwatch", "ingest-listen", "--port", "0", "--output", str(out)],
        stdout=subprocess.PIPE, text=True, env=env,
    )
    try:
        banner = proc.stdout.readline()
        port = int(banner.split()[2].rsplit(":", 1)[1])
        payload = (json.dumps({"device_id": "P001", "captured_at": "2023-06-01T04:00:00Z",
                               "lat": 1.0, "lon": 2.0}) + "\nbad\n").encode()
        with socket.create_connection(("127.0.0.1", port), timeout=5) as s:
            s.sendall(payload)
            s.shutdown(socket.SHUT_WR)
            reply = b""
            while chunk := s.recv(1024):
                reply += chunk
    finally:
        proc.terminate()
        proc.wait(timeout=5)
    assert reply.decode().splitlines()[0] == "OK"
    assert reply.decode().splitlines()[1].startswith("ERR")
    assert json.loads(out.read_text().splitlines()[0])["device_id"] == "P001"
