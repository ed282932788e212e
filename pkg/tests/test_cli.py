import json

import pytest

from dcpt.checkpoint import read_entries
from dcpt.cli import main
from dcpt.config import ModelConfig
from dcpt.keyframes import FrameIndexReport
from dcpt.metrics import EvalReport

import streams as S
from conftest import make_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_corpus(root / "corpus", n_real=4, n_fake=4, n_frames=6, key_every=3, splits=lambda n, label: "test" if n % 4 == 3 else "train")
    cfg = root / "tiny.json"
    cfg.write_text(ModelConfig.tiny().to_json())
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_keyframes_command(tmp_path):
    src = tmp_path / "clip.mp4"
    src.write_bytes(S.mp4(10, [1, 5, 9]))
    out = tmp_path / "clip.jsonl"
    assert run("keyframes", "--input", src, "--out", out) == 0
    rep = FrameIndexReport.from_jsonl(out.read_text())
    assert rep.keyframes == [0, 4, 8]
    h264 = tmp_path / "clip.h264"
    h264.write_bytes(S.annexb_from_kinds(S.GOP10_KINDS))
    assert run("keyframes", "--input", h264, "--format", "annexb", "--out", out) == 0
    assert FrameIndexReport.from_jsonl(out.read_text()).keyframes == [0, 9]


def test_keyframes_data_errors(tmp_path, caplog):
    bad = tmp_path / "notes.txt"
    bad.write_text("hello")
    assert run("keyframes", "--input", bad, "--out", tmp_path / "o") == 2
    assert run("keyframes", "--input", tmp_path / "missing.mp4", "--out", tmp_path / "o") == 2
    assert "unrecognised" in caplog.text


def test_usage_errors(capsys):
    assert run() == 1
    assert run("keyframes", "--bogus") == 1
    assert run("train", "--manifest", "m", "--out", "o", "--ablation", "everything") == 1
    assert run("train", "--manifest", "m", "--out", "o", "--depths", "4,x,6") == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero():
    assert run("--help") == 0


@pytest.fixture(scope="module")
def manifest(workspace):
    out = workspace / "k_plus_n.jsonl"
    code = run(
        "manifest", "--frames", workspace / "corpus", "--labels", workspace / "corpus" / "labels.json",
        "--keyframes", str(workspace / "corpus" / "reports" / "*.jsonl"), "--regime", "K_plus_N",
        "--ratio", "3", "--out", out,
    )
    assert code == 0
    return out


def test_manifest_command(manifest):
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert {r["frame_kind"] for r in rows} == {"I", "nonI"}
    assert {r["split"] for r in rows} == {"train", "test"}


def test_manifest_no_reports(workspace, tmp_path):
    code = run(
        "manifest", "--frames", workspace / "corpus", "--labels", workspace / "corpus" / "labels.json",
        "--keyframes", str(tmp_path / "*.jsonl"), "--regime", "K", "--out", tmp_path / "m.jsonl",
    )
    assert code == 2


@pytest.fixture(scope="module")
def checkpoint(workspace, manifest):
    out = workspace / "model.dcpt"
    code = run("train", "--manifest", manifest, "--config", workspace / "tiny.json", "--epochs", 2, "--batch-size", 8, "--seed", 3, "--out", out)
    assert code == 0
    return out


def test_train_outputs(checkpoint):
    assert checkpoint.exists()
    log = checkpoint.with_suffix(".loss.jsonl")
    assert [json.loads(line)["epoch"] for line in log.read_text().splitlines()] == [0, 1]
    assert checkpoint.with_suffix(".loss.png").stat().st_size > 0


def test_seed_env_override(workspace, manifest, tmp_path, monkeypatch):
    a, b = tmp_path / "a.dcpt", tmp_path / "b.dcpt"
    common = ["train", "--manifest", manifest, "--config", workspace / "tiny.json", "--epochs", 1, "--no-figures"]
    monkeypatch.setenv("DCPT_SEED", "3")
    assert run(*common, "--seed", 99, "--out", a) == 0
    monkeypatch.delenv("DCPT_SEED")
    assert run(*common, "--seed", 3, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_depths_and_ablation(workspace, manifest, tmp_path):
    out = tmp_path / "shallow.dcpt"
    assert run("train", "--manifest", manifest, "--config", workspace / "tiny.json", "--depths", "4,4,6", "--epochs", 1, "--no-figures", "--out", out) == 0
    cfg, entries = read_entries(out.read_bytes())
    assert cfg.phase_depths == [4, 4, 6]
    assert sum(n.endswith(".norm1.gamma") for n, _ in entries) == 14

    out = tmp_path / "vanilla.dcpt"
    assert run("train", "--manifest", manifest, "--config", workspace / "tiny.json", "--ablation", "vanilla", "--epochs", 1, "--no-figures", "--out", out) == 0
    cfg, entries = read_entries(out.read_bytes())
    assert cfg.ablation == "vanilla"
    assert not any("pools" in n or n.endswith("theta") or ".qkv.q.conv" in n for n, _ in entries)


def test_eval_command(workspace, manifest, checkpoint):
    report = workspace / "report.json"
    assert run("eval", "--manifest", manifest, "--model", checkpoint, "--report", report) == 0
    rep = EvalReport.from_json(report.read_text())
    assert 0 <= rep.acc <= 1 and 0 <= rep.auc <= 1
    assert rep.n_real > 0 and rep.n_fake > 0
    assert report.with_suffix(".roc.png").stat().st_size > 0


def test_eval_empty_manifest(workspace, checkpoint, tmp_path, caplog):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run("eval", "--manifest", empty, "--model", checkpoint, "--report", tmp_path / "r.json") == 2
    assert "is empty" in caplog.text


def test_eval_bad_checkpoint(manifest, tmp_path):
    bad = tmp_path / "bad.dcpt"
    bad.write_bytes(b"XXXX" + b"\x00" * 32)
    assert run("eval", "--manifest", manifest, "--model", bad, "--report", tmp_path / "r.json") == 2


def test_gradcam_command(workspace, checkpoint, tmp_path):
    image = next((workspace / "corpus" / "videos" / "fake00").glob("*.png"))
    out = tmp_path / "heat.png"
    overlay = tmp_path / "overlay.png"
    assert run("gradcam", "--model", checkpoint, "--image", image, "--layer", 4, "--class", 1, "--overlay", overlay, "--out", out) == 0
    from PIL import Image

    with Image.open(out) as im:
        assert im.size == (32, 32) and im.mode == "L"
    assert out.with_suffix(".pgm").exists()
    assert overlay.stat().st_size > 0


def test_gradcam_bad_layer(checkpoint, workspace, tmp_path):
    image = next((workspace / "corpus" / "videos" / "fake00").glob("*.png"))
    assert run("gradcam", "--model", checkpoint, "--image", image, "--layer", 9, "--out", tmp_path / "h.png") == 2
