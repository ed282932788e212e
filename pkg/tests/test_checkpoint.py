import struct

import numpy as np
import pytest

from dcpt.checkpoint import (
    MAGIC,
    ArchitectureMismatchError,
    BadMagicError,
    CheckpointError,
    TruncatedCheckpointError,
    VersionError,
    dumps,
    load_checkpoint,
    load_model,
    read_entries,
    save_checkpoint,
)
from dcpt.config import ModelConfig
from dcpt.tensor import Tensor
from dcpt.transformer import DeepfakeDetector, cross_entropy


def trained_tiny(seed=0, **kw):
    model = DeepfakeDetector(ModelConfig.tiny(**kw), seed=seed)
    x = np.random.default_rng(seed).random((4, 3, 32, 32)).astype(np.float32)
    cross_entropy(model(Tensor(x)), [0, 1, 0, 1]).backward()
    for p in model.parameters():
        p.data -= 0.01 * p.grad
    return model, x


def test_round_trip_bitwise(tmp_path):
    model, x = trained_tiny()
    model.eval()
    before = model(x).data.copy()
    path = tmp_path / "m.dcpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg
    assert not back.training
    np.testing.assert_array_equal(back(x).data, before)
    for (na, a), (nb, b) in zip(model.named_state(), back.named_state()):
        assert na == nb
        np.testing.assert_array_equal(getattr(a, "data", a), getattr(b, "data", b))
    assert dumps(back) == path.read_bytes()


def test_layout_header():
    model, _ = trained_tiny()
    blob = dumps(model)
    assert blob[:4] == MAGIC
    version, n = struct.unpack("<IQ", blob[4:16])
    assert version == 1
    cfg = blob[16 : 16 + n].decode("utf-8")
    assert '"lambda"' in cfg and '"phase_depths"' in cfg
    (name_len,) = struct.unpack("<I", blob[16 + n : 20 + n])
    name = blob[20 + n : 20 + n + name_len].decode()
    assert name == next(model.named_state())[0]


def test_entries_include_running_stats():
    model, _ = trained_tiny()
    _, entries = read_entries(dumps(model))
    names = [n for n, _ in entries]
    assert "extractor.groups.0.0.bn.running_mean" in names
    assert "transformer.phases.0.0.theta" in names


def test_bad_magic():
    blob = dumps(trained_tiny()[0])
    with pytest.raises(BadMagicError):
        load_model(b"XXXX" + blob[4:])


def test_bad_version():
    blob = bytearray(dumps(trained_tiny()[0]))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        load_model(bytes(blob))


@pytest.mark.parametrize("frac", [0.0, 0.001, 0.01, 0.3, 0.999])
def test_truncation_rejected(frac):
    blob = dumps(trained_tiny()[0])
    cut = max(1, int(len(blob) * frac))
    with pytest.raises(CheckpointError):
        load_model(blob[:cut])


def test_truncation_is_typed():
    blob = dumps(trained_tiny()[0])
    with pytest.raises(TruncatedCheckpointError, match="values of"):
        load_model(blob[:-3])


def test_depth_mismatch_against_run_config():
    cfg = ModelConfig(image_size=32, phase_depths=[4, 4, 6])
    blob = dumps(DeepfakeDetector(cfg))
    with pytest.raises(ArchitectureMismatchError, match="phase_depths"):
        load_model(blob, expect=ModelConfig(image_size=32, phase_depths=[8, 8, 8]))
    load_model(blob, expect=cfg)


def test_config_block_disagreeing_with_entries():
    small = DeepfakeDetector(ModelConfig.tiny())
    bigger = ModelConfig.tiny(phase_depths=[2, 1, 1]).to_json().encode()
    blob = dumps(small)
    (n,) = struct.unpack("<Q", blob[8:16])
    forged = blob[:8] + struct.pack("<Q", len(bigger)) + bigger + blob[16 + n :]
    with pytest.raises(ArchitectureMismatchError):
        load_model(forged)


def test_garbage_config():
    blob = MAGIC + struct.pack("<IQ", 1, 3) + b"{{{"
    with pytest.raises(CheckpointError, match="config"):
        load_model(blob)
