import struct

import numpy as np
import pytest

from checkpoint import FORMAT_VERSION, MAGIC, checkpoint_roundtrip, load_checkpoint, read_checkpoint, save_checkpoint
from errors import CheckpointError
from model import HitterConfig, HitterModel

TINY = HitterConfig(d_model=8, ffn_dim=16, heads=2, entity_layers=1, context_layers=1, mep_projection=True)


def _model(seed=0, cfg=TINY, num_entities=7):
    return HitterModel(cfg, num_entities, 4, seed=seed)


def test_round_trip_is_bit_identical(tmp_path):
    model = _model(seed=3)
    restored = checkpoint_roundtrip(model, str(tmp_path / "model.ckpt"))
    assert restored.cfg == model.cfg
    for (name, a), (other, b) in zip(model.named_parameters(), restored.named_parameters()):
        assert name == other
        assert a.data.tobytes() == b.data.tobytes(), name


def test_extra_metadata_is_stored(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, _model(), extra={"epoch": 4, "vocab": {"entities": ["a"], "relations": ["r"]}})
    config, tensors = read_checkpoint(path)
    assert config["extra"]["epoch"] == 4
    assert config["num_entities"] == 7
    assert "entity_embeddings" in tensors


def test_load_into_existing_model(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, _model(seed=1))
    target = _model(seed=2)
    load_checkpoint(path, target)
    assert np.array_equal(target.entity_embeddings.data, _model(seed=1).entity_embeddings.data)


def test_truncated_file_leaves_model_untouched(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), _model(seed=1))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 10])

    target = _model(seed=2)
    before = target.state_dict()
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path), target)
    for name, value in target.state_dict().items():
        assert np.array_equal(value, before[name]), name


def test_shape_mismatch_names_the_tensor(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, _model(num_entities=7))
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path, _model(num_entities=9))
    assert info.value.tensor_name == "entity_embeddings"


def test_missing_tensor(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, _model(cfg=HitterConfig(d_model=8, ffn_dim=16, heads=2, entity_layers=1, context_layers=1)))
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path, _model())
    assert info.value.tensor_name.startswith("mep_")


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), _model())
    data = path.read_bytes()

    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(str(path))

    path.write_bytes(MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


if __name__ == "__main__":
    pytest.main([__file__])
