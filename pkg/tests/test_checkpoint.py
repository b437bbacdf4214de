"""
Tests for the checkpoint container and training checkpoint storage.
"""
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.matting_service.domain.entities import ModelConfig
from src.services.matting_service.infrastructure.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    load_into,
    load_model,
    read_container,
    save_model,
    write_container,
)
from src.services.matting_service.infrastructure.network import build_model
from src.services.ml_service.domain.entities import StageCursor
from src.services.ml_service.infrastructure.model_storage import ModelStorage, load_checkpoint, save_checkpoint
from src.services.ml_service.infrastructure.optimizer import Adam
from src.shared.domain.exceptions import (
    CheckpointConfigMismatchError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
)
from src.shared.tensor import GradTape, Tensor
from src.shared.tensor import functional as F

LEARNING_RATES = {"backbone": 1e-3, "decoder": 1e-3, "dgf": 1e-3}


def _assert_same_state(a, b):
    assert list(a.state_dict()) == list(b.state_dict())
    for name, value in a.state_dict().items():
        np.testing.assert_array_equal(value, b.state_dict()[name], err_msg=name)


def _train_one_step(model, optimizer, rng):
    frames = Tensor(rng.random((1, 2, 3, 64, 64), dtype=np.float32))
    optimizer.zero_grad()
    with GradTape() as tape:
        output, _ = model.forward(frames)
        tape.backward(F.mean(output.alpha) + F.mean(output.foreground))
    optimizer.step()


class TestContainer:
    """Test the raw tensor container."""

    def test_round_trip_preserves_dtypes_and_header(self, tmp_path):
        """Test arrays of every supported dtype and the header survive a write/read."""
        tensors = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.linspace(0, 1, 4),
            "c": np.array([3, -1], dtype=np.int64),
            "scalar": np.array(2.5),
        }
        path = write_container(tmp_path / "x.ckpt", tensors, {"note": "hello"})
        header, loaded = read_container(path)
        assert header == {"note": "hello"}
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert loaded[name].dtype == value.dtype
            np.testing.assert_array_equal(loaded[name], value)

    def test_layout_starts_with_magic_and_version(self, tmp_path):
        """Test the fixed preamble bytes."""
        path = write_container(tmp_path / "x.ckpt", {}, {})
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        version, header_len = struct.unpack("<II", raw[8:16])
        assert version == FORMAT_VERSION
        assert raw[16:16 + header_len] == b"{}"

    def test_no_temporary_file_left(self, tmp_path):
        """Test the atomic write leaves only the final file."""
        write_container(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {})
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x.ckpt"]

    def test_unsupported_dtype(self, tmp_path):
        """Test integer widths other than 64 bits are refused."""
        with pytest.raises(CheckpointError):
            write_container(tmp_path / "x.ckpt", {"a": np.zeros(2, dtype=np.int16)}, {})

    def test_truncated_file(self, tmp_path):
        """Test a short read raises CheckpointTruncatedError."""
        path = write_container(tmp_path / "x.ckpt", {"a": np.ones((4, 4), dtype=np.float32)}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointTruncatedError):
            read_container(path)

    def test_future_version(self, tmp_path):
        """Test an unknown container version raises CheckpointVersionError."""
        path = write_container(tmp_path / "x.ckpt", {"a": np.ones(2)}, {})
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            read_container(path)

    def test_bad_magic(self, tmp_path):
        """Test a foreign file is rejected."""
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(CheckpointError):
            read_container(path)

    def test_missing_file(self, tmp_path):
        """Test a missing path raises CheckpointError."""
        with pytest.raises(CheckpointError):
            read_container(tmp_path / "absent.ckpt")


class TestModelCheckpoint:
    """Test model save and load."""

    def test_round_trip(self, tiny_model, tmp_path):
        """Test a loaded model reproduces parameters, buffers and outputs."""
        tiny_model.eval()
        path = save_model(tiny_model, tmp_path / "model.ckpt", {"purpose": "test"})
        restored = load_model(path).eval()
        _assert_same_state(tiny_model, restored)

        frames = Tensor(np.random.default_rng(0).random((1, 2, 3, 64, 64), dtype=np.float32))
        a, _ = tiny_model.forward(frames)
        b, _ = restored.forward(frames)
        np.testing.assert_array_equal(a.alpha.numpy(), b.alpha.numpy())

    def test_header_carries_config(self, tiny_model, tmp_path):
        """Test the JSON header stores the model config and metadata."""
        path = save_model(tiny_model, tmp_path / "model.ckpt", {"purpose": "test"})
        header, _ = read_container(path)
        assert ModelConfig.parse(header["model_config"]) == tiny_model.config
        assert header["metadata"] == {"purpose": "test"}

    def test_config_mismatch(self, tiny_model, tmp_path):
        """Test loading into a differently shaped network is refused."""
        path = save_model(tiny_model, tmp_path / "model.ckpt")
        other = build_model(ModelConfig.parse({"preset": "tiny_test", "dgf_channels": 8}), seed=0)
        with pytest.raises(CheckpointConfigMismatchError) as excinfo:
            load_into(other, path)
        assert isinstance(excinfo.value, ContractError)

    def test_expected_config_mismatch(self, tiny_model, tmp_path):
        """Test load_model checks the requested config."""
        path = save_model(tiny_model, tmp_path / "model.ckpt")
        with pytest.raises(CheckpointConfigMismatchError):
            load_model(path, expected_config=ModelConfig.default())


class TestTrainingCheckpoint:
    """Test training checkpoints with optimizer state and cursor."""

    def test_round_trip_with_optimizer(self, tiny_config, tmp_path):
        """Test Adam moments, step count and the cursor survive a save and load."""
        rng = np.random.default_rng(0)
        model = build_model(tiny_config, seed=0)
        optimizer = Adam.for_model(model, LEARNING_RATES)
        _train_one_step(model, optimizer, rng)
        cursor = StageCursor(stage=2, iteration=7, completed_stages=(1,))
        path = save_checkpoint(model, optimizer, cursor, tmp_path / "latest.ckpt")

        fresh = build_model(tiny_config, seed=99)
        fresh_optimizer = Adam.for_model(fresh, {"backbone": 1.0, "decoder": 1.0, "dgf": 1.0})
        restored, restored_optimizer, restored_cursor = load_checkpoint(path, fresh, fresh_optimizer)

        assert restored is fresh
        assert restored_cursor == cursor
        _assert_same_state(model, restored)
        assert restored_optimizer.state.step == 1
        assert restored_optimizer.state.steps == optimizer.state.steps
        assert restored_optimizer.learning_rates == LEARNING_RATES
        for name, moment in optimizer.state.first_moment.items():
            np.testing.assert_array_equal(restored_optimizer.state.first_moment[name], moment)
            assert restored_optimizer.state.second_moment[name].dtype == np.float64

    def test_continued_training_matches(self, tiny_config, tmp_path):
        """Test a step after reload equals a step without interruption."""
        model = build_model(tiny_config, seed=0)
        optimizer = Adam.for_model(model, LEARNING_RATES)
        _train_one_step(model, optimizer, np.random.default_rng(1))
        path = save_checkpoint(model, optimizer, StageCursor(), tmp_path / "latest.ckpt")
        _train_one_step(model, optimizer, np.random.default_rng(2))

        resumed = build_model(tiny_config, seed=5)
        resumed_optimizer = Adam.for_model(resumed, LEARNING_RATES)
        load_checkpoint(path, resumed, resumed_optimizer)
        _train_one_step(resumed, resumed_optimizer, np.random.default_rng(2))
        _assert_same_state(model, resumed)

    def test_model_checkpoint_is_not_resumable(self, tiny_model, tmp_path):
        """Test a plain model checkpoint has no training state."""
        path = save_model(tiny_model, tmp_path / "model.ckpt")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_storage_paths(self, tiny_model, tmp_path):
        """Test stage and latest files land in the storage directory."""
        storage = ModelStorage(tmp_path / "ckpts")
        optimizer = Adam.for_model(tiny_model, LEARNING_RATES)
        storage.save(tiny_model, optimizer, StageCursor(), storage.stage_path(1))
        storage.save(tiny_model, optimizer, StageCursor())
        assert [p.name for p in storage.list_checkpoints()] == ["latest.ckpt", "stage1.ckpt"]

    def test_model_only_load_from_training_checkpoint(self, tiny_model, tmp_path):
        """Test the model loader ignores optimizer tensors."""
        optimizer = Adam.for_model(tiny_model, LEARNING_RATES)
        _train_one_step(tiny_model, optimizer, np.random.default_rng(0))
        path = save_checkpoint(tiny_model, optimizer, StageCursor(), tmp_path / "latest.ckpt")
        _assert_same_state(tiny_model, load_model(path))
