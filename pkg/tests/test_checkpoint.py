"""
检查点格式的测试：逐字节稳定、截断/损坏检测与配置摘要校验。
"""

import numpy as np
import pytest

from sceneslots_core.checkpoint import (
    MAGIC, PARAM_PREFIX, Checkpoint, CheckpointError, checkpoint_save, read_checkpoint,
)


@pytest.fixture
def checkpoint(rng) -> Checkpoint:
    ckpt = Checkpoint(digest="abc123", metadata={"step": 7, "phase": "coarse", "seed": 3})
    ckpt.add_group(PARAM_PREFIX, {"encoder.w": rng.standard_normal((2, 3)), "fg_decoder.b": np.float32([1.5, -2.0])})
    ckpt.add_group("optim/", {"m.encoder.w": np.zeros((2, 3))})
    ckpt.entries["scalar"] = np.float64(0.25)
    return ckpt


class TestCheckpointRoundtrip:
    """保存 -> 读取 -> 保存逐字节一致。"""

    def test_byte_identical(self, tmp_path, checkpoint):
        first = checkpoint_save(tmp_path / "a.ckpt", checkpoint)
        loaded = read_checkpoint(first, expected_digest="abc123")
        second = checkpoint_save(tmp_path / "b.ckpt", loaded)
        assert first.read_bytes() == second.read_bytes()
        assert first.read_bytes()[:4] == MAGIC

    def test_values_and_groups(self, tmp_path, checkpoint):
        loaded = read_checkpoint(checkpoint_save(tmp_path / "a.ckpt", checkpoint))
        assert loaded.step == 7
        assert loaded.metadata["phase"] == "coarse"
        params = loaded.parameters()
        assert set(params) == {"encoder.w", "fg_decoder.b"}
        assert params["fg_decoder.b"].dtype == np.float32
        np.testing.assert_array_equal(params["encoder.w"], checkpoint.entries["param/encoder.w"])
        assert loaded.entries["scalar"].shape == ()

    def test_no_temporary_left_behind(self, tmp_path, checkpoint):
        checkpoint_save(tmp_path / "sub" / "a.ckpt", checkpoint)
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.ckpt"]

    def test_rejects_integer_arrays(self, tmp_path):
        ckpt = Checkpoint(digest="x", entries={"bad": np.arange(3)})
        with pytest.raises(CheckpointError):
            checkpoint_save(tmp_path / "a.ckpt", ckpt)


class TestCheckpointValidation:
    """损坏与摘要不匹配时拒绝载入。"""

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_checkpoint(tmp_path / "none.ckpt")

    def test_truncated(self, tmp_path, checkpoint):
        path = checkpoint_save(tmp_path / "a.ckpt", checkpoint)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_flipped_byte_fails_crc(self, tmp_path, checkpoint):
        path = checkpoint_save(tmp_path / "a.ckpt", checkpoint)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="CRC"):
            read_checkpoint(path)

    def test_bad_magic(self, tmp_path, checkpoint):
        path = checkpoint_save(tmp_path / "a.ckpt", checkpoint)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_digest_mismatch(self, tmp_path, checkpoint):
        path = checkpoint_save(tmp_path / "a.ckpt", checkpoint)
        with pytest.raises(CheckpointError):
            read_checkpoint(path, expected_digest="other")
        assert read_checkpoint(path, expected_digest="other", force=True).digest == "abc123"
