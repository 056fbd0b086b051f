import pytest
import torch

from sapgan.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    peek_meta,
    save_checkpoint,
)

from conftest import seeded_randn


def sample_state():
    tensors = {
        "g.weight": seeded_randn(4, 3, seed=0),
        "d.bias": seeded_randn(7, seed=1),
        "scalar": torch.tensor(3.5),
    }
    meta = {"images_shown": 1234, "stage": 2, "alpha": 0.25, "note": "midway"}
    return tensors, meta


class TestRoundTrip:
    def test_tensors_and_meta_survive(self, tmp_path):
        path = tmp_path / "run.ckpt"
        tensors, meta = sample_state()
        save_checkpoint(path, tensors, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert torch.equal(loaded[name], tensors[name])
            assert loaded[name].dtype == torch.float32

    def test_resave_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tensors, meta = sample_state()
        save_checkpoint(a, tensors, meta)
        save_checkpoint(b, *load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_insertion_order_does_not_matter(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tensors, meta = sample_state()
        save_checkpoint(a, tensors, meta)
        reordered = dict(reversed(list(tensors.items())))
        save_checkpoint(b, reordered, meta)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_checkpoint(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(path, {}, {"fresh": True})
        tensors, meta = load_checkpoint(path)
        assert tensors == {} and meta == {"fresh": True}

    def test_peek_meta(self, tmp_path):
        path = tmp_path / "run.ckpt"
        tensors, meta = sample_state()
        save_checkpoint(path, tensors, meta)
        assert peek_meta(path) == meta

    def test_no_temp_file_left_behind(self, tmp_path):
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, *sample_state())
        assert [p.name for p in tmp_path.iterdir()] == ["run.ckpt"]


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        save_checkpoint(path, *sample_state())
        raw = bytearray(path.read_bytes())
        raw[len(MAGIC)] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.ckpt"
        save_checkpoint(path, *sample_state())
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated|holds"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "cut.ckpt"
        save_checkpoint(path, *sample_state())
        path.write_bytes(path.read_bytes()[:16])
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "none.ckpt"
        path.write_bytes(b"")
        with pytest.raises(CheckpointError, match="too short"):
            load_checkpoint(path)
