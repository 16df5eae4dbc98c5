import struct

import numpy as np
import pytest

from exfusion.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    load_model_checkpoint,
    meta_int,
    meta_json,
    meta_str,
    read_checkpoint,
    save_model_checkpoint,
    write_checkpoint,
)
from exfusion.model import Model, ModelSpec
from exfusion.optim import AdamW
from exfusion.tensor import cross_entropy


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b.bias": rng.normal(size=7),
        "counts": np.arange(5, dtype=np.int64),
        "blob": np.frombuffer(b"raw-bytes", dtype=np.uint8).copy(),
    }


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        path = tmp_path / "x.bin"
        tensors = sample_tensors()
        meta = {"step": 17, "delta": 0.95, "variant": "mb", "spec": {"depth": 2, "dim": 8}}
        write_checkpoint(path, tensors, meta)
        loaded, m = read_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype
            assert loaded[name].tobytes() == arr.tobytes()
        assert meta_int(m, "step") == 17
        assert m["delta"][0] == 0.95
        assert meta_str(m, "variant") == "mb"
        assert meta_json(m, "spec") == {"depth": 2, "dim": 8}

    def test_layout_matches_documented_format(self, tmp_path):
        # independent struct-level parse of the written bytes
        path = tmp_path / "x.bin"
        arr = np.array([[1.5, -2.0]], dtype=np.float32)
        write_checkpoint(path, {"w": arr}, {"tag": "ok"})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, count = struct.unpack_from("<II", raw, 4)
        assert version == VERSION and count == 2
        off = 12
        (name_len,) = struct.unpack_from("<I", raw, off); off += 4
        name = raw[off:off + name_len].decode(); off += name_len
        assert name == "w"
        code, rank = struct.unpack_from("<BB", raw, off); off += 2
        assert code == 0 and rank == 2
        dims = struct.unpack_from("<QQ", raw, off); off += 16
        assert dims == (1, 2)
        payload = np.frombuffer(raw, dtype="<f4", count=2, offset=off)
        np.testing.assert_array_equal(payload.reshape(1, 2), arr)
        off += 8
        (name_len,) = struct.unpack_from("<I", raw, off); off += 4
        assert raw[off:off + name_len].decode() == "meta/tag"

    def test_version_mismatch_refused(self, tmp_path):
        path = tmp_path / "x.bin"
        write_checkpoint(path, sample_tensors())
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version mismatch"):
            read_checkpoint(path)

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)
        write_checkpoint(path, sample_tensors())
        whole = path.read_bytes()
        path.write_bytes(whole[:len(whole) - 3])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_checkpoint(path, sample_tensors())
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(path)


class TestModelCheckpoint:
    def test_model_roundtrip_with_banks_and_optimizer(self, tmp_path):
        spec = ModelSpec(depth=2, dim=16, heads=2, expansion=2, vocab_size=9,
                         num_classes=3, max_seq_len=6, variant="mb", num_experts=4, seed=3)
        model = Model(spec)
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 9, size=(4, 6))
        opt = AdamW(model.named_parameters(), weight_decay=0.05)
        for step in range(3):
            model.zero_grad()
            loss = cross_entropy(model.forward(tokens, training=True),
                                 rng.integers(0, 3, size=4))
            loss.backward()
            opt.step(1e-3)

        path = tmp_path / "ckpt.bin"
        save_model_checkpoint(path, model, step=3, optimizer=opt,
                              extra_meta={"rng_state": {"seed": 3}})
        loaded = load_model_checkpoint(path)
        assert loaded.step == 3
        assert loaded.model.spec == spec
        for (name, t), (name2, t2) in zip(model.named_parameters(),
                                          loaded.model.named_parameters()):
            assert name == name2 and t.data.tobytes() == t2.data.tobytes()
        for (name, b), (name2, b2) in zip(model.named_buffers(),
                                          loaded.model.named_buffers()):
            assert name == name2 and b.tobytes() == b2.tobytes()
            assert b.sum() > 0  # banks actually moved during training
        for key, arr in opt.state_arrays().items():
            assert loaded.opt_arrays[key].tobytes() == arr.tobytes()
        assert meta_json(loaded.meta, "rng_state") == {"seed": 3}

    def test_collapsed_checkpoint_smaller_than_source(self, tmp_path):
        from exfusion.model import collapse_to_dense

        spec = ModelSpec(depth=2, dim=16, heads=2, expansion=2, vocab_size=9,
                         num_classes=3, max_seq_len=6, variant="mb", num_experts=4, seed=4)
        model = Model(spec)
        src = tmp_path / "src.bin"
        dst = tmp_path / "dense.bin"
        save_model_checkpoint(src, model, step=0)
        save_model_checkpoint(dst, collapse_to_dense(model), step=0)
        assert dst.stat().st_size < src.stat().st_size
