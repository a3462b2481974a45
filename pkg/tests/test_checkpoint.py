import struct

import numpy as np
import pytest

from salg.checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from salg.config import preset
from salg.model import init_params
from salg.tensor import Parameter


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(preset("micro"), seed=0)
        path = tmp_path / "m.salg"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(params)
        for name, p in params.items():
            np.testing.assert_array_equal(loaded[name], p.data)

    def test_byte_layout(self, tmp_path):
        path = tmp_path / "one.salg"
        save_checkpoint(path, {"ab": np.array([[1.5, -2.0, 0.25]])})
        blob = path.read_bytes()
        expected = (b"SALG\x01" + struct.pack("<Q", 2) + b"ab" + struct.pack("<Q", 2)
                    + struct.pack("<2Q", 1, 3) + struct.pack("<3d", 1.5, -2.0, 0.25))
        assert blob == expected

    def test_scalar_tensor(self, tmp_path):
        path = tmp_path / "s.salg"
        save_checkpoint(path, {"s": np.float64(3.0)})
        assert load_checkpoint(path)["s"].shape == ()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.salg"
        path.write_bytes(b"NOPE\x01")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.salg"
        path.write_bytes(b"SALG\x02")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.salg"
        save_checkpoint(path, {"w": np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_load_into_checks_shapes(self, tmp_path):
        path = tmp_path / "w.salg"
        save_checkpoint(path, {"w": np.ones(3)})
        with pytest.raises(CheckpointError, match="shape"):
            load_into({"w": Parameter(np.zeros(4), "w")}, path)
        with pytest.raises(CheckpointError, match="missing"):
            load_into({"v": Parameter(np.zeros(3), "v")}, path)
        target = {"w": Parameter(np.zeros(3), "w")}
        load_into(target, path)
        np.testing.assert_array_equal(target["w"].data, 1.0)
