"""Weight file format: bit-exact round trips and corruption handling."""

import struct

import numpy as np
import pytest

from posenav.autodiff import load_weights, save_weights


def sample_params(rng):
    return {
        "actor/w1": rng.normal(size=(7, 5)),
        "actor/b1": rng.normal(size=(5,)),
        "log_alpha": np.array(0.37),  # rank-0 scalar
        "critic/w": rng.normal(size=(2, 3, 4)),
    }


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = sample_params(rng)
        path = tmp_path / "weights.pnav"
        save_weights(path, params)
        loaded = load_weights(path)
        assert list(loaded) == list(params)
        for name in params:
            original = np.asarray(params[name], dtype=np.float64)
            assert loaded[name].shape == original.shape
            assert loaded[name].tobytes() == original.tobytes()

    def test_awkward_values_survive(self, tmp_path):
        params = {
            "edge": np.array([-0.0, 5e-324, 1.7976931348623157e308, -1e-308, 0.1 + 0.2])
        }
        path = tmp_path / "w.pnav"
        save_weights(path, params)
        loaded = load_weights(path)
        assert loaded["edge"].tobytes() == params["edge"].tobytes()
        # -0.0 keeps its sign bit
        assert np.signbit(loaded["edge"][0])

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(5)
        params = sample_params(rng)
        p1, p2 = tmp_path / "a.pnav", tmp_path / "b.pnav"
        save_weights(p1, params)
        save_weights(p2, params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_order_preserved(self, tmp_path):
        params = {"zz": np.zeros(1), "aa": np.ones(2), "mm": np.full(3, 2.0)}
        path = tmp_path / "w.pnav"
        save_weights(path, params)
        assert list(load_weights(path)) == ["zz", "aa", "mm"]

    def test_unicode_names(self, tmp_path):
        params = {"layer/θ": np.array([1.0])}
        path = tmp_path / "w.pnav"
        save_weights(path, params)
        assert "layer/θ" in load_weights(path)

    def test_empty_param_dict(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {})
        assert load_weights(path) == {}


class TestHeader:
    def test_magic_and_version_bytes(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {"x": np.array([1.0])})
        blob = path.read_bytes()
        assert blob[:4] == b"PNAV"
        assert struct.unpack_from("<I", blob, 4)[0] == 1

    def test_payload_is_little_endian_f64(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {"x": np.array([1.5])})
        blob = path.read_bytes()
        # header(8) + name_len(4) + "x"(1) + rank(4) + extents(8) = 25
        assert blob[25:33] == struct.pack("<d", 1.5)


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {"x": np.array([1.0])})
        blob = bytearray(path.read_bytes())
        blob[0] = ord(b"X")
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_weights(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {"x": np.array([1.0])})
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_weights(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "w.pnav"
        save_weights(path, {"x": np.arange(4.0)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(path)

    def test_too_short_for_header(self, tmp_path):
        path = tmp_path / "w.pnav"
        path.write_bytes(b"PNA")
        with pytest.raises(ValueError):
            load_weights(path)
