import json
import struct

import numpy as np
import pytest

from relmm import persist as P


def test_container_round_trip_all_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w": rng.standard_normal((3, 4)).astype(np.float32),
        "d": rng.standard_normal(5),
        "obs": rng.integers(0, 255, (2, 3, 4, 4)).astype(np.uint8),
        "i": np.arange(7, dtype=np.int64),
        "s": np.array([0, 1, 2], dtype=np.int8),
        "m": np.array([True, False]),
        "empty": np.zeros((0, 2), dtype=np.float32),
    }
    meta = {"step": 12, "rng": {"state": 2**100 + 5}}
    path = tmp_path / "c.ckpt"
    P.save_container(path, meta, arrays)
    meta2, arrays2 = P.load_container(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k, v in arrays.items():
        assert arrays2[k].dtype == v.dtype and arrays2[k].shape == v.shape
        np.testing.assert_array_equal(arrays2[k], v)
        arrays2[k].setflags(write=True)  # loaded arrays are ordinary writable arrays


def test_layout_is_self_describing(tmp_path):
    path = tmp_path / "c.ckpt"
    P.save_container(path, {"a": 1}, {"x": np.array([1.5, 2.5], dtype=np.float32)})
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack("<8sIQ", raw[:20])
    assert magic == P.MAGIC and version == P.VERSION
    header = json.loads(raw[20:20 + hlen])
    (entry,) = header["arrays"]
    assert entry["name"] == "x" and entry["dtype"] == "float32" and entry["shape"] == [2]
    payload = raw[20 + hlen:]
    assert np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["nbytes"]], "<f4").tolist() == [1.5, 2.5]


def test_corruption_detected(tmp_path):
    path = tmp_path / "c.ckpt"
    P.save_container(path, {}, {"x": np.ones(4)})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(P.CheckpointError, match="checksum"):
        P.load_container(path)
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(P.CheckpointError, match="magic"):
        P.load_container(path)
    with pytest.raises(P.CheckpointError):
        P.load_container(tmp_path / "missing.ckpt")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(P.CheckpointError):
        P.save_container(tmp_path / "c", {}, {"c": np.array([1j])})


def test_csv_header_flush_and_truncate(tmp_path):
    path = tmp_path / "m.csv"
    csv = P.MetricsCSV(path, flush_every=10)
    for i in range(25):
        csv.write(run_id="r", step=i + 1, event="train", r_g=0, r_n=-1.0)
    # two full flushes happened, five rows pending
    assert len(P.read_rows(path)) == 20
    csv.close()
    rows = P.read_rows(path)
    assert len(rows) == 25 and list(rows[0]) == list(P.COLUMNS)
    assert rows[0]["p_grasp"] == "" and rows[0]["r_n"] == "-1.0"
    P.MetricsCSV(path, truncate_after=10).close()
    assert [int(r["step"]) for r in P.read_rows(path)] == list(range(1, 11))


def test_csv_rejects_unknown_columns_and_events(tmp_path):
    csv = P.MetricsCSV(tmp_path / "m.csv")
    with pytest.raises(KeyError):
        csv.write(event="train", nonsense=1)
    with pytest.raises(ValueError):
        csv.write(event="bogus")


def test_flush_interval_capped_at_100(tmp_path):
    csv = P.MetricsCSV(tmp_path / "m.csv", flush_every=10_000)
    assert csv.flush_every == 100
