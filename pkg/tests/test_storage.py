import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
import struct

import numpy as np
import pytest
from utils import storage
from utils.calculations import BinaryCodeSet
from utils.errors import ArtifactFormatError, ValidationError
from utils.mlp import init

SPEC = {"layers": [{"in": 2, "out": 3, "act": "softmax"}]}


def test_content_hash_matches_git():
    assert storage.content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert storage.content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_weights_layout():
    model = init(SPEC, 0)
    raw = storage.encode_weights(model)
    assert raw[:4] == b"IPUW"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<IIB", raw, 12) == (2, 3, 1)
    assert len(raw) == 12 + 9 + 4 * (6 + 3)
    decoded = storage.decode_weights(raw)
    assert np.array_equal(decoded.weights[0], model.weights[0])
    assert decoded.layers == model.layers


def test_weights_rejects_corruption():
    raw = storage.encode_weights(init(SPEC, 0))
    with pytest.raises(ArtifactFormatError):
        storage.decode_weights(b"XXXX" + raw[4:])
    with pytest.raises(ArtifactFormatError):
        storage.decode_weights(raw[:-1])
    with pytest.raises(ArtifactFormatError):
        storage.decode_weights(raw + b"\x00")
    with pytest.raises(ArtifactFormatError):
        storage.decode_weights(raw[:4] + struct.pack("<II", 2, 1) + raw[12:])


def test_save_weights_naming(tmp_path):
    single = storage.save_weights([init(SPEC, 0)], tmp_path / "one")
    assert [p.name for p in single] == ["weights.ipuw"]
    several = storage.save_weights([init(SPEC, i) for i in range(3)], tmp_path / "many")
    assert [p.name for p in several] == ["weights_000.ipuw", "weights_001.ipuw", "weights_002.ipuw"]
    loaded = storage.load_weights(tmp_path / "many")
    assert len(loaded) == 3
    assert np.array_equal(loaded[2].weights[0], init(SPEC, 2).weights[0])
    with pytest.raises(ValidationError):
        storage.load_weights(tmp_path)


def test_weights_hash_is_stable():
    assert storage.weights_hash([init(SPEC, 1)]) == storage.weights_hash([init(SPEC, 1)])
    assert storage.weights_hash([init(SPEC, 1)]) != storage.weights_hash([init(SPEC, 2)])


def test_code_set_layout():
    codes = BinaryCodeSet(10, np.array([[3, 1], [0, 2]], dtype=np.uint8), np.array([7, 1]))
    raw = storage.encode_code_set(codes)
    assert raw[:4] == b"IPUC"
    assert struct.unpack_from("<IIQ", raw, 4) == (1, 10, 2)
    assert len(raw) == 20 + 2 * (2 + 8)
    assert raw[20:22] == b"\x03\x01"
    assert struct.unpack_from("<Q", raw, 22) == (7,)
    decoded = storage.decode_code_set(raw)
    assert decoded.codes.tolist() == [[3, 1], [0, 2]]
    assert decoded.counts.tolist() == [7, 1]


def test_code_set_rejects_corruption():
    raw = storage.encode_code_set(BinaryCodeSet(8, np.array([[5]], dtype=np.uint8), np.array([2])))
    with pytest.raises(ArtifactFormatError):
        storage.decode_code_set(b"IPUW" + raw[4:])
    with pytest.raises(ArtifactFormatError):
        storage.decode_code_set(raw[:-3])
    with pytest.raises(ArtifactFormatError):
        storage.decode_code_set(raw[:10])


def test_distribution_csv(tmp_path):
    path = tmp_path / "p.csv"
    storage.write_values_csv([2.0, 1.0, 1.0], path)
    assert path.read_text().splitlines()[0] == "index,value"
    assert storage.read_distribution_csv(path, normalize=True).probs.tolist() == [0.5, 0.25, 0.25]
    with pytest.raises(ValidationError):
        storage.read_distribution_csv(path)


def test_partition_csv(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("index,value\n0,0\n1,0\n2,1\n")
    assert storage.read_partition_csv(path).group_sizes.tolist() == [2, 1]
    path.write_text("i,v\n0,0\n")
    with pytest.raises(ValidationError):
        storage.read_partition_csv(path)
    path.write_text("index,value\n1,0\n0,0\n")
    with pytest.raises(ValidationError):
        storage.read_partition_csv(path)


def test_json_round_trip(tmp_path):
    storage.write_json({"b": 1, "a": [1, 2]}, tmp_path / "r.json")
    assert storage.read_json(tmp_path / "r.json") == {"a": [1, 2], "b": 1}
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValidationError):
        storage.read_json(tmp_path / "bad.json")
