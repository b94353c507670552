"""
Local artifact storage: IPUW weight files, IPUC code-set files, CSV tables and
JSON run records. Everything a run produces goes through this module.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from utils.calculations import BinaryCodeSet
from utils.errors import ArtifactFormatError, ValidationError
from utils.information import DiscreteDistribution, Partition, make_distribution, make_partition
from utils.mlp import ACTIVATIONS, LayerSpec, MlpModel

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"IPUW"
WEIGHTS_VERSION = 1
CODES_MAGIC = b"IPUC"
CODES_VERSION = 1

PathLike = Union[str, Path]


def content_hash(data: bytes) -> str:
    """Git blob hash: SHA-1 over b"blob <len>\\0" followed by the bytes"""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def encode_weights(model: MlpModel) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(model.layers))]
    for layer, weight, bias in zip(model.layers, model.weights, model.biases):
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
        parts.append(np.ascontiguousarray(weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(bias, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(raw: bytes) -> MlpModel:
    """Parse an IPUW byte string back into a 32-bit model"""
    if raw[:4] != WEIGHTS_MAGIC:
        raise ArtifactFormatError(f"bad weights magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ArtifactFormatError("weights header is truncated")
    version, layer_count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ArtifactFormatError(f"unsupported weights version {version}")

    pos = 12
    layers, weights, biases = [], [], []
    for index in range(layer_count):
        if pos + 9 > len(raw):
            raise ArtifactFormatError(f"layer {index} header is truncated")
        in_dim, out_dim, act = struct.unpack_from("<IIB", raw, pos)
        pos += 9
        if act >= len(ACTIVATIONS):
            raise ArtifactFormatError(f"layer {index} has unknown activation code {act}")
        end = pos + 4 * (out_dim * in_dim + out_dim)
        if end > len(raw):
            raise ArtifactFormatError(f"layer {index} parameters are truncated")
        values = np.frombuffer(raw[pos:end], dtype="<f4").astype(np.float32)
        layers.append(LayerSpec(in_dim, out_dim, ACTIVATIONS[act]))
        weights.append(values[:out_dim * in_dim].reshape(out_dim, in_dim))
        biases.append(values[out_dim * in_dim:])
        pos = end
    if pos != len(raw):
        raise ArtifactFormatError(f"{len(raw) - pos} trailing bytes after the last layer")
    return MlpModel(layers, weights, biases)


def save_weights(models: Sequence[MlpModel], directory: PathLike) -> List[Path]:
    """Write weights.ipuw for one model, weights_000.ipuw ... for several"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(models) == 1:
        names = ["weights.ipuw"]
    else:
        names = [f"weights_{index:03d}.ipuw" for index in range(len(models))]
    paths = []
    for model, name in zip(models, names):
        path = directory / name
        path.write_bytes(encode_weights(model))
        paths.append(path)
    logger.debug("wrote %d weight files to %s", len(paths), directory)
    return paths


def load_weights(path: PathLike) -> List[MlpModel]:
    """Load one weights file, or every weights*.ipuw in a directory in name order"""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("weights*.ipuw"))
        if not files:
            raise ValidationError(f"no weights files in {path}")
        return [decode_weights(f.read_bytes()) for f in files]
    return [decode_weights(path.read_bytes())]


def weights_hash(models: Sequence[MlpModel]) -> str:
    return content_hash(b"".join(encode_weights(model) for model in models))


def encode_code_set(codes: BinaryCodeSet) -> bytes:
    parts = [CODES_MAGIC, struct.pack("<IIQ", CODES_VERSION, codes.code_bits, len(codes.counts))]
    for packed, count in zip(codes.codes, codes.counts):
        parts.append(packed.tobytes())
        parts.append(struct.pack("<Q", int(count)))
    return b"".join(parts)


def decode_code_set(raw: bytes) -> BinaryCodeSet:
    if raw[:4] != CODES_MAGIC:
        raise ArtifactFormatError(f"bad code-set magic {raw[:4]!r}")
    if len(raw) < 20:
        raise ArtifactFormatError("code-set header is truncated")
    version, code_bits, count = struct.unpack_from("<IIQ", raw, 4)
    if version != CODES_VERSION:
        raise ArtifactFormatError(f"unsupported code-set version {version}")
    width = (code_bits + 7) // 8
    record = np.dtype([("code", np.uint8, (width,)), ("count", "<u8")])
    if len(raw) != 20 + count * record.itemsize:
        raise ArtifactFormatError(f"code-set body has {len(raw) - 20} bytes, header declares {count} entries")
    entries = np.frombuffer(raw, dtype=record, offset=20, count=count)
    return BinaryCodeSet(code_bits, entries["code"].copy(), entries["count"].astype(np.int64))


def save_code_set(codes: BinaryCodeSet, path: PathLike):
    Path(path).write_bytes(encode_code_set(codes))


def load_code_set(path: PathLike) -> BinaryCodeSet:
    return decode_code_set(Path(path).read_bytes())


def write_table(frame: pd.DataFrame, path: PathLike):
    frame.to_csv(path, index=False)


def write_values_csv(values, path: PathLike):
    """One value per row under the header index,value"""
    values = np.asarray(values)
    write_table(pd.DataFrame({"index": np.arange(values.size), "value": values}), path)


def _read_values_csv(path: PathLike) -> np.ndarray:
    frame = pd.read_csv(path)
    if list(frame.columns) != ["index", "value"]:
        raise ValidationError(f"{path}: expected header index,value")
    if not np.array_equal(frame["index"].to_numpy(), np.arange(len(frame))):
        raise ValidationError(f"{path}: index column must count 0, 1, 2, ...")
    return frame["value"].to_numpy()


def read_distribution_csv(path: PathLike, normalize: bool = False) -> DiscreteDistribution:
    return make_distribution(_read_values_csv(path).astype(np.float64), normalize=normalize)


def read_partition_csv(path: PathLike) -> Partition:
    return make_partition(_read_values_csv(path).astype(np.int64))


def write_json(record: Dict, path: PathLike):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}")
