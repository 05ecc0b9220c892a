"""Datasets, checkpoints, configs and packed weight files.

This is the only module that touches the file system.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .network import Network, build_network
from .trainer import TrainConfig, TrainState, tree_leaves, tree_map

MAGIC = b"BQN1"
VERSION = 1
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, row, column, cell):
        super().__init__(f"row {row}, column {column}: cannot parse {cell!r} as a number")
        self.row, self.column, self.cell = row, column, cell


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DatasetHandle:
    """Features ``x`` and labels or targets ``y`` of one split."""

    kind: str
    x: np.ndarray
    y: np.ndarray
    n_classes: Optional[int] = None
    target_mean: Optional[float] = None
    target_std: Optional[float] = None
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise CountMismatchError(f"{len(self.x)} inputs but {len(self.y)} targets")

    @property
    def feature_shape(self):
        return self.x.shape[1:]


# IDX

def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (EOFError, OSError) as e:
            raise IdxTruncatedError(f"{path}: corrupt or truncated gzip stream") from e
    return raw


def read_idx(path, magic: int) -> np.ndarray:
    data = _read_maybe_gzip(path)
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: missing header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, data[4:hdr])
    n = int(np.prod(dims))
    if len(data) - hdr < n:
        raise IdxTruncatedError(f"{path}: expected {n} bytes of data, found {len(data) - hdr}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=hdr).reshape(dims)


def write_idx(path, arr: np.ndarray, compress: bool = True) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x800 | arr.ndim
    blob = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes()
    Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Images scaled to [0, 1] with shape ``[N, H, W]`` and integer labels."""
    images = read_idx(images_path, 0x00000803)
    labels = read_idx(labels_path, 0x00000801)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return DatasetHandle("idx-images", images.astype(np.float64) / 255.0, labels.astype(np.int64),
                         n_classes=int(labels.max()) + 1 if len(labels) else 0)


# CSV

def _parse_csv(path, header: Optional[bool]):
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: no rows")
    if header is None:
        try:
            [float(c) for c in rows[0]]
            header = False
        except ValueError:
            header = True
    start = 1 if header else 0
    width = len(rows[start]) if len(rows) > start else 0
    out = np.empty((len(rows) - start, width))
    for i, r in enumerate(rows[start:]):
        if len(r) != width:
            raise DatasetError(f"row {i + start + 1}: expected {width} cells, found {len(r)}")
        for j, c in enumerate(r):
            try:
                out[i, j] = float(c)
            except ValueError:
                raise CsvParseError(i + start + 1, j + 1, c) from None
    return out


def standardize(x, mean, std):
    return (x - mean) / std


def destandardize(z, mean, std):
    return z * std + mean


def column_stats(x):
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def load_csv(path, target_column: int = -1, header: Optional[bool] = None, test_size: int = 50,
             split_seed: int = 0, test_index=None) -> tuple[DatasetHandle, DatasetHandle]:
    """Train and test splits of a numeric table.

    Features are standardized with train-split statistics; the target is
    left in its own units and its train-split mean and std are recorded.
    """
    table = _parse_csv(path, header)
    y = table[:, target_column]
    x = np.delete(table, target_column % table.shape[1], axis=1)
    n = len(y)
    if test_index is None:
        perm = np.random.default_rng(split_seed).permutation(n)
        test_index = perm[:test_size]
    test_index = np.asarray(test_index)
    train_mask = np.ones(n, dtype=bool)
    train_mask[test_index] = False
    xtr, ytr = x[train_mask], y[train_mask]
    fm, fs = column_stats(xtr)
    tm, ts = float(ytr.mean()), float(max(ytr.std(), STD_FLOOR))
    common = dict(target_mean=tm, target_std=ts, feature_mean=fm, feature_std=fs)
    train = DatasetHandle("csv-table", standardize(xtr, fm, fs), ytr, **common)
    test = DatasetHandle("csv-table", standardize(x[test_index], fm, fs), y[test_index], **common)
    return train, test


# checkpoints

def _state_arrays(state: TrainState):
    return tree_leaves(state.params) + tree_leaves(state.m) + tree_leaves(state.v)


def save_checkpoint(path, network: Network, state: TrainState) -> None:
    arrays = _state_arrays(state)
    header = {"topology": network.describe(), "step": state.step, "epoch": state.epoch,
              "seed": state.seed, "shapes": [list(a.shape) for a in arrays]}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(hb)))
        f.write(hb)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Network, TrainState]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(data[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    network = build_network(header["topology"])
    template = network.init(np.random.default_rng(0))
    shapes = [tuple(s) for s in header["shapes"]]
    nleaves = len(tree_leaves(template))
    if len(shapes) != 3 * nleaves:
        raise CheckpointError(f"{path}: array count does not match the topology")
    pos = 10 + hlen
    arrays = []
    for shape in shapes:
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated array data")
        arrays.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64))
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")

    def fill(offset):
        it = iter(arrays[offset:offset + nleaves])
        return tree_map(lambda t: _checked(next(it), t.shape, path), template)

    state = TrainState(fill(0), fill(nleaves), fill(2 * nleaves), header["step"], header["epoch"], header["seed"])
    return network, state


def _checked(a, shape, path):
    if a.shape != tuple(shape):
        raise CheckpointError(f"{path}: array of shape {a.shape} where {tuple(shape)} was expected")
    return a


# packed quantized weights

def pack_weights(network: Network, members: list) -> dict:
    """Grid indices of each weight realization, packed at ceil(log2 D) bits per weight."""
    out = {"n_members": np.array(len(members))}
    for k, weights in enumerate(members):
        for i, w in enumerate(weights):
            if w is None:
                continue
            grid = network.layers[i].grid
            idx = np.searchsorted(grid.values, w)
            bits = max(1, int(np.ceil(np.log2(grid.size))))
            planes = ((idx[..., None] >> np.arange(bits)) & 1).astype(np.uint8)
            out[f"m{k}_l{i}_bits"] = np.packbits(planes.reshape(-1))
            out[f"m{k}_l{i}_shape"] = np.array(w.shape + (bits,))
    return out


def unpack_weights(network: Network, packed: dict) -> list:
    members = []
    for k in range(int(packed["n_members"])):
        weights = []
        for i, layer in enumerate(network.layers):
            key = f"m{k}_l{i}_bits"
            if key not in packed:
                weights.append(None)
                continue
            shape = tuple(int(s) for s in packed[f"m{k}_l{i}_shape"])
            n = int(np.prod(shape))
            planes = np.unpackbits(packed[key])[:n].reshape(shape)
            idx = np.sum(planes.astype(np.int64) << np.arange(shape[-1]), axis=-1)
            weights.append(layer.grid.values[idx])
        members.append(weights)
    return members


def packed_size_bits(packed: dict) -> int:
    return sum(8 * v.size for k, v in packed.items() if k.endswith("_bits"))


def save_packed(path, network: Network, members: list) -> dict:
    packed = pack_weights(network, members)
    np.savez(path, topology=np.frombuffer(json.dumps(network.describe()).encode(), dtype=np.uint8), **packed)
    return packed


def load_packed(path):
    with np.load(path) as z:
        network = build_network(json.loads(z["topology"].tobytes().decode()))
        packed = {k: z[k] for k in z.files if k != "topology"}
    return network, unpack_weights(network, packed)


# configs

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def read_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be an object")
    unknown = set(cfg) - {"data", "architecture", "train", "output"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("data", "architecture", "train"):
        if key not in cfg:
            raise ConfigError(f"missing config section {key!r}")
    data = cfg["data"]
    if data.get("kind") not in ("idx", "csv"):
        raise ConfigError("data.kind must be 'idx' or 'csv'")
    need = ("train_images", "train_labels") if data["kind"] == "idx" else ("path",)
    for k in need:
        if k not in data:
            raise ConfigError(f"data.{k} is required")
    bad = set(cfg["train"]) - _TRAIN_KEYS
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    try:
        train_cfg = dict(cfg["train"])
        if train_cfg.get("image_shape") is not None:
            train_cfg["image_shape"] = tuple(train_cfg["image_shape"])
        TrainConfig(**train_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e
    arch = cfg["architecture"]
    if not isinstance(arch, dict) or not ({"layers", "mlp"} & set(arch)) or "head" not in arch:
        raise ConfigError("architecture needs 'head' and either 'mlp' or 'layers'")
    return cfg
