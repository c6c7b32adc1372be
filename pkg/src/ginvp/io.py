"""On-disk formats: binary PGM images, dataset manifests, ``.ginm`` model files, CSVs."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import nn
from .analytics import ForestModel, Tree
from .gin import GanModel, InverseModel
from .synthdata import Dataset, PatientRecord, ValveParams

MAGIC = b"GINM"
FORMAT_VERSION = 1
KIND_TAGS = {"gan": 0, "inverse": 1, "forest": 2}
KIND_NAMES = {v: k for k, v in KIND_TAGS.items()}

MANIFEST_FIELDS = [
    "id",
    "file",
    "pvl_label",
    "theta",
    "eccentricity",
    "radius",
    "calcification",
    "nodule_angle",
    "noise_sigma",
    "augmented_from",
]


class ModelFormatError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# numbers


def fmt_float(x):
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_cell(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# PGM


def to_bytes8(image):
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(image):
    px = to_bytes8(image)
    h, w = px.shape
    return b"P5\n%d %d\n255\n" % (w, h) + px.tobytes()


def write_pgm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


def decode_pgm(data):
    """Parse a binary 8-bit PGM; returns float32 pixels in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM pixel data")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


# --------------------------------------------------------------------------
# datasets


def save_dataset(data, directory):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for r in data.records:
        name = f"images/{r.id:05d}.pgm"
        write_pgm(directory / name, r.image)
        p = r.params
        rows.append(
            [
                r.id,
                name,
                r.pvl_label,
                p.rotation_theta,
                p.wall_eccentricity,
                p.wall_radius,
                p.calcification_amount,
                p.nodule_angle,
                p.noise_sigma,
                r.augmented_from,
            ]
        )
    write_csv(directory / "manifest.csv", MANIFEST_FIELDS, rows)


def load_dataset(directory, seed=0):
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.is_file():
        raise DatasetFormatError(f"{manifest}: manifest not found")
    try:
        rows = read_csv(manifest)
    except (OSError, csv.Error) as exc:
        raise DatasetFormatError(f"{manifest}: {exc}") from exc
    if not rows or list(rows[0].keys()) != MANIFEST_FIELDS:
        raise DatasetFormatError(f"{manifest}: expected header {','.join(MANIFEST_FIELDS)}")
    records = []
    size = None
    for line, row in enumerate(rows, start=2):
        path = directory / row["file"]
        try:
            image = read_pgm(path)
            params = ValveParams(
                float(row["theta"]),
                float(row["eccentricity"]),
                float(row["radius"]),
                float(row["calcification"]),
                float(row["nodule_angle"]),
                float(row["noise_sigma"]),
            )
            rec = PatientRecord(
                id=int(row["id"]),
                image=image,
                pvl_label=int(row["pvl_label"]),
                params=params,
                augmented_from=int(row["augmented_from"]) if row["augmented_from"] else None,
            )
        except (OSError, ValueError) as exc:
            raise DatasetFormatError(f"{path} (manifest line {line}): {exc}") from exc
        if rec.pvl_label not in (0, 1):
            raise DatasetFormatError(f"{manifest} line {line}: pvl_label must be 0 or 1")
        if image.shape[0] != image.shape[1] or (size is not None and image.shape[0] != size):
            raise DatasetFormatError(f"{path}: image size {image.shape} inconsistent with the dataset")
        size = image.shape[0]
        records.append(rec)
    augmented = any(r.augmented_from is not None for r in records)
    return Dataset(records, seed=seed, augmented=augmented, size=size)


# --------------------------------------------------------------------------
# model files


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def i32(self, v):
        self.buf.write(struct.pack("<i", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def f32(self, v):
        self.buf.write(struct.pack("<f", v))

    def text(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def raw(self, b):
        self.buf.write(b)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated model file: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def i32(self):
        return struct.unpack("<i", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self):
        return struct.unpack("<f", self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"bad UTF-8 string in model file: {exc}") from exc


def _write_tensors(w, tensors):
    w.u32(len(tensors))
    for name, t in tensors.items():
        t = np.asarray(t, dtype="<f4")
        w.text(name)
        w.u32(t.ndim)
        for dim in t.shape:
            w.u32(dim)
        w.raw(np.ascontiguousarray(t).tobytes())


def _read_tensors(r):
    out = {}
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def _header(w, kind, latent_dim, image_size, descriptor):
    w.raw(MAGIC)
    w.u32(FORMAT_VERSION)
    w.u32(KIND_TAGS[kind])
    w.u32(latent_dim)
    w.u32(image_size)
    w.text(json.dumps(descriptor, sort_keys=True, separators=(",", ":")))


def serialize_model(model):
    w = _Writer()
    if isinstance(model, GanModel):
        desc = {"generator": model.generator.specs(), "critic": model.critic.specs(), "clip_c": model.clip_c}
        _header(w, "gan", model.latent_dim, model.image_size, desc)
        tensors = {f"generator.{k}": v for k, v in model.generator.params.items()}
        tensors.update({f"critic.{k}": v for k, v in model.critic.params.items()})
        _write_tensors(w, tensors)
    elif isinstance(model, InverseModel):
        _header(w, "inverse", model.latent_dim, model.image_size, {"network": model.network.specs()})
        _write_tensors(w, model.network.params)
    elif isinstance(model, ForestModel):
        _header(w, "forest", model.n_features, 0, {"n_trees": model.n_trees})
        w.u32(model.n_trees)
        w.u64(model.seed & (2**64 - 1))
        oob = model.oob_indices or [np.zeros(0, np.int64)] * model.n_trees
        for tree, bag in zip(model.trees, oob):
            w.u32(len(tree.feature))
            for i in range(len(tree.feature)):
                w.i32(int(tree.feature[i]))
                w.f32(float(tree.threshold[i]))
                w.u32(int(tree.left[i]))
                w.u32(int(tree.right[i]))
                w.u32(int(tree.counts[i, 0]))
                w.u32(int(tree.counts[i, 1]))
            w.u32(len(bag))
            for j in bag:
                w.u32(int(j))
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return w.buf.getvalue()


def _network(specs, tensors, prefix=""):
    try:
        net = nn.Network.from_specs(specs)
        net.load_params({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model tensors do not match the architecture: {exc}") from exc
    return net


def deserialize_model(data, expect=None):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelFormatError("not a GIN model file (bad magic bytes)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    tag = r.u32()
    if tag not in KIND_NAMES:
        raise ModelFormatError(f"unknown model kind tag {tag}")
    kind = KIND_NAMES[tag]
    if expect is not None and kind != expect:
        raise ModelFormatError(f"expected a {expect} model, found {kind}")
    latent_dim, image_size = r.u32(), r.u32()
    try:
        desc = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"bad architecture descriptor: {exc}") from exc

    if kind == "gan":
        tensors = _read_tensors(r)
        model = GanModel(
            _network(desc["generator"], tensors, "generator."),
            _network(desc["critic"], tensors, "critic."),
            latent_dim,
            image_size,
            float(desc["clip_c"]),
        )
    elif kind == "inverse":
        model = InverseModel(_network(desc["network"], _read_tensors(r)), latent_dim, image_size)
    else:
        n_trees = r.u32()
        seed = r.u64()
        trees, oob = [], []
        for _ in range(n_trees):
            n = r.u32()
            rows = [(r.i32(), r.f32(), r.u32(), r.u32(), r.u32(), r.u32()) for _ in range(n)]
            arr = list(zip(*rows)) if rows else [[]] * 6
            trees.append(
                Tree(
                    np.array(arr[0], dtype=np.int32),
                    np.array(arr[1], dtype=np.float32),
                    np.array(arr[2], dtype=np.int64),
                    np.array(arr[3], dtype=np.int64),
                    np.array(list(zip(arr[4], arr[5])), dtype=np.int64).reshape(-1, 2),
                )
            )
            oob.append(np.array([r.u32() for _ in range(r.u32())], dtype=np.int64))
        model = ForestModel(trees, latent_dim, seed, oob)
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after model payload")
    return model


def save_model(path, model):
    data = serialize_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_model(path, expect=None):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read(), expect)


# --------------------------------------------------------------------------
# training logs


LOG_FIELDS = ["iter", "critic_loss", "gen_loss", "inverse_mse", "elapsed_ms"]


def write_training_log(path, tlog):
    write_csv(path, LOG_FIELDS, ([r[k] for k in LOG_FIELDS] for r in tlog.rows))
