"""Binary and text file formats: RLE masks, P6 images, label files,
oracle sidecars, dataset directories and model checkpoints.

Byte layouts are documented in docs/FORMATS.md. All integers are
little-endian. Readers raise :class:`FormatError` carrying the byte offset
at which parsing failed.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .synthdata import Dataset, InstanceLabel, Scene, SceneConfig, image_from_u8, image_to_u8

LABEL_MAGIC = b"S4ML"
LABEL_VERSION = 1
ORACLE_MAGIC = b"S4MO"
ORACLE_VERSION = 1
CKPT_MAGIC = b"S4MC"
CKPT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# run-length encoding


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with a
    (possibly empty) 0-run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs, shape) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total:
        raise FormatError(f"RLE covers {int(runs.sum())} pixels, mask has {total}")
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs).reshape(shape)


# ---------------------------------------------------------------------------
# P6 images


def write_ppm(path, image: np.ndarray) -> None:
    img8 = image_to_u8(image) if image.dtype != np.uint8 else image
    h, w = img8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns the raw uint8 (H, W, 3) array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated P6 header", pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise FormatError(f"not a P6 image: magic {tokens[0]!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed P6 header", 0) from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", 0)
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(f"truncated pixel payload: need {need} bytes, have {len(data) - pos}", pos)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# label files


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated payload while reading {what}", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def runs(self, shape, what: str) -> np.ndarray:
        start = self.pos
        n = self.take("<I", f"{what} run count")
        if self.pos + 4 * n > len(self.data):
            raise FormatError(f"truncated RLE block for {what}", self.pos)
        runs = np.frombuffer(self.data, dtype="<u4", count=n, offset=self.pos).astype(np.int64)
        total = int(np.prod(shape))
        if runs.sum() > total:
            raise FormatError(f"RLE overrun for {what}: {int(runs.sum())} > {total} pixels", start)
        if runs.sum() < total:
            raise FormatError(f"RLE underrun for {what}: {int(runs.sum())} < {total} pixels", start)
        self.pos += 4 * n
        return rle_decode(runs, shape)


def _pack_runs(mask) -> bytes:
    runs = rle_encode(mask)
    return struct.pack("<I", len(runs)) + runs.astype("<u4").tobytes()


def encode_labels(labels) -> bytes:
    out = [LABEL_MAGIC, struct.pack("<HI", LABEL_VERSION, len(labels))]
    for lab in labels:
        out.append(struct.pack("<Hf", lab.class_id, lab.confidence))
        out.append(_pack_runs(lab.mask))
    return b"".join(out)


def decode_labels(data: bytes, shape) -> list:
    r = _Reader(data)
    if data[:4] != LABEL_MAGIC:
        raise FormatError(f"bad label magic {data[:4]!r}", 0)
    r.pos = 4
    version, count = r.take("<HI", "header")
    if version != LABEL_VERSION:
        raise FormatError(f"unsupported label version {version}", 4)
    labels = []
    for k in range(count):
        cls, conf = r.take("<Hf", f"instance {k} header")
        mask = r.runs(shape, f"instance {k} mask")
        labels.append(InstanceLabel(cls, mask, conf))
    if r.pos != len(data):
        raise FormatError("trailing bytes after last instance", r.pos)
    return labels


def write_labels(path, labels) -> None:
    Path(path).write_bytes(encode_labels(labels))


def read_labels(path, shape) -> list:
    return decode_labels(Path(path).read_bytes(), shape)


def encode_oracle_sidecar(scene: Scene) -> bytes:
    out = [ORACLE_MAGIC, struct.pack("<HI", ORACLE_VERSION, len(scene.full_masks))]
    for full, parts in zip(scene.full_masks, scene.part_maps):
        p = int(parts.max())
        out.append(struct.pack("<B", p))
        out.append(_pack_runs(full))
        for k in range(1, p + 1):
            out.append(_pack_runs(parts == k))
    return b"".join(out)


def decode_oracle_sidecar(data: bytes, shape):
    if data[:4] != ORACLE_MAGIC:
        raise FormatError(f"bad oracle sidecar magic {data[:4]!r}", 0)
    r = _Reader(data)
    r.pos = 4
    version, count = r.take("<HI", "header")
    if version != ORACLE_VERSION:
        raise FormatError(f"unsupported sidecar version {version}", 4)
    fulls, parts = [], []
    for k in range(count):
        p = r.take("<B", f"instance {k} part count")
        fulls.append(r.runs(shape, f"instance {k} full mask"))
        pm = np.zeros(shape, dtype=np.int8)
        for j in range(1, p + 1):
            pm[r.runs(shape, f"instance {k} part {j}")] = j
        parts.append(pm)
    if r.pos != len(data):
        raise FormatError("trailing bytes in sidecar", r.pos)
    return fulls, parts


# ---------------------------------------------------------------------------
# dataset directories


def write_manifest(path, items: dict) -> None:
    lines = [f"{k}={v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {n} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    items = {"format": "semiseg-dataset", "version": 1, "count": len(dataset.scenes),
             "base_seed": dataset.base_seed}
    for k, v in cfg.to_dict().items():
        items[f"config.{k}"] = repr(v) if isinstance(v, float) else v
    for i, s in enumerate(dataset.scenes):
        sid = s.scene_id or f"scene_{i:05d}"
        h, w = s.shape
        items[f"scene.{i}.id"] = sid
        items[f"scene.{i}.seed"] = s.seed
        items[f"scene.{i}.size"] = f"{h}x{w}"
        write_ppm(root / f"{sid}.ppm", s.image)
        write_labels(root / f"{sid}.s4ml", s.instances)
        (root / f"{sid}.s4mo").write_bytes(encode_oracle_sidecar(s))
    write_manifest(root / "manifest.txt", items)


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.txt").exists():
        raise FormatError(f"{root} has no manifest.txt")
    m = read_manifest(root / "manifest.txt")
    if m.get("format") != "semiseg-dataset":
        raise FormatError(f"unknown dataset format {m.get('format')!r}")
    cfg = SceneConfig.from_dict({k[7:]: v for k, v in m.items() if k.startswith("config.")})
    scenes = []
    for i in range(int(m["count"])):
        sid = m[f"scene.{i}.id"]
        h, w = (int(x) for x in m[f"scene.{i}.size"].split("x"))
        img8 = read_ppm(root / f"{sid}.ppm")
        if img8.shape[:2] != (h, w):
            raise FormatError(f"{sid}.ppm is {img8.shape[:2]}, manifest says {(h, w)}")
        labels = read_labels(root / f"{sid}.s4ml", (h, w))
        sidecar = root / f"{sid}.s4mo"
        fulls, parts = decode_oracle_sidecar(sidecar.read_bytes(), (h, w)) if sidecar.exists() else ([], [])
        scenes.append(Scene(image_from_u8(img8), labels, int(m[f"scene.{i}.seed"]), fulls, parts, sid))
    return Dataset(cfg, scenes, int(m.get("base_seed", 0)))


def write_split(path, split) -> None:
    write_manifest(path, {"ratio": repr(split.ratio),
                          "labeled": ",".join(split.labeled_ids),
                          "unlabeled": ",".join(split.unlabeled_ids)})


def read_split(path):
    from .synthdata import DatasetSplit

    m = read_manifest(path)
    ids = lambda s: tuple(x for x in s.split(",") if x)  # noqa: E731
    return DatasetSplit(ids(m.get("labeled", "")), ids(m.get("unlabeled", "")), float(m["ratio"]))


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, tensors: dict, iteration: int = 0, rng_state: dict | None = None,
                     meta: dict | None = None) -> None:
    """``tensors`` maps name -> float32 array (parameters first, then optional
    optimizer moments under ``adam.m.*`` / ``adam.v.*``)."""
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    out.extend(payload)
    out.append(struct.pack("<Q", int(iteration)))
    extra = json.dumps({"rng": rng_state, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(extra)) + extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(out))
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (tensors, iteration, rng_state, meta)."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", 0)
    r = _Reader(data)
    r.pos = 4
    version, count = r.take("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    table = []
    for k in range(count):
        n = r.take("<H", f"tensor {k} name length")
        if r.pos + n > len(data):
            raise FormatError(f"truncated tensor {k} name", r.pos)
        name = data[r.pos : r.pos + n].decode("utf-8")
        r.pos += n
        ndim = r.take("<B", f"{name} rank")
        shape = r.take(f"<{ndim}I", f"{name} shape") if ndim else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        nbytes = 4 * int(np.prod(shape))
        if r.pos + nbytes > len(data):
            raise FormatError(f"truncated payload for {name}", r.pos)
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=r.pos).reshape(shape).astype(np.float32)
        r.pos += nbytes
    iteration = r.take("<Q", "iteration counter")
    n = r.take("<I", "trailer length")
    if r.pos + n != len(data):
        raise FormatError("checkpoint trailer length mismatch", r.pos)
    extra = json.loads(data[r.pos :].decode("utf-8"))
    return tensors, int(iteration), extra.get("rng"), extra.get("meta", {})
