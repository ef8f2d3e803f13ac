"""File formats: binary tensor containers and the JSON sidecar documents.

All binary formats are little-endian with a four-byte ASCII magic:

* ``TCAF`` - per-video feature maps. Header: magic, version u32, frame
  count u32, layer count u32. Then per layer: h, w, c as u32 followed by
  f*h*w*c float32 activations in frame-major, row-major order.
* ``TCAW`` - whitening model. Magic, D_in u32, D_out u32, mean as D_in
  float32, projection as D_in x D_out float32 row-major.
* ``TCAE`` - encoder checkpoint. Magic, version u32, config block (dim,
  heads, ffn_dim as u32, dropout_rate f32, seed u64), then the parameter
  tensors as float32 row-major in ``EncoderParams`` field order.
* ``TCAD`` - descriptor corpus. Magic, video count u32, then per video:
  id length u32, UTF-8 id, f u32, d u32, f*d float32 rows. A video-level
  descriptor file is the same format with one row per video.

Every writer goes through ``atomic_write`` (temp file in the destination
directory, then rename), so a crashed run never leaves a truncated file at
the target path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderParams
from .features import DescriptorWhitener, FeatureMapStack
from .validation import DataError, DimensionMismatchError, MalformedInputError

FEATURE_MAGIC = b"TCAF"
WHITENING_MAGIC = b"TCAW"
CHECKPOINT_MAGIC = b"TCAE"
CORPUS_MAGIC = b"TCAD"
CHECKPOINT_VERSION = 1
FEATURE_VERSION = 1


@contextmanager
def atomic_write(path):
    """Yield a binary file handle that replaces ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise DataError(f"truncated file while reading {what}")
    return data


def _read_u32(handle, what: str) -> int:
    return struct.unpack("<I", _read_exact(handle, 4, what))[0]


def _expect_magic(handle, magic: bytes, path) -> None:
    found = _read_exact(handle, 4, "magic")
    if found != magic:
        raise DataError(f"{path}: bad magic {found!r}, expected {magic!r}")


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_f32(handle, count: int, what: str) -> np.ndarray:
    data = _read_exact(handle, 4 * count, what)
    return np.frombuffer(data, dtype="<f4", count=count).astype(np.float64)


# ---------------------------------------------------------------------------
# Feature maps (TCAF)
# ---------------------------------------------------------------------------

def write_feature_maps(path, frames: list[FeatureMapStack]) -> None:
    """Write one video's per-frame feature-map stacks."""
    if not frames:
        raise MalformedInputError("no frames to write")
    layer_shapes = [np.asarray(layer).shape for layer in frames[0].layers]
    for stack in frames:
        shapes = [np.asarray(layer).shape for layer in stack.layers]
        if shapes != layer_shapes:
            raise DimensionMismatchError("all frames must share layer shapes")
    with atomic_write(path) as out:
        out.write(FEATURE_MAGIC)
        out.write(struct.pack("<III", FEATURE_VERSION, len(frames), len(layer_shapes)))
        for k, (h, w, c) in enumerate(layer_shapes):
            out.write(struct.pack("<III", h, w, c))
            for stack in frames:
                out.write(_f32_bytes(np.asarray(stack.layers[k])))


def read_feature_maps(path) -> list[FeatureMapStack]:
    with open(path, "rb") as handle:
        _expect_magic(handle, FEATURE_MAGIC, path)
        version = _read_u32(handle, "version")
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature-map version {version}")
        n_frames = _read_u32(handle, "frame count")
        n_layers = _read_u32(handle, "layer count")
        if n_frames < 1 or n_layers < 1:
            raise DataError(f"{path}: empty feature-map file")
        per_frame: list[list[np.ndarray]] = [[] for _ in range(n_frames)]
        for _ in range(n_layers):
            h = _read_u32(handle, "layer height")
            w = _read_u32(handle, "layer width")
            c = _read_u32(handle, "layer channels")
            if min(h, w, c) < 1:
                raise DataError(f"{path}: degenerate layer shape ({h}, {w}, {c})")
            for i in range(n_frames):
                grid = _read_f32(handle, h * w * c, "activations").reshape(h, w, c)
                per_frame[i].append(grid)
        if handle.read(1):
            raise DataError(f"{path}: trailing bytes after feature maps")
    return [FeatureMapStack(layers=layers, frame_index=i) for i, layers in enumerate(per_frame)]


# ---------------------------------------------------------------------------
# Whitening model (TCAW)
# ---------------------------------------------------------------------------

def write_whitening(path, model: DescriptorWhitener) -> None:
    with atomic_write(path) as out:
        out.write(WHITENING_MAGIC)
        out.write(struct.pack("<II", model.input_dim_, model.output_dim_))
        out.write(_f32_bytes(model.mean_))
        out.write(_f32_bytes(model.projection_))


def read_whitening(path) -> DescriptorWhitener:
    with open(path, "rb") as handle:
        _expect_magic(handle, WHITENING_MAGIC, path)
        d_in = _read_u32(handle, "input dim")
        d_out = _read_u32(handle, "output dim")
        if d_out > d_in or min(d_in, d_out) < 1:
            raise DataError(f"{path}: inconsistent dims {d_in} -> {d_out}")
        mean = _read_f32(handle, d_in, "mean")
        projection = _read_f32(handle, d_in * d_out, "projection").reshape(d_in, d_out)
        if handle.read(1):
            raise DataError(f"{path}: trailing bytes after whitening model")
    return DescriptorWhitener.from_arrays(mean, projection)


# ---------------------------------------------------------------------------
# Encoder checkpoint (TCAE)
# ---------------------------------------------------------------------------

def write_checkpoint(path, config: EncoderConfig, params: EncoderParams) -> None:
    with atomic_write(path) as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<IIIIfQ", CHECKPOINT_VERSION, config.dim, config.heads,
                              config.ffn_dim, config.dropout_rate, config.seed))
        for tensor in params.as_dict().values():
            out.write(_f32_bytes(tensor))


def read_checkpoint(path) -> tuple[EncoderConfig, EncoderParams]:
    with open(path, "rb") as handle:
        _expect_magic(handle, CHECKPOINT_MAGIC, path)
        version, dim, heads, ffn_dim, dropout, seed = struct.unpack(
            "<IIIIfQ", _read_exact(handle, 28, "checkpoint header")
        )
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        try:
            config = EncoderConfig(dim=dim, heads=heads, ffn_dim=ffn_dim,
                                   dropout_rate=float(dropout), seed=int(seed))
        except MalformedInputError as err:
            raise DataError(f"{path}: invalid checkpoint config: {err}") from err
        shapes = {
            "w_q": (dim, dim), "w_k": (dim, dim), "w_v": (dim, dim), "w_o": (dim, dim),
            "ffn_w1": (dim, ffn_dim), "ffn_b1": (ffn_dim,),
            "ffn_w2": (ffn_dim, dim), "ffn_b2": (dim,),
            "ln1_gain": (dim,), "ln1_bias": (dim,),
            "ln2_gain": (dim,), "ln2_bias": (dim,),
        }
        tensors = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            tensors[name] = _read_f32(handle, count, name).reshape(shape)
        if handle.read(1):
            raise DataError(f"{path}: trailing bytes after checkpoint")
    return config, EncoderParams(**tensors)


# ---------------------------------------------------------------------------
# Descriptor corpus (TCAD)
# ---------------------------------------------------------------------------

def write_corpus(path, corpus: dict[str, np.ndarray]) -> None:
    with atomic_write(path) as out:
        out.write(CORPUS_MAGIC)
        out.write(struct.pack("<I", len(corpus)))
        for vid, rows in corpus.items():
            rows = np.asarray(rows, dtype=np.float64)
            if rows.ndim != 2 or rows.shape[0] < 1:
                raise MalformedInputError(f"video {vid!r} has no descriptor rows")
            encoded = vid.encode("utf-8")
            out.write(struct.pack("<I", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
            out.write(_f32_bytes(rows))


def read_corpus(path) -> dict[str, np.ndarray]:
    corpus: dict[str, np.ndarray] = {}
    with open(path, "rb") as handle:
        _expect_magic(handle, CORPUS_MAGIC, path)
        count = _read_u32(handle, "video count")
        for _ in range(count):
            id_len = _read_u32(handle, "id length")
            vid = _read_exact(handle, id_len, "video id").decode("utf-8")
            f = _read_u32(handle, "frame count")
            d = _read_u32(handle, "descriptor dim")
            if f < 1 or d < 1:
                raise DataError(f"{path}: video {vid!r} has empty shape ({f}, {d})")
            if vid in corpus:
                raise DataError(f"{path}: duplicate video id {vid!r}")
            corpus[vid] = _read_f32(handle, f * d, f"rows of {vid!r}").reshape(f, d)
        if handle.read(1):
            raise DataError(f"{path}: trailing bytes after corpus")
    return corpus


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    core_pairs: list[tuple[str, str]]
    distractors: list[str]
    features: dict[str, str]
    root: Path

    def feature_path(self, vid: str) -> Path:
        return self.root / self.features[vid]


def write_json(path, payload: dict) -> None:
    data = json.dumps(payload, indent=2, sort_keys=True).encode("utf-8")
    with atomic_write(path) as out:
        out.write(data)
        out.write(b"\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise DataError(f"{path}: invalid JSON: {err}") from err


def write_manifest(path, core_pairs, distractors, features) -> None:
    write_json(path, {
        "core_pairs": [list(pair) for pair in core_pairs],
        "distractors": list(distractors),
        "features": dict(features),
    })


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    payload = read_json(path)
    for key in ("core_pairs", "distractors", "features"):
        if key not in payload:
            raise DataError(f"{path}: manifest is missing key {key!r}")
    core_pairs = []
    for pair in payload["core_pairs"]:
        if not isinstance(pair, list) or len(pair) != 2:
            raise DataError(f"{path}: core pair {pair!r} is not a 2-element list")
        core_pairs.append((str(pair[0]), str(pair[1])))
    distractors = [str(v) for v in payload["distractors"]]
    core_ids = {v for pair in core_pairs for v in pair}
    overlap = core_ids & set(distractors)
    if overlap:
        raise DataError(f"{path}: ids in both core and distractors: {sorted(overlap)[:5]}")
    if len(set(distractors)) != len(distractors):
        raise DataError(f"{path}: duplicate distractor ids")
    features = {str(k): str(v) for k, v in payload["features"].items()}
    return DatasetManifest(core_pairs=core_pairs, distractors=distractors,
                           features=features, root=path.parent)


def load_manifest_sequences(manifest: DatasetManifest, *, skip_missing: bool = True):
    """Resolve every referenced feature file into in-memory sequences.

    Feature paths point at descriptor corpus files; several ids may share one
    file. Distractors whose file is missing (or which are absent from their
    file) are skipped with a warning; core videos must resolve.
    """
    cache: dict[Path, dict[str, np.ndarray]] = {}

    def lookup(vid: str) -> np.ndarray | None:
        if vid not in manifest.features:
            return None
        fpath = manifest.feature_path(vid)
        if fpath not in cache:
            if not fpath.exists():
                cache[fpath] = {}
            else:
                cache[fpath] = read_corpus(fpath)
        return cache[fpath].get(vid)

    sequences: dict[str, np.ndarray] = {}
    core_ids = [v for pair in manifest.core_pairs for v in pair]
    for vid in core_ids:
        seq = lookup(vid)
        if seq is None:
            raise DataError(f"core video {vid!r} has no resolvable features")
        sequences[vid] = seq
    distractors = []
    for vid in manifest.distractors:
        seq = lookup(vid)
        if seq is None:
            if not skip_missing:
                raise DataError(f"distractor {vid!r} has no resolvable features")
            warnings.warn(f"distractor {vid!r} has no features; skipped")
            continue
        sequences[vid] = seq
        distractors.append(vid)
    return sequences, distractors
