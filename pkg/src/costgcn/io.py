"""Weight container, skeleton clip/stream formats, modalities and score fusion.

COSG container layout (all integers little-endian)::

    b"COSG" | u32 version (=1) | u64 header_len | header (UTF-8 JSON) | payload

The header is ``{"tensors": {name: {"shape": [...], "offset": int, "dtype": "f32"}}}``
with offsets counted in bytes from the start of the payload.
"""
from __future__ import annotations

import json
import logging
import struct
import sys
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Literal

import numpy as np

from .continual import ConfigError, DelayLine
from .graph import SkeletonGraph
from .numerics import DTYPE, DimensionError, softmax_rows

log = logging.getLogger(__name__)

MAGIC = b"COSG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

ModalityKind = Literal["joints", "bones", "joint_motion", "bone_motion"]
MODALITIES = ("joints", "bones", "joint_motion", "bone_motion")


class FormatError(ValueError):
    """A container or stream violates its format; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class WeightStore(Mapping):
    """Read-only mapping from dotted tensor names to float32 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            if not isinstance(name, str) or not name:
                raise FormatError("name", f"invalid tensor name {name!r}")
            arr = np.array(value, dtype=DTYPE, order="C")
            arr.flags.writeable = False
            self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"WeightStore({len(self)} tensors)"

    def to_bytes(self) -> bytes:
        entries = {}
        chunks = []
        offset = 0
        for name, arr in self._tensors.items():
            raw = arr.astype("<f4").tobytes()
            entries[name] = {"shape": list(arr.shape), "offset": offset, "dtype": "f32"}
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        if len(data) < _PREFIX.size:
            raise FormatError("magic", "file too short for the container prefix")
        magic, version, header_len = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}")
        start = _PREFIX.size
        if start + header_len > len(data):
            raise FormatError("header_len", f"header of {header_len} bytes runs past end of file")
        try:
            header = json.loads(data[start:start + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError("header", f"not valid UTF-8 JSON ({exc})") from None
        if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict):
            raise FormatError("header", "missing 'tensors' object")
        payload = memoryview(data)[start + header_len:]
        spans = []
        tensors = {}
        for name, meta in header["tensors"].items():
            if not isinstance(meta, dict):
                raise FormatError(f"tensors.{name}", "entry must be an object")
            shape, offset = meta.get("shape"), meta.get("offset")
            if meta.get("dtype") != "f32":
                raise FormatError(f"tensors.{name}.dtype", f"unsupported dtype {meta.get('dtype')!r}")
            if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0
                                                      for d in shape):
                raise FormatError(f"tensors.{name}.shape", f"invalid shape {shape!r}")
            if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
                raise FormatError(f"tensors.{name}.offset", f"invalid offset {offset!r}")
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(payload):
                raise FormatError("payload", f"truncated: tensor {name!r} needs bytes [{offset}, {offset + nbytes})"
                                             f" of a {len(payload)}-byte payload")
            spans.append((offset, offset + nbytes, name))
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        spans.sort()
        for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
            if begin < end:
                raise FormatError(f"tensors.{b}.offset", f"overlaps tensor {a!r}")
        return cls(tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "WeightStore":
        return cls.from_bytes(Path(path).read_bytes())


def save_weights(path, store: Mapping[str, np.ndarray]) -> None:
    WeightStore(store).save(path)


def load_weights(path) -> WeightStore:
    return WeightStore.load(path)


def write_clip(path, clip) -> None:
    clip = np.asarray(clip, dtype=DTYPE)
    if clip.ndim != 4:
        raise DimensionError(f"clip must be (C0, T, V, M), got shape {clip.shape}")
    WeightStore({"clip": clip}).save(path)


def read_clip(path) -> np.ndarray:
    store = WeightStore.load(path)
    if list(store) != ["clip"]:
        raise FormatError("tensors", f"clip container must hold exactly one tensor named 'clip', found {list(store)}")
    clip = store["clip"]
    if clip.ndim != 4:
        raise FormatError("tensors.clip.shape", f"expected 4 dims (C0, T, V, M), got {list(clip.shape)}")
    return clip


@dataclass
class SkeletonFrame:
    t: int
    bodies: np.ndarray  # (M, V, C)

    def tensor(self, persons: int | None = None) -> np.ndarray:
        """Frame as (C, V, M), zero-padding absent bodies up to ``persons``."""
        x = np.ascontiguousarray(self.bodies.transpose(2, 1, 0))
        if persons is not None and x.shape[2] < persons:
            x = np.concatenate([x, np.zeros(x.shape[:2] + (persons - x.shape[2],), DTYPE)], axis=2)
        return x


class FrameStream:
    """Iterate frames from newline-delimited JSON, skipping malformed lines.

    Each line is ``{"t": int, "bodies": [[[c0, c1, c2], ...V joints], ...M bodies]}``.
    The first valid frame fixes V and the channel count unless they are given.
    """

    def __init__(self, lines: Iterable[str], V: int | None = None, channels: int | None = None,
                 persons: int | None = None):
        self._lines = lines
        self.V = V
        self.channels = channels
        self.persons = persons
        self.skipped = 0
        self.problems: deque[tuple[int, str]] = deque(maxlen=100)  # most recent only

    def _reject(self, lineno: int, why: str):
        self.skipped += 1
        self.problems.append((lineno, why))
        log.warning("stream line %d skipped: %s", lineno, why)

    def __iter__(self) -> Iterator[SkeletonFrame]:
        for lineno, line in enumerate(self._lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                self._reject(lineno, f"invalid JSON ({exc.msg})")
                continue
            if not isinstance(obj, dict) or not isinstance(obj.get("t"), int) or "bodies" not in obj:
                self._reject(lineno, "expected an object with integer 't' and 'bodies'")
                continue
            try:
                bodies = np.asarray(obj["bodies"], dtype=DTYPE)
            except (TypeError, ValueError):
                self._reject(lineno, "ragged or non-numeric 'bodies'")
                continue
            if bodies.ndim != 3 or bodies.shape[0] < 1:
                self._reject(lineno, f"'bodies' must be M x V x C, got shape {list(bodies.shape)}")
                continue
            M, V, C = bodies.shape
            if self.V is None:
                self.V = V
            if self.channels is None:
                self.channels = C
            if V != self.V or C != self.channels:
                self._reject(lineno, f"expected {self.V} joints x {self.channels} channels, got {V} x {C}")
                continue
            if self.persons is not None and M > self.persons:
                self._reject(lineno, f"{M} bodies exceed the configured {self.persons}")
                continue
            if not np.all(np.isfinite(bodies)):
                self._reject(lineno, "non-finite coordinate")
                continue
            yield SkeletonFrame(obj["t"], bodies)


def open_stream(source: str | Path | IO[str], **kwargs) -> FrameStream:
    """Frame iterator over a path, ``"-"`` (stdin) or an open text handle."""
    if source == "-":
        return FrameStream(sys.stdin, **kwargs)
    if isinstance(source, (str, Path)):
        return FrameStream(_lines_of(Path(source)), **kwargs)
    return FrameStream(source, **kwargs)


def _lines_of(path: Path) -> Iterator[str]:
    with open(path) as fh:
        yield from fh


def frame_line(t: int, frame: np.ndarray) -> str:
    """Serialise a (C, V, M) frame as one JSON line."""
    bodies = np.asarray(frame, dtype=DTYPE).transpose(2, 1, 0)
    return json.dumps({"t": int(t), "bodies": [[[float(c) for c in joint] for joint in body] for body in bodies]})


def write_stream(fh: IO[str], clip) -> None:
    clip = np.asarray(clip, dtype=DTYPE)
    for t in range(clip.shape[1]):
        fh.write(frame_line(t, clip[:, t]) + "\n")


def _bones(x: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    """Joint minus parent joint along the V axis (axis -2); center row stays zero."""
    out = np.zeros_like(x)
    for i, parent in enumerate(graph.parents()):
        if parent is not None:
            out[..., i, :] = x[..., i, :] - x[..., parent, :]
    return out


def derive_modality(frames, kind: ModalityKind, graph: SkeletonGraph | None = None) -> np.ndarray:
    """Derive a modality from a (C, T, V, M) clip of joint coordinates."""
    x = np.asarray(frames, dtype=DTYPE)
    if kind not in MODALITIES:
        raise ValueError(f"unknown modality {kind!r}")
    if kind in ("bones", "bone_motion"):
        if graph is None:
            raise ConfigError(f"modality {kind!r} needs a skeleton graph")
        x = _bones(x, graph)
    if kind in ("joint_motion", "bone_motion"):
        motion = np.zeros_like(x)
        motion[:, 1:] = x[:, 1:] - x[:, :-1]
        x = motion
    return x


class ModalityStream:
    """Frame-by-frame modality derivation; motion keeps a one-frame delay line."""

    def __init__(self, kind: ModalityKind, graph: SkeletonGraph | None = None):
        if kind not in MODALITIES:
            raise ValueError(f"unknown modality {kind!r}")
        if kind in ("bones", "bone_motion") and graph is None:
            raise ConfigError(f"modality {kind!r} needs a skeleton graph")
        self.kind = kind
        self.graph = graph
        self._prev = DelayLine(1) if kind.endswith("motion") else None

    def step(self, frame) -> np.ndarray:
        """Map a (C, V, M) frame to its derived (C, V, M) frame."""
        x = np.asarray(frame, dtype=DTYPE)
        if self.kind in ("bones", "bone_motion"):
            x = _bones(x, self.graph)
        if self._prev is not None:
            prev = self._prev.step(x)
            x = np.zeros_like(x) if prev is None else x - prev
        return x


def fuse_scores(logits_list) -> np.ndarray:
    """Sum of per-stream softmax scores; ``argmax`` of the result breaks ties low."""
    logits_list = [np.asarray(l, dtype=DTYPE) for l in logits_list]
    if not logits_list:
        raise ValueError("fuse_scores needs at least one stream")
    n = logits_list[0].shape
    if any(l.shape != n or l.ndim != 1 for l in logits_list):
        raise DimensionError("all streams must provide equal-length 1-D logits")
    return softmax_rows(np.stack(logits_list)).sum(axis=0)


def fused_prediction(logits_list) -> int:
    return int(np.argmax(fuse_scores(logits_list)))
