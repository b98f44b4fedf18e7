"""Binary PGM/PPM codec, lesion annotations (JSON Lines) and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CLASSES = ("BK", "FK", "HSK", "Others")
_WHITESPACE = b" \t\n\r\v\f"


class ImageFormatError(ValueError):
    """Base for decode failures; ``offset`` is the byte where parsing stopped."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class UnknownMagicError(ImageFormatError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class UnsupportedMaxvalError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class AnnotationError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(eq=False)
class Image:
    """8-bit raster stored as a (height, width, channels) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"bad image shape {px.shape}")
        if px.shape[2] not in (1, 3):
            raise ValueError(f"unsupported channel count {px.shape[2]}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_flat(cls, width: int, height: int, channels: int, data) -> "Image":
        arr = np.asarray(data, dtype=np.uint8)
        if arr.size != width * height * channels:
            raise ValueError("pixel count does not match width*height*channels")
        return cls(arr.reshape(height, width, channels))

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments
    n = len(buf)
    while pos < n:
        if buf[pos] in _WHITESPACE:
            pos += 1
        elif buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise MalformedHeaderError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_image(buf: bytes) -> Image:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise UnknownMagicError(f"unknown magic {buf[:2]!r}", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise MalformedHeaderError("expected whitespace after magic", pos)
    values = []
    for what in ("width", "height", "maxval"):
        tok_start = pos
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise MalformedHeaderError(f"{what} is not a decimal integer: {tok!r}", tok_start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"image dimensions must be positive, got {width}x{height}", pos)
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval must be 255, got {maxval}", pos)
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise MalformedHeaderError("expected one whitespace byte before payload", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} of {need} bytes", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return Image(data.reshape(height, width, channels).copy())


def encode_image(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def read_image(path) -> Image:
    return decode_image(Path(path).read_bytes())


def write_image(img: Image, path) -> None:
    if img.channels not in (1, 3):
        raise ValueError(f"unsupported channel count {img.channels}")
    Path(path).write_bytes(encode_image(img))


@dataclass(frozen=True)
class LesionAnnotation:
    image_path: str
    cx: float
    cy: float
    r: float
    label: int

    def to_json(self) -> dict:
        return {"image": self.image_path, "cx": self.cx, "cy": self.cy, "r": self.r, "label": self.label}

    def check_bounds(self, img: Image) -> None:
        if not (0 <= self.cx < img.width and 0 <= self.cy < img.height):
            raise AnnotationError(
                f"centroid ({self.cx}, {self.cy}) outside {img.width}x{img.height} image {self.image_path}"
            )


_KEYS = ("image", "cx", "cy", "r", "label")


def parse_annotation(obj, classes=None, line: int | None = None) -> LesionAnnotation:
    if not isinstance(obj, dict):
        raise AnnotationError("annotation must be a JSON object", line)
    for key in _KEYS:
        if key not in obj:
            raise AnnotationError(f"missing key {key!r}", line)
    label = obj["label"]
    if isinstance(label, str):
        if classes is None or label not in classes:
            raise AnnotationError(f"unknown class name {label!r}", line)
        label = list(classes).index(label)
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise AnnotationError(f"label must be a non-negative class index, got {obj['label']!r}", line)
    if classes is not None and label >= len(classes):
        raise AnnotationError(f"label {label} out of range for {len(classes)} classes", line)
    try:
        cx, cy, r = float(obj["cx"]), float(obj["cy"]), float(obj["r"])
    except (TypeError, ValueError):
        raise AnnotationError("cx, cy, r must be numbers", line) from None
    if not r > 0:
        raise AnnotationError(f"radius must be positive, got {obj['r']}", line)
    return LesionAnnotation(str(obj["image"]), cx, cy, r, label)


def read_annotations(path, classes=None) -> list[LesionAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"invalid JSON: {e.msg}", lineno) from None
            out.append(parse_annotation(obj, classes, lineno))
    return out


def write_annotations(anns, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in anns:
            fh.write(json.dumps(a.to_json()) + "\n")


@dataclass
class DatasetManifest:
    classes: list = field(default_factory=lambda: list(DEFAULT_CLASSES))
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    root: str = "."  # directory image paths are relative to

    def __post_init__(self):
        for split in ("train", "test"):
            seen = set()
            for a in getattr(self, split):
                if a.label >= len(self.classes):
                    raise AnnotationError(f"{split}: label {a.label} out of range for {len(self.classes)} classes")
                if a.image_path in seen:
                    raise AnnotationError(f"{split}: duplicate image {a.image_path}")
                seen.add(a.image_path)

    def resolve(self, ann: LesionAnnotation) -> str:
        return os.path.join(self.root, ann.image_path)

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "train": [a.to_json() for a in self.train],
            "test": [a.to_json() for a in self.test],
        }


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AnnotationError(f"manifest is not valid JSON: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict) or "classes" not in doc:
        raise AnnotationError("manifest must be an object with a 'classes' list")
    classes = list(doc["classes"])
    splits = {}
    for split in ("train", "test"):
        splits[split] = [parse_annotation(o, classes) for o in doc.get(split, [])]
    return DatasetManifest(classes, splits["train"], splits["test"], root=str(path.parent))


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")
