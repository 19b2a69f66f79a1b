"""On-disk formats: keypoint documents, Middlebury ``.flo`` flows and images.

Keypoint documents are JSON::

    {"version": 1, "K": 10, "N": 5,
     "frames": [{"source": [[[x, y], ...N], ...K],
                 "driving": [[[x, y], ...N], ...K],
                 "bg": [a11, a12, a13, a21, a22, a23]}]}   # bg optional

Coordinates are normalized, so documents do not depend on image size.

Flow files hold pixel displacements. For a flow of width ``W`` the
displacement of pixel column ``c`` is ``u = (x + 1) / 2 * (W - 1) - c``
where ``x`` is the normalized sample coordinate (likewise ``v`` with rows
and ``H``); reading applies the inverse, ``x = 2 (c + u) / (W - 1) - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .errors import ContractError, FlowFormatError
from .geometry import AffineTransform
from .motion import DenseFlow

__all__ = [
    "FLO_MAGIC",
    "KeypointDocument",
    "KeypointFrame",
    "read_flo",
    "read_flow",
    "read_image",
    "read_keypoints",
    "read_mask",
    "write_flo",
    "write_flow",
    "write_image",
    "write_keypoints",
]

FLO_MAGIC = b"PIEH"
DOCUMENT_VERSION = 1


@dataclass
class KeypointFrame:
    source: NDArray[np.float64]
    driving: NDArray[np.float64]
    bg: Optional[AffineTransform] = None

    @property
    def background(self) -> AffineTransform:
        return self.bg if self.bg is not None else AffineTransform.identity()


@dataclass
class KeypointDocument:
    k: int
    n: int
    frames: list = field(default_factory=list)
    version: int = DOCUMENT_VERSION

    def __post_init__(self):
        if self.version != DOCUMENT_VERSION:
            raise ContractError(f"unsupported keypoint document version {self.version}")
        for i, fr in enumerate(self.frames):
            for block in ("source", "driving"):
                arr = np.asarray(getattr(fr, block), dtype=np.float64)
                if arr.shape != (self.k, self.n, 2):
                    raise ContractError(
                        f"frame {i} {block} block has shape {arr.shape}, "
                        f"expected ({self.k}, {self.n}, 2)"
                    )
                if not np.all(np.isfinite(arr)):
                    raise ContractError(f"frame {i} {block} block has non-finite coordinates")
                setattr(fr, block, arr)

    def frame(self, index: int) -> KeypointFrame:
        if not 0 <= index < len(self.frames):
            raise ContractError(f"frame {index} out of range (document has {len(self.frames)})")
        return self.frames[index]

    def to_dict(self) -> dict:
        frames = []
        for fr in self.frames:
            d = {"source": fr.source.tolist(), "driving": fr.driving.tolist()}
            if fr.bg is not None:
                d["bg"] = fr.bg.matrix.ravel().tolist()
            frames.append(d)
        return {"version": self.version, "K": self.k, "N": self.n, "frames": frames}

    @classmethod
    def from_dict(cls, d: dict) -> KeypointDocument:
        try:
            frames = [
                KeypointFrame(
                    np.asarray(fr["source"], dtype=np.float64),
                    np.asarray(fr["driving"], dtype=np.float64),
                    AffineTransform.from_flat(fr["bg"]) if fr.get("bg") is not None else None,
                )
                for fr in d["frames"]
            ]
            return cls(int(d["K"]), int(d["N"]), frames, int(d["version"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ContractError):
                raise
            raise ContractError(f"malformed keypoint document: {exc}") from exc


def read_keypoints(path) -> KeypointDocument:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: not valid JSON ({exc})") from exc
    return KeypointDocument.from_dict(data)


def write_keypoints(doc: KeypointDocument, path) -> None:
    Path(path).write_text(json.dumps(doc.to_dict(), indent=1) + "\n")


def read_flo(path) -> NDArray[np.float32]:
    """Raw ``(H, W, 2)`` float32 displacements from a Middlebury file."""
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}")
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    if w < 1 or h < 1:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = 12 + 8 * int(w) * int(h)
    if len(raw) != expected:
        raise FlowFormatError(
            f"{path}: payload is {len(raw) - 12} bytes, header declares {w}x{h} "
            f"({expected - 12} bytes)"
        )
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(int(h), int(w), 2).astype(np.float32)


def write_flo(disp, path) -> None:
    disp = np.asarray(disp)
    if disp.ndim != 3 or disp.shape[2] != 2:
        raise ContractError(f"displacement must have shape (H, W, 2), got {disp.shape}")
    h, w = disp.shape[:2]
    header = FLO_MAGIC + np.array([w, h], dtype="<i4").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(disp, dtype="<f4").tobytes())


def read_flow(path) -> DenseFlow:
    return DenseFlow.from_pixel_displacement(read_flo(path).astype(np.float64))


def write_flow(flow: DenseFlow, path) -> None:
    write_flo(flow.pixel_displacement(), path)


def read_image(path) -> NDArray[np.float64]:
    """8-bit PNG/PGM as a float ``(C, H, W)`` array with values in ``[0, 255]``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        a = np.asarray(im, dtype=np.float64)
    return a[None] if a.ndim == 2 else np.moveaxis(a, -1, 0)


def read_mask(path) -> NDArray[np.float64]:
    """Grayscale image scaled to ``[0, 1]``."""
    a = read_image(path)
    return a.mean(axis=0) / 255.0


def to_uint8(img) -> NDArray[np.uint8]:
    """Clamp to ``[0, 255]`` and round half to even."""
    return np.rint(np.clip(img, 0.0, 255.0)).astype(np.uint8)


def write_image(img, path) -> None:
    from PIL import Image

    a = to_uint8(img)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else np.moveaxis(a, 0, -1)
    Image.fromarray(a).save(path)
