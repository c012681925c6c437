"""Domain types shared across the package.

Images are plain ``numpy`` arrays of shape ``(side, side, 3)`` holding floats in
``[0, 1]``. Latent codes are wrapped in :class:`LatentCode` so they behave as
immutable values.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DECISION_THRESHOLD = 0.5
LEVELS = ("S", "M", "D", "Full")


class ShapeError(ValueError):
    """Raised when array shapes disagree with a declared contract."""


class PartitionError(ValueError):
    """Raised when a style stack cannot be split into three equal levels."""


class Label(str, enum.Enum):
    REAL = "real"
    FAKE = "fake"

    @classmethod
    def parse(cls, value: "Label | str") -> "Label":
        if isinstance(value, Label):
            return value
        return cls(str(value).lower())


def label_to_scalar(label: Label | str) -> float:
    """Numeric target used by every loss: real -> 0.0, fake -> 1.0."""
    return 1.0 if Label.parse(label) is Label.FAKE else 0.0


def scalar_to_label(score: float) -> Label:
    """Verdict for a fake-probability; exactly 0.5 counts as real."""
    return Label.FAKE if score > DECISION_THRESHOLD else Label.REAL


def derive_seed(seed: int, key: str) -> int:
    """Stable per-item seed from an experiment seed and an identifier."""
    digest = hashlib.sha256(f"{int(seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- images -----------------------------------------------------------------


def check_image(x: np.ndarray, side: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"expected a square (side, side, 3) image, got {x.shape}")
    if side is not None and x.shape[0] != side:
        raise ShapeError(f"expected side {side}, got {x.shape[0]}")
    return x


def clamp_image(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def image_to_uint8(x: np.ndarray) -> np.ndarray:
    # round half up, single clamp point
    return np.floor(clamp_image(x) * 255.0 + 0.5).astype(np.uint8)


def uint8_to_image(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a[..., :3].astype(np.float64) / 255.0


def save_png(path: str | Path, x: np.ndarray, text: dict[str, str] | None = None) -> None:
    from PIL.PngImagePlugin import PngInfo

    info = None
    if text:
        info = PngInfo()
        for key in sorted(text):
            info.add_text(key, text[key])
    arr = image_to_uint8(x) if x.dtype != np.uint8 else x
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


# -- latents ----------------------------------------------------------------


class LatentCode:
    """A stack of ``num_styles`` style vectors, each ``dim`` wide.

    Arithmetic returns new codes; the wrapped array is read-only.
    """

    __slots__ = ("_codes",)

    def __init__(self, codes: np.ndarray | Sequence[Sequence[float]]):
        arr = np.array(codes, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"latent codes must be 2-D (num_styles, dim), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent codes must be finite")
        arr.setflags(write=False)
        self._codes = arr

    @classmethod
    def zeros(cls, num_styles: int, dim: int) -> "LatentCode":
        return cls(np.zeros((num_styles, dim)))

    @property
    def codes(self) -> np.ndarray:
        return self._codes

    @property
    def num_styles(self) -> int:
        return self._codes.shape[0]

    @property
    def dim(self) -> int:
        return self._codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._codes.shape

    def _other(self, other: "LatentCode | np.ndarray") -> np.ndarray:
        arr = other.codes if isinstance(other, LatentCode) else np.asarray(other, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"latent shape mismatch: {self.shape} vs {arr.shape}")
        return arr

    def __add__(self, other):
        return LatentCode(self._codes + self._other(other))

    def __sub__(self, other):
        return LatentCode(self._codes - self._other(other))

    def __mul__(self, scale: float):
        return LatentCode(self._codes * float(scale))

    __rmul__ = __mul__

    def __neg__(self):
        return LatentCode(-self._codes)

    def sign(self) -> "LatentCode":
        return LatentCode(np.sign(self._codes))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatentCode):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._codes, other._codes))

    def __hash__(self):
        return hash((self.shape, self._codes.tobytes()))

    def __repr__(self) -> str:
        return f"LatentCode(num_styles={self.num_styles}, dim={self.dim})"

    # Persistence: flat little-endian float32, k*dim values, plus JSON sidecar.

    def to_bytes(self) -> bytes:
        return self._codes.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, num_styles: int, dim: int) -> "LatentCode":
        arr = np.frombuffer(data, dtype="<f4")
        if arr.size != num_styles * dim:
            raise ShapeError(f"expected {num_styles * dim} floats, found {arr.size}")
        return cls(arr.reshape(num_styles, dim))

    def quantized(self) -> "LatentCode":
        """The code as it survives a save/load cycle."""
        return LatentCode(self._codes.astype("<f4"))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        meta = {"num_styles": self.num_styles, "dim": self.dim, "dtype": "float32", "byteorder": "little"}
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LatentCode":
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        return cls.from_bytes(path.read_bytes(), int(meta["num_styles"]), int(meta["dim"]))


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


# -- masks ------------------------------------------------------------------


@dataclass(frozen=True)
class LevelMask:
    flags: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))
        if not self.flags:
            raise ValueError("mask must cover at least one style")

    def __len__(self) -> int:
        return len(self.flags)

    def as_array(self) -> np.ndarray:
        return np.array(self.flags, dtype=bool)

    @classmethod
    def full(cls, num_styles: int) -> "LevelMask":
        return cls((True,) * num_styles)


def level_slices(num_styles: int) -> dict[str, slice]:
    if num_styles <= 0 or num_styles % 3:
        raise PartitionError(f"num_styles={num_styles} is not divisible by 3")
    t = num_styles // 3
    return {"S": slice(0, t), "M": slice(t, 2 * t), "D": slice(2 * t, num_styles)}


def predefined_mask(level: str, num_styles: int) -> LevelMask:
    """S/M/D select the first, middle and last third of the style stack."""
    slices = level_slices(num_styles)
    if level == "Full":
        return LevelMask.full(num_styles)
    if level not in slices:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
    flags = np.zeros(num_styles, dtype=bool)
    flags[slices[level]] = True
    return LevelMask(tuple(flags))


# -- attack configs / results -----------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    max_queries: int
    target: Label = Label.REAL
    mask: LevelMask | None = None
    early_stop: bool = True
    # Flip to step along +sign(grad), i.e. ascend the loss.
    ascent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target", Label.parse(self.target))
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be a finite non-negative number, got {self.epsilon}")
        if self.max_queries < 1:
            raise ValueError(f"max_queries must be >= 1, got {self.max_queries}")


class Status(str, enum.Enum):
    SUCCESS = "success"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass
class AttackResult:
    adversarial_image: np.ndarray
    queries_used: int
    final_score: float
    status: Status
    score_trace: list[float] = field(default_factory=list)
    adversarial_latent: LatentCode | None = None
    target: Label = Label.REAL
    method: str = "latent"

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS

    def summary(self) -> dict:
        """JSON-ready view without the image payload."""
        return {
            "method": self.method,
            "target": self.target.value,
            "status": self.status.value,
            "queries_used": self.queries_used,
            "final_score": self.final_score,
            "score_trace": list(self.score_trace),
        }
