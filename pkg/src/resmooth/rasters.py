"""Rasters and seedable augmentation transforms.

A raster is a ``uint8`` numpy array of shape ``(height, width, channels)``
in C order, which is exactly row-major channel-interleaved storage.  Every
random choice comes from an explicitly passed ``numpy.random.Generator``
(or a seed turned into one), and every transform writes a descriptor to an
augmentation log that is enough to replay it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels

CUTOUT_FILL = 128
TRANSLATE_FILL = 128
MAX_MAGNITUDE = 30
SA_PAD = 2

RAND_AUGMENT_OPS = (
    "identity",
    "autocontrast",
    "equalize",
    "invert",
    "solarize",
    "posterize",
    "brightness",
    "contrast",
    "sharpness",
    "translate",
)
# ops that reduce to the identity at magnitude 0
CALIBRATED_OPS = ("identity", "solarize", "posterize", "brightness", "contrast", "sharpness", "translate")

STRATEGY_KINDS = ("standard", "rand_augment", "jigsaw", "rotation", "cutout")


class RasterError(ValueError):
    pass


def as_raster(img) -> np.ndarray:
    """Validate and return ``img`` as an (H, W, C) uint8 raster.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise RasterError(f"raster must have shape (H, W, 1|3), got {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise RasterError("raster intensities must lie in [0, 255]")
        if np.any(arr != np.round(arr)):
            raise RasterError("raster intensities must be integers")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    sample_id: int
    origin: str = "original"
    aug_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in ("original", "augmented"):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.label < 0 or self.sample_id < 0:
            raise ValueError("label and sample_id must be non-negative")


@dataclass(frozen=True)
class AugmentStrategy:
    kind: str = "standard"
    p: float = 1.0
    n_ops: int = 2
    magnitude: int = 10
    grid_k: int = 2
    cut_size: int = 8
    # op subset for rand_augment; None means the full list
    ops: tuple | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.grid_k < 2:
            raise ValueError("grid_k must be >= 2")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"magnitude must lie in [0, {MAX_MAGNITUDE}]")
        if self.n_ops < 0 or self.cut_size < 0:
            raise ValueError("n_ops and cut_size must be non-negative")
        if self.ops is not None:
            bad = [o for o in self.ops if o not in RAND_AUGMENT_OPS]
            if bad or not self.ops:
                raise ValueError(f"unknown rand_augment ops {bad}")

    @property
    def is_negative(self) -> bool:
        return self.kind in ("jigsaw", "rotation")


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def format_descriptor(name: str, params: dict) -> str:
    """``name(key=value,...)``; sequence values are joined with ``:``."""
    parts = []
    for key, value in params.items():
        if isinstance(value, (list, tuple)):
            value = ":".join(str(int(v)) for v in value)
        parts.append(f"{key}={value}")
    return f"{name}({','.join(parts)})"


_DESC_RE = re.compile(r"^([a-z_]+)\((.*)\)$")


def parse_descriptor(text: str) -> tuple[str, dict]:
    m = _DESC_RE.match(text.strip())
    if not m:
        raise ValueError(f"malformed descriptor {text!r}")
    name, body = m.groups()
    params = {}
    if body:
        for item in body.split(","):
            key, _, raw = item.partition("=")
            if ":" in raw:
                params[key] = tuple(int(v) for v in raw.split(":"))
            else:
                for cast in (int, float, str):
                    try:
                        params[key] = cast(raw)
                        break
                    except ValueError:
                        continue
    return name, params


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------


def rotate_quarter(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate clockwise by ``k`` quarter turns."""
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    return np.ascontiguousarray(np.rot90(img, -k, axes=(0, 1)))


def jigsaw_shuffle(img: np.ndarray, grid_k: int, perm) -> np.ndarray:
    """Output patch ``i`` (row-major over the grid) is input patch ``perm[i]``."""
    h, w, c = img.shape
    if h % grid_k:
        raise RasterError(f"height {h} is not divisible by grid_k={grid_k}")
    if w % grid_k:
        raise RasterError(f"width {w} is not divisible by grid_k={grid_k}")
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (grid_k * grid_k,) or not np.array_equal(np.sort(perm), np.arange(grid_k * grid_k)):
        raise ValueError("perm must be a permutation of the grid cells")
    ph, pw = h // grid_k, w // grid_k
    tiles = img.reshape(grid_k, ph, grid_k, pw, c).transpose(0, 2, 1, 3, 4).reshape(grid_k * grid_k, ph, pw, c)
    tiles = tiles[perm]
    out = tiles.reshape(grid_k, grid_k, ph, pw, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    return np.ascontiguousarray(out)


def cutout(img: np.ndarray, size: int, center: tuple[int, int], fill: int = CUTOUT_FILL) -> np.ndarray:
    h, w = img.shape[:2]
    r, c = center
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside {h}x{w} image")
    if size < 0:
        raise ValueError("size must be non-negative")
    out = img.copy()
    r0, c0 = r - size // 2, c - size // 2
    out[max(r0, 0) : max(r0 + size, 0), max(c0, 0) : max(c0 + size, 0)] = fill
    return out


def translate(img: np.ndarray, axis: int, pixels: int, fill: int = TRANSLATE_FILL) -> np.ndarray:
    """Shift along ``axis`` (0 rows, 1 columns); vacated pixels get ``fill``."""
    out = np.full_like(img, fill)
    n = img.shape[axis]
    if abs(pixels) >= n:
        return out
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if pixels >= 0:
        src[axis], dst[axis] = slice(0, n - pixels), slice(pixels, n)
    else:
        src[axis], dst[axis] = slice(-pixels, n), slice(0, n + pixels)
    out[tuple(dst)] = img[tuple(src)]
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def pad_crop(img: np.ndarray, top: int, left: int, pad: int = SA_PAD) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.zeros((h + 2 * pad, w + 2 * pad, img.shape[2]), dtype=img.dtype)
    padded[pad : pad + h, pad : pad + w] = img
    return padded[top : top + h, left : left + w].copy()


# ---------------------------------------------------------------------------
# photometric ops
# ---------------------------------------------------------------------------


def _to_u8(f: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(f), 0, 255).astype(np.uint8)


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img.copy()
    return _to_u8(degenerate + factor * (img.astype(np.float64) - degenerate))


def autocontrast(img):
    out = img.copy()
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        lo, hi = int(plane.min()), int(plane.max())
        if hi > lo:
            out[:, :, ch] = _to_u8((plane.astype(np.float64) - lo) * (255.0 / (hi - lo)))
    return out


def equalize(img):
    return kernels.equalize(np.ascontiguousarray(img))


def invert(img):
    return 255 - img


def solarize(img, threshold: int):
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def posterize(img, bits: int):
    shift = 8 - bits
    return ((img >> shift) << shift).astype(np.uint8)


def brightness(img, factor: float):
    return _blend(np.zeros(img.shape), img, factor)


def contrast(img, factor: float):
    # degenerate image is the mean intensity (grey level for colour input)
    mean = float(img.astype(np.float64).mean())
    return _blend(np.full(img.shape, mean), img, factor)


def sharpness(img, factor: float):
    return _blend(kernels.smooth3(np.ascontiguousarray(img)), img, factor)


def _level(magnitude: int) -> float:
    return magnitude / MAX_MAGNITUDE


def _draw_op_params(name: str, magnitude: int, shape: tuple, rng: np.random.Generator) -> dict:
    """Realise one op's parameters; draws happen in a fixed order per op."""
    level = _level(magnitude)
    if name == "solarize":
        return {"threshold": int(round(256 - 256 * level))}
    if name == "posterize":
        return {"bits": int(8 - round(7 * level))}
    if name in ("brightness", "contrast", "sharpness"):
        sign = 1 if rng.random() < 0.5 else -1
        return {"factor": float(1.0 + sign * 0.9 * level)}
    if name == "translate":
        axis = int(rng.integers(2))
        sign = 1 if rng.random() < 0.5 else -1
        return {"axis": axis, "pixels": sign * int(round(0.3 * level * shape[1 - axis]))}
    return {}


def apply_op(img: np.ndarray, name: str, params: dict) -> np.ndarray:
    """Apply one named op with fully realised parameters."""
    if name == "identity":
        return img.copy()
    if name == "autocontrast":
        return autocontrast(img)
    if name == "equalize":
        return equalize(img)
    if name == "invert":
        return invert(img)
    if name == "solarize":
        return solarize(img, params["threshold"])
    if name == "posterize":
        return posterize(img, params["bits"])
    if name == "brightness":
        return brightness(img, params["factor"])
    if name == "contrast":
        return contrast(img, params["factor"])
    if name == "sharpness":
        return sharpness(img, params["factor"])
    if name == "translate":
        axis = params["axis"]
        # translate along x means shifting columns
        return translate(img, 1 - axis, params["pixels"])
    if name == "rotate":
        return rotate_quarter(img, params["k"])
    if name == "jigsaw":
        return jigsaw_shuffle(img, params["grid_k"], params["perm"])
    if name == "cutout":
        return cutout(img, params["size"], (params["row"], params["col"]), params.get("fill", CUTOUT_FILL))
    if name == "crop":
        return pad_crop(img, params["top"], params["left"], params.get("pad", SA_PAD))
    if name == "hflip":
        return hflip(img) if params.get("flip", 1) else img.copy()
    raise ValueError(f"unknown op {name!r}")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rand_augment(img: np.ndarray, n_ops: int, magnitude: int, seed, ops=None) -> tuple[np.ndarray, list[str]]:
    """Apply ``n_ops`` ops drawn uniformly with replacement.

    Draw order per op: the op index (``integers(len(ops))``), then that
    op's own parameter draws.
    """
    ops = RAND_AUGMENT_OPS if ops is None else tuple(ops)
    rng = _rng(seed)
    out = img
    log = []
    for _ in range(n_ops):
        name = ops[int(rng.integers(len(ops)))]
        params = _draw_op_params(name, magnitude, out.shape, rng)
        out = apply_op(out, name, params)
        log.append(format_descriptor(name, params))
    if not log:
        out = img.copy()
    return out, log


def random_jigsaw_perm(grid_k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform over non-identity permutations of the grid cells."""
    n = grid_k * grid_k
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def strategy_transform(img: np.ndarray, strategy: AugmentStrategy, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """The strategy-specific transform alone (no standard augmentation)."""
    kind = strategy.kind
    if kind == "standard":
        return img.copy(), []
    if kind == "rand_augment":
        return rand_augment(img, strategy.n_ops, strategy.magnitude, rng, strategy.ops)
    if kind == "rotation":
        params = {"k": int(rng.integers(1, 4))}
        return rotate_quarter(img, params["k"]), [format_descriptor("rotate", params)]
    if kind == "jigsaw":
        perm = random_jigsaw_perm(strategy.grid_k, rng)
        params = {"grid_k": strategy.grid_k, "perm": tuple(int(v) for v in perm)}
        return jigsaw_shuffle(img, strategy.grid_k, perm), [format_descriptor("jigsaw", params)]
    if kind == "cutout":
        h, w = img.shape[:2]
        params = {"size": strategy.cut_size, "row": int(rng.integers(h)), "col": int(rng.integers(w))}
        return cutout(img, strategy.cut_size, (params["row"], params["col"])), [format_descriptor("cutout", params)]
    raise ValueError(f"unknown augmentation kind {kind!r}")


def standard_augment(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Pad-2 random crop followed by a random horizontal flip."""
    top, left = (int(v) for v in rng.integers(0, 2 * SA_PAD + 1, size=2))
    flip = int(rng.random() < 0.5)
    out = pad_crop(img, top, left)
    if flip:
        out = hflip(out)
    return out, [format_descriptor("crop", {"top": top, "left": left}), format_descriptor("hflip", {"flip": flip})]


def _child_rngs(seed) -> tuple[np.random.Generator, ...]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def augment_image(img: np.ndarray, strategy: AugmentStrategy, seed) -> tuple[np.ndarray, bool, list[str]]:
    """Strategy-with-probability-p then standard augmentation.

    The firing coin, the strategy transform and the standard augmentation
    draw from three independent child streams of ``seed``, so the standard
    realisation does not depend on whether the strategy fired.
    """
    fire_rng, strat_rng, sa_rng = _child_rngs(seed)
    fired = strategy.kind != "standard" and fire_rng.random() < strategy.p
    log: list[str] = []
    out = img
    if fired:
        out, log = strategy_transform(img, strategy, strat_rng)
    out, sa_log = standard_augment(out, sa_rng)
    return out, bool(fired), log + sa_log


def apply_strategy(sample: LabeledSample, strategy: AugmentStrategy, seed) -> LabeledSample:
    """Augment an original sample.

    ``origin`` becomes ``augmented`` only when the strategy fired; standard
    augmentation alone leaves the sample "unaugmented" but is still logged
    so the result can be replayed.
    """
    if sample.origin != "original":
        raise ValueError("apply_strategy expects an original sample")
    out, fired, log = augment_image(sample.image, strategy, seed)
    return LabeledSample(out, sample.label, sample.sample_id, "augmented" if fired else "original", log)


def replay(img: np.ndarray, aug_log) -> np.ndarray:
    """Re-apply a logged op sequence to the original image."""
    out = img.copy()
    for entry in aug_log:
        name, params = parse_descriptor(entry)
        out = apply_op(out, name, params)
    return out
