"""Slide preprocessing: foreground detection, tiling and per-channel embedding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .fusion import EmbeddedBag

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 224
MIF_CHANNELS = ("DAPI", "CD8", "FOXP3", "PD-L1", "PD-1", "Cyto", "Autofluorescence")
_LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateInputError(ValueError):
    pass


class EmbedderError(IOError):
    pass


@dataclass
class SlideImage:
    """M grayscale channels of identical extent."""

    channels: np.ndarray  # (M, H, W)
    channel_names: tuple[str, ...] = ()
    pixel_spacing: float | None = None
    sample_id: str = ""

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim == 2:
            ch = ch[None]
        if ch.ndim != 3 or ch.shape[0] < 1:
            raise ValueError(f"slide channels must be (M, H, W), got {ch.shape}")
        self.channels = ch
        if not self.channel_names:
            self.channel_names = tuple(f"ch{i}" for i in range(ch.shape[0]))
        if len(self.channel_names) != ch.shape[0]:
            raise ValueError(f"{len(self.channel_names)} names for {ch.shape[0]} channels")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def extent(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass
class ForegroundMask:
    mask: np.ndarray
    factor: int
    channel_masks: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Otsu
# ---------------------------------------------------------------------------


def otsu_threshold(histogram: Sequence[int]) -> int:
    """Threshold index maximising the between-class variance.

    Class 0 holds bins ``<= t``.  Comparisons are done in exact integer
    arithmetic so ties are resolved deterministically to the lowest ``t``.
    """
    hist = [int(v) for v in histogram]
    if any(v < 0 for v in hist):
        raise ValueError("histogram counts must be non-negative")
    if sum(1 for v in hist if v) < 2:
        raise DegenerateInputError("histogram has fewer than two occupied bins")
    total = sum(hist)
    total_sum = sum(i * v for i, v in enumerate(hist))
    best_t, best_num, best_den = -1, -1, 1
    n0 = s0 = 0
    for t, v in enumerate(hist[:-1]):
        n0 += v
        s0 += t * v
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance up to a positive constant:
        # (N*s0 - n0*S)^2 / (n0 * n1)
        num = (total * s0 - n0 * total_sum) ** 2
        den = n0 * n1
        if best_t < 0 or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def to_uint8_levels(x: np.ndarray, source_dtype=None) -> np.ndarray:
    """Map intensities onto 256 histogram levels.

    8-bit data is used as is; anything else is scaled linearly by the
    range of the array.
    """
    dtype = np.dtype(source_dtype) if source_dtype is not None else x.dtype
    if dtype == np.uint8:
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.clip(np.floor((x - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def downsample(channel: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool by ``factor``; edge cells average only the pixels present."""
    h, w = channel.shape
    gh, gw = math.ceil(h / factor), math.ceil(w / factor)
    padded = np.zeros((gh * factor, gw * factor), dtype=np.float64)
    padded[:h, :w] = channel
    counts = np.zeros_like(padded)
    counts[:h, :w] = 1.0
    sums = padded.reshape(gh, factor, gw, factor).sum(axis=(1, 3))
    n = counts.reshape(gh, factor, gw, factor).sum(axis=(1, 3))
    return sums / n


def _histogram(levels: np.ndarray) -> np.ndarray:
    return np.bincount(levels.reshape(-1), minlength=256)


def channel_mask(channel: np.ndarray, factor: int, bright_foreground: bool = True) -> np.ndarray | None:
    """Otsu mask of one channel, or None when the channel is single-valued."""
    small = downsample(channel, factor)
    levels = to_uint8_levels(small, channel.dtype)
    try:
        t = otsu_threshold(_histogram(levels))
    except DegenerateInputError:
        return None
    return levels > t if bright_foreground else levels <= t


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) RGB array, got {rgb.shape}")
    return np.tensordot(_LUMA, rgb, axes=1)


def foreground_mask(slide: SlideImage, factor: int = DEFAULT_PATCH_SIZE, mode: str = "mif") -> ForegroundMask:
    """Foreground cells at ``1/factor`` resolution.

    ``mif``: each channel is thresholded on its own (bright = signal) and
    the masks are OR-ed.  A single-valued channel has no threshold; it is
    skipped with a warning when blank and counts as all-foreground when it
    carries a non-zero level.  ``he``: the RGB slide is converted to
    grayscale and tissue is the dark class.
    """
    if mode == "he":
        if slide.n_channels != 3:
            raise ValueError("H&E mode expects an RGB slide (3 channels)")
        gray = to_grayscale(slide.channels)
        m = channel_mask(gray, factor, bright_foreground=False)
        if m is None:
            raise DegenerateInputError("grayscale slide is single-valued")
        return ForegroundMask(m, factor, [m])
    if mode != "mif":
        raise ValueError(f"unknown mode {mode!r}")
    gh, gw = (math.ceil(n / factor) for n in slide.extent)
    fused = np.zeros((gh, gw), dtype=bool)
    masks, usable = [], False
    for name, ch in zip(slide.channel_names, slide.channels):
        m = channel_mask(ch, factor)
        if m is None:
            level = float(np.max(ch)) if ch.size else 0.0
            if level > 0:
                log.warning("channel %s is single-valued and non-blank; treating as all foreground", name)
                m = np.ones((gh, gw), dtype=bool)
                usable = True
            else:
                log.warning("channel %s is blank; skipped", name)
                m = np.zeros((gh, gw), dtype=bool)
        else:
            usable = True
        masks.append(m)
        fused |= m
    if not usable:
        raise DegenerateInputError("every channel is blank")
    return ForegroundMask(fused, factor, masks)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------


def patch_grid(mask: ForegroundMask, slide_extent: tuple[int, int], patch_size: int) -> np.ndarray:
    """Foreground flag per patch cell; a patch is foreground if it overlaps a foreground mask cell."""
    h, w = slide_extent
    gh, gw = math.ceil(h / patch_size), math.ceil(w / patch_size)
    if mask.factor == patch_size:
        return mask.mask[:gh, :gw].copy()
    out = np.zeros((gh, gw), dtype=bool)
    f = mask.factor
    for r in range(gh):
        for c in range(gw):
            r0, r1 = r * patch_size // f, math.ceil(min((r + 1) * patch_size, h) / f)
            c0, c1 = c * patch_size // f, math.ceil(min((c + 1) * patch_size, w) / f)
            out[r, c] = bool(mask.mask[r0:r1, c0:c1].any())
    return out


def extract_patches(slide: SlideImage, mask: ForegroundMask,
                    patch_size: int = DEFAULT_PATCH_SIZE) -> list[tuple[tuple[int, int], np.ndarray]]:
    """One (M, patch, patch) tile per foreground cell, row-major; edges are zero-padded."""
    cells = patch_grid(mask, slide.extent, patch_size)
    h, w = slide.extent
    out = []
    for r, c in zip(*np.nonzero(cells)):
        r, c = int(r), int(c)
        tile = np.zeros((slide.n_channels, patch_size, patch_size), dtype=slide.channels.dtype)
        block = slide.channels[:, r * patch_size:min((r + 1) * patch_size, h), c * patch_size:min((c + 1) * patch_size, w)]
        tile[:, :block.shape[1], :block.shape[2]] = block
        out.append(((r, c), tile))
    return out


def gray_to_rgb(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane)
    return np.repeat(plane[None], 3, axis=0)


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    name: str
    d_emb: int
    deterministic: bool

    def __call__(self, rgb_patch: np.ndarray) -> np.ndarray: ...


def normalize_pixels(patch: np.ndarray) -> np.ndarray:
    """Scale integer intensities to [0, 1]; float input is assumed normalised."""
    if np.issubdtype(patch.dtype, np.integer):
        return patch.astype(np.float64) / float(np.iinfo(patch.dtype).max)
    return np.asarray(patch, dtype=np.float64)


class StubEmbedder:
    """Deterministic stand-in for a pretrained patch encoder.

    Pixels are normalised to [0, 1], average-pooled onto a ``pool x pool``
    grid per colour plane, projected by a fixed-seed Gaussian matrix and
    squashed with tanh.
    """

    name = "stub"
    deterministic = True

    def __init__(self, d_emb: int = 64, seed: int = 0, pool: int = 16, bias_scale: float = 0.0):
        self.d_emb = d_emb
        self.seed = seed
        self.pool = pool
        rng = np.random.default_rng(seed)
        n_in = 3 * pool * pool
        self.weight = rng.standard_normal((n_in, d_emb)) / math.sqrt(n_in) * 4.0
        self.bias = rng.standard_normal(d_emb) * bias_scale

    def features(self, rgb_patch: np.ndarray) -> np.ndarray:
        x = normalize_pixels(rgb_patch)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) patch, got {x.shape}")
        return np.stack([downsample_to(x[i], self.pool) for i in range(3)]).reshape(-1)

    def __call__(self, rgb_patch: np.ndarray) -> np.ndarray:
        return np.tanh(self.features(rgb_patch) @ self.weight + self.bias)


def downsample_to(plane: np.ndarray, n: int) -> np.ndarray:
    """Average-pool a plane onto an ``n x n`` grid of (near-)equal blocks."""
    h, w = plane.shape
    rows = np.array_split(np.arange(h), n)
    cols = np.array_split(np.arange(w), n)
    out = np.zeros((n, n))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if len(r) and len(c):
                out[i, j] = plane[r[0]:r[-1] + 1, c[0]:c[-1] + 1].mean()
    return out


def embed_bag(patches: Sequence[tuple[tuple[int, int], np.ndarray]], embedder: Embedder,
              sample_id: str = "", channel_names: Sequence[str] = (), rgb: bool = False) -> EmbeddedBag:
    """Embed every channel of every patch into a (K, M, d_emb) bag.

    With ``rgb=True`` each patch is a single RGB image (H&E) and the bag
    has one marker.
    """
    if not patches:
        raise ValueError("cannot build a bag from zero patches")
    rows = []
    for coords, tile in patches:
        try:
            if rgb:
                rows.append([embedder(tile)])
            else:
                rows.append([embedder(gray_to_rgb(plane)) for plane in tile])
        except Exception as exc:  # surface the failing patch
            raise EmbedderError(f"embedder {embedder.name!r} failed on patch {coords}: {exc}") from exc
    H = np.asarray(rows, dtype=np.float64)
    coords = np.array([c for c, _ in patches], dtype=np.int64)
    return EmbeddedBag(nx.tensor(H), coords, sample_id, tuple(channel_names))


# ---------------------------------------------------------------------------
# image input
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def load_slide(path: str | Path, mode: str = "mif") -> SlideImage:
    """Read a slide from a directory of per-channel images or a multi-page TIFF.

    Channel order follows sorted file names; names are the file stems.  In
    ``he`` mode the slide must be a single RGB image.
    """
    from PIL import Image

    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no channel images in {path}")
        if mode == "he":
            if len(files) != 1:
                raise ValueError(f"H&E mode expects one RGB image per slide, found {len(files)} in {path}")
            return _load_rgb(files[0], path.name)
        planes = [_read_plane(f) for f in files]
        names = tuple(f.stem for f in files)
        return SlideImage(np.stack(planes), names, sample_id=path.name)
    if mode == "he":
        return _load_rgb(path, path.stem)
    with Image.open(path) as img:
        planes = []
        for i in range(getattr(img, "n_frames", 1)):
            img.seek(i)
            planes.append(_plane_from_image(img))
    return SlideImage(np.stack(planes), sample_id=path.stem)


def _plane_from_image(img) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.uint16)
    if img.mode not in ("L", "I", "F"):
        img = img.convert("L")
    arr = np.asarray(img)
    return arr.astype(np.uint16) if img.mode == "I" else arr


def _read_plane(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA"):
            raise ValueError(f"{path} is a colour image; mIF channels must be grayscale")
        return _plane_from_image(img)


def _load_rgb(path: Path, sample_id: str) -> SlideImage:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return SlideImage(np.moveaxis(arr, -1, 0), ("R", "G", "B"), sample_id=sample_id)


def preprocess_slide(slide: SlideImage, embedder: Embedder, mode: str = "mif",
                     patch_size: int = DEFAULT_PATCH_SIZE, factor: int = DEFAULT_PATCH_SIZE) -> EmbeddedBag | None:
    """Mask, tile and embed one slide; None when no foreground patch exists."""
    mask = foreground_mask(slide, factor, mode)
    patches = extract_patches(slide, mask, patch_size)
    if not patches:
        return None
    if mode == "he":
        return embed_bag(patches, embedder, slide.sample_id, ("HE",), rgb=True)
    return embed_bag(patches, embedder, slide.sample_id, slide.channel_names)
