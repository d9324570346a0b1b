"""Oriented complex filter bank, saliency keypoints and the 576-d colour-texture descriptor.

Descriptor layout is ``[channel L,a,b][scale 0..3][orientation 0,45,90,135][bin 0..5][value]``
where value 0 is texture-weighted occupancy of the colour bin and value 1 is the same
mass further weighted by the pixel's L intensity.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from cxsearch.imaging import LabPyramid, RgbImage, build_pyramid, rgb_to_lab

N_CHANNELS = 3
N_SCALES = 4
N_ORIENTATIONS = 4
N_BINS = 6
N_VALUES = 2
DESCRIPTOR_SHAPE = (N_CHANNELS, N_SCALES, N_ORIENTATIONS, N_BINS, N_VALUES)
DESCRIPTOR_DIM = int(np.prod(DESCRIPTOR_SHAPE))  # 576
PATCH_SIZE = 32
MAX_KEYPOINTS = 512
DEFAULT_THRESH_FRAC = 0.05

_BASE_HALF = 4  # 9x9 support at scale 0
_BASE_SIGMA = 4.0 / 3.0
_BASE_OMEGA = np.pi / 2.0  # 4-pixel wavelength at scale 0
# absolute floors below which responses are treated as numerical noise
_SALIENCY_FLOOR = 1e-6
_MASS_FLOOR = 1e-6


@dataclass(frozen=True)
class FilterBank:
    """Complex oriented band-pass kernels, indexed ``kernels[scale][orientation]``."""

    kernels: tuple[tuple[np.ndarray, ...], ...]

    @property
    def n_scales(self) -> int:
        return len(self.kernels)

    @property
    def n_orientations(self) -> int:
        return len(self.kernels[0])

    def __len__(self) -> int:
        return self.n_scales * self.n_orientations

    def half_width(self, scale: int) -> int:
        return self.kernels[scale][0].shape[0] // 2


@dataclass(frozen=True, order=True)
class Keypoint:
    """Salient location; ``x``/``y`` are level-0 pixel coordinates."""

    x: int
    y: int
    level: int
    saliency: float

    @property
    def level_xy(self) -> tuple[int, int]:
        return self.x >> self.level, self.y >> self.level


def _oriented_kernel(scale: int, theta: float) -> np.ndarray:
    half = _BASE_HALF << scale
    sigma = _BASE_SIGMA * (1 << scale)
    omega = _BASE_OMEGA / (1 << scale)
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    u = x * np.cos(theta) + y * np.sin(theta)
    envelope = np.exp(-(x**2 + y**2) / (2 * sigma**2))
    even = envelope * np.cos(omega * u)
    even -= envelope * (even.sum() / envelope.sum())
    odd = envelope * np.sin(omega * u)
    odd -= odd.sum() / odd.size  # exactly antisymmetric already; removes rounding residue
    kernel = even + 1j * odd
    return kernel / np.sqrt(np.sum(np.abs(kernel) ** 2))


@functools.lru_cache(maxsize=None)
def make_filter_bank(n_scales: int = N_SCALES, n_orientations: int = N_ORIENTATIONS) -> FilterBank:
    """Build the quadrature (even cosine, odd sine) Gabor-Morlet bank.

    Scale ``s`` has support ``(8 * 2**s + 1)`` squared; orientation ``o`` is tuned to
    intensity variation along the direction ``o * 180 / n_orientations`` degrees,
    so orientation 0 responds to vertical edges. Every kernel has zero DC and unit
    L2 norm. Cached: the bank is immutable and shared.
    """
    kernels = tuple(
        tuple(_oriented_kernel(s, np.pi * o / n_orientations) for o in range(n_orientations))
        for s in range(n_scales)
    )
    for row in kernels:
        for k in row:
            k.setflags(write=False)
    return FilterBank(kernels)


def filter_responses(planes: np.ndarray, bank: FilterBank, scales: range | None = None) -> np.ndarray:
    """Convolve each plane with the bank; reflect-padded, same-size output.

    Args:
        planes: ``(n_planes, H, W)`` real array.
        scales: subset of bank scales to apply (default all).

    Returns:
        complex array ``(n_planes, len(scales), n_orientations, H, W)``.
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[None]
    scales = range(bank.n_scales) if scales is None else scales
    n, h, w = planes.shape
    out = np.empty((n, len(scales), bank.n_orientations, h, w), dtype=np.complex128)
    for si, s in enumerate(scales):
        half = bank.half_width(s)
        size = 2 * half + 1
        padded = np.pad(planes, ((0, 0), (half, half), (half, half)), mode="reflect")
        shape = (
            sfft.next_fast_len(padded.shape[1] + size - 1),
            sfft.next_fast_len(padded.shape[2] + size - 1),
        )
        spectrum = sfft.fft2(padded, s=shape, axes=(-2, -1))
        for o, kernel in enumerate(bank.kernels[s]):
            full = sfft.ifft2(spectrum * sfft.fft2(kernel, s=shape), axes=(-2, -1))
            out[:, si, o] = full[:, 2 * half : 2 * half + h, 2 * half : 2 * half + w]
    return out


def saliency_map(level_L: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Sum over orientations of the finest-scale response magnitude of the L channel."""
    resp = filter_responses(level_L[None], bank, scales=range(1))
    return np.abs(resp[0, 0]).sum(axis=0)


class LevelResponses:
    """Lazily computed per-level texture magnitudes.

    Stored as float32, planes-last, shape ``(H, W, 3 * S * O)`` in (channel, scale, orientation)
    order, so a patch gather reads contiguous memory.
    """

    def __init__(self, pyr: LabPyramid, bank: FilterBank):
        self.pyr = pyr
        self.bank = bank
        self._cache: dict[int, np.ndarray] = {}

    def magnitudes(self, level: int) -> np.ndarray:
        if level not in self._cache:
            data = self.pyr.levels[level].data
            mags = np.abs(filter_responses(np.moveaxis(data, -1, 0), self.bank))
            h, w = data.shape[:2]
            planes_last = np.moveaxis(mags.reshape(-1, h, w), 0, -1)
            self._cache[level] = np.ascontiguousarray(planes_last, dtype=np.float32)
        return self._cache[level]

    def saliency(self, level: int) -> np.ndarray:
        if level in self._cache:
            return self._cache[level][..., : self.bank.n_orientations].sum(axis=-1)
        return saliency_map(self.pyr.levels[level].L, self.bank)


def _patch_fits(x: np.ndarray, y: np.ndarray, w: int, h: int) -> np.ndarray:
    half = PATCH_SIZE // 2
    return (x >= half) & (y >= half) & (x + half <= w) & (y + half <= h)


def detect_keypoints(
    pyr: LabPyramid,
    bank: FilterBank,
    max_kp: int = MAX_KEYPOINTS,
    thresh_frac: float = DEFAULT_THRESH_FRAC,
    responses: LevelResponses | None = None,
) -> list[Keypoint]:
    """Pool 3x3 saliency maxima from every pyramid level.

    Candidates need saliency >= ``thresh_frac`` times the global maximum and a full
    32x32 patch inside their level. Output is sorted by saliency descending, ties by
    ``(level, y, x)``, and truncated to ``max_kp``.
    """
    maps = []
    for level in range(len(pyr.levels)):
        sal = responses.saliency(level) if responses is not None else saliency_map(pyr.levels[level].L, bank)
        maps.append(sal)
    global_max = max(float(m.max()) for m in maps)
    if global_max <= _SALIENCY_FLOOR:
        return []
    cutoff = max(thresh_frac * global_max, _SALIENCY_FLOOR)

    cands: list[tuple[float, int, int, int]] = []
    for level, sal in enumerate(maps):
        h, w = sal.shape
        if h < PATCH_SIZE or w < PATCH_SIZE:
            continue
        peaks = (sal == ndimage.maximum_filter(sal, size=3, mode="nearest")) & (sal >= cutoff)
        ys, xs = np.nonzero(peaks)
        keep = _patch_fits(xs, ys, w, h)
        for y, x in zip(ys[keep].tolist(), xs[keep].tolist()):
            cands.append((-float(sal[y, x]), level, y, x))
    cands.sort()
    return [Keypoint(x << level, y << level, level, -neg) for neg, level, y, x in cands[:max_kp]]


def _bin_index(values: np.ndarray) -> np.ndarray:
    return np.minimum((values * N_BINS).astype(np.int64), N_BINS - 1)


_CHUNK = 128


def _level_descriptors(mags: np.ndarray, lab: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    half = PATCH_SIZE // 2
    offs = np.arange(PATCH_SIZE) - half
    rows = (ys[:, None] + offs)[:, :, None]
    cols = (xs[:, None] + offs)[:, None, :]
    n = len(xs)
    n_pix = PATCH_SIZE * PATCH_SIZE

    m = mags[rows, cols].reshape(n, n_pix, N_CHANNELS, -1).transpose(0, 2, 3, 1)  # (n, 3, 16, P)
    colour = lab[rows, cols].reshape(n, n_pix, N_CHANNELS).transpose(0, 2, 1)  # (n, 3, P)
    intensity = colour[:, 0]
    onehot = (_bin_index(colour)[..., None] == np.arange(N_BINS)).astype(np.float32)  # (n, 3, P, 6)

    occupancy = m @ onehot
    weighted = m @ (onehot * intensity[:, None, :, None].astype(np.float32))
    desc = np.stack([occupancy, weighted], axis=-1).reshape(n, DESCRIPTOR_DIM).astype(np.float64)
    total = desc.sum(axis=1)
    textured = total >= _MASS_FLOOR
    desc[textured] /= total[textured, None]
    desc[~textured] = 0.0
    return desc


def extract_descriptors(
    pyr: LabPyramid,
    bank: FilterBank,
    kps: list[Keypoint],
    responses: LevelResponses | None = None,
) -> np.ndarray:
    """Descriptors for many keypoints at once, ``(len(kps), 576)``, in input order."""
    if responses is None:
        responses = LevelResponses(pyr, bank)
    out = np.zeros((len(kps), DESCRIPTOR_DIM))
    levels = np.array([kp.level for kp in kps], dtype=np.int64)
    xs = np.array([kp.x for kp in kps], dtype=np.int64) >> levels
    ys = np.array([kp.y for kp in kps], dtype=np.int64) >> levels
    for level in np.unique(levels).tolist():
        sel = np.flatnonzero(levels == level)
        mags = responses.magnitudes(level)
        lab = pyr.levels[level].data
        for start in range(0, len(sel), _CHUNK):
            chunk = sel[start : start + _CHUNK]
            out[chunk] = _level_descriptors(mags, lab, xs[chunk], ys[chunk])
    return out


def extract_descriptor(
    pyr: LabPyramid,
    bank: FilterBank,
    kp: Keypoint,
    responses: LevelResponses | None = None,
) -> np.ndarray:
    """576-d texture-weighted colour histogram of the 32x32 patch centred on ``kp``.

    Each (channel, scale, orientation) slot holds a 6-bin histogram of the
    channel's values over the patch, where every pixel adds its response
    magnitude (value 0) and magnitude times L intensity (value 1). The whole
    vector is L1-normalized; a textureless patch yields all zeros.
    """
    return extract_descriptors(pyr, bank, [kp], responses)[0]


def describe_pyramid(
    pyr: LabPyramid,
    bank: FilterBank | None = None,
    max_kp: int = MAX_KEYPOINTS,
    thresh_frac: float = DEFAULT_THRESH_FRAC,
) -> tuple[list[Keypoint], np.ndarray]:
    """Keypoints and their non-zero descriptors as an ``(n, 576)`` array."""
    bank = bank or make_filter_bank()
    responses = LevelResponses(pyr, bank)
    kps = detect_keypoints(pyr, bank, max_kp, thresh_frac, responses=responses)
    descs = extract_descriptors(pyr, bank, kps, responses)
    nonzero = descs.any(axis=1)
    return [kp for kp, keep in zip(kps, nonzero) if keep], descs[nonzero]


def describe_image(
    img: RgbImage,
    bank: FilterBank | None = None,
    max_kp: int = MAX_KEYPOINTS,
    thresh_frac: float = DEFAULT_THRESH_FRAC,
) -> np.ndarray:
    """Full extraction chain for one image: Lab, pyramid, keypoints, descriptors.

    Returns an ``(n, 576)`` array with ``0 <= n <= max_kp``; all-zero descriptors
    are dropped.
    """
    pyr = build_pyramid(rgb_to_lab(img))
    return describe_pyramid(pyr, bank, max_kp, thresh_frac)[1]
