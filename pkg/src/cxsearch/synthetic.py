"""Synthetic corpora: colour-texture images with known classes, and random signatures at scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cxsearch.imaging import RgbImage
from cxsearch.signature import Signature


@dataclass(frozen=True)
class TextureClass:
    texture: str  # vstripes, hstripes, dstripes, checker, dots
    period: float
    fg: tuple[int, int, int]
    bg: tuple[int, int, int]


TEXTURE_CLASSES = (
    TextureClass("vstripes", 8, (200, 30, 30), (245, 245, 245)),
    TextureClass("checker", 8, (200, 30, 30), (245, 245, 245)),
    TextureClass("vstripes", 8, (30, 60, 200), (240, 220, 40)),
    TextureClass("dots", 10, (30, 60, 200), (240, 220, 40)),
    TextureClass("hstripes", 6, (40, 170, 60), (15, 15, 15)),
    TextureClass("dstripes", 8, (40, 170, 60), (15, 15, 15)),
    TextureClass("checker", 12, (120, 40, 150), (250, 140, 20)),
    TextureClass("hstripes", 12, (120, 40, 150), (250, 140, 20)),
    TextureClass("dots", 8, (128, 128, 128), (10, 10, 10)),
    TextureClass("dstripes", 10, (40, 200, 210), (110, 70, 30)),
)


def _pattern(tc: TextureClass, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    period = tc.period * rng.uniform(0.9, 1.1)
    tilt = np.deg2rad(rng.uniform(-5, 5))
    phase = rng.uniform(0, 2 * np.pi, size=2)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    k = 2 * np.pi / period
    if tc.texture == "vstripes":
        u = x * np.cos(tilt) + y * np.sin(tilt)
        s = np.sin(k * u + phase[0])
    elif tc.texture == "hstripes":
        u = y * np.cos(tilt) - x * np.sin(tilt)
        s = np.sin(k * u + phase[0])
    elif tc.texture == "dstripes":
        a = np.pi / 4 + tilt
        s = np.sin(k * (x * np.cos(a) + y * np.sin(a)) + phase[0])
    elif tc.texture == "checker":
        s = np.sin(k * x + phase[0]) * np.sin(k * y + phase[1]) * 2
    elif tc.texture == "dots":
        dx = (x + phase[0] / k) % period - period / 2
        dy = (y + phase[1] / k) % period - period / 2
        r = period / 4
        return np.exp(-(dx**2 + dy**2) / (2 * r**2))
    else:
        raise ValueError(f"unknown texture {tc.texture!r}")
    return np.clip(0.5 + 2.0 * s, 0.0, 1.0)


def texture_image(
    class_id: int,
    rng: np.random.Generator,
    size: tuple[int, int] = (96, 96),
    noise: float = 6.0,
    colour_jitter: float = 12.0,
    classes: tuple[TextureClass, ...] = TEXTURE_CLASSES,
) -> RgbImage:
    """Render one randomized instance of a colour-texture class."""
    tc = classes[class_id]
    h, w = size
    t = _pattern(tc, h, w, rng)[..., None]
    fg = np.array(tc.fg, dtype=np.float64) + rng.uniform(-colour_jitter, colour_jitter, 3)
    bg = np.array(tc.bg, dtype=np.float64) + rng.uniform(-colour_jitter, colour_jitter, 3)
    px = bg * (1 - t) + fg * t + rng.normal(0, noise, (h, w, 3))
    return RgbImage(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def texture_corpus(
    per_class: int, seed: int, size: tuple[int, int] = (96, 96), n_classes: int = len(TEXTURE_CLASSES)
) -> list[tuple[int, RgbImage]]:
    """``(class_id, image)`` pairs, class-major order, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return [(c, texture_image(c, rng, size)) for c in range(n_classes) for _ in range(per_class)]


def blob_image(size: tuple[int, int], centres: list[tuple[int, int]], radius: int = 3, value: int = 255) -> RgbImage:
    """Black image with white squares of side ``2 * radius`` centred on each ``(x, y)``."""
    h, w = size
    px = np.zeros((h, w, 3), dtype=np.uint8)
    for x, y in centres:
        px[max(0, y - radius) : y + radius, max(0, x - radius) : x + radius] = value
    return RgbImage(px)


def random_signatures(
    n: int,
    k: int,
    codebook_id: bytes,
    seed: int,
    words_per_image: int = 64,
    max_count: int = 4,
    first_id: int = 0,
) -> list[tuple[int, Signature]]:
    """Random sparse signatures with up to ``words_per_image`` distinct words each."""
    rng = np.random.default_rng(seed)
    words = np.sort(rng.integers(0, k, size=(n, words_per_image)), axis=1)
    counts = rng.integers(1, max_count + 1, size=(n, words_per_image))
    fresh = np.ones_like(words, dtype=bool)
    fresh[:, 1:] = words[:, 1:] != words[:, :-1]
    out = []
    for i in range(n):
        keep = fresh[i]
        out.append((first_id + i, Signature(codebook_id, words[i, keep], counts[i, keep])))
    return out


def random_sparse_signature(
    rng: np.random.Generator, k: int, codebook_id: bytes, max_words: int = 64, max_count: int = 8
) -> Signature:
    m = int(rng.integers(1, max_words + 1))
    words = np.sort(rng.choice(k, size=min(m, k), replace=False))
    counts = rng.integers(1, max_count + 1, size=len(words))
    return Signature(codebook_id, words, counts)
