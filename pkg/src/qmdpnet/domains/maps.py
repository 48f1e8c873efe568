"""Occupancy maps from 8-bit binary PGM (P5) images.

Real building scans are not bundled. :func:`synthetic_floorplan_pgm` draws a
rooms-and-corridors plan at a preset's resolution so transfer experiments run
out of the box; pass a real PGM to :func:`load_occupancy_map` when available.
"""

from __future__ import annotations

import numpy as np

from qmdpnet.domains.core import GridEnv

# name -> (width, height)
MAP_PRESETS = {
    "intel": (100, 101),
    "freiburg": (139, 57),
    "belgioioso": (151, 35),
    "mit": (41, 83),
}


class PGMFormatError(ValueError):
    pass


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary 8-bit PGM into an H x W uint8 array."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMFormatError(f"expected magic P5, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError("non-numeric PGM header field") from None
    if w <= 0 or h <= 0:
        raise PGMFormatError("PGM dimensions must be positive")
    if not 0 < maxval < 256:
        raise PGMFormatError("only 8-bit PGM images are supported")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise PGMFormatError(f"expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def area_downscale(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted average resampling to ``out_h`` x ``out_w`` (handles fractional footprints)."""
    H, W = img.shape

    def weights(n_in: int, n_out: int) -> np.ndarray:
        # M[i, j] = overlap of output bin i with input pixel j, rows normalized
        edges = np.linspace(0.0, n_in, n_out + 1)
        lo, hi = edges[:-1, None], edges[1:, None]
        j = np.arange(n_in)[None, :]
        m = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
        return m / m.sum(axis=1, keepdims=True)

    return weights(H, out_h) @ img.astype(np.float64) @ weights(W, out_w).T


def occupancy_grid(pgm: bytes, target_w: int, target_h: int, threshold: float = 128.0) -> np.ndarray:
    """Downscale a PGM by area averaging; pixels darker than ``threshold`` become obstacles (1)."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    small = area_downscale(read_pgm(pgm), target_h, target_w)
    return (small < threshold).astype(np.uint8)


def load_occupancy_map(pgm: bytes, target_w: int, target_h: int, threshold: float = 128.0,
                       name: str | None = None) -> GridEnv:
    """Environment from :func:`occupancy_grid`; fails if fewer than 2 cells are free."""
    return GridEnv("grid", occupancy_grid(pgm, target_w, target_h, threshold), name=name)


def synthetic_floorplan_pgm(width: int, height: int, seed: int = 0, scale: int = 4,
                            min_room: int = 8) -> bytes:
    """Building-like plan by recursive division with doorways, at ``scale`` pixels per cell."""
    rng = np.random.default_rng(seed)
    H, W = height * scale, width * scale
    img = np.full((H, W), 255, dtype=np.uint8)
    t = scale  # wall thickness in pixels, one grid cell
    img[:t], img[-t:], img[:, :t], img[:, -t:] = 0, 0, 0, 0

    def divide(r0: int, c0: int, r1: int, c1: int) -> None:
        h, w = r1 - r0, c1 - c0
        span = min_room * scale
        if h < 2 * span and w < 2 * span:
            return
        horizontal = h >= w if h >= 2 * span and w >= 2 * span else h >= 2 * span
        if horizontal:
            r = int(rng.integers(r0 + span, r1 - span + 1)) // t * t
            img[r:r + t, c0:c1] = 0
            door = int(rng.integers(c0, max(c0 + 1, c1 - 3 * t))) // t * t
            img[r:r + t, door:door + 3 * t] = 255
            divide(r0, c0, r, c1)
            divide(r + t, c0, r1, c1)
        else:
            c = int(rng.integers(c0 + span, c1 - span + 1)) // t * t
            img[r0:r1, c:c + t] = 0
            door = int(rng.integers(r0, max(r0 + 1, r1 - 3 * t))) // t * t
            img[door:door + 3 * t, c:c + t] = 255
            divide(r0, c0, r1, c)
            divide(r0, c + t, r1, c1)

    divide(t, t, H - t, W - t)
    return write_pgm(img)


def preset_map(name: str, seed: int = 0, pgm: bytes | None = None) -> GridEnv:
    """Environment for a named preset, from ``pgm`` if given else a synthetic plan."""
    key = name.lower()
    if key not in MAP_PRESETS:
        raise KeyError(f"unknown map preset {name!r}; choose from {sorted(MAP_PRESETS)}")
    w, h = MAP_PRESETS[key]
    data = pgm if pgm is not None else synthetic_floorplan_pgm(w, h, seed)
    return load_occupancy_map(data, w, h, name=key)
