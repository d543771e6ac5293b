"""8-bit PGM/PPM export for image grids, plus a small reader for round trips."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["to_bytes", "export_image", "read_pnm", "tile"]


def to_bytes(grid: np.ndarray, space: str = "model") -> np.ndarray:
    """Quantize to uint8; model space ``[-1, 1]`` maps by ``(v+1)/2*255``, memory space by ``v*255``."""
    g = np.asarray(grid, dtype=np.float64)
    if space == "model":
        g = (g + 1.0) / 2.0
    elif space != "memory":
        raise ValueError(f"unknown space {space!r}")
    g = np.clip(g, 0.0, 1.0) * 255.0
    return np.floor(g + 0.5).astype(np.uint8)  # half-up


def export_image(grid: np.ndarray, path, space: str = "model", comment: str | None = None) -> Path:
    """Write an ``(H, W, C)`` grid as binary PGM (C=1) or PPM (C=3)."""
    g = np.asarray(grid)
    if g.ndim == 2:
        g = g[..., None]
    if g.ndim != 3 or g.shape[-1] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) grid, got {g.shape}")
    h, w, c = g.shape
    magic = b"P5" if c == 1 else b"P6"
    head = magic + b"\n"
    if comment:
        head += b"# " + comment.replace("\n", " ").encode() + b"\n"
    head += f"{w} {h}\n255\n".encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(head + to_bytes(g, space).tobytes())
    return path


def read_pnm(path, space: str = "model") -> np.ndarray:
    """Parse a binary PGM/PPM written by :func:`export_image` back to floats."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"unsupported pixmap header in {path}")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos).reshape(h, w, c)
    v = raw.astype(np.float64) / 255.0
    return v * 2.0 - 1.0 if space == "model" else v


def tile(grids: np.ndarray, cols: int, pad: int = 1, fill: float = -1.0) -> np.ndarray:
    """Arrange ``(n, H, W, C)`` grids into one mosaic."""
    g = np.asarray(grids)
    n, h, w, c = g.shape
    rows = -(-n // cols)
    out = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad, c), fill, dtype=np.float64)
    for k in range(n):
        r, q = divmod(k, cols)
        out[r * (h + pad) : r * (h + pad) + h, q * (w + pad) : q * (w + pad) + w] = g[k]
    return out
