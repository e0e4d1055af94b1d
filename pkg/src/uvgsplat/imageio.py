"""Portable image files: PPM (8-bit), PGM (masks), PFM (float32).

Float images are written as little-endian PFM (scale header -1.0), channels
last. Rendered output used for metrics stays in memory at float64; files
are for interchange and inspection.
"""

from __future__ import annotations

import numpy as np


def save_ppm(path, image):
    """[3,H,W] floats in [0,1] -> binary P6, rounded to 8 bits."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a P6 file")
        w, h = (int(x) for x in f.readline().split())
        f.readline()
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def save_pgm(path, mask):
    """[H,W] bool -> binary P5 (0/255)."""
    u8 = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def load_pgm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a P5 file")
        w, h = (int(x) for x in f.readline().split())
        f.readline()
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w) > 127


def save_pfm(path, image):
    """[3,H,W] or [H,W] float -> PFM, little endian, rows bottom-up."""
    arr = np.asarray(image, dtype=np.float32)
    color = arr.ndim == 3
    if color:
        arr = arr.transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write((b"PF\n" if color else b"Pf\n") + f"{w} {h}\n-1.0\n".encode())
        f.write(arr[::-1].tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    if magic == b"PF":
        return data.reshape(h, w, 3)[::-1].transpose(2, 0, 1).astype(np.float64)
    return data.reshape(h, w)[::-1].astype(np.float64)
