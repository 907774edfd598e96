"""PFM and PNG image I/O."""

from pathlib import Path

import numpy as np


def write_pfm(path, image):
    """Write a single-channel (``Pf``) or RGB (``PF``) little-endian PFM.

    Rows are stored bottom-to-top as the format requires. NaNs are written as-is.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        tag = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PFM")
    h, w = image.shape[:2]
    data = np.flipud(image).astype("<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data)
    tmp.replace(path)


def read_pfm(path):
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file (header {tag!r})")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated PFM data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, image, vmax=1.0):
    """Clamp to ``[0, vmax]``, scale to 8 bit and save; NaNs become black."""
    from PIL import Image

    a = np.nan_to_num(np.asarray(image, float), nan=0.0)
    a = np.clip(a / vmax, 0.0, 1.0)
    Image.fromarray((a * 255 + 0.5).astype(np.uint8)).save(path)
