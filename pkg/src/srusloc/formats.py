"""Binary file formats: `.iqf` IQ stacks, `.lbl` label maps, dataset
manifests and the SRUS image export (16-bit PNG plus JSON sidecar).

.iqf: magic "IQF1", u32 T/H/W, f32 little-endian interleaved (re, im),
row-major, frame-major.
.lbl: magic "LBL1", u32 H/W/K, then detect, xbin, zbin as u8 maps.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .fieldsim import LabelMap

IQF_MAGIC = b"IQF1"
LBL_MAGIC = b"LBL1"


class FormatError(ValueError):
    pass


def write_iqf(path: str, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise FormatError("IQ stack must be [T, H, W]")
    T, H, W = frames.shape
    inter = np.empty((T, H, W, 2), dtype="<f4")
    inter[..., 0] = frames.real
    inter[..., 1] = frames.imag
    with open(path, "wb") as f:
        f.write(IQF_MAGIC)
        f.write(struct.pack("<III", T, H, W))
        f.write(inter.tobytes())


def read_iqf(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != IQF_MAGIC:
        raise FormatError(f"{path}: bad .iqf magic")
    T, H, W = struct.unpack_from("<III", raw, 4)
    n = T * H * W * 2
    if len(raw) != 16 + 4 * n:
        raise FormatError(f"{path}: truncated .iqf payload")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=16)
    inter = data.reshape(T, H, W, 2)
    return (inter[..., 0] + 1j * inter[..., 1]).astype(np.complex64)


def write_lbl(path: str, labels: LabelMap, k_bins: int) -> None:
    H, W = labels.detect.shape
    with open(path, "wb") as f:
        f.write(LBL_MAGIC)
        f.write(struct.pack("<III", H, W, k_bins))
        f.write(labels.detect.astype(np.uint8).tobytes())
        f.write(labels.xbin.astype(np.uint8).tobytes())
        f.write(labels.zbin.astype(np.uint8).tobytes())


def read_lbl(path: str):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LBL_MAGIC:
        raise FormatError(f"{path}: bad .lbl magic")
    H, W, K = struct.unpack_from("<III", raw, 4)
    n = H * W
    if len(raw) != 16 + 3 * n:
        raise FormatError(f"{path}: truncated .lbl payload")
    maps = [np.frombuffer(raw, dtype=np.uint8, count=n,
                          offset=16 + k * n).reshape(H, W).copy()
            for k in range(3)]
    return LabelMap(*maps), K


def read_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    if not os.path.isfile(path):
        raise FormatError(f"{dataset_dir}: no manifest.json")
    with open(path) as f:
        m = json.load(f)
    if m.get("format") != "srusloc-dataset-v1":
        raise FormatError(f"{path}: unknown dataset format {m.get('format')!r}")
    return m


def write_srus_image(path: str, counts: np.ndarray, sidecar: dict) -> None:
    """16-bit grayscale PNG, counts linearly scaled to the u16 range; the
    scale factor and metadata go in a `.json` sidecar next to the image."""
    from PIL import Image
    counts = np.asarray(counts, dtype=np.float64)
    peak = counts.max()
    scale = 65535.0 / peak if peak > 0 else 1.0
    img16 = np.round(counts * scale).astype(np.uint16)
    Image.fromarray(img16).save(path)
    sidecar = dict(sidecar)
    sidecar["scale"] = scale
    sidecar["peak_count"] = float(peak)
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def read_srus_image(path: str):
    from PIL import Image
    img = np.asarray(Image.open(path), dtype=np.float64)
    with open(path + ".json") as f:
        sidecar = json.load(f)
    counts = img / sidecar.get("scale", 1.0)
    return counts, sidecar
