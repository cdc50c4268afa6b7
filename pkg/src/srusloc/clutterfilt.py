"""Block-wise SVD spatiotemporal clutter filtering and envelope detection.

Each spatial block of the IQ stack is reshaped into a Casorati matrix
(space x slow-time), decomposed, and reconstructed from a band of singular
components: the lower cutoff comes from the 30-degree slope rule on the
normalized singular-value curve, the upper cutoff retains at most the
first `max_sv` components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SLOPE_30_DEG = math.tan(math.radians(30.0))


class SvdError(RuntimeError):
    """SVD failed to converge for a block."""


@dataclass(frozen=True)
class BlockGeometry:
    block_h: int
    block_w: int
    overlap: int = 0

    def __post_init__(self):
        if self.block_h < 1 or self.block_w < 1:
            raise ValueError("block dimensions must be positive")
        if self.overlap < 0 or self.overlap >= min(self.block_h, self.block_w):
            raise ValueError("overlap must be in [0, min(block_h, block_w))")


@dataclass(frozen=True)
class SvdCutoffs:
    lower: int  # first retained singular index, 0-based
    upper: int  # last retained singular index, inclusive

    def __post_init__(self):
        if not (0 <= self.lower <= self.upper):
            raise ValueError("need 0 <= lower <= upper")


def casorati(block: np.ndarray) -> np.ndarray:
    """Reshape a [T, bh, bw] block so column t is the flattened frame t."""
    if block.ndim != 3 or block.shape[0] < 2:
        raise ValueError("block must be [T>=2, bh, bw]")
    T = block.shape[0]
    return block.reshape(T, -1).T


def casorati_inverse(mat: np.ndarray, bh: int, bw: int) -> np.ndarray:
    return mat.T.reshape(-1, bh, bw)


def auto_lower_cutoff(singular_values) -> int:
    """First index where the normalized singular-value curve flattens to a
    30-degree slope; both axes are normalized to [0, 1]. Falls back to 1 so
    the filter never discards everything."""
    s = np.asarray(singular_values, dtype=float)
    if s.size < 2:
        raise ValueError("need at least 2 singular values")
    if s[0] <= 0:
        raise ValueError("first singular value must be positive")
    n = s.size
    v = s / s[0]
    for i in range(1, n):
        slope = (v[i] - v[i - 1]) * (n - 1)
        if abs(slope) <= SLOPE_30_DEG:
            return i
    return 1


def svd_filter_block(block: np.ndarray, cutoffs: SvdCutoffs) -> np.ndarray:
    """Reconstruct a block from the singular components in [lower, upper]."""
    T, bh, bw = block.shape
    mat = casorati(block)
    try:
        u, s, vh = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdError(f"SVD did not converge on {block.shape} block") from e
    rank = s.size
    if cutoffs.upper >= rank:
        raise ValueError(f"upper cutoff {cutoffs.upper} >= rank {rank}")
    lo, hi = cutoffs.lower, cutoffs.upper
    rec = (u[:, lo:hi + 1] * s[lo:hi + 1]) @ vh[lo:hi + 1]
    return casorati_inverse(rec, bh, bw)


def _block_starts(total: int, block: int, overlap: int):
    step = max(1, block - overlap)
    starts = list(range(0, max(total - block, 0) + 1, step))
    if not starts:
        starts = [0]
    if starts[-1] + block < total:
        starts.append(total - block)
    return starts


def filter_stack(stack, geom: BlockGeometry, max_sv: int = 400) -> np.ndarray:
    """Apply per-block SVD filtering across the whole stack.

    Per block: lower cutoff from auto_lower_cutoff, upper cutoff
    min(max_sv - 1, rank - 1). Overlapping blocks are mean-blended.
    Accepts a [T, H, W] complex array (or an object with .frames).
    """
    frames = getattr(stack, "frames", stack)
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("stack must be [T>=2, H, W]")
    T, H, W = frames.shape
    out = np.zeros_like(frames, dtype=np.complex128)
    weight = np.zeros((H, W))
    for i0 in _block_starts(H, geom.block_h, geom.overlap):
        for j0 in _block_starts(W, geom.block_w, geom.overlap):
            i1 = min(i0 + geom.block_h, H)
            j1 = min(j0 + geom.block_w, W)
            block = frames[:, i0:i1, j0:j1]
            try:
                mat = casorati(block)
                s = np.linalg.svd(mat, compute_uv=False)
                rank = s.size
                lower = auto_lower_cutoff(s) if s[0] > 0 else 0
                lower = min(lower, rank - 1)
                upper = min(max_sv - 1, rank - 1)
                if lower > upper:
                    lower = upper
                filtered = svd_filter_block(block, SvdCutoffs(lower, upper))
            except (SvdError, np.linalg.LinAlgError) as e:
                raise SvdError(f"block at (i={i0}, j={j0}) failed: {e}") from e
            out[:, i0:i1, j0:j1] += filtered
            weight[i0:i1, j0:j1] += 1.0
    out /= weight[None, :, :]
    return out


def envelope(frame: np.ndarray) -> np.ndarray:
    """Element-wise complex magnitude (brightness image)."""
    return np.abs(frame)


def normalized_envelope(frames: np.ndarray) -> np.ndarray:
    """Envelope of a frame stack scaled to peak 1, as float32 network input."""
    env = np.abs(frames).astype(np.float32)
    peak = env.max()
    if peak > 0:
        env /= peak
    return env
