"""SRUS image formation: sliding-window inference over the filtered stack,
decoding detections to continuous coordinates, accumulation onto the K-fold
fine grid, and Hessian-based (Jerman) vessel enhancement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .clutterfilt import BlockGeometry, filter_stack, normalized_envelope
from .grid import GridSpec
from .network import predict


@dataclass
class FineGridImage:
    counts: np.ndarray  # [K*H, K*W] accumulated localizations
    grid: GridSpec

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FineGridImage":
        K = grid.upsample_k
        return cls(np.zeros((K * grid.height_px, K * grid.width_px)), grid)


@dataclass(frozen=True)
class WindowPlan:
    m: int
    stride: int = 1

    def __post_init__(self):
        if self.m % 2 != 1:
            raise ValueError("window length m must be odd")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def center_offset(self) -> int:
        return (self.m - 1) // 2


def sliding_windows(T: int, plan: WindowPlan) -> list:
    """[(start, stop), center] per window; border frames without a full
    window are never centers (no padding)."""
    if T < plan.m:
        raise ValueError(f"stack length {T} shorter than window {plan.m}")
    out = []
    for t in range(0, T - plan.m + 1, plan.stride):
        out.append(((t, t + plan.m), t + plan.center_offset))
    return out


def decode_detections(dets, grid: GridSpec) -> list:
    """Bin-center decoding, the exact inverse of the label encoding:
    x = (j + (kx + 0.5)/K) * pitch, z likewise."""
    K, pitch = grid.upsample_k, grid.pitch_um
    pts = []
    for d in dets:
        if not (0 <= d.kx < K and 0 <= d.kz < K):
            raise ValueError(f"offset bin out of range in {d}")
        pts.append(((d.j + (d.kx + 0.5) / K) * pitch,
                    (d.i + (d.kz + 0.5) / K) * pitch))
    return pts


def accumulate(points, img: FineGridImage):
    """Increment the fine-grid cell of each in-field point; out-of-field
    points are skipped and tallied. Returns (img, n_skipped)."""
    K, pitch = img.grid.upsample_k, img.grid.pitch_um
    Hf, Wf = img.counts.shape
    skipped = 0
    for x, z in points:
        fj = int(np.floor(x * K / pitch))
        fi = int(np.floor(z * K / pitch))
        if 0 <= fi < Hf and 0 <= fj < Wf:
            img.counts[fi, fj] += 1.0
        else:
            skipped += 1
    return img, skipped


def jerman_enhance(img: np.ndarray, scales_px, tau: float = 0.5) -> np.ndarray:
    """Jerman 2D vesselness, bright-on-dark polarity, gamma=2 scale
    normalization, maximum over scales. Output is in [0, 1]."""
    scales_px = list(scales_px)
    if not scales_px:
        raise ValueError("need at least one scale")
    if not (0 < tau <= 1):
        raise ValueError("tau must be in (0, 1]")
    img = np.asarray(img, dtype=np.float64)
    # remove the DC level: the truncated derivative kernels are not exactly
    # zero-sum, and the response must be invariant to a constant offset
    img = img - img.mean()
    best = np.zeros_like(img)
    for s in scales_px:
        if s <= 0:
            raise ValueError("scales must be positive")
        hzz = gaussian_filter(img, s, order=(2, 0)) * s * s
        hxx = gaussian_filter(img, s, order=(0, 2)) * s * s
        hzx = gaussian_filter(img, s, order=(1, 1)) * s * s
        # eigenvalues of [[hzz, hzx], [hzx, hxx]], ordered |l1| <= |l2|
        tr = hzz + hxx
        disc = np.sqrt(np.maximum((hzz - hxx) ** 2 + 4 * hzx ** 2, 0.0))
        la = 0.5 * (tr + disc)
        lb = 0.5 * (tr - disc)
        l2 = np.where(np.abs(la) >= np.abs(lb), la, lb)
        l2p = np.maximum(-l2, 0.0)  # bright curvilinear structures
        mx = l2p.max()
        if mx <= 0:
            continue
        reg = tau * mx
        lrho = np.where(l2p > reg, l2p, np.where(l2p > 0, reg, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            resp = l2p ** 2 * (lrho - l2p) * (3.0 / (l2p + lrho)) ** 3
        resp = np.where(l2p <= 0, 0.0, resp)
        resp = np.where((l2p >= lrho / 2) & (lrho > 0), 1.0, resp)
        best = np.maximum(best, resp)
    return np.clip(best, 0.0, 1.0)


@dataclass(frozen=True)
class FormConfig:
    apply_filter: bool = True
    block: BlockGeometry = field(default_factory=lambda: BlockGeometry(76, 76))
    max_sv: int = 400
    threshold: float = 0.5
    scales_px: tuple = (1.0, 2.0, 3.0)  # in fine pixels
    tau: float = 0.5
    log_compress: bool = False


def form_srus(frames: np.ndarray, grid: GridSpec, model, plan: WindowPlan,
              cfg: FormConfig = FormConfig()):
    """Full formation chain: clutter filter, envelope, per-window prediction,
    decoding, accumulation and vessel enhancement.

    Returns (raw FineGridImage, enhanced FineGridImage, detection log)."""
    frames = getattr(frames, "frames", frames)
    T = frames.shape[0]
    if T < plan.m:
        raise ValueError(f"stack length {T} shorter than window m={plan.m}")
    if cfg.apply_filter and T >= 2:
        geom = BlockGeometry(min(cfg.block.block_h, grid.height_px),
                             min(cfg.block.block_w, grid.width_px),
                             cfg.block.overlap)
        frames = filter_stack(frames, geom, cfg.max_sv)
    raw = FineGridImage.zeros(grid)
    log = []
    for (t0, t1), center in sliding_windows(T, plan):
        window = normalized_envelope(frames[t0:t1])
        try:
            dets = predict(model, window, threshold=cfg.threshold)
            points = decode_detections(dets, grid)
            _, skipped = accumulate(points, raw)
        except Exception as e:
            raise RuntimeError(f"window centered at frame {center} failed: {e}") from e
        log.append({"center_frame": center, "n_detections": len(dets),
                    "n_skipped": skipped})
    base = np.log1p(raw.counts) if cfg.log_compress else raw.counts
    enhanced = FineGridImage(jerman_enhance(base, cfg.scales_px, cfg.tau), grid)
    return raw, enhanced, log
