"""Synthetic microbubble scene generation, IQ rendering and dataset builds.

The acoustic model is a complex point-spread-function convolution: each
scatterer contributes a separable Gaussian envelope (lateral FWHM =
wavelength * f-number, axial FWHM ~ a 1.5-cycle pulse) modulated by the
axial carrier exp(i*4*pi*z/wavelength). This produces realistic speckle
and IQ phase for the downstream SVD filter without a wave solver.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .grid import GridSpec

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class PsfSpec:
    """Complex PSF parameters, all in micrometers."""

    lateral_fwhm_um: float = 103.0
    axial_fwhm_um: float = 77.0
    wavelength_um: float = 103.0

    @property
    def sigma_x(self) -> float:
        return self.lateral_fwhm_um * FWHM_TO_SIGMA

    @property
    def sigma_z(self) -> float:
        return self.axial_fwhm_um * FWHM_TO_SIGMA


@dataclass(frozen=True)
class SnrSpec:
    """Peak MB envelope over RMS background envelope, in dB."""

    snr_db: float

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


SNR_RANGE_DB = (1.5, 5.2)
DEFAULT_SNR_LEVELS_DB = (1.5, 3.3, 5.2)


@dataclass(frozen=True)
class SceneConfig:
    field_width_um: float = 228 * 51.5
    field_height_um: float = 228 * 51.5
    n_vessels: int = 3
    diameter_um: tuple = (100.0, 500.0)
    speed_mm_s: tuple = (1.0, 20.0)
    mean_mb_per_frame: float = 15.0
    n_frames: int = 40
    frame_rate_hz: float = 500.0
    tissue_per_mm2: float = 60.0
    bifurcate: bool = True
    curviness: float = 0.15

    def __post_init__(self):
        if self.field_width_um <= 0 or self.field_height_um <= 0:
            raise ValueError("empty field of view")
        if self.n_vessels < 1:
            raise ValueError("need at least one vessel")
        lo, hi = self.diameter_um
        if not (100.0 <= lo <= hi <= 500.0):
            raise ValueError("vessel diameters must lie within [100, 500] um")


@dataclass
class Vessel:
    points: np.ndarray      # [N, 2] (x_um, z_um) centerline vertices
    diameters: np.ndarray   # [N] per-vertex diameter in um

    @property
    def seg_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.seg_lengths.sum())

    def point_at(self, s: float) -> tuple:
        """Centerline point, unit normal and radius at arclength s."""
        seg = self.seg_lengths
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = min(max(s, 0.0), cum[-1])
        k = int(np.searchsorted(cum[1:], s, side="right"))
        k = min(k, len(seg) - 1)
        t = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        p = self.points[k] * (1 - t) + self.points[k + 1] * t
        d = self.points[k + 1] - self.points[k]
        d = d / (np.linalg.norm(d) + 1e-12)
        normal = np.array([-d[1], d[0]])
        radius = 0.5 * (self.diameters[k] * (1 - t) + self.diameters[k + 1] * t)
        return p, normal, radius


@dataclass
class MbTrack:
    track_id: int
    start_frame: int
    positions: np.ndarray   # [n_visible, 2] contiguous from start_frame
    scale: float = 1.0

    def position_at(self, frame_idx: int):
        k = frame_idx - self.start_frame
        if 0 <= k < len(self.positions):
            return self.positions[k]
        return None


@dataclass
class SimScene:
    vessels: list
    tissue_scatterers: np.ndarray   # [N, 3]: x_um, z_um packed with complex refl in col 2
    tissue_reflectivity: np.ndarray  # complex [N]
    mb_tracks: list
    frame_rate_hz: float
    config: SceneConfig

    def mb_positions(self, frame_idx: int) -> list:
        out = []
        for tr in self.mb_tracks:
            p = tr.position_at(frame_idx)
            if p is not None:
                out.append((float(p[0]), float(p[1]), tr.scale))
        return out


def _gen_vessel(rng, cfg: SceneConfig, start=None, direction=None) -> Vessel:
    w, h = cfg.field_width_um, cfg.field_height_um
    if start is None:
        edge = rng.integers(4)
        if edge == 0:
            start = np.array([0.0, rng.uniform(0.1, 0.9) * h])
            direction = rng.uniform(-0.6, 0.6)
        elif edge == 1:
            start = np.array([w, rng.uniform(0.1, 0.9) * h])
            direction = math.pi + rng.uniform(-0.6, 0.6)
        elif edge == 2:
            start = np.array([rng.uniform(0.1, 0.9) * w, 0.0])
            direction = math.pi / 2 + rng.uniform(-0.6, 0.6)
        else:
            start = np.array([rng.uniform(0.1, 0.9) * w, h])
            direction = -math.pi / 2 + rng.uniform(-0.6, 0.6)
    step = max(w, h) / 16.0
    lo, hi = cfg.diameter_um
    base_d = rng.uniform(lo, hi)
    pts = [start.copy()]
    dias = [base_d]
    ang = direction
    p = start.copy()
    for _ in range(64):
        ang += rng.normal(0.0, cfg.curviness)
        p = p + step * np.array([math.cos(ang), math.sin(ang)])
        pts.append(p.copy())
        d = np.clip(base_d * (1.0 + rng.normal(0.0, 0.08)), lo, hi)
        dias.append(float(d))
        if not (0 <= p[0] <= w and 0 <= p[1] <= h):
            break
    return Vessel(np.array(pts), np.array(dias))


def gen_scene(seed: int, cfg: SceneConfig) -> SimScene:
    """Deterministically generate vessels, tissue scatterers and MB tracks."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    vessels = [_gen_vessel(rng, cfg) for _ in range(cfg.n_vessels)]
    if cfg.bifurcate:
        parent = vessels[0]
        mid = len(parent.points) // 2
        d = parent.points[min(mid + 1, len(parent.points) - 1)] - parent.points[mid]
        ang = math.atan2(d[1], d[0]) + rng.choice([-1, 1]) * rng.uniform(0.4, 0.9)
        branch = _gen_vessel(rng, cfg, start=parent.points[mid].copy(), direction=ang)
        vessels.append(branch)

    area_mm2 = cfg.field_width_um * cfg.field_height_um * 1e-6
    n_tissue = int(round(cfg.tissue_per_mm2 * area_mm2))
    tx = rng.uniform(0, cfg.field_width_um, n_tissue)
    tz = rng.uniform(0, cfg.field_height_um, n_tissue)
    trefl = (rng.normal(size=n_tissue) + 1j * rng.normal(size=n_tissue)) / math.sqrt(2)
    tissue = np.stack([tx, tz], axis=1)

    dt = 1.0 / cfg.frame_rate_hz
    lengths = np.array([v.length for v in vessels])
    probs = lengths / lengths.sum()
    target = cfg.mean_mb_per_frame * cfg.n_frames
    tracks = []
    visible_total = 0.0
    tid = 0
    while visible_total < target and tid < 100000:
        vi = rng.choice(len(vessels), p=probs)
        v = vessels[vi]
        speed = rng.uniform(*cfg.speed_mm_s) * 1000.0  # um/s
        step = speed * dt
        s0 = rng.uniform(0, v.length)
        u = rng.uniform(-0.9, 0.9)
        f0 = int(rng.integers(0, cfg.n_frames))
        pos = []
        s = s0
        f = f0
        while s <= v.length and f < cfg.n_frames:
            p, normal, radius = v.point_at(s)
            q = p + normal * (u * radius)
            if not (0 <= q[0] < cfg.field_width_um and 0 <= q[1] < cfg.field_height_um):
                break
            pos.append(q)
            s += step
            f += 1
        if pos:
            tracks.append(MbTrack(tid, f0, np.array(pos), scale=float(rng.uniform(0.8, 1.2))))
            visible_total += len(pos)
        tid += 1
    return SimScene(vessels, tissue, trefl, tracks, cfg.frame_rate_hz, cfg)


def render_scatterers(positions: np.ndarray, reflectivity: np.ndarray,
                      grid: GridSpec, psf: PsfSpec) -> np.ndarray:
    """Sum of shifted complex PSFs sampled at coarse pixel centers."""
    H, W, pitch = grid.height_px, grid.width_px, grid.pitch_um
    out = np.zeros((H, W), dtype=np.complex128)
    if len(positions) == 0:
        return out
    sx, sz = psf.sigma_x, psf.sigma_z
    rx = max(1, int(math.ceil(3.5 * sx / pitch)))
    rz = max(1, int(math.ceil(3.5 * sz / pitch)))
    xc = (np.arange(W) + 0.5) * pitch
    zc = (np.arange(H) + 0.5) * pitch
    k_carrier = 4.0 * math.pi / psf.wavelength_um
    for (xs, zs), a in zip(positions, reflectivity):
        j0 = int(xs / pitch)
        i0 = int(zs / pitch)
        jlo, jhi = max(0, j0 - rx), min(W, j0 + rx + 1)
        ilo, ihi = max(0, i0 - rz), min(H, i0 + rz + 1)
        if jlo >= jhi or ilo >= ihi:
            continue
        dx = xc[jlo:jhi] - xs
        dz = zc[ilo:ihi] - zs
        env = np.exp(-dx[None, :] ** 2 / (2 * sx * sx)
                     - dz[:, None] ** 2 / (2 * sz * sz))
        carrier = np.exp(1j * k_carrier * dz)[:, None]
        out[ilo:ihi, jlo:jhi] += a * env * carrier
    return out


def render_iq_frame(scene: SimScene, frame_idx: int, grid: GridSpec, snr: SnrSpec,
                    seed: int, psf: PsfSpec | None = None, noise_rel: float = 0.3,
                    _tissue_field: np.ndarray | None = None) -> np.ndarray:
    """Render one complex IQ frame with the MB amplitude calibrated so that
    20*log10(peak MB envelope / RMS background envelope) equals snr_db."""
    if frame_idx >= scene.config.n_frames:
        raise ValueError(f"frame_idx {frame_idx} beyond scene length {scene.config.n_frames}")
    psf = psf or PsfSpec(lateral_fwhm_um=grid.wavelength_um,
                         wavelength_um=grid.wavelength_um)
    if _tissue_field is None:
        _tissue_field = render_scatterers(scene.tissue_scatterers,
                                          scene.tissue_reflectivity, grid, psf)
    tissue = _tissue_field
    tissue_rms = math.sqrt(float(np.mean(np.abs(tissue) ** 2)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(frame_idx), 0x101]))
    if tissue_rms > 0 and noise_rel > 0:
        sigma = noise_rel * tissue_rms / math.sqrt(2)
        noise = sigma * (rng.normal(size=tissue.shape) + 1j * rng.normal(size=tissue.shape))
    else:
        noise = 0.0
    background = tissue + noise
    bg_rms = math.sqrt(float(np.mean(np.abs(background) ** 2)))

    mbs = scene.mb_positions(frame_idx)
    if mbs:
        pos = np.array([(x, z) for x, z, _ in mbs])
        scales = np.array([s for _, _, s in mbs], dtype=np.complex128)
        mb_field = render_scatterers(pos, scales, grid, psf)
        peak = float(np.abs(mb_field).max())
        if bg_rms > 0 and peak > 0:
            mb_field *= bg_rms * 10.0 ** (snr.snr_db / 20.0) / peak
    else:
        mb_field = 0.0
    return background + mb_field


@dataclass
class LabelMap:
    """Per coarse pixel: MB-present flag and quantized x/z offset bins."""

    detect: np.ndarray  # uint8 [H, W]
    xbin: np.ndarray    # uint8 [H, W], 0 where detect == 0
    zbin: np.ndarray

    def __eq__(self, other):
        return (np.array_equal(self.detect, other.detect)
                and np.array_equal(self.xbin, other.xbin)
                and np.array_equal(self.zbin, other.zbin))


def encode_labels(mb_positions, grid: GridSpec):
    """Quantize continuous MB positions onto the coarse grid with K offset
    bins per axis. Returns (LabelMap, n_skipped). When two MBs land in the
    same coarse pixel the one closer to the pixel center wins; ties keep
    the earlier entry."""
    H, W, K, pitch = grid.height_px, grid.width_px, grid.upsample_k, grid.pitch_um
    detect = np.zeros((H, W), dtype=np.uint8)
    xbin = np.zeros((H, W), dtype=np.uint8)
    zbin = np.zeros((H, W), dtype=np.uint8)
    best = {}
    skipped = 0
    for order, (x, z) in enumerate(mb_positions):
        if not grid.contains(x, z):
            skipped += 1
            continue
        j = int(x / pitch)
        i = int(z / pitch)
        fx = x / pitch - j
        fz = z / pitch - i
        kx = min(int(K * fx), K - 1)
        kz = min(int(K * fz), K - 1)
        d2 = (fx - 0.5) ** 2 + (fz - 0.5) ** 2
        key = (i, j)
        if key in best and best[key][0] <= d2:
            continue
        best[key] = (d2, order, kx, kz)
    for (i, j), (_, _, kx, kz) in best.items():
        detect[i, j] = 1
        xbin[i, j] = kx
        zbin[i, j] = kz
    return LabelMap(detect, xbin, zbin), skipped


def hflip(frames: np.ndarray, labels: LabelMap, k_bins: int):
    """Mirror the lateral axis of every frame and remap offset bins."""
    f = frames[..., ::-1].copy()
    det = labels.detect[:, ::-1].copy()
    xb = labels.xbin[:, ::-1].copy()
    zb = labels.zbin[:, ::-1].copy()
    xb = np.where(det == 1, (k_bins - 1) - xb, 0).astype(np.uint8)
    return f, LabelMap(det, xb, zb)


def crop(frames: np.ndarray, labels: LabelMap, origin, size):
    """Crop a (height, width) region at coarse-pixel origin (i0, j0)."""
    i0, j0 = origin
    h, w = size
    H, W = frames.shape[-2], frames.shape[-1]
    if i0 < 0 or j0 < 0 or i0 + h > H or j0 + w > W or h < 1 or w < 1:
        raise ValueError(f"crop [{i0}:{i0+h}, {j0}:{j0+w}] outside {H}x{W} frame")
    f = frames[..., i0:i0 + h, j0:j0 + w].copy()
    lm = LabelMap(labels.detect[i0:i0 + h, j0:j0 + w].copy(),
                  labels.xbin[i0:i0 + h, j0:j0 + w].copy(),
                  labels.zbin[i0:i0 + h, j0:j0 + w].copy())
    return f, lm


def augment(frames: np.ndarray, labels: LabelMap, op, k_bins: int = 4):
    """Apply one augmentation op: 'hflip' or ('crop', origin, size)."""
    if op == "hflip":
        return hflip(frames, labels, k_bins)
    if isinstance(op, (tuple, list)) and op[0] == "crop":
        return crop(frames, labels, op[1], op[2])
    raise ValueError(f"unknown augmentation {op!r}")


@dataclass
class DatasetConfig:
    out_dir: str
    count: int
    snr_levels_db: tuple = DEFAULT_SNR_LEVELS_DB
    m: int = 3
    grid: GridSpec = field(default_factory=GridSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    master_seed: int = 0
    morphology_seed: int = 0     # distinct values give distinct vessel layouts
    stacks_per_scene: int = 16
    augment_hflip: bool = True   # half of each scene's stacks are mirrored copies
    clutter_filter: bool = True  # SVD-filter each scene sequence before slicing
    noise_rel: float = 0.3
    overwrite: bool = False


def build_dataset(cfg: DatasetConfig) -> str:
    """Render labeled IQ stacks to cfg.out_dir and write manifest.json.

    Stacks are m consecutive frames with the label map of the center frame;
    continuous ground-truth MB positions for the center frame are recorded
    in the manifest for evaluation.
    """
    from . import formats
    from .clutterfilt import BlockGeometry, filter_stack

    if cfg.count < 1:
        raise ValueError("count must be >= 1")
    if cfg.m % 2 != 1:
        raise ValueError("m must be odd")
    out = cfg.out_dir
    if os.path.isdir(out) and os.listdir(out) and not cfg.overwrite:
        raise FileExistsError(f"output directory {out} is not empty")
    os.makedirs(out, exist_ok=True)

    levels = list(cfg.snr_levels_db)
    n_levels = len(levels)
    per_level = [cfg.count // n_levels + (1 if r < cfg.count % n_levels else 0)
                 for r in range(n_levels)]
    rendered_per_scene = (cfg.stacks_per_scene // 2 if cfg.augment_hflip
                          else cfg.stacks_per_scene)
    rendered_per_scene = max(1, rendered_per_scene)

    psf = PsfSpec(lateral_fwhm_um=cfg.grid.wavelength_um,
                  wavelength_um=cfg.grid.wavelength_um)
    stack_records = []
    idx = 0
    for li, (snr_db, n_needed) in enumerate(zip(levels, per_level)):
        scene_i = 0
        produced = 0
        while produced < n_needed:
            scene_seed = int(np.random.default_rng(np.random.SeedSequence(
                [cfg.master_seed, cfg.morphology_seed, li, scene_i])).integers(2 ** 31))
            scene = gen_scene(scene_seed, cfg.scene)
            tissue = render_scatterers(scene.tissue_scatterers,
                                       scene.tissue_reflectivity, cfg.grid, psf)
            T = cfg.scene.n_frames
            frames = np.stack([
                render_iq_frame(scene, t, cfg.grid, SnrSpec(snr_db),
                                seed=scene_seed, psf=psf, noise_rel=cfg.noise_rel,
                                _tissue_field=tissue)
                for t in range(T)])
            if cfg.clutter_filter and T >= 2:
                bh = min(cfg.grid.height_px, 76)
                bw = min(cfg.grid.width_px, 76)
                frames = filter_stack(frames, BlockGeometry(bh, bw))
            n_windows = T - cfg.m + 1
            take = min(rendered_per_scene, n_windows)
            stride = max(1, n_windows // take)
            starts = list(range(0, n_windows, stride))[:take]
            for t0 in starts:
                if produced >= n_needed:
                    break
                center = t0 + (cfg.m - 1) // 2
                stack = frames[t0:t0 + cfg.m]
                gt = [(x, z) for x, z, _ in scene.mb_positions(center)]
                labels, _ = encode_labels(gt, cfg.grid)
                variants = [(stack, labels, gt, False)]
                if cfg.augment_hflip:
                    fs, fl = hflip(stack, labels, cfg.grid.upsample_k)
                    fgt = [(cfg.grid.width_um - x, z) for x, z in gt]
                    variants.append((fs, fl, fgt, True))
                for vstack, vlab, vgt, flipped in variants:
                    if produced >= n_needed:
                        break
                    name = f"stack_{idx:06d}"
                    formats.write_iqf(os.path.join(out, name + ".iqf"), vstack)
                    formats.write_lbl(os.path.join(out, name + ".lbl"), vlab,
                                      cfg.grid.upsample_k)
                    stack_records.append({
                        "file": name, "snr_db": snr_db, "scene_seed": scene_seed,
                        "center_frame": center, "flipped": flipped,
                        "gt": [[round(x, 4), round(z, 4)] for x, z in vgt],
                    })
                    idx += 1
                    produced += 1
            scene_i += 1

    manifest = {
        "format": "srusloc-dataset-v1",
        "grid": cfg.grid.to_dict(),
        "m": cfg.m,
        "count": cfg.count,
        "snr_levels_db": levels,
        "master_seed": cfg.master_seed,
        "morphology_seed": cfg.morphology_seed,
        "clutter_filter": cfg.clutter_filter,
        "augment_hflip": cfg.augment_hflip,
        "noise_rel": cfg.noise_rel,
        "scene": asdict(cfg.scene),
        "stacks": stack_records,
    }
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path
