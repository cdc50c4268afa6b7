"""SRUS-ConvNeXt: stem conv, six inverted-bottleneck blocks with identity
paths, and three parallel 1x1 decoders (detection logit plus K-bin x/z
subpixel offset logits). Fully convolutional, no down/upsampling.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"SRCX"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    m: int = 3                 # input frames
    stem_ch: int = 128
    hidden_ch: int = 512
    n_blocks: int = 6
    k_bins: int = 4
    dw_kernel: int = 7
    stem_kernel: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if min(self.m, self.stem_ch, self.hidden_ch, self.n_blocks, self.k_bins) < 1:
            raise ValueError("all dimensions must be positive")
        if self.dw_kernel % 2 == 0 or self.stem_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.hidden_ch > 768:
            raise ValueError("hidden_ch must be <= 768")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class NetOutput:
    detect_logit: torch.Tensor  # [B, H, W]
    xoff_logits: torch.Tensor   # [B, K, H, W]
    zoff_logits: torch.Tensor   # [B, K, H, W]


@dataclass(frozen=True)
class Detection:
    i: int        # coarse axial index
    j: int        # coarse lateral index
    kz: int       # axial offset bin
    kx: int       # lateral offset bin
    prob: float


class BottleneckBlock(nn.Module):
    """Depthwise 7x7 -> 1x1 expand -> 1x1 project, BN+GELU after each conv,
    with an identity path. The final GELU is applied before the residual add."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, h = cfg.stem_ch, cfg.hidden_ch
        pad = cfg.dw_kernel // 2
        self.dw = nn.Conv2d(c, c, cfg.dw_kernel, padding=pad, groups=c, bias=False)
        self.bn1 = nn.BatchNorm2d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.up = nn.Conv2d(c, h, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(h, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.down = nn.Conv2d(h, c, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.act = nn.GELU()  # exact x * Phi(x)

    def forward(self, x):
        y = self.act(self.bn1(self.dw(x)))
        y = self.act(self.bn2(self.up(y)))
        y = self.act(self.bn3(self.down(y)))
        return x + y


class SrusConvNeXt(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.stem_ch
        pad = cfg.stem_kernel // 2
        self.stem = nn.Conv2d(cfg.m, c, cfg.stem_kernel, padding=pad, bias=False)
        self.stem_bn = nn.BatchNorm2d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.act = nn.GELU()
        self.blocks = nn.ModuleList(BottleneckBlock(cfg) for _ in range(cfg.n_blocks))
        self.dec_detect = nn.Conv2d(c, 1, 1, bias=True)
        self.dec_xoff = nn.Conv2d(c, cfg.k_bins, 1, bias=True)
        self.dec_zoff = nn.Conv2d(c, cfg.k_bins, 1, bias=True)

    def forward(self, x: torch.Tensor) -> NetOutput:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        y = self.act(self.stem_bn(self.stem(x)))
        for blk in self.blocks:
            y = blk(y)
        return NetOutput(self.dec_detect(y).squeeze(1),
                         self.dec_xoff(y), self.dec_zoff(y))


def param_count(cfg: NetConfig) -> int:
    """Closed-form learnable parameter count. Convolutions followed by
    batch norm carry no bias; decoders carry biases."""
    c, h, k = cfg.stem_ch, cfg.hidden_ch, cfg.k_bins
    stem = cfg.stem_kernel ** 2 * cfg.m * c + 2 * c
    block = (cfg.dw_kernel ** 2 * c + 2 * c
             + c * h + 2 * h
             + h * c + 2 * c)
    decoders = (c + 1) * (1 + 2 * k)
    return stem + cfg.n_blocks * block + decoders


def init_params(cfg: NetConfig, seed: int) -> SrusConvNeXt:
    """Build a model with fan-in-scaled normal kernels, default BN stats and
    zero decoder biases; deterministic for a fixed seed."""
    gen = torch.Generator().manual_seed(int(seed))
    model = SrusConvNeXt(cfg)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels // mod.groups * mod.kernel_size[0] * mod.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.running_mean.zero_()
                mod.running_var.fill_(1.0)
    return model


def forward(model: SrusConvNeXt, x, mode: str = "eval") -> NetOutput:
    """Run the network. Train mode updates BN running statistics; eval mode
    uses the stored statistics and is a pure function."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x)).float()
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


def predict(model: SrusConvNeXt, stack, threshold: float = 0.5) -> list:
    """Threshold the detection map of the window's center frame and read the
    argmax offset bins at each detected pixel (ties toward lower bin)."""
    out = forward(model, stack, mode="eval")
    prob = torch.sigmoid(out.detect_logit[0])
    mask = prob >= threshold
    idx = torch.nonzero(mask)
    kx = torch.argmax(out.xoff_logits[0], dim=0)
    kz = torch.argmax(out.zoff_logits[0], dim=0)
    dets = []
    for i, j in idx.tolist():
        dets.append(Detection(i=i, j=j, kz=int(kz[i, j]), kx=int(kx[i, j]),
                              prob=float(prob[i, j])))
    return dets


def _tensor_names(model: SrusConvNeXt):
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, t


def save_checkpoint(model: SrusConvNeXt, path: str) -> None:
    """Write magic, version, NetConfig JSON, per-tensor f32 records and a
    trailing CRC32 of the payload."""
    payload = io.BytesIO()
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    payload.write(struct.pack("<I", len(cfg_bytes)))
    payload.write(cfg_bytes)
    records = list(_tensor_names(model))
    payload.write(struct.pack("<I", len(records)))
    for name, t in records:
        nb = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        payload.write(struct.pack("<H", len(nb)))
        payload.write(nb)
        payload.write(b"f32\x00")
        payload.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            payload.write(struct.pack("<I", d))
        payload.write(arr.tobytes())
    data = payload.getvalue()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(data)
        f.write(struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF))


def load_checkpoint(path: str) -> SrusConvNeXt:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    data, crc_stored = raw[8:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(data) & 0xFFFFFFFF != crc_stored:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    off = 0
    clen, = struct.unpack_from("<I", data, off); off += 4
    cfg = NetConfig.from_dict(json.loads(data[off:off + clen])); off += clen
    n_rec, = struct.unpack_from("<I", data, off); off += 4
    state = {}
    for _ in range(n_rec):
        nlen, = struct.unpack_from("<H", data, off); off += 2
        name = data[off:off + nlen].decode(); off += nlen
        dtype = data[off:off + 4]; off += 4
        if dtype != b"f32\x00":
            raise ValueError(f"{path}: unsupported dtype {dtype!r}")
        ndim, = struct.unpack_from("<B", data, off); off += 1
        shape = struct.unpack_from("<" + "I" * ndim, data, off); off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        state[name] = torch.from_numpy(arr.copy())
    model = SrusConvNeXt(cfg)
    model.load_state_dict(state, strict=False)
    model.eval()
    return model
