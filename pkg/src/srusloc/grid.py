"""Coarse/fine grid geometry shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class GridSpec:
    """Coarse pixel lattice plus the K-fold subpixel subdivision.

    Coordinates are in micrometers; coarse pixel (i, j) covers
    [i*pitch_um, (i+1)*pitch_um) axially and [j*pitch_um, (j+1)*pitch_um)
    laterally, with the sample point at the pixel center.
    """

    width_px: int = 228
    height_px: int = 228
    pitch_um: float = 51.5
    wavelength_um: float = 103.0
    upsample_k: int = 4

    def __post_init__(self):
        if self.width_px < 16 or self.height_px < 16:
            raise ValueError("grid must be at least 16x16 pixels")
        if self.pitch_um <= 0:
            raise ValueError("pitch_um must be positive")
        if self.upsample_k < 2:
            raise ValueError("upsample_k must be >= 2")

    @property
    def width_um(self) -> float:
        return self.width_px * self.pitch_um

    @property
    def height_um(self) -> float:
        return self.height_px * self.pitch_um

    @property
    def fine_pitch_um(self) -> float:
        return self.pitch_um / self.upsample_k

    def contains(self, x_um: float, z_um: float) -> bool:
        return 0.0 <= x_um < self.width_um and 0.0 <= z_um < self.height_um

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "pitch_um": self.pitch_um,
            "wavelength_um": self.wavelength_um,
            "upsample_k": self.upsample_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)
