"""Synthetic well formations for smoke tests and demos.

Each well follows one of two regimes: a per-channel AR(1) process with a
regime-specific coefficient and channel offset. Wells of the same regime sit
in the same coordinate blob, so geographical labels agree with regimes.
"""

from __future__ import annotations

import numpy as np

from .data import CHANNELS, WellRecord

REGIMES = (
    {"name": "A", "phi": 0.95, "offset": np.array([0.4, -0.4, 0.4, -0.4]), "center": (-39.0, 174.0)},
    {"name": "B", "phi": 0.3, "offset": np.array([-0.4, 0.4, -0.4, 0.4]), "center": (-39.5, 174.5)},
)


def ar1_series(rng: np.random.Generator, n: int, phi: float, channels: int = len(CHANNELS)) -> np.ndarray:
    out = np.empty((n, channels))
    out[0] = rng.standard_normal(channels)
    scale = np.sqrt(1.0 - phi * phi)
    eps = rng.standard_normal((n, channels))
    for t in range(1, n):
        out[t] = phi * out[t - 1] + scale * eps[t]
    return out


def make_formation(n_wells: int = 40, length: int = 400, seed=0, formation: str = "synthetic",
                   offset_shift: np.ndarray | float = 0.0, start_depth: float = 1000.0,
                   prefix: str = "W") -> list[WellRecord]:
    """Wells alternate between regimes; ``class_label`` holds the regime name."""
    rng = np.random.default_rng(seed)
    wells = []
    for i in range(n_wells):
        regime = REGIMES[i % 2]
        values = ar1_series(rng, length, regime["phi"]) + regime["offset"] + offset_shift
        values = values + 0.1 * rng.standard_normal(len(CHANNELS))  # per-well bias
        lat, lon = np.array(regime["center"]) + 0.05 * rng.standard_normal(2)
        depth = start_depth + np.arange(length, dtype=float) + float(rng.integers(0, 50))
        rock = np.where((np.arange(length) // 50) % 2 == 0, "sand", "shale")
        wells.append(
            WellRecord(
                well_id=f"{prefix}{i:03d}",
                depth=depth,
                channels=values,
                formation=formation,
                class_label=regime["name"],
                rock_type=rock,
                latitude=float(lat),
                longitude=float(lon),
            )
        )
    return wells
