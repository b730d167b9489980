"""Per-layer attention visibility: causal, sliding-window, and discard rules.

A schedule assigns each layer a window width omega(l): infinite on full
layers, finite on sliding-window layers. Token j is visible to token i on
layer l iff j <= i and i - j < omega(l). Schedules that discard the static
prefix additionally hide columns j < static_prefix from rows i >=
static_prefix on every sliding-window layer.

Masks are additive: 0.0 where visible, NEG_INF where hidden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import NEG_INF, ConfigError

PRESET_NAMES = ("4F", "2F2S", "2S2F", "4S")
_DEFAULT_WINDOWS = {"2F2S": (32, 16), "2S2F": (32, 16), "4S": (32, 24, 16, 8)}


@dataclass(frozen=True)
class MaskSchedule:
    """Layer-by-layer visibility plan for one backbone."""

    depth: int
    full_layers: int                 # number of layers with unbounded windows
    windows: tuple[int, ...]         # widths of the sliding-window layers
    discard_static: bool = False
    static_prefix: int = 0           # field-token count hidden by discarding
    omega_override: tuple[float, ...] | None = None  # explicit per-layer widths

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("schedule depth must be >= 1")
        if not 0 <= self.full_layers <= self.depth:
            raise ConfigError("full_layers must lie in [0, depth]")
        if len(self.windows) != self.depth - self.full_layers:
            raise ConfigError(
                f"schedule needs {self.depth - self.full_layers} window widths, "
                f"got {len(self.windows)}"
            )
        if any(w < 1 for w in self.windows):
            raise ConfigError("window widths must be >= 1")
        if any(a <= b for a, b in zip(self.windows, self.windows[1:])):
            raise ConfigError("window widths must strictly shrink with depth")
        if self.static_prefix < 0:
            raise ConfigError("static_prefix must be >= 0")
        if self.omega_override is not None:
            if len(self.omega_override) != self.depth:
                raise ConfigError("omega_override must list one width per layer")
            finite = [w for w in self.omega_override if math.isfinite(w)]
            if tuple(int(w) for w in finite) != self.windows:
                raise ConfigError("omega_override finite widths must equal windows")

    def window_width(self, layer: int) -> float:
        """omega(l): math.inf on full layers, the window width otherwise."""
        if not 0 <= layer < self.depth:
            raise ConfigError(f"layer {layer} outside schedule of depth {self.depth}")
        if self.omega_override is not None:
            return float(self.omega_override[layer])
        if layer < self.full_layers:
            return math.inf
        return float(self.windows[layer - self.full_layers])

    def is_windowed(self, layer: int) -> bool:
        return math.isfinite(self.window_width(layer))

    def discards_on(self, layer: int) -> bool:
        return self.discard_static and self.static_prefix > 0 and self.is_windowed(layer)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "full_layers": self.full_layers,
            "windows": list(self.windows),
            "discard_static": self.discard_static,
            "static_prefix": self.static_prefix,
            "omega_override": None
            if self.omega_override is None
            else ["inf" if math.isinf(w) else int(w) for w in self.omega_override],
        }

    @staticmethod
    def from_dict(d: dict) -> "MaskSchedule":
        override = d.get("omega_override")
        if override is not None:
            override = tuple(math.inf if w == "inf" else float(w) for w in override)
        return MaskSchedule(
            depth=int(d["depth"]),
            full_layers=int(d["full_layers"]),
            windows=tuple(int(w) for w in d["windows"]),
            discard_static=bool(d["discard_static"]),
            static_prefix=int(d["static_prefix"]),
            omega_override=override,
        )


def preset(
    name: str,
    windows: tuple[int, ...] | None = None,
    static_prefix: int = 0,
    discard_static: bool = True,
) -> MaskSchedule:
    """Named four-layer schedules.

    4F: all layers full. 2F2S: two full then two shrinking windows (the
    coarse-to-fine default). 2S2F: the same window pair applied first, full
    layers last, realized as a per-layer override. 4S: four shrinking
    windows, no full layer.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown schedule preset {name!r}, pick from {PRESET_NAMES}")
    if windows is None:
        windows = _DEFAULT_WINDOWS.get(name, ())
    windows = tuple(int(w) for w in windows)
    if name == "4F":
        if windows:
            raise ConfigError("4F takes no window widths")
        return MaskSchedule(4, 4, (), discard_static=False, static_prefix=static_prefix)
    if name == "2F2S":
        if len(windows) != 2:
            raise ConfigError("2F2S needs exactly 2 window widths")
        return MaskSchedule(4, 2, windows, discard_static, static_prefix)
    if name == "2S2F":
        if len(windows) != 2:
            raise ConfigError("2S2F needs exactly 2 window widths")
        return MaskSchedule(
            4, 2, windows, discard_static, static_prefix,
            omega_override=(float(windows[0]), float(windows[1]), math.inf, math.inf),
        )
    if len(windows) != 4:
        raise ConfigError("4S needs exactly 4 window widths")
    return MaskSchedule(4, 0, windows, discard_static, static_prefix)


def build_layer_mask(schedule: MaskSchedule, layer: int, seq_len: int) -> np.ndarray:
    """Additive (seq_len, seq_len) visibility mask for one layer."""
    omega = schedule.window_width(layer)
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    visible = j <= i
    if math.isfinite(omega):
        visible &= (i - j) < omega
    if schedule.discards_on(layer):
        # hide static columns from everything at or past the prefix; the
        # diagonal is never in that region, so it stays visible
        m = min(schedule.static_prefix, seq_len)
        visible &= ~((i >= m) & (j < m))
    out = np.where(visible, 0.0, NEG_INF)
    return out


def build_masks(schedule: MaskSchedule, seq_len: int) -> list[np.ndarray]:
    return [build_layer_mask(schedule, l, seq_len) for l in range(schedule.depth)]


def causal_mask(seq_len: int) -> np.ndarray:
    """Plain causal mask, the omega = inf special case."""
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    return np.where(j <= i, 0.0, NEG_INF)


def receptive_width(mask: np.ndarray, row: int) -> int:
    """Number of visible positions for one query row."""
    if not 0 <= row < mask.shape[0]:
        raise ConfigError(f"row {row} outside mask of size {mask.shape[0]}")
    return int(np.sum(mask[row] == 0.0))


def visible_counts(mask: np.ndarray) -> np.ndarray:
    return np.sum(mask == 0.0, axis=1).astype(np.int64)
