from dataclasses import dataclass, asdict, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence
import numpy as np
import pandas as pd
from . import logger


class ScheduleVariant(str, Enum):
    COSINE = 'cosine'
    LINEAR = 'linear'
    STEPPED = 'stepped'
    INTERLEAVED = 'interleaved'
    CONSTANT = 'constant'


#variants whose clamped schedule never increases with depth
DECAYING = (ScheduleVariant.COSINE, ScheduleVariant.LINEAR, ScheduleVariant.STEPPED)
#default clamp thresholds of the cosine variant
COSINE_THRESHOLDS = (0.1, 0.9)


@dataclass(frozen = True)
class ScheduleConfig:
    """
    Layer-wise retention schedule definition.

    Parameters
    ----------
    n_layers
        Number of layers L.
    variant
        A :class:`ScheduleVariant` (or its string value).
        (Default: `cosine`)
    beta
        Shift factor of the cosine variant, in (0, 1].
        (Default: 0.5)
    min_ratio
        Lower clamp threshold; raw ratios at or below it become `min_ratio`.
        (Default: 0.1 for `cosine`, no lower clamp for the other variants)
    max_ratio
        Upper clamp threshold; raw ratios at or above it become 1 (the layer runs without routing).
        (Default: 0.9 for `cosine`, 1 for the other variants)
    clamp
        Whether to apply the thresholds at all.
        (Default: `True`)
    ratio
        Retention ratio of the `constant` variant.
    interleave_low
        Ratio of the routed layers of the `interleaved` variant (odd layers, 1-based, keep ratio 1).
    step_levels
        Three non-increasing ratios of the `stepped` variant, one per layer group.
    linear_start
        First-layer ratio of the `linear` variant.
        (Default: 0.9)
    linear_end
        Last-layer ratio of the `linear` variant.
    """
    n_layers: int
    variant: ScheduleVariant = ScheduleVariant.COSINE
    beta: float = 0.5
    min_ratio: Optional[float] = None
    max_ratio: Optional[float] = None
    clamp: bool = True
    ratio: Optional[float] = None
    interleave_low: Optional[float] = None
    step_levels: Optional[tuple] = None
    linear_start: float = 0.9
    linear_end: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'variant', ScheduleVariant(self.variant))
        cosine = self.variant == ScheduleVariant.COSINE
        if self.min_ratio is None:
            object.__setattr__(self, 'min_ratio', COSINE_THRESHOLDS[0] if cosine else 0.0)
        if self.max_ratio is None:
            object.__setattr__(self, 'max_ratio', COSINE_THRESHOLDS[1] if cosine else 1.0)
        if self.step_levels is not None:
            object.__setattr__(self, 'step_levels', tuple(float(s) for s in self.step_levels))
        if int(self.n_layers) < 1:
            raise ValueError(f"🛑 `n_layers` should be at least 1, got {self.n_layers}")
        if not 0 <= self.min_ratio <= self.max_ratio <= 1:
            raise ValueError(f"🛑 Thresholds should satisfy 0 <= min_ratio <= max_ratio <= 1, got min_ratio = {self.min_ratio}, max_ratio = {self.max_ratio}")
        if cosine and self.min_ratio == 0:
            raise ValueError("🛑 `min_ratio` of the cosine variant should be positive")
        if not 0 < self.beta <= 1:
            raise ValueError(f"🛑 Shift factor `beta` should be in (0, 1], got {self.beta}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out['variant'] = self.variant.value
        if self.step_levels is not None:
            out['step_levels'] = list(self.step_levels)
        return out


@dataclass(frozen = True)
class RatioSchedule:
    """
    Per-layer retention ratios.

    Attributes
    ----------
    ratios
        Clamped ratio of layers 1..L.
    raw
        Ratio before clamping.
    config
        The generating :class:`ScheduleConfig`.
    """
    ratios: np.ndarray
    raw: np.ndarray
    config: ScheduleConfig

    def __len__(self):
        return len(self.ratios)

    @property
    def mean_retention(self) -> float:
        return mean_retention(self)

    def to_frame(self) -> pd.DataFrame:
        """Table with columns `layer` (1-based), `raw_ratio`, `clamped_ratio`."""
        return pd.DataFrame({'layer': np.arange(1, len(self) + 1), 'raw_ratio': self.raw, 'clamped_ratio': self.ratios})

    def __repr__(self):
        return f"RatioSchedule ({self.config.variant.value}) over {len(self)} layers with mean retention {self.mean_retention:.6f}"


class ThresholdSearch(NamedTuple):
    """Result of :func:`search_thresholds`."""
    config: ScheduleConfig
    achieved: float
    within_tolerance: bool


GROUP_NAMES = ('shallow', 'middle', 'deep')


def layer_groups(n_layers: int) -> dict:
    """Split 0-based layer indices into shallow, middle and deep groups (sizes 3/3/2 for 8 layers)."""
    return dict(zip(GROUP_NAMES, np.array_split(np.arange(n_layers), 3)))


def prd_ratio(config: ScheduleConfig, layer: int) -> float:
    """
    Raw shifted-cosine ratio `0.5 * cos(pi * l / L) + beta` of a 1-based layer.

    Parameters
    ----------
    config
        A cosine :class:`ScheduleConfig`.
    layer
        Layer index l in 1..L.

    Returns
    ----------
    float
        The unclamped ratio.
    """
    if config.variant != ScheduleVariant.COSINE:
        raise ValueError(f"🛑 Shifted-cosine ratios need the `cosine` variant, got `{config.variant.value}`")
    if not 1 <= layer <= config.n_layers:
        raise ValueError(f"🛑 Layer index should be in 1..{config.n_layers}, got {layer}")
    return 0.5 * np.cos(np.pi * layer / config.n_layers) + config.beta


def clamp_ratio(config: ScheduleConfig, ratio: float) -> float:
    """
    Apply the thresholds: at or above `max_ratio` gives 1, at or below `min_ratio` gives `min_ratio`.

    Parameters
    ----------
    config
        :class:`ScheduleConfig` holding the thresholds.
    ratio
        Raw ratio.

    Returns
    ----------
    float
        The clamped ratio.
    """
    if ratio >= config.max_ratio:
        return 1.0
    if ratio <= config.min_ratio:
        return float(config.min_ratio)
    return float(ratio)


def _check_ratio(name: str, value: Optional[float]) -> float:
    if value is None or not 0 < value <= 1:
        raise ValueError(f"🛑 `{name}` should be in (0, 1], got {value}")
    return float(value)


def raw_schedule(config: ScheduleConfig) -> np.ndarray:
    """Unclamped per-layer ratios of any variant."""
    L = config.n_layers
    layers = np.arange(1, L + 1)
    variant = config.variant
    if variant == ScheduleVariant.COSINE:
        return np.array([prd_ratio(config, l) for l in layers])
    if variant == ScheduleVariant.CONSTANT:
        return np.full(L, _check_ratio('ratio', config.ratio))
    if variant == ScheduleVariant.INTERLEAVED:
        low = _check_ratio('interleave_low', config.interleave_low)
        return np.where(layers % 2 == 1, 1.0, low)
    if variant == ScheduleVariant.STEPPED:
        levels = config.step_levels
        if levels is None or len(levels) != 3:
            raise ValueError(f"🛑 `step_levels` should hold three ratios, got {levels}")
        for level in levels:
            _check_ratio('step_levels', level)
        if np.any(np.diff(levels) > 0):
            raise ValueError(f"🛑 `step_levels` should be non-increasing, got {levels}")
        return np.concatenate([np.full(len(group), level) for group, level in zip(np.array_split(layers, 3), levels)])
    start = _check_ratio('linear_start', config.linear_start)
    end = _check_ratio('linear_end', config.linear_end)
    if end > start:
        raise ValueError(f"🛑 Linear schedule should decrease, got start {start} < end {end}")
    return np.linspace(start, end, L)


def build_schedule(config: ScheduleConfig) -> RatioSchedule:
    """
    Build the per-layer retention schedule.

    Parameters
    ----------
    config
        The :class:`ScheduleConfig`.

    Returns
    ----------
    :class:`RatioSchedule`
        Clamped ratios (if `config.clamp`) alongside the raw ones.
    """
    raw = raw_schedule(config)
    ratios = np.array([clamp_ratio(config, r) for r in raw]) if config.clamp else raw.copy()
    return RatioSchedule(ratios = ratios, raw = raw, config = config)


def mean_retention(schedule: RatioSchedule) -> float:
    """Arithmetic mean of the per-layer ratios."""
    return float(np.mean(schedule.ratios))


def search_thresholds(target_mean: float, beta: float, n_layers: int, tolerance: float = 0.005, resolution: float = 0.01) -> ThresholdSearch:
    """
    Grid-search the clamp thresholds of a cosine schedule to reach a mean retention.

    Parameters
    ----------
    target_mean
        Desired mean retention.
    beta
        Shift factor of the cosine schedule.
    n_layers
        Number of layers L.
    tolerance
        Accepted absolute deviation from `target_mean`.
        (Default: 0.005)
    resolution
        Grid step of both thresholds, which range over `resolution`..1 with `min_ratio <= max_ratio`.
        (Default: 0.01)

    Returns
    ----------
    :class:`ThresholdSearch`
        The closest configuration (ties go to the largest `max_ratio`, then the smallest `min_ratio`),
        its mean retention, and whether it lies within `tolerance`.
    """
    base = ScheduleConfig(n_layers = n_layers, variant = ScheduleVariant.COSINE, beta = beta, min_ratio = 1.0, max_ratio = 1.0)
    raw = raw_schedule(base)
    grid = np.round(np.arange(1, int(round(1 / resolution)) + 1) * resolution, 10)
    mins, maxs = np.meshgrid(grid, grid, indexing = 'ij')
    valid = mins <= maxs
    mins, maxs = mins[valid], maxs[valid]
    clamped = np.where(raw[None, :] >= maxs[:, None], 1.0, np.where(raw[None, :] <= mins[:, None], mins[:, None], raw[None, :]))
    means = clamped.mean(axis = 1)
    gap = np.round(np.abs(means - target_mean), 12)
    best = np.lexsort((mins, -maxs, gap))[0]
    config = replace(base, min_ratio = float(mins[best]), max_ratio = float(maxs[best]))
    achieved = float(means[best])
    within = bool(abs(achieved - target_mean) <= tolerance + 1e-12)
    if not within:
        logger.warn(f"⚠️ Warning: no thresholds reach mean retention {target_mean} within ±{tolerance} for beta = {beta}; best achievable is {achieved:.6f}")
    return ThresholdSearch(config = config, achieved = achieved, within_tolerance = within)


def matched_config(variant: ScheduleVariant, target_mean: float, n_layers: int, beta: float = 0.5, start: float = 0.9) -> ScheduleConfig:
    """
    Configuration of a schedule variant whose mean retention equals `target_mean`.

    Non-cosine variants keep their default thresholds, which leave the matched ratios intact;
    the cosine variant goes through :func:`search_thresholds`.

    Parameters
    ----------
    variant
        The :class:`ScheduleVariant`.
    target_mean
        Mean retention to match.
    n_layers
        Number of layers L.
    beta
        Shift factor of the cosine variant.
        (Default: 0.5)
    start
        First ratio of the stepped and linear variants.
        (Default: 0.9)

    Returns
    ----------
    :class:`ScheduleConfig`
        The matched configuration.
    """
    variant = ScheduleVariant(variant)
    L = n_layers
    if variant == ScheduleVariant.COSINE:
        return search_thresholds(target_mean, beta, L).config
    common = dict(n_layers = L, variant = variant, beta = beta)
    if variant == ScheduleVariant.CONSTANT:
        return ScheduleConfig(ratio = target_mean, **common)
    if variant == ScheduleVariant.INTERLEAVED:
        n_full = (L + 1) // 2
        n_low = L - n_full
        low = (target_mean * L - n_full) / n_low if n_low else float('nan')
        if not 0 < low <= 1:
            raise ValueError(f"🛑 An interleaved schedule over {L} layers cannot reach mean retention {target_mean}")
        return ScheduleConfig(interleave_low = low, **common)
    if target_mean > start:
        raise ValueError(f"🛑 A decaying schedule starting at {start} cannot reach mean retention {target_mean}")
    if variant == ScheduleVariant.STEPPED:
        g1, g2, g3 = (len(g) for g in np.array_split(np.arange(L), 3))
        drop = (start - target_mean) * L / (g2 + 2 * g3) if g2 + 2 * g3 else 0.0
        return ScheduleConfig(step_levels = (start, start - drop, start - 2 * drop), **common)
    return ScheduleConfig(linear_start = start, linear_end = 2 * target_mean - start, **common)
