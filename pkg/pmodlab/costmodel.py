from dataclasses import dataclass
from typing import Optional, Sequence, Union
import numpy as np
import pandas as pd
from . import logger
from .models import ModelConfig
from .pmod import PModConfig, ReweightMode, n_selected
from .schedule import RatioSchedule
from .reports import write_tables

#elementwise FLOPs per element (see the formats page of the docs)
RMSNORM_FLOPS = 4
ROTARY_FLOPS = 3
SOFTMAX_FLOPS = 5
GATE_FLOPS = 5
RESIDUAL_FLOPS = 1
NORMALIZE_FLOPS = 4


@dataclass(frozen = True)
class WorkloadSpec:
    """
    One inference request: an image prefix, a text prompt and a number of generated tokens.

    Parameters
    ----------
    n_vision
        Number of vision tokens.
    n_text_prompt
        Number of prompt text tokens after the vision tokens.
    n_decode
        Number of tokens decoded one by one through the KV cache.
    bytes_per_element
        Width of one cached key or value element.
        (Default: 2)
    kv_bytes_per_token_per_layer
        Override of the per-entry cache size; default to `2 * d_model * bytes_per_element`.
    """
    n_vision: int = 2880
    n_text_prompt: int = 64
    n_decode: int = 16
    bytes_per_element: float = 2
    kv_bytes_per_token_per_layer: Optional[float] = None

    def __post_init__(self):
        for name in ('n_vision', 'n_text_prompt', 'n_decode'):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"🛑 `{name}` should be non-negative, got {getattr(self, name)}")
        if self.bytes_per_element <= 0:
            raise ValueError(f"🛑 `bytes_per_element` should be positive, got {self.bytes_per_element}")

    def entry_bytes(self, config: ModelConfig) -> float:
        if self.kv_bytes_per_token_per_layer is not None:
            return float(self.kv_bytes_per_token_per_layer)
        return 2.0 * config.d_model * self.bytes_per_element


def causal_pairs(n: int) -> int:
    """Visible (query, key) pairs of a causal pass over `n` tokens."""
    return n * (n + 1) // 2


def layer_macs(config: ModelConfig, tokens: int, kv_visible: int) -> int:
    """
    Multiply-accumulates of one transformer layer.

    Parameters
    ----------
    config
        Model shape.
    tokens
        Number of tokens processed by the layer.
    kv_visible
        Total number of visible (query, key) pairs over all processed tokens.

    Returns
    ----------
    int
        `tokens * (4 d^2 + 3 d d_ff) + 2 kv_visible d`.
    """
    d, dff = config.d_model, config.d_ff
    return tokens * (4 * d * d + 3 * d * dff) + 2 * kv_visible * d


def layer_flops(config: ModelConfig, tokens: int, kv_visible: int) -> int:
    """
    FLOPs of one transformer layer: two per multiply-accumulate plus the elementwise work.

    Parameters
    ----------
    config
        Model shape.
    tokens
        Number of tokens processed by the layer.
    kv_visible
        Total number of visible (query, key) pairs over all processed tokens.

    Returns
    ----------
    int
        Layer FLOPs.
    """
    d, dff = config.d_model, config.d_ff
    elementwise = tokens * (2 * RMSNORM_FLOPS * d + 2 * ROTARY_FLOPS * d + GATE_FLOPS * dff + 2 * RESIDUAL_FLOPS * d)
    elementwise += SOFTMAX_FLOPS * config.n_heads * kv_visible
    return 2 * layer_macs(config, tokens, kv_visible) + elementwise


def router_macs(config: ModelConfig, n_vision: int) -> int:
    """Multiply-accumulates of the weight predictor over `n_vision` tokens."""
    return n_vision * config.d_model


def router_flops(config: ModelConfig, n_vision: int, n_reweighted: int) -> int:
    """Prediction, normalization and reweighting of one routed layer."""
    return 2 * router_macs(config, n_vision) + NORMALIZE_FLOPS * n_vision + 2 * n_reweighted * config.d_model


def head_flops(config: ModelConfig, rows: int) -> int:
    """Final rmsnorm and LM-head projection of `rows` positions."""
    return rows * (2 * config.d_model * config.vocab_size + RMSNORM_FLOPS * config.d_model)


@dataclass
class CostReport:
    """
    Analytic FLOPs and KV-cache accounting of one schedule against the dense baseline.

    Attributes
    ----------
    ratios
        Retention ratio of every layer.
    processed_tokens
        Prefill tokens processed by every layer.
    flops
        Per-layer FLOPs (prefill, decode and routing).
    baseline_flops
        Per-layer FLOPs of the dense model.
    kv_entries
        Cache entries of every layer after decoding.
    baseline_kv_entries
        Cache entries of every dense layer.
    head_flops
        LM-head FLOPs (shared by both configurations).
    n_vision
        Vision tokens of the workload.
    entry_bytes
        Bytes per cached entry.
    """
    ratios: np.ndarray
    processed_tokens: np.ndarray
    flops: np.ndarray
    baseline_flops: np.ndarray
    kv_entries: np.ndarray
    baseline_kv_entries: np.ndarray
    vision_kv_entries: np.ndarray
    head_flops: int
    n_vision: int
    entry_bytes: float

    @property
    def total_flops(self) -> int:
        return int(self.flops.sum()) + self.head_flops

    @property
    def baseline_total_flops(self) -> int:
        return int(self.baseline_flops.sum()) + self.head_flops

    @property
    def total_kv_bytes(self) -> float:
        return float(self.kv_entries.sum()) * self.entry_bytes

    @property
    def baseline_kv_bytes(self) -> float:
        return float(self.baseline_kv_entries.sum()) * self.entry_bytes

    @property
    def flops_ratio(self) -> float:
        return self.total_flops / self.baseline_total_flops

    @property
    def kv_ratio(self) -> float:
        """Cache size against the dense model, all tokens included."""
        return float(self.kv_entries.sum() / self.baseline_kv_entries.sum())

    @property
    def vision_kv_ratio(self) -> float:
        """Cached vision entries against `n_layers * n_vision`."""
        if self.n_vision == 0:
            return 1.0
        return float(self.vision_kv_entries.sum() / (len(self.ratios) * self.n_vision))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'layer': np.arange(1, len(self.ratios) + 1), 'ratio': self.ratios, 'processed_tokens': self.processed_tokens,
                             'flops': self.flops, 'baseline_flops': self.baseline_flops, 'kv_entries': self.kv_entries,
                             'baseline_kv_entries': self.baseline_kv_entries})

    def summary(self) -> pd.DataFrame:
        metrics = {'total_flops': self.total_flops, 'baseline_total_flops': self.baseline_total_flops, 'head_flops': self.head_flops,
                   'flops_ratio': self.flops_ratio, 'total_kv_bytes': self.total_kv_bytes, 'baseline_kv_bytes': self.baseline_kv_bytes,
                   'kv_ratio': self.kv_ratio, 'vision_kv_ratio': self.vision_kv_ratio, 'mean_retention': float(np.mean(self.ratios))}
        return pd.DataFrame({'metric': list(metrics), 'value': list(metrics.values())})

    def to_table(self, folder: str, prefix: str = '', xlsx: bool = False) -> list:
        """
        Write out the per-layer and summary tables.

        Parameters
        ----------
        folder
            Path to a folder which stores the output table/tables.
        prefix
            Prefix for the output table/tables. Default to no prefix used.
        xlsx
            Whether to merge output tables into a single Excel (.xlsx).
            (Default: `False`)

        Returns
        ----------
        list
            Paths of the written files.
        """
        return write_tables({'cost': (self.to_frame(), 'cost'), 'cost_summary': (self.summary(), 'cost_summary')}, folder, prefix, xlsx)

    def __repr__(self):
        return (f"CostReport over {len(self.ratios)} layers: {self.total_flops / 1e12:.4f} TFLOPs "
                f"(baseline {self.baseline_total_flops / 1e12:.4f}, ratio {self.flops_ratio:.4f}), "
                f"KV ratio {self.kv_ratio:.4f} (vision only {self.vision_kv_ratio:.4f})")


def model_cost(config: ModelConfig, schedule: Union[RatioSchedule, Sequence[float]], workload: WorkloadSpec, pmod: Optional[PModConfig] = None) -> CostReport:
    """
    Account prefill and decode of a workload under a retention schedule.

    Layers at ratio 1 run dense without a router unless `pmod.route_full_layers`. In routed layers the
    `k(n_vision, ratio)` selected vision tokens and every text token are processed and cached.

    Parameters
    ----------
    config
        Model shape.
    schedule
        A :class:`~pmodlab.schedule.RatioSchedule` of length `n_layers`, or the bare per-layer ratios.
    workload
        The :class:`WorkloadSpec`.
    pmod
        Routing configuration; decides which tokens are reweighted.
        (Default: `tanh_norm_string` mode)

    Returns
    ----------
    :class:`CostReport`
        Per-layer and total costs.
    """
    ratios = np.asarray(getattr(schedule, 'ratios', schedule), dtype = np.float64)
    if len(ratios) != config.n_layers:
        raise ValueError(f"🛑 Schedule has {len(ratios)} layers, model has {config.n_layers}")
    pmod = pmod or PModConfig()
    n_v, n_t, D = workload.n_vision, workload.n_text_prompt, workload.n_decode
    n = n_v + n_t
    rows = {key: [] for key in ('processed', 'flops', 'baseline', 'kv', 'kv_base', 'kv_vision')}

    def phase_flops(prefill_tokens: int) -> int:
        prefill = layer_flops(config, prefill_tokens, causal_pairs(prefill_tokens))
        decode = layer_flops(config, D, D * prefill_tokens + causal_pairs(D))
        return prefill + decode

    for ratio in ratios:
        routed = n_v > 0 and (ratio < 1.0 or pmod.route_full_layers)
        k = n_selected(n_v, ratio) if routed else n_v
        processed = k + n_t
        flops = phase_flops(processed)
        if routed:
            reweighted = n_v if pmod.mode == ReweightMode.TANH_NORM_STRING else k
            flops += router_flops(config, n_v, reweighted)
        rows['processed'].append(processed)
        rows['flops'].append(flops)
        rows['baseline'].append(phase_flops(n))
        rows['kv'].append(processed + D)
        rows['kv_base'].append(n + D)
        rows['kv_vision'].append(k)
    report = CostReport(ratios = ratios, processed_tokens = np.array(rows['processed'], dtype = np.int64),
                        flops = np.array(rows['flops'], dtype = np.int64), baseline_flops = np.array(rows['baseline'], dtype = np.int64),
                        kv_entries = np.array(rows['kv'], dtype = np.int64), baseline_kv_entries = np.array(rows['kv_base'], dtype = np.int64),
                        vision_kv_entries = np.array(rows['kv_vision'], dtype = np.int64), head_flops = head_flops(config, 1 + D),
                        n_vision = n_v, entry_bytes = workload.entry_bytes(config))
    logger.info(f"🧮 {report}")
    return report


def kv_ratio(schedule: RatioSchedule, n_vision: int, n_text: int = 0) -> float:
    """
    Cache size of a schedule against the dense model.

    Parameters
    ----------
    schedule
        A :class:`~pmodlab.schedule.RatioSchedule`.
    n_vision
        Vision tokens per sample.
    n_text
        Text tokens per sample. With the default 0 this is the vision-only ratio.

    Returns
    ----------
    float
        `sum_l (k(n_vision, R_l) + n_text) / (L (n_vision + n_text))`.
    """
    if n_vision < 1:
        raise ValueError(f"🛑 `n_vision` should be at least 1, got {n_vision}")
    kept = sum(n_vision if r >= 1.0 else n_selected(n_vision, r) for r in schedule.ratios)
    return (kept + len(schedule) * n_text) / (len(schedule) * (n_vision + n_text))
