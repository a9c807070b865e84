from dataclasses import dataclass, replace
from typing import List, Optional, Sequence
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import rel_entr
from . import logger, numerics
from .models import ModelConfig
from .pmod import PModConfig, PModModel, ReweightMode, Normalizer
from .samples import SynthTask, Sample
from .schedule import ScheduleConfig, ScheduleVariant, RatioSchedule, build_schedule, matched_config, search_thresholds, layer_groups
from .train import TrainConfig, TrainRun, AblationResult, train, results_frame
from .reports import write_table

#maximum spread of mean retention between rows of one ablation
MATCH_TOLERANCE = 0.01


@dataclass(frozen = True)
class AblationRow:
    """One configuration of an ablation: label, routing mode and schedule."""
    label: str
    pmod: PModConfig
    schedule: RatioSchedule


@dataclass
class TraceRecord:
    """
    Routing decision of one layer on one sample.

    Attributes
    ----------
    sample
        Sample index.
    layer
        1-based layer index.
    selected
        Ascending selected vision-token indices.
    normalized_weights
        Normalized weight of every vision token.
    """
    sample: int
    layer: int
    selected: np.ndarray
    normalized_weights: np.ndarray

    @property
    def n_vision(self) -> int:
        return len(self.normalized_weights)

    def to_frame(self) -> pd.DataFrame:
        mask = np.zeros(self.n_vision, dtype = np.int64)
        mask[self.selected] = 1
        return pd.DataFrame({'sample': self.sample, 'layer': self.layer, 'token_index': np.arange(self.n_vision),
                             'selected': mask, 'normalized_weight': self.normalized_weights})


def _check_matched(rows: List[AblationRow]) -> float:
    means = np.array([row.schedule.mean_retention for row in rows])
    if means.max() - means.min() > MATCH_TOLERANCE:
        detail = ', '.join(f"{row.label}={m:.4f}" for row, m in zip(rows, means))
        raise ValueError(f"🛑 Ablation rows do not share mean retention within ±{MATCH_TOLERANCE}: {detail}")
    return float(means.mean())


def _run_row(experiment: str, row: AblationRow, model_config: ModelConfig, task: SynthTask, train_config: TrainConfig, seed: int) -> AblationResult:
    """For internal use. Train one ablation row from scratch."""
    model = PModModel.init(model_config, seed, row.pmod, row.schedule.ratios)
    return train(model, replace(task, seed = seed), train_config, label = row.label, experiment = experiment, seed = seed).result


def _run_rows(experiment: str, rows: List[AblationRow], model_config: ModelConfig, task: SynthTask, train_config: TrainConfig,
              seeds: Sequence[int], n_jobs: Optional[int], folder: Optional[str], prefix: str) -> List[AblationResult]:
    """For internal use. Run every (row, seed) pair, optionally in parallel, and write the tables."""
    mean = _check_matched(rows)
    logger.info(f"🧪 {experiment}: {len(rows)} rows x {len(seeds)} seeds at mean retention {mean:.4f}")
    jobs = [(row, seed) for seed in seeds for row in rows]
    results = Parallel(n_jobs = n_jobs)(delayed(_run_row)(experiment, row, model_config, task, train_config, seed) for row, seed in jobs)
    if folder is not None:
        write_table(results_frame(results), folder, experiment, 'ablation', prefix)
        for row in rows:
            write_table(row.schedule.to_frame(), folder, f"{experiment}_schedule_{row.label.lstrip('+')}", 'schedule', prefix)
    return list(results)


def reweight_ablation_rows(schedule_config: ScheduleConfig, alpha: float = 0.2) -> List[AblationRow]:
    """
    The four reweighting configurations: vanilla MoD, +TanhNorm and +STRing at a constant ratio, then +PRD.

    Parameters
    ----------
    schedule_config
        Decaying schedule of the last row; the constant rows use its mean retention.
    alpha
        Gating factor of the normalized modes.

    Returns
    ----------
    list
        Four :class:`AblationRow`.
    """
    decaying = build_schedule(schedule_config)
    constant = build_schedule(matched_config(ScheduleVariant.CONSTANT, decaying.mean_retention, schedule_config.n_layers))
    return [AblationRow('vanilla_mod', PModConfig(ReweightMode.VANILLA_MOD, alpha), constant),
            AblationRow('+tanh_norm', PModConfig(ReweightMode.TANH_NORM_ONLY, alpha), constant),
            AblationRow('+string', PModConfig(ReweightMode.TANH_NORM_STRING, alpha), constant),
            AblationRow('+prd', PModConfig(ReweightMode.TANH_NORM_STRING, alpha), decaying)]


def run_reweight_ablation(model_config: ModelConfig, task: SynthTask, train_config: TrainConfig, schedule_config: ScheduleConfig,
                          alpha: float = 0.2, seeds: Sequence[int] = (0,), n_jobs: Optional[int] = None,
                          folder: Optional[str] = None, prefix: str = '') -> List[AblationResult]:
    """
    Compare reweighting modes at matched mean retention and equal step budget.

    Parameters
    ----------
    model_config
        Model shape.
    task
        The :class:`~pmodlab.samples.SynthTask`; its seed is replaced by each run seed.
    train_config
        Step budget and optimizer.
    schedule_config
        Schedule of the full (+PRD) row.
    alpha
        Gating factor.
        (Default: 0.2)
    seeds
        One run per seed and row.
    n_jobs
        Number of parallel runs. Default to one. `-1` means all CPUs are used.
    folder
        If given, write `reweight_ablation.csv` and the row schedules there.
    prefix
        Prefix for the output tables.

    Returns
    ----------
    list
        One :class:`~pmodlab.train.AblationResult` per (seed, row).
    """
    rows = reweight_ablation_rows(schedule_config, alpha)
    return _run_rows('reweight_ablation', rows, model_config, task, train_config, seeds, n_jobs, folder, prefix)


def normalization_ablation_rows(schedule_config: ScheduleConfig, alpha: float = 0.2) -> List[AblationRow]:
    """
    Weight normalizers compared on one decaying schedule.

    `tanh` and `softmax` use `alpha`; `shifted_softmax` uses `2 * alpha` with shift `-alpha`, which gives it the
    range of `tanh` (-alpha, alpha) without centering it at zero.

    Parameters
    ----------
    schedule_config
        Schedule shared by every row.
    alpha
        Gating factor of the `tanh` row.
        (Default: 0.2)

    Returns
    ----------
    list
        Three :class:`AblationRow` in `tanh_norm_string` mode.
    """
    schedule = build_schedule(schedule_config)
    mode = ReweightMode.TANH_NORM_STRING
    return [AblationRow(Normalizer.TANH.value, PModConfig(mode, alpha, Normalizer.TANH), schedule),
            AblationRow(Normalizer.SOFTMAX.value, PModConfig(mode, alpha, Normalizer.SOFTMAX), schedule),
            AblationRow(Normalizer.SHIFTED_SOFTMAX.value, PModConfig(mode, 2 * alpha, Normalizer.SHIFTED_SOFTMAX, softmax_shift = -alpha), schedule)]


def run_normalization_ablation(model_config: ModelConfig, task: SynthTask, train_config: TrainConfig, schedule_config: ScheduleConfig,
                               alpha: float = 0.2, seeds: Sequence[int] = (0,), n_jobs: Optional[int] = None,
                               folder: Optional[str] = None, prefix: str = '') -> List[AblationResult]:
    """
    Compare the zero-centered tanh normalization with softmax and shifted softmax at equal schedule and step budget.

    Parameters
    ----------
    model_config
        Model shape.
    task
        The :class:`~pmodlab.samples.SynthTask`.
    train_config
        Step budget and optimizer.
    schedule_config
        Schedule shared by every row.
    alpha
        Gating factor of the `tanh` row.
        (Default: 0.2)
    seeds
        One run per seed and row.
    n_jobs
        Number of parallel runs.
    folder
        If given, write `normalization_ablation.csv` and the row schedules there.
    prefix
        Prefix for the output tables.

    Returns
    ----------
    list
        One :class:`~pmodlab.train.AblationResult` per (seed, normalizer).
    """
    rows = normalization_ablation_rows(schedule_config, alpha)
    return _run_rows('normalization_ablation', rows, model_config, task, train_config, seeds, n_jobs, folder, prefix)


def schedule_ablation_rows(n_layers: int, target_mean: float = 0.54, beta: float = 0.5, alpha: float = 0.2) -> List[AblationRow]:
    """
    Five schedule variants matched to the mean retention of the searched cosine schedule.

    Returns
    ----------
    list
        :class:`AblationRow` for constant, interleaved, stepped, linear and cosine, all in `tanh_norm_string` mode.
    """
    cosine = build_schedule(search_thresholds(target_mean, beta, n_layers).config)
    pmod = PModConfig(ReweightMode.TANH_NORM_STRING, alpha)
    rows = []
    for variant in (ScheduleVariant.CONSTANT, ScheduleVariant.INTERLEAVED, ScheduleVariant.STEPPED, ScheduleVariant.LINEAR):
        rows.append(AblationRow(variant.value, pmod, build_schedule(matched_config(variant, cosine.mean_retention, n_layers, beta))))
    rows.append(AblationRow(ScheduleVariant.COSINE.value, pmod, cosine))
    return rows


def run_schedule_ablation(model_config: ModelConfig, task: SynthTask, train_config: TrainConfig, target_mean: float = 0.54,
                          beta: float = 0.5, alpha: float = 0.2, seeds: Sequence[int] = (0,), n_jobs: Optional[int] = None,
                          folder: Optional[str] = None, prefix: str = '') -> List[AblationResult]:
    """
    Compare schedule shapes at matched mean retention and equal step budget.

    Parameters
    ----------
    model_config
        Model shape.
    task
        The :class:`~pmodlab.samples.SynthTask`.
    train_config
        Step budget and optimizer.
    target_mean
        Mean retention the cosine thresholds are searched for; the other variants match the achieved value.
        (Default: 0.54)
    beta
        Shift factor of the cosine schedule.
    alpha
        Gating factor.
    seeds
        One run per seed and variant.
    n_jobs
        Number of parallel runs.
    folder
        If given, write `schedule_ablation.csv` and the variant schedules there.
    prefix
        Prefix for the output tables.

    Returns
    ----------
    list
        One :class:`~pmodlab.train.AblationResult` per (seed, variant).
    """
    rows = schedule_ablation_rows(model_config.n_layers, target_mean, beta, alpha)
    return _run_rows('schedule_ablation', rows, model_config, task, train_config, seeds, n_jobs, folder, prefix)


def train_probe_model(model_config: ModelConfig, task: SynthTask, train_config: TrainConfig, trained_ratio: float = 0.7,
                      alpha: float = 0.2, seed: int = 0) -> TrainRun:
    """Train the reference model of the layer-group probe: `tanh_norm_string` routing at a constant ratio in every layer."""
    ratios = np.full(model_config.n_layers, trained_ratio)
    model = PModModel.init(model_config, seed, PModConfig(ReweightMode.TANH_NORM_STRING, alpha), ratios)
    return train(model, replace(task, seed = seed), train_config, label = f"constant_{trained_ratio}", experiment = 'probe', seed = seed)


def probe_layer_groups(model: PModModel, samples: List[Sample], ratios: Sequence[float] = (0.7, 0.5, 0.3, 0.1)) -> pd.DataFrame:
    """
    Lower the retention ratio of one layer group at a time, without retraining, and measure the effect.

    Parameters
    ----------
    model
        A trained :class:`~pmodlab.pmod.PModModel`.
    samples
        Evaluation samples.
    ratios
        Inference-time ratios applied to the probed group.

    Returns
    ----------
    :class:`~pandas.DataFrame`
        One row per (group, ratio) with the answer accuracy and the mean KL divergence of the answer distribution
        from the one of the unmodified model.
    """
    reference = [numerics.softmax_rows(model.forward(s.seq)[0][s.answer_position]) for s in samples]
    rows = []
    for group, layers in layer_groups(model.config.n_layers).items():
        for ratio in ratios:
            new_ratios = model.ratios.copy()
            new_ratios[layers] = ratio
            probed = model.with_ratios(new_ratios)
            kl, correct = [], 0
            for sample, p_ref in zip(samples, reference):
                logits = probed.forward(sample.seq)[0][sample.answer_position]
                kl.append(float(np.sum(rel_entr(p_ref, numerics.softmax_rows(logits)))))
                correct += int(np.argmax(logits) == sample.answer)
            rows.append({'group': group, 'layers': f"{layers[0] + 1}-{layers[-1] + 1}" if len(layers) else '', 'ratio': float(ratio),
                         'accuracy': correct / len(samples), 'kl_divergence': float(np.mean(kl))})
        logger.info(f"🔬 Probed {group} layers")
    return pd.DataFrame(rows)


def emit_trace(model: PModModel, samples: List[Sample]) -> List[TraceRecord]:
    """
    Per-layer token selections of every sample.

    Parameters
    ----------
    model
        A :class:`~pmodlab.pmod.PModModel`.
    samples
        The samples to trace.

    Returns
    ----------
    list
        One :class:`TraceRecord` per (sample, routed layer).
    """
    records = []
    for i, sample in enumerate(samples):
        for layer, state in enumerate(model.router_states(sample.seq)):
            if state is not None:
                records.append(TraceRecord(sample = i, layer = layer + 1, selected = state.selected, normalized_weights = state.normalized_weights))
    return records


def trace_frame(records: List[TraceRecord]) -> pd.DataFrame:
    """Flatten trace records into `trace` rows (one per vision token)."""
    if not records:
        return pd.DataFrame(columns = ['sample', 'layer', 'token_index', 'selected', 'normalized_weight'])
    return pd.concat([r.to_frame() for r in records], ignore_index = True)


def overflow_demo(n_layers: int = 32, alpha: float = 0.2) -> pd.DataFrame:
    """
    Repeatedly scale a token by its per-layer reweighting factor in half and double precision.

    Cases are the unnormalized weight `w = 1` (factor 2), TanhNorm with gating factor 1 in its
    worst case (`tanh(w) -> 1`, factor 2), and TanhNorm with `alpha` (factor `1 + alpha`).

    Returns
    ----------
    :class:`~pandas.DataFrame`
        Columns of the `overflow` schema; `stable` where no layer overflows.
    """
    cases = [('no_normalization', 2.0), ('tanh_norm_alpha_1', 1.0 + 1.0), (f"tanh_norm_alpha_{alpha:g}", 1.0 + alpha)]
    rows = []
    for case, factor in cases:
        half = numerics.first_overflow([factor] * n_layers, dtype = np.float16)
        double = numerics.first_overflow([factor] * n_layers, dtype = np.float64)
        rows.append({'case': case, 'factor': factor, 'first_overflow_layer_fp16': 'stable' if half is None else str(half),
                     'first_overflow_layer_fp64': 'stable' if double is None else str(double)})
    return pd.DataFrame(rows)
