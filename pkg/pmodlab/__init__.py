from . import numerics, models, pmod, schedule, costmodel, samples, harness, logger, reports
from .models import Model, ModelConfig, TokenSequence, KvCache, CheckpointError
from .pmod import PModModel, PModConfig, ReweightMode, Normalizer, TanhNormConfig, RouterState
from .schedule import ScheduleConfig, ScheduleVariant, RatioSchedule, build_schedule, search_thresholds
from .costmodel import WorkloadSpec, CostReport, model_cost, kv_ratio
from .samples import SynthTask, gen_task
from .train import TrainConfig, AblationResult, DivergenceError, train, evaluate
from .harness import run_reweight_ablation, run_normalization_ablation, run_schedule_ablation, probe_layer_groups, emit_trace
from .config import RunConfig

__version__ = "0.1.0"
