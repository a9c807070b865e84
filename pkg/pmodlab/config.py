import os
import json
from dataclasses import dataclass, fields, asdict, replace
from typing import Optional, Sequence
from . import logger
from .models import ModelConfig
from .pmod import PModConfig
from .schedule import ScheduleConfig, ScheduleVariant, RatioSchedule, build_schedule, search_thresholds
from .costmodel import WorkloadSpec
from .samples import SynthTask
from .train import TrainConfig

_presets_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "presets")


def _get_preset_data(filename: str) -> str:
    """Get the full path to a preset included in the package."""
    return os.path.join(_presets_path, filename)


def get_all_presets() -> list:
    """
    Get the names of the presets shipped with the package.

    Returns
    ----------
    list
        Sorted preset names (`7b`, `toy`).
    """
    return sorted(f[:-len('.json')] for f in os.listdir(_presets_path) if f.endswith('.json'))


@dataclass(frozen = True)
class ProbeConfig:
    """
    Layer-group probe settings.

    Parameters
    ----------
    trained_ratio
        Constant retention ratio of every layer of the probed model during training.
        (Default: 0.7)
    ratios
        Inference-time ratios tried on each group.
        (Default: 0.7, 0.5, 0.3, 0.1)
    n_samples
        Evaluation samples per (group, ratio).
    """
    trained_ratio: float = 0.7
    ratios: tuple = (0.7, 0.5, 0.3, 0.1)
    n_samples: int = 64

    def __post_init__(self):
        object.__setattr__(self, 'ratios', tuple(float(r) for r in self.ratios))
        for r in (self.trained_ratio,) + self.ratios:
            if not 0 < r <= 1:
                raise ValueError(f"🛑 Probe ratios should be in (0, 1], got {r}")
        if self.n_samples < 1:
            raise ValueError(f"🛑 `n_samples` should be at least 1, got {self.n_samples}")


@dataclass(frozen = True)
class AblationConfig:
    """
    Ablation settings.

    Parameters
    ----------
    target_mean
        Mean retention of the schedule ablation (searched for the cosine variant).
        (Default: 0.54)
    repeats
        Runs per row, with seeds `seed`, `seed + 1`, ...
        (Default: 1)
    """
    target_mean: float = 0.54
    repeats: int = 1

    def __post_init__(self):
        if not 0 < self.target_mean <= 1:
            raise ValueError(f"🛑 `target_mean` should be in (0, 1], got {self.target_mean}")
        if self.repeats < 1:
            raise ValueError(f"🛑 `repeats` should be at least 1, got {self.repeats}")


SECTIONS = {'model': ModelConfig, 'schedule': ScheduleConfig, 'pmod': PModConfig, 'workload': WorkloadSpec,
            'task': SynthTask, 'train': TrainConfig, 'probe': ProbeConfig, 'ablation': AblationConfig}
TOP_LEVEL = ('seed', 'output_dir')
#schedule settings tuned for the cosine variant
COSINE_KEYS = ('target_mean', 'min_ratio', 'max_ratio')


def _section(name: str, values: dict, extra: Sequence[str] = (), exclude: Sequence[str] = ()) -> dict:
    """For internal use. Reject keys that are not fields of the section's dataclass."""
    if not isinstance(values, dict):
        raise ValueError(f"🛑 Section '{name}' should be a mapping, got {type(values).__name__}")
    allowed = {f.name for f in fields(SECTIONS[name])} - set(exclude) | set(extra)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise KeyError(f"🛑 Unknown key(s) in section '{name}': {', '.join(unknown)}. Allowed keys are: {', '.join(sorted(allowed))}")
    return dict(values)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: dict, overrides: Sequence[str]) -> dict:
    """
    Apply `section.key=value` (or `seed=value`) overrides to a raw configuration document.

    Values are parsed as JSON, falling back to a plain string (so `schedule.variant=linear` works unquoted).
    Switching `schedule.variant` away from `cosine` drops the cosine settings (`target_mean`, `min_ratio`, `max_ratio`)
    inherited from the document unless they are overridden too; `schedule.target_mean=null` drops the search explicitly.
    """
    document = json.loads(json.dumps(document))
    touched = set()
    for item in overrides:
        if '=' not in item:
            raise ValueError(f"🛑 Override '{item}' should look like section.key=value")
        path, raw = item.split('=', 1)
        parts = path.strip().split('.')
        value = _parse_value(raw.strip())
        if len(parts) == 1 and parts[0] in TOP_LEVEL:
            document[parts[0]] = value
        elif len(parts) == 2 and parts[0] in SECTIONS:
            document.setdefault(parts[0], {})[parts[1]] = value
            touched.add(path.strip())
        else:
            raise KeyError(f"🛑 Unknown configuration key '{path}'. Sections are: {', '.join(SECTIONS)}")
    schedule = document.get('schedule', {})
    if 'schedule.variant' in touched and schedule.get('variant') != ScheduleVariant.COSINE.value:
        for key in COSINE_KEYS:
            if f"schedule.{key}" not in touched and schedule.pop(key, None) is not None:
                logger.info(f"✂️ Dropping `schedule.{key}` of the configuration for the `{schedule['variant']}` variant")
    return document


@dataclass(frozen = True)
class RunConfig:
    """
    Complete configuration of a command-line run.

    Attributes
    ----------
    model
        :class:`~pmodlab.models.ModelConfig`.
    schedule
        :class:`~pmodlab.schedule.ScheduleConfig`; thresholds already searched if `target_mean` was given.
    pmod
        :class:`~pmodlab.pmod.PModConfig`.
    workload
        :class:`~pmodlab.costmodel.WorkloadSpec`.
    task
        :class:`~pmodlab.samples.SynthTask`, seeded with `seed`.
    train
        :class:`~pmodlab.train.TrainConfig`.
    probe
        :class:`ProbeConfig`.
    ablation
        :class:`AblationConfig`.
    seed
        The single source of randomness.
    output_dir
        Folder receiving the artifacts.
    target_mean
        Mean retention the schedule thresholds were searched for, if any.
    """
    model: ModelConfig
    schedule: ScheduleConfig
    pmod: PModConfig
    workload: WorkloadSpec
    task: SynthTask
    train: TrainConfig
    probe: ProbeConfig
    ablation: AblationConfig
    seed: int = 0
    output_dir: str = 'pmodlab_output'
    target_mean: Optional[float] = None

    @classmethod
    def from_dict(cls, document: dict) -> 'RunConfig':
        """
        Validate a configuration document.

        Parameters
        ----------
        document
            Parsed JSON with the sections of :data:`SECTIONS` plus `seed` and `output_dir`.

        Returns
        ----------
        :class:`RunConfig`
            The validated configuration.
        """
        unknown = sorted(set(document) - set(SECTIONS) - set(TOP_LEVEL))
        if unknown:
            raise KeyError(f"🛑 Unknown configuration key(s): {', '.join(unknown)}")
        if 'model' not in document:
            raise KeyError("🛑 Missing section 'model'")
        seed = int(document.get('seed', 0))
        if seed < 0:
            raise ValueError(f"🛑 `seed` should be non-negative, got {seed}")
        model = ModelConfig(**_section('model', document['model']))
        sched = _section('schedule', document.get('schedule', {}), extra = ('target_mean',))
        target_mean = sched.pop('target_mean', None)
        sched.setdefault('n_layers', model.n_layers)
        schedule = ScheduleConfig(**sched)
        if schedule.n_layers != model.n_layers:
            raise ValueError(f"🛑 Schedule has {schedule.n_layers} layers, model has {model.n_layers}")
        if target_mean is not None:
            if schedule.variant != ScheduleVariant.COSINE:
                raise ValueError("🛑 `schedule.target_mean` is only supported for the cosine variant")
            schedule = search_thresholds(float(target_mean), schedule.beta, schedule.n_layers).config
        task = SynthTask(**_section('task', document.get('task', {}), exclude = ('seed',)), seed = seed)
        return cls(model = model, schedule = schedule, pmod = PModConfig(**_section('pmod', document.get('pmod', {}))),
                   workload = WorkloadSpec(**_section('workload', document.get('workload', {}))), task = task,
                   train = TrainConfig(**_section('train', document.get('train', {}))),
                   probe = ProbeConfig(**_section('probe', document.get('probe', {}))),
                   ablation = AblationConfig(**_section('ablation', document.get('ablation', {}))),
                   seed = seed, output_dir = str(document.get('output_dir', 'pmodlab_output')),
                   target_mean = None if target_mean is None else float(target_mean))

    @classmethod
    def load(cls, source: str = 'toy', overrides: Sequence[str] = ()) -> 'RunConfig':
        """
        Load a configuration file or a shipped preset, then apply overrides.

        Parameters
        ----------
        source
            Path to a JSON configuration file, or a preset name (see :func:`get_all_presets`).
            (Default: `toy`)
        overrides
            `section.key=value` strings applied before validation.

        Returns
        ----------
        :class:`RunConfig`
            The validated configuration.
        """
        if os.path.isfile(source):
            path = source
        elif source in get_all_presets():
            path = _get_preset_data(f"{source}.json")
        else:
            raise FileNotFoundError(f"🛑 No such configuration file or preset: '{source}'. Available presets are: {', '.join(get_all_presets())}")
        with open(path, 'rt', encoding = 'utf-8') as fh:
            try:
                document = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValueError(f"🛑 Invalid configuration file {path}: {e}")
        return cls.from_dict(apply_overrides(document, overrides))

    def build_schedule(self) -> RatioSchedule:
        return build_schedule(self.schedule)

    def with_seed(self, seed: int) -> 'RunConfig':
        """Same configuration with another top-level seed (the task seed follows)."""
        return replace(self, seed = seed, task = replace(self.task, seed = seed))

    def to_dict(self) -> dict:
        """The resolved configuration as a JSON-compatible document."""
        sched = self.schedule.to_dict()
        if self.target_mean is not None:
            sched['target_mean'] = self.target_mean
        task = asdict(self.task)
        task.pop('seed')
        probe = asdict(self.probe)
        probe['ratios'] = list(self.probe.ratios)
        return {'seed': self.seed, 'output_dir': self.output_dir, 'model': asdict(self.model), 'schedule': sched,
                'pmod': self.pmod.to_dict(), 'workload': asdict(self.workload), 'task': task, 'train': asdict(self.train),
                'probe': probe, 'ablation': asdict(self.ablation)}
