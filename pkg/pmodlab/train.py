from dataclasses import dataclass, asdict
from typing import List, Optional
import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score
from . import logger
from .models import Model, cross_entropy
from .pmod import PModModel
from .samples import SynthTask, Sample, gen_task
from .schedule import layer_groups
from .costmodel import WorkloadSpec, model_cost


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"🛑 Training diverged at step {step} (loss = {loss})")


@dataclass(frozen = True)
class TrainConfig:
    """
    Optimizer settings.

    Parameters
    ----------
    steps
        Number of optimizer steps. 0 leaves the parameters untouched.
    lr
        Learning rate.
    momentum
        Heavy-ball momentum. 0 gives plain SGD.
        (Default: 0.9)
    batch_size
        Fresh task samples per step.
    clip_norm
        Global gradient-norm clip; `None` disables clipping.
        (Default: 1.0)
    eval_samples
        Held-out samples used by :func:`evaluate`.
    log_every
        Log the loss every this many steps.
    """
    steps: int = 400
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    clip_norm: Optional[float] = 1.0
    eval_samples: int = 128
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"🛑 `steps` should be non-negative, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"🛑 `lr` should be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"🛑 `momentum` should be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.eval_samples < 1:
            raise ValueError("🛑 `batch_size` and `eval_samples` should be at least 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"🛑 `clip_norm` should be positive, got {self.clip_norm}")


@dataclass
class AblationResult:
    """
    Outcome of one training run.

    Attributes
    ----------
    experiment
        Name of the experiment the run belongs to.
    label
        Row label (reweighting mode or schedule variant).
    seed
        Seed of the run.
    accuracy
        Held-out answer accuracy.
    router_auc
        ROC AUC separating signal from noise tokens by their deep-layer raw weights; NaN without routing.
    mean_retention
        Mean per-layer retention ratio.
    flops_ratio
        Analytic FLOPs against the dense model on the task workload.
    final_loss
        Held-out mean cross entropy.
    """
    experiment: str
    label: str
    seed: int
    accuracy: float
    router_auc: float
    mean_retention: float
    flops_ratio: float
    final_loss: float

    def __repr__(self):
        return (f"{self.experiment}/{self.label} (seed {self.seed}): accuracy {self.accuracy:.4f}, router AUC {self.router_auc:.4f}, "
                f"mean retention {self.mean_retention:.4f}, FLOPs ratio {self.flops_ratio:.4f}")


@dataclass
class TrainRun:
    """A trained model with its evaluation row and per-step loss curve."""
    model: Model
    result: AblationResult
    loss_curve: pd.DataFrame


def results_frame(results: List[AblationResult]) -> pd.DataFrame:
    """Stack results into one table (columns of the `ablation` schema)."""
    return pd.DataFrame([asdict(r) for r in results])


def router_auc(model: Model, samples: List[Sample]) -> float:
    """
    How well deep-layer router weights separate signal from noise tokens.

    Parameters
    ----------
    model
        A trained model.
    samples
        Evaluation samples with their signal masks.

    Returns
    ----------
    float
        ROC AUC of the per-token raw weight, averaged over the routed layers of the deep group
        (over every routed layer if no deep layer routes). NaN for models without routing.
    """
    if not isinstance(model, PModModel) or model.routed_layers.size == 0:
        return float('nan')
    deep = np.intersect1d(layer_groups(model.config.n_layers)['deep'], model.routed_layers)
    layers = deep if deep.size else model.routed_layers
    scores, labels = [], []
    for sample in samples:
        states = model.router_states(sample.seq)
        scores.append(np.mean([states[l].raw_weights for l in layers], axis = 0))
        labels.append(sample.signal_mask)
    labels = np.concatenate(labels)
    if labels.all() or not labels.any():
        return float('nan')
    return float(roc_auc_score(labels, np.concatenate(scores)))


def evaluate(model: Model, samples: List[Sample]) -> tuple:
    """
    Held-out accuracy, router AUC and mean loss.

    Parameters
    ----------
    model
        The model to evaluate.
    samples
        Evaluation samples.

    Returns
    ----------
    tuple
        Accuracy, router AUC (see :func:`router_auc`) and mean cross entropy at the answer positions.
    """
    correct, losses = 0, []
    for sample in samples:
        logits, _ = model.forward(sample.seq)
        losses.append(cross_entropy(logits, [sample.answer_position], [sample.answer])[0])
        correct += int(np.argmax(logits[sample.answer_position]) == sample.answer)
    return correct / len(samples), router_auc(model, samples), float(np.mean(losses))


def _clip(grads: dict, clip_norm: Optional[float]) -> dict:
    if clip_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    return {name: g * (clip_norm / norm) for name, g in grads.items()}


def train(model: Model, task: SynthTask, config: TrainConfig, label: str = 'train', experiment: str = 'train', seed: int = 0) -> TrainRun:
    """
    Train a model (dense or routed) on the synthetic task with momentum SGD.

    Every step draws `batch_size` fresh samples; the held-out set comes from a separate stream.

    Parameters
    ----------
    model
        A :class:`~pmodlab.models.Model` or :class:`~pmodlab.pmod.PModModel`; not modified.
    task
        The :class:`~pmodlab.samples.SynthTask`.
    config
        The :class:`TrainConfig`.
    label
        Row label of the returned result.
    experiment
        Experiment name of the returned result.
    seed
        Seed recorded in the result.

    Returns
    ----------
    :class:`TrainRun`
        The trained model, its :class:`AblationResult` and the loss curve.
    """
    if task.n_values > model.config.vocab_size:
        raise ValueError(f"🛑 Task has {task.n_values} answer classes but the model vocabulary only {model.config.vocab_size}")
    d = model.config.d_model
    logger.info(f"🏋️ Training {label} ({model.config.n_layers} layers, mean retention {_mean_retention(model):.4f}) for {config.steps} steps")
    velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
    curve = []
    for step in range(1, config.steps + 1):
        batch = gen_task(task, d, config.batch_size, stream = step + 1)
        grads = {name: np.zeros_like(value) for name, value in model.params.items()}
        total = 0.0
        for sample in batch:
            loss, dlogits, _, acts = model.loss(sample.seq, [sample.answer_position], [sample.answer])
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            for name, g in model.backward(acts, dlogits).items():
                grads[name] += g
            total += loss
        mean_loss = total / len(batch)
        grads = _clip({name: g / len(batch) for name, g in grads.items()}, config.clip_norm)
        params = {}
        for name, value in model.params.items():
            velocity[name] = config.momentum * velocity[name] + grads[name]
            params[name] = value - config.lr * velocity[name]
        model = model.with_params(params)
        curve.append((step, mean_loss))
        if step % config.log_every == 0 or step == config.steps:
            logger.info(f"🔁 {label}: step {step}/{config.steps}, loss {mean_loss:.4f}")
    accuracy, auc, final_loss = evaluate(model, gen_task(task, d, config.eval_samples, stream = 0))
    if not np.isfinite(final_loss):
        raise DivergenceError(config.steps, final_loss)
    workload = WorkloadSpec(n_vision = task.n_vision, n_text_prompt = 1, n_decode = 0)
    ratios = model.ratios if isinstance(model, PModModel) else np.ones(model.config.n_layers)
    pmod = model.pmod if isinstance(model, PModModel) else None
    flops_ratio = model_cost(model.config, ratios, workload, pmod).flops_ratio
    result = AblationResult(experiment = experiment, label = label, seed = seed, accuracy = accuracy, router_auc = auc,
                            mean_retention = _mean_retention(model), flops_ratio = flops_ratio, final_loss = final_loss)
    logger.info(f"✅ {result}")
    return TrainRun(model = model, result = result, loss_curve = pd.DataFrame(curve, columns = ['step', 'loss']))


def _mean_retention(model: Model) -> float:
    return float(np.mean(model.ratios)) if isinstance(model, PModModel) else 1.0
