from dataclasses import dataclass
from typing import List
import numpy as np
from . import numerics
from .models import TokenSequence, Modality


@dataclass(frozen = True)
class SynthTask:
    """
    Key-value retrieval task over a vision prefix.

    A few vision tokens (the signal tokens) carry a key code, a value code and a salience code; the rest are noise.
    The single text token asks for one planted key, and the answer is the value stored next to it.

    Parameters
    ----------
    n_vision
        Vision tokens per sample.
    n_signal
        Signal tokens per sample, at most `n_vision` and `n_keys`.
    n_keys
        Number of distinct keys.
    n_values
        Number of distinct values, which are also the answer classes.
    noise_std
        Standard deviation of the noise, drawn in the subspace orthogonal to every code.
    salience
        Magnitude of the salience code carried by signal tokens.
    code_scale
        Norm of every code vector, relative to `sqrt(d_model)`.
    seed
        Random seed of the codebook and of every sample stream.
    """
    n_vision: int = 64
    n_signal: int = 8
    n_keys: int = 16
    n_values: int = 16
    noise_std: float = 1.0
    salience: float = 1.0
    code_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_signal <= self.n_vision:
            raise ValueError(f"🛑 `n_signal` should be in 1..n_vision ({self.n_vision}), got {self.n_signal}")
        if self.n_signal > self.n_keys:
            raise ValueError(f"🛑 `n_signal` ({self.n_signal}) cannot exceed `n_keys` ({self.n_keys}); keys are planted once per sample")
        if self.n_values < 2:
            raise ValueError(f"🛑 `n_values` should be at least 2, got {self.n_values}")
        if self.noise_std < 0:
            raise ValueError(f"🛑 `noise_std` should be non-negative, got {self.noise_std}")

    @property
    def n_codes(self) -> int:
        return self.n_keys + self.n_values + 2


@dataclass(frozen = True)
class Codebook:
    """Orthogonal code vectors of a :class:`SynthTask` (rows scaled to `code_scale * sqrt(d)`)."""
    keys: np.ndarray
    values: np.ndarray
    salience: np.ndarray
    query: np.ndarray
    complement: np.ndarray


@dataclass(frozen = True)
class Sample:
    """
    One task instance.

    Attributes
    ----------
    seq
        Vision prefix followed by the query text token.
    answer
        Answer class (value id) supervised at the last position.
    signal_mask
        Which vision tokens are signal tokens.
    query_key
        The key asked for.
    """
    seq: TokenSequence
    answer: int
    signal_mask: np.ndarray
    query_key: int

    @property
    def answer_position(self) -> int:
        return len(self.seq) - 1


def make_codebook(task: SynthTask, d_model: int) -> Codebook:
    """
    Draw the orthonormal codebook of a task, scaled to the model width.

    Parameters
    ----------
    task
        The :class:`SynthTask`.
    d_model
        Embedding dimension; should be at least `n_keys + n_values + 2`.

    Returns
    ----------
    :class:`Codebook`
        Codes, plus an orthonormal basis of their complement (used to place noise).
    """
    if d_model < task.n_codes:
        raise ValueError(f"🛑 `d_model` ({d_model}) should be at least n_keys + n_values + 2 = {task.n_codes}")
    rng = numerics.make_rng([task.seed, 0])
    basis, _ = np.linalg.qr(rng.normal(size = (d_model, d_model)))
    codes = basis[:, :task.n_codes].T * task.code_scale * np.sqrt(d_model)
    k, v = task.n_keys, task.n_values
    return Codebook(keys = codes[:k], values = codes[k:k + v], salience = codes[k + v], query = codes[k + v + 1],
                    complement = basis[:, task.n_codes:])


def gen_task(task: SynthTask, d_model: int, n_samples: int, stream: int = 0) -> List[Sample]:
    """
    Generate a batch of task samples.

    Parameters
    ----------
    task
        The :class:`SynthTask`.
    d_model
        Embedding dimension.
    n_samples
        Number of samples.
    stream
        Index of the sample stream; different streams give independent batches over the same codebook.
        (Default: 0)

    Returns
    ----------
    list
        A list of :class:`Sample`. Identical arguments give identical batches.
    """
    book = make_codebook(task, d_model)
    rng = numerics.make_rng([task.seed, stream + 1])
    n_v = task.n_vision
    samples = []
    for i in range(n_samples):
        vision = rng.normal(0.0, task.noise_std, size = (n_v, book.complement.shape[1])) @ book.complement.T
        slots = rng.permutation(n_v)[:task.n_signal]
        keys = rng.choice(task.n_keys, size = task.n_signal, replace = False)
        values = rng.integers(0, task.n_values, size = task.n_signal)
        pick = int(rng.integers(0, task.n_signal))
        vision[slots] += book.keys[keys] + book.values[values] + task.salience * book.salience
        signal_mask = np.zeros(n_v, dtype = bool)
        signal_mask[slots] = True
        text = (book.query + book.keys[keys[pick]])[None, :]
        seq = TokenSequence.build(vision, text, batch_id = i)
        samples.append(Sample(seq = seq, answer = int(values[pick]), signal_mask = signal_mask, query_key = int(keys[pick])))
    return samples


def lookup_answer(task: SynthTask, sample: Sample) -> int:
    """
    Answer a sample by nearest-neighbour lookup: decode the queried key, find the vision token holding it, read its value.

    Parameters
    ----------
    task
        The :class:`SynthTask` the sample was drawn from.
    sample
        A :class:`Sample`.

    Returns
    ----------
    int
        The predicted value id.
    """
    book = make_codebook(task, sample.seq.embeddings.shape[1])
    emb = sample.seq.embeddings
    text = emb[sample.seq.modality == Modality.TEXT][0]
    key = int(np.argmax(book.keys @ text))
    vision = emb[:sample.seq.n_vision]
    holder = int(np.argmax(vision @ book.keys[key]))
    return int(np.argmax(book.values @ vision[holder]))
