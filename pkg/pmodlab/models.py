import os
import json
import struct
from dataclasses import dataclass, asdict, replace, field
from enum import IntEnum
from typing import Optional, Union
import numpy as np
from scipy.special import logsumexp
from . import logger, numerics

#checkpoint layout: MAGIC | <I version | <Q header length | JSON header | <f8 tensor data
CHECKPOINT_MAGIC = b"PMODCKPT"
CHECKPOINT_VERSION = 1

LAYER_TENSORS = ('attn_norm', 'wq', 'wk', 'wv', 'wo', 'mlp_norm', 'w_gate', 'w_up', 'w_down')


class CheckpointError(ValueError):
    """Raised for malformed or mismatched checkpoint files."""


class Modality(IntEnum):
    VISION = 0
    TEXT = 1


@dataclass(frozen = True)
class ModelConfig:
    """
    Shape of the toy causal decoder.

    Parameters
    ----------
    n_layers
        Number of transformer layers L.
    d_model
        Embedding dimension d.
    n_heads
        Number of attention heads. `d_model` should be divisible by it, with an even head dimension (rotary pairs).
    d_ff
        Hidden width of the gated MLP.
    vocab_size
        Number of output classes of the LM head.
    max_seq
        Longest sequence accepted by :meth:`Model.forward`.
    rope_theta
        Base of the rotary frequencies.
    norm_eps
        Epsilon of every rmsnorm.
    """
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ('n_layers', 'd_model', 'n_heads', 'd_ff', 'vocab_size', 'max_seq'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"🛑 `{name}` should be at least 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"🛑 `d_model` ({self.d_model}) should be divisible by `n_heads` ({self.n_heads})")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError(f"🛑 Head dimension ({self.d_model // self.n_heads}) should be even for rotary encoding")
        if self.norm_eps <= 0:
            raise ValueError(f"🛑 `norm_eps` should be positive, got {self.norm_eps}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen = True)
class TokenSequence:
    """
    One sample of embedded tokens: a vision prefix followed by text tokens.

    Parameters
    ----------
    embeddings
        Token embeddings of shape (n, d).
    modality
        Per-token :class:`Modality` tag. Vision tokens form a contiguous prefix.
    positions
        Original position index of each token, strictly increasing.
    batch_id
        Index of the sample within its batch.
    """
    embeddings: np.ndarray
    modality: np.ndarray
    positions: np.ndarray
    batch_id: int = 0

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype = np.float64)
        mod = np.asarray(self.modality, dtype = np.int8)
        pos = np.asarray(self.positions, dtype = np.int64)
        object.__setattr__(self, 'embeddings', emb)
        object.__setattr__(self, 'modality', mod)
        object.__setattr__(self, 'positions', pos)
        if emb.ndim != 2:
            raise ValueError(f"🛑 Embeddings should be a 2-D (tokens x d) array, got shape {emb.shape}")
        if not (len(mod) == len(pos) == emb.shape[0]):
            raise ValueError(f"🛑 Length mismatch: {emb.shape[0]} embeddings, {len(mod)} modality tags, {len(pos)} positions")
        if np.any(np.diff(mod) < 0) or not np.all(np.isin(mod, (Modality.VISION, Modality.TEXT))):
            raise ValueError("🛑 Vision tokens should form a contiguous prefix followed by text tokens")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("🛑 Token positions should be strictly increasing")

    @classmethod
    def build(cls, vision: np.ndarray, text: np.ndarray, start: int = 0, batch_id: int = 0) -> 'TokenSequence':
        """Stack vision then text embeddings with consecutive positions starting at `start`."""
        vision = np.atleast_2d(np.asarray(vision, dtype = np.float64))
        text = np.atleast_2d(np.asarray(text, dtype = np.float64))
        n_v, n_t = vision.shape[0], text.shape[0]
        modality = np.concatenate([np.full(n_v, Modality.VISION), np.full(n_t, Modality.TEXT)])
        return cls(np.vstack([vision, text]), modality, np.arange(start, start + n_v + n_t), batch_id)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def n_vision(self) -> int:
        return int(np.sum(self.modality == Modality.VISION))

    @property
    def n_text(self) -> int:
        return len(self) - self.n_vision

    def with_embeddings(self, embeddings: np.ndarray) -> 'TokenSequence':
        """Same tokens with new embeddings."""
        return replace(self, embeddings = embeddings)

    def subset(self, index: np.ndarray) -> 'TokenSequence':
        """Gather tokens by (ascending) index, keeping their original positions."""
        return TokenSequence(self.embeddings[index], self.modality[index], self.positions[index], self.batch_id)

    def concat(self, other: 'TokenSequence') -> 'TokenSequence':
        """Append `other` after this sequence."""
        return TokenSequence(np.vstack([self.embeddings, other.embeddings]), np.concatenate([self.modality, other.modality]),
                             np.concatenate([self.positions, other.positions]), self.batch_id)


class KvCache():
    """
    Per-layer keys and values of the tokens each layer processed.

    Parameters
    ----------
    n_layers
        Number of layers of the owning model.

    Attributes
    ----------
    keys
        Per-layer rotated keys, each of shape (entries, n_heads, head_dim).
    values
        Per-layer values of the same shape.
    positions
        Per-layer original position index of every cached entry.
    """
    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.keys = [None] * n_layers
        self.values = [None] * n_layers
        self.positions = [np.zeros(0, dtype = np.int64) for _ in range(n_layers)]

    def extend(self, layer: int, keys: np.ndarray, values: np.ndarray, positions: np.ndarray) -> None:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = keys.copy(), values.copy()
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], keys])
            self.values[layer] = np.concatenate([self.values[layer], values])
        self.positions[layer] = np.concatenate([self.positions[layer], np.asarray(positions, dtype = np.int64)])

    @property
    def entry_counts(self) -> list:
        """Number of cached entries per layer."""
        return [len(p) for p in self.positions]

    @property
    def last_position(self) -> int:
        """Largest position held in any layer, or -1 for an empty cache."""
        return max([int(p[-1]) for p in self.positions if len(p)], default = -1)

    def nbytes(self, d_model: int, bytes_per_element: int = 2) -> int:
        """Storage of the cache at the given element width: 2 (K, V) x d x bytes x entries."""
        return 2 * d_model * bytes_per_element * sum(self.entry_counts)

    def __repr__(self):
        return f"KvCache over {self.n_layers} layers with entries {self.entry_counts}"


@dataclass
class Activations:
    """Intermediates saved by :meth:`Model.forward` for an exact backward pass."""
    seq: TokenSequence
    layers: list = field(default_factory = list)
    final_input: Optional[np.ndarray] = None
    final_hidden: Optional[np.ndarray] = None
    final_inv_rms: Optional[np.ndarray] = None


def init_params(config: ModelConfig, rng: numerics.Rng) -> dict:
    """
    Draw a fresh parameter set.

    Parameters
    ----------
    config
        The :class:`ModelConfig` to build for.
    rng
        Generator from :func:`~pmodlab.numerics.make_rng`.

    Returns
    ----------
    dict
        Tensor name -> float64 array, in a fixed order.
    """
    d, dff, L = config.d_model, config.d_ff, config.n_layers
    out_scale = 1.0 / np.sqrt(2 * L)
    params = {'embed': rng.normal(0.0, 1.0 / np.sqrt(d), (config.vocab_size, d))}
    for l in range(L):
        params[f"layers.{l}.attn_norm"] = np.ones(d)
        params[f"layers.{l}.wq"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        params[f"layers.{l}.wk"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        params[f"layers.{l}.wv"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        params[f"layers.{l}.wo"] = rng.normal(0.0, out_scale / np.sqrt(d), (d, d))
        params[f"layers.{l}.mlp_norm"] = np.ones(d)
        params[f"layers.{l}.w_gate"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, dff))
        params[f"layers.{l}.w_up"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, dff))
        params[f"layers.{l}.w_down"] = rng.normal(0.0, out_scale / np.sqrt(dff), (dff, d))
    params['final_norm'] = np.ones(d)
    params['lm_head'] = rng.normal(0.0, 1.0 / np.sqrt(d), (config.vocab_size, d))
    return params


def layer_params(params: dict, layer: int) -> dict:
    """Short-name view of the vanilla tensors of one layer."""
    return {name: params[f"layers.{layer}.{name}"] for name in LAYER_TENSORS}


def apply_rope(x: np.ndarray, positions: np.ndarray, theta: float, inverse: bool = False) -> np.ndarray:
    """
    Rotate consecutive (even, odd) pairs of the last axis by position-dependent angles.

    Parameters
    ----------
    x
        Array of shape (m, n_heads, head_dim).
    positions
        Original position of each of the m tokens.
    theta
        Frequency base.
    inverse
        Rotate by the negative angles (the transpose, used by the backward pass).

    Returns
    ----------
    :class:`~numpy.ndarray`
        Rotated array of the same shape.
    """
    half = x.shape[-1] // 2
    inv_freq = theta ** (-np.arange(half) * 2.0 / x.shape[-1])
    angles = np.asarray(positions, dtype = np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles)[:, None, :], np.sin(angles)[:, None, :]
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def block_forward(config: ModelConfig, lp: dict, x: np.ndarray, positions: np.ndarray,
                  cache: Optional[KvCache] = None, layer: int = 0) -> tuple:
    """
    Pre-norm transformer layer: causal rotary attention and a SiLU-gated MLP, each with a residual.

    Parameters
    ----------
    config
        Model shape.
    lp
        Layer tensors from :func:`layer_params`.
    x
        Input rows of shape (m, d).
    positions
        Original positions of the m rows; attention is causal over these positions.
    cache
        If given, the rows also attend to the entries already cached for `layer`, and their keys/values are appended.
    layer
        Index of the layer in `cache`.

    Returns
    ----------
    tuple
        Output rows of shape (m, d) and a dict of saved intermediates for :func:`block_backward`.
    """
    m, d = x.shape
    H, dh = config.n_heads, config.head_dim
    h, inv_rms1 = numerics.rmsnorm(x, lp['attn_norm'], config.norm_eps)
    q = apply_rope(numerics.matmul(h, lp['wq']).reshape(m, H, dh), positions, config.rope_theta)
    k = apply_rope(numerics.matmul(h, lp['wk']).reshape(m, H, dh), positions, config.rope_theta)
    v = numerics.matmul(h, lp['wv']).reshape(m, H, dh)
    keys, values, key_positions = k, v, positions
    if cache is not None:
        if cache.keys[layer] is not None:
            keys = np.concatenate([cache.keys[layer], k])
            values = np.concatenate([cache.values[layer], v])
            key_positions = np.concatenate([cache.positions[layer], positions])
        cache.extend(layer, k, v, positions)
    visible = key_positions[None, :] <= np.asarray(positions)[:, None]
    qh, kh, vh = q.transpose(1, 0, 2), keys.transpose(1, 0, 2), values.transpose(1, 0, 2)
    scores = numerics.masked_scores(qh, kh, visible[None], 1.0 / np.sqrt(dh))
    probs = numerics.softmax_rows(scores)
    mixed = numerics.masked_mix(probs, vh, visible[None])
    o = mixed.transpose(1, 0, 2).reshape(m, d)
    x1 = x + numerics.matmul(o, lp['wo'])
    h2, inv_rms2 = numerics.rmsnorm(x1, lp['mlp_norm'], config.norm_eps)
    gate = numerics.matmul(h2, lp['w_gate'])
    up = numerics.matmul(h2, lp['w_up'])
    s = numerics.silu(gate) * up
    y = x1 + numerics.matmul(s, lp['w_down'])
    saved = dict(x = x, positions = positions, h = h, inv_rms1 = inv_rms1, qh = qh, kh = kh, vh = vh, probs = probs,
                 o = o, x1 = x1, h2 = h2, inv_rms2 = inv_rms2, gate = gate, up = up, s = s)
    return y, saved


def block_backward(config: ModelConfig, lp: dict, saved: dict, dy: np.ndarray) -> tuple:
    """
    Exact backward of :func:`block_forward` (without cache).

    Returns
    ----------
    tuple
        Gradient w.r.t. the input rows, and a dict of gradients keyed like :data:`LAYER_TENSORS`.
    """
    m, d = dy.shape
    H, dh = config.n_heads, config.head_dim
    grads = {}
    #mlp
    grads['w_down'] = numerics.matmul(saved['s'].T, dy)
    ds = numerics.matmul(dy, lp['w_down'].T)
    gate, up = saved['gate'], saved['up']
    dgate = ds * up * numerics.silu_grad(gate)
    dup = ds * numerics.silu(gate)
    grads['w_gate'] = numerics.matmul(saved['h2'].T, dgate)
    grads['w_up'] = numerics.matmul(saved['h2'].T, dup)
    dh2 = numerics.matmul(dgate, lp['w_gate'].T) + numerics.matmul(dup, lp['w_up'].T)
    dx1_norm, grads['mlp_norm'] = numerics.rmsnorm_backward(dh2, saved['x1'], lp['mlp_norm'], saved['inv_rms2'])
    dx1 = dy + dx1_norm
    #attention
    grads['wo'] = numerics.matmul(saved['o'].T, dx1)
    do = numerics.matmul(dx1, lp['wo'].T).reshape(m, H, dh).transpose(1, 0, 2)
    probs, qh, kh, vh = saved['probs'], saved['qh'], saved['kh'], saved['vh']
    dprobs = numerics.matmul(do, vh.transpose(0, 2, 1))
    dvh = numerics.matmul(probs.transpose(0, 2, 1), do)
    dscores = numerics.softmax_rows_backward(probs, dprobs) / np.sqrt(dh)
    dqh = numerics.matmul(dscores, kh)
    dkh = numerics.matmul(dscores.transpose(0, 2, 1), qh)
    positions = saved['positions']
    dq = apply_rope(dqh.transpose(1, 0, 2), positions, config.rope_theta, inverse = True).reshape(m, d)
    dk = apply_rope(dkh.transpose(1, 0, 2), positions, config.rope_theta, inverse = True).reshape(m, d)
    dv = dvh.transpose(1, 0, 2).reshape(m, d)
    h = saved['h']
    grads['wq'] = numerics.matmul(h.T, dq)
    grads['wk'] = numerics.matmul(h.T, dk)
    grads['wv'] = numerics.matmul(h.T, dv)
    dh_ = numerics.matmul(dq, lp['wq'].T) + numerics.matmul(dk, lp['wk'].T) + numerics.matmul(dv, lp['wv'].T)
    dx_norm, grads['attn_norm'] = numerics.rmsnorm_backward(dh_, saved['x'], lp['attn_norm'], saved['inv_rms1'])
    return dx1 + dx_norm, grads


def cross_entropy(logits: np.ndarray, positions: np.ndarray, labels: np.ndarray) -> tuple:
    """
    Mean cross entropy over the answer rows of the logits.

    Parameters
    ----------
    logits
        Logits of shape (n, vocab).
    positions
        Row indices (into `logits`) of the supervised answer positions.
    labels
        Target class of each answer position.

    Returns
    ----------
    tuple
        The loss and its gradient w.r.t. `logits`.
    """
    positions = np.atleast_1d(positions)
    labels = np.atleast_1d(labels)
    if len(positions) != len(labels) or len(positions) == 0:
        raise ValueError(f"🛑 Need one label per answer position, got {len(labels)} labels for {len(positions)} positions")
    rows = logits[positions]
    lse = logsumexp(rows, axis = -1)
    loss = float(np.mean(lse - rows[np.arange(len(labels)), labels]))
    dlogits = np.zeros_like(logits)
    probs = np.exp(rows - lse[:, None])
    probs[np.arange(len(labels)), labels] -= 1.0
    dlogits[positions] = probs / len(labels)
    return loss, dlogits


class Model():
    """
    Toy causal decoder with manual backward pass and KV-cache decoding.

    Parameters
    ----------
    config
        A :class:`ModelConfig`.
    params
        Tensor name -> array. Treated as an immutable snapshot by forward/backward.
    description
        Free-form metadata stored in checkpoints.

    Attributes
    ----------
    config
        The model shape.
    params
        The parameter set.
    description
        Metadata dict.
    """
    _kinds = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        Model._kinds[cls.__name__] = cls

    def __init__(self, config: ModelConfig, params: dict, description: Optional[dict] = None):
        self.config = config
        self.params = params
        self.description = description or {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> 'Model':
        """Build a randomly initialized model; identical seeds give identical parameters."""
        return cls(config, init_params(config, numerics.make_rng(seed)))

    def __repr__(self):
        n_params = sum(p.size for p in self.params.values())
        c = self.config
        return f"{type(self).__name__} with {c.n_layers} layers, d_model {c.d_model}, {c.n_heads} heads, d_ff {c.d_ff}, vocab {c.vocab_size} ({n_params} parameters)"

    def with_params(self, params: dict) -> 'Model':
        """Same architecture with another parameter set."""
        return type(self)(self.config, params, dict(self.description))

    def check_finite(self) -> None:
        """Raise if any parameter holds NaN or infinity."""
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"🛑 Non-finite values detected in parameter '{name}'")

    def _layer_forward(self, layer: int, seq: TokenSequence, cache: Optional[KvCache]) -> tuple:
        """Run one layer; subclasses override to insert routing. Returns (output rows, saved)."""
        y, saved = block_forward(self.config, layer_params(self.params, layer), seq.embeddings, seq.positions, cache, layer)
        return y, saved

    def _layer_backward(self, layer: int, saved, dy: np.ndarray, grads: dict) -> np.ndarray:
        """Backward of :meth:`_layer_forward`; accumulates into `grads` and returns the input gradient."""
        dx, g = block_backward(self.config, layer_params(self.params, layer), saved, dy)
        for name, value in g.items():
            grads[f"layers.{layer}.{name}"] += value
        return dx

    def forward(self, seq: TokenSequence, cache: Optional[KvCache] = None) -> tuple:
        """
        Full causal forward pass.

        Parameters
        ----------
        seq
            Input :class:`TokenSequence`.
        cache
            Optional empty :class:`KvCache` to fill (prefill).

        Returns
        ----------
        tuple
            Logits of shape (n, vocab_size), and the :class:`Activations` needed by :meth:`backward`.
        """
        if len(seq) > self.config.max_seq:
            raise ValueError(f"🛑 Sequence of {len(seq)} tokens exceeds `max_seq` ({self.config.max_seq})")
        if cache is not None and cache.n_layers != self.config.n_layers:
            raise ValueError(f"🛑 Cache has {cache.n_layers} layers, model has {self.config.n_layers}")
        self.check_finite()
        acts = Activations(seq = seq)
        current = seq
        for layer in range(self.config.n_layers):
            y, saved = self._layer_forward(layer, current, cache)
            acts.layers.append(saved)
            current = current.with_embeddings(y)
        acts.final_input = current.embeddings
        acts.final_hidden, acts.final_inv_rms = numerics.rmsnorm(current.embeddings, self.params['final_norm'], self.config.norm_eps)
        logits = numerics.matmul(acts.final_hidden, self.params['lm_head'].T)
        return logits, acts

    def backward(self, acts: Activations, upstream: np.ndarray) -> dict:
        """
        Exact gradients of a scalar loss w.r.t. every parameter.

        Parameters
        ----------
        acts
            :class:`Activations` from a matching :meth:`forward`.
        upstream
            Loss gradient w.r.t. the logits, shape (n, vocab_size).

        Returns
        ----------
        dict
            Gradient per parameter name, shaped like :attr:`params`.
        """
        n = len(acts.seq)
        if upstream.shape != (n, self.config.vocab_size):
            raise ValueError(f"🛑 Upstream gradient of shape {upstream.shape} does not match logits ({n}, {self.config.vocab_size})")
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        grads['lm_head'] = numerics.matmul(upstream.T, acts.final_hidden)
        dhidden = numerics.matmul(upstream, self.params['lm_head'])
        dx, grads['final_norm'] = numerics.rmsnorm_backward(dhidden, acts.final_input, self.params['final_norm'], acts.final_inv_rms)
        for layer in reversed(range(self.config.n_layers)):
            dx = self._layer_backward(layer, acts.layers[layer], dx, grads)
        return grads

    def loss(self, seq: TokenSequence, answer_positions: np.ndarray, labels: np.ndarray) -> tuple:
        """
        Forward pass plus mean cross entropy over the answer positions.

        Returns
        ----------
        tuple
            Loss value, gradient w.r.t. the logits, the logits and the :class:`Activations`.
        """
        logits, acts = self.forward(seq)
        value, dlogits = cross_entropy(logits, answer_positions, labels)
        return value, dlogits, logits, acts

    def embed_tokens(self, token_ids: Union[int, np.ndarray], start: int, batch_id: int = 0) -> TokenSequence:
        """Text tokens looked up in the embedding table, at consecutive positions from `start`."""
        ids = np.atleast_1d(token_ids)
        return TokenSequence(self.params['embed'][ids], np.full(len(ids), Modality.TEXT), np.arange(start, start + len(ids)), batch_id)

    def prefill(self, seq: TokenSequence) -> tuple:
        """Forward pass that also returns the filled :class:`KvCache`."""
        cache = KvCache(self.config.n_layers)
        logits, _ = self.forward(seq, cache)
        return logits, cache

    def _layer_decode(self, layer: int, token: TokenSequence, cache: KvCache) -> np.ndarray:
        """One-token layer step against the cache; decoded text tokens always run the full block, routed layers included."""
        y, _ = block_forward(self.config, layer_params(self.params, layer), token.embeddings, token.positions, cache, layer)
        return y

    def decode_step(self, cache: KvCache, token: TokenSequence) -> np.ndarray:
        """
        Process one new text token against the cache.

        Parameters
        ----------
        cache
            :class:`KvCache` from :meth:`prefill` or earlier decode steps. Extended in place.
        token
            A :class:`TokenSequence` of length 1 positioned after every cached entry.

        Returns
        ----------
        :class:`~numpy.ndarray`
            Logits of the token, shape (1, vocab_size).
        """
        if cache.n_layers != self.config.n_layers:
            raise ValueError(f"🛑 Cache has {cache.n_layers} layers, model has {self.config.n_layers}")
        if len(token) != 1:
            raise ValueError(f"🛑 `decode_step` takes exactly one token, got {len(token)}")
        if token.modality[0] != Modality.TEXT:
            raise ValueError("🛑 Only text tokens can be decoded; vision tokens belong to the prefill")
        if token.positions[0] <= cache.last_position:
            raise ValueError(f"🛑 Token position {token.positions[0]} is not after the cached positions (last {cache.last_position})")
        self.check_finite()
        x = token.embeddings
        for layer in range(self.config.n_layers):
            x = self._layer_decode(layer, token.with_embeddings(x), cache)
        hidden, _ = numerics.rmsnorm(x, self.params['final_norm'], self.config.norm_eps)
        return numerics.matmul(hidden, self.params['lm_head'].T)

    def generate(self, seq: TokenSequence, n_new: int) -> np.ndarray:
        """
        Greedy decoding of `n_new` tokens through the KV cache.

        Returns
        ----------
        :class:`~numpy.ndarray`
            The generated token ids.
        """
        logits, cache = self.prefill(seq)
        out = []
        next_id = int(np.argmax(logits[-1]))
        position = int(seq.positions[-1])
        for _ in range(n_new):
            out.append(next_id)
            position += 1
            logits = self.decode_step(cache, self.embed_tokens(next_id, position, seq.batch_id))
            next_id = int(np.argmax(logits[-1]))
        return np.array(out, dtype = np.int64)

    def _checkpoint_extra(self) -> dict:
        """Extra header fields written by subclasses."""
        return {}

    @classmethod
    def _from_checkpoint(cls, config: ModelConfig, params: dict, header: dict) -> 'Model':
        return cls(config, params, header.get('description', {}))

    def write(self, file: str) -> None:
        """
        Write out the model as a binary checkpoint (see the formats page of the docs).

        Parameters
        ----------
        file
            Output path. Existing files are overwritten.
        """
        header = {'format': 'pmodlab-checkpoint', 'kind': type(self).__name__, 'config': asdict(self.config),
                  'description': self.description, 'tensors': [{'name': name, 'shape': list(value.shape)} for name, value in self.params.items()]}
        header.update(self._checkpoint_extra())
        blob = json.dumps(header, sort_keys = True).encode('utf-8')
        with open(file, 'wb') as output:
            output.write(CHECKPOINT_MAGIC)
            output.write(struct.pack('<IQ', CHECKPOINT_VERSION, len(blob)))
            output.write(blob)
            for value in self.params.values():
                output.write(np.ascontiguousarray(value, dtype = '<f8').tobytes())

    @staticmethod
    def load(file: str) -> 'Model':
        """
        Load a checkpoint written by :meth:`write`.

        Parameters
        ----------
        file
            Path to the checkpoint.

        Returns
        ----------
        :class:`Model`
            A :class:`Model`, or the subclass recorded in the header.
        """
        if not os.path.isfile(file):
            raise FileNotFoundError(f"🛑 No such file: {file}")
        with open(file, 'rb') as fh:
            raw = fh.read()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"🛑 Invalid checkpoint: {file}. Missing magic bytes")
        offset = len(CHECKPOINT_MAGIC)
        version, header_len = struct.unpack_from('<IQ', raw, offset)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"🛑 Unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        offset += struct.calcsize('<IQ')
        header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
        offset += header_len
        params = {}
        for tensor in header['tensors']:
            count = int(np.prod(tensor['shape'], dtype = np.int64))
            if offset + 8 * count > len(raw):
                raise CheckpointError(f"🛑 Invalid checkpoint: {file}. Truncated tensor '{tensor['name']}'")
            params[tensor['name']] = np.frombuffer(raw, dtype = '<f8', count = count, offset = offset).astype(np.float64).reshape(tensor['shape'])
            offset += 8 * count
        if offset != len(raw):
            raise CheckpointError(f"🛑 Invalid checkpoint: {file}. {len(raw) - offset} trailing bytes")
        kind = Model._kinds.get(header['kind'], Model)
        model = kind._from_checkpoint(ModelConfig(**header['config']), params, header)
        logger.info(f"📂 Loaded {model}")
        return model
