from dataclasses import dataclass, asdict
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Union
import numpy as np
from . import numerics
from .models import Model, ModelConfig, TokenSequence, KvCache, block_forward, block_backward, layer_params, init_params


class ReweightMode(str, Enum):
    """How routing weights rescale tokens inside a routed layer."""
    #selected: (1 + w) T(X); skipped: X
    VANILLA_MOD = 'vanilla_mod'
    #selected: (1 + f(w)) T(X); skipped: X
    TANH_NORM_ONLY = 'tanh_norm_only'
    #selected: (1 + f(w)) T(X); skipped: (1 + f(w)) X
    TANH_NORM_STRING = 'tanh_norm_string'


class Normalizer(str, Enum):
    """Weight normalization `f` used by the normalized reweighting modes."""
    TANH = 'tanh'
    SOFTMAX = 'softmax'
    SHIFTED_SOFTMAX = 'shifted_softmax'


DEFAULT_ALPHA = 0.2
SHIFTED_SOFTMAX_ALPHA = 0.4


@dataclass(frozen = True)
class TanhNormConfig:
    """Gating factor of :func:`tanh_norm`."""
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"🛑 Gating factor `alpha` should be positive, got {self.alpha}")


@dataclass(frozen = True)
class PModConfig:
    """
    Routing configuration shared by every routed layer of a :class:`PModModel`.

    Parameters
    ----------
    mode
        A :class:`ReweightMode` (or its string value).
    alpha
        Gating factor of the weight normalization.
        (Default: 0.2, or 0.4 for `shifted_softmax` so that its range matches `tanh` at 0.2)
    normalizer
        A :class:`Normalizer`. `softmax` gives `alpha * softmax(w)` over the vision tokens of a sample;
        `shifted_softmax` adds `softmax_shift` to it.
        (Default: `tanh`)
    softmax_shift
        Additive shift of the `shifted_softmax` normalizer.
        (Default: -0.2)
    route_full_layers
        Whether layers with retention ratio 1 still go through the router (all tokens selected and reweighted).
        By default such layers run as vanilla layers.
        (Default: `False`)
    """
    mode: ReweightMode = ReweightMode.TANH_NORM_STRING
    alpha: Optional[float] = None
    normalizer: Normalizer = Normalizer.TANH
    softmax_shift: float = -0.2
    route_full_layers: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'mode', ReweightMode(self.mode))
        object.__setattr__(self, 'normalizer', Normalizer(self.normalizer))
        if self.alpha is None:
            object.__setattr__(self, 'alpha', SHIFTED_SOFTMAX_ALPHA if self.normalizer == Normalizer.SHIFTED_SOFTMAX else DEFAULT_ALPHA)
        TanhNormConfig(self.alpha)

    def to_dict(self) -> dict:
        return {**asdict(self), 'mode': self.mode.value, 'normalizer': self.normalizer.value}


class Router(NamedTuple):
    """Linear weight predictor `w = x @ weight + bias` of one layer."""
    weight: np.ndarray
    bias: float


@dataclass
class RouterState:
    """
    Routing decision of one layer for one sample.

    Attributes
    ----------
    raw_weights
        Predicted weight of every vision token.
    normalized_weights
        Weights after normalization (equal to the raw weights in `vanilla_mod` mode). `None` before normalization.
    selected
        Ascending indices of the processed vision tokens. `None` before selection.
    skipped
        Ascending indices of the remaining vision tokens.
    threshold
        The k-th largest raw weight.
    ratio
        Retention ratio the selection used.
    """
    raw_weights: np.ndarray
    normalized_weights: Optional[np.ndarray] = None
    selected: Optional[np.ndarray] = None
    skipped: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    ratio: Optional[float] = None

    @property
    def n_vision(self) -> int:
        return len(self.raw_weights)

    @property
    def selection_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vision, dtype = bool)
        if self.selected is not None:
            mask[self.selected] = True
        return mask

    def __repr__(self):
        if self.selected is None:
            return f"RouterState with {self.n_vision} raw weights (no selection yet)"
        return f"RouterState selecting {len(self.selected)} of {self.n_vision} vision tokens (ratio {self.ratio})"


@dataclass
class RoutedActivations:
    """Intermediates of :func:`layer_forward` needed by :func:`layer_backward`."""
    x: np.ndarray
    n_vision: int
    state: RouterState
    block: dict
    block_out: np.ndarray
    pmod: PModConfig


class LayerGrads(NamedTuple):
    """Gradients returned by :func:`layer_backward`."""
    inputs: np.ndarray
    block: dict
    predictor_weight: np.ndarray
    predictor_bias: np.ndarray


def n_selected(n_vision: int, ratio: float) -> int:
    """Number of vision tokens kept at a retention ratio: `max(1, floor(n_vision * ratio))`."""
    #the epsilon absorbs products like 10 * 0.3 landing just below an integer
    return max(1, int(np.floor(n_vision * ratio + 1e-9)))


def tanh_norm(config: TanhNormConfig, w: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Zero-centered bounded normalization `alpha * tanh(w)`."""
    return config.alpha * np.tanh(w)


def normalize_weights(raw: np.ndarray, config: PModConfig) -> np.ndarray:
    """
    Apply the weight normalization of a reweighting mode.

    Parameters
    ----------
    raw
        Raw weights of the vision tokens of one sample.
    config
        The :class:`PModConfig`.

    Returns
    ----------
    :class:`~numpy.ndarray`
        The factor `f(w)` each reweighted token is scaled by as `(1 + f(w))`.
    """
    raw = np.asarray(raw, dtype = np.float64)
    if config.mode == ReweightMode.VANILLA_MOD:
        return raw.copy()
    if config.normalizer == Normalizer.TANH:
        return tanh_norm(TanhNormConfig(config.alpha), raw)
    s = numerics.softmax_rows(raw)
    shift = config.softmax_shift if config.normalizer == Normalizer.SHIFTED_SOFTMAX else 0.0
    return config.alpha * s + shift


def normalize_weights_backward(raw: np.ndarray, upstream: np.ndarray, config: PModConfig) -> np.ndarray:
    """Gradient w.r.t. the raw weights given the gradient w.r.t. :func:`normalize_weights`."""
    if config.mode == ReweightMode.VANILLA_MOD:
        return upstream.copy()
    if config.normalizer == Normalizer.TANH:
        return upstream * config.alpha * (1.0 - np.tanh(raw) ** 2)
    return config.alpha * numerics.softmax_rows_backward(numerics.softmax_rows(raw), upstream)


def predict_weights(router: Router, seq: TokenSequence) -> RouterState:
    """
    Predict one routing weight per vision token.

    Parameters
    ----------
    router
        The layer's :class:`Router`.
    seq
        Input :class:`TokenSequence`. Text tokens get no weight.

    Returns
    ----------
    :class:`RouterState`
        State holding the raw weights only.
    """
    weight = np.asarray(router.weight, dtype = np.float64)
    if weight.shape != (seq.embeddings.shape[1],):
        raise ValueError(f"🛑 Router of shape {weight.shape} does not map d_model = {seq.embeddings.shape[1]} to a scalar")
    vision = seq.embeddings[:seq.n_vision]
    raw = numerics.matmul(vision, weight) + float(np.ravel(router.bias)[0])
    return RouterState(raw_weights = raw)


def select_topk(state: RouterState, ratio: float, n_vision: Optional[int] = None) -> RouterState:
    """
    Keep the `max(1, floor(n_vision * ratio))` vision tokens with the largest raw weights.

    Ties go to the lower token index. Both index lists are ascending.

    Parameters
    ----------
    state
        :class:`RouterState` with raw weights.
    ratio
        Retention ratio in (0, 1].
    n_vision
        Number of vision tokens. Default to the number of raw weights.

    Returns
    ----------
    :class:`RouterState`
        A new state with `selected`, `skipped`, `threshold` and `ratio` filled in.
    """
    n_v = state.n_vision if n_vision is None else int(n_vision)
    if n_v != state.n_vision:
        raise ValueError(f"🛑 Got {state.n_vision} weights for {n_v} vision tokens")
    if n_v == 0:
        raise ValueError("🛑 No vision tokens to select from")
    if not 0 < ratio <= 1:
        raise ValueError(f"🛑 Retention ratio should be in (0, 1], got {ratio}")
    k = n_selected(n_v, ratio)
    order = np.lexsort((np.arange(n_v), -state.raw_weights))
    selected = np.sort(order[:k])
    skipped = np.sort(order[k:])
    return RouterState(raw_weights = state.raw_weights, normalized_weights = state.normalized_weights, selected = selected,
                       skipped = skipped, threshold = float(state.raw_weights[order[k - 1]]), ratio = float(ratio))


def layer_forward(config: ModelConfig, lp: dict, router: Router, pmod: PModConfig, ratio: float, seq: TokenSequence,
                  cache: Optional[KvCache] = None, layer: int = 0) -> tuple:
    """
    Routed layer: select vision tokens, run the transformer layer on them plus all text tokens, scatter back.

    Parameters
    ----------
    config
        Model shape.
    lp
        Vanilla layer tensors (see :func:`~pmodlab.models.layer_params`).
    router
        The layer's weight predictor.
    pmod
        Reweighting mode and normalization.
    ratio
        Retention ratio of this layer.
    seq
        Input :class:`~pmodlab.models.TokenSequence` with at least one vision token.
    cache
        Optional :class:`~pmodlab.models.KvCache`; only the processed tokens are appended to it.
    layer
        Index of the layer in `cache`.

    Returns
    ----------
    tuple
        Output :class:`~pmodlab.models.TokenSequence`, the :class:`RouterState` and the :class:`RoutedActivations`.
    """
    x = seq.embeddings
    n_v = seq.n_vision
    state = select_topk(predict_weights(router, seq), ratio, n_v)
    state.normalized_weights = normalize_weights(state.raw_weights, pmod)
    f = state.normalized_weights
    gathered = np.concatenate([state.selected, np.arange(n_v, len(seq))])
    sub = seq.subset(gathered)
    y_sub, saved = block_forward(config, lp, sub.embeddings, sub.positions, cache, layer)
    k = len(state.selected)
    out = x.copy()
    out[state.selected] = (1.0 + f[state.selected])[:, None] * y_sub[:k]
    out[n_v:] = y_sub[k:]
    if pmod.mode == ReweightMode.TANH_NORM_STRING:
        out[state.skipped] = (1.0 + f[state.skipped])[:, None] * x[state.skipped]
    acts = RoutedActivations(x = x, n_vision = n_v, state = state, block = saved, block_out = y_sub, pmod = pmod)
    return seq.with_embeddings(out), state, acts


def layer_backward(config: ModelConfig, lp: dict, router: Router, acts: RoutedActivations, upstream: np.ndarray) -> LayerGrads:
    """
    Exact backward of :func:`layer_forward`, treating the selection as fixed.

    Parameters
    ----------
    config
        Model shape.
    lp
        Vanilla layer tensors.
    router
        The layer's weight predictor.
    acts
        :class:`RoutedActivations` of the matching forward.
    upstream
        Gradient w.r.t. the layer output, shape (n, d).

    Returns
    ----------
    :class:`LayerGrads`
        Gradients w.r.t. the layer input, the vanilla layer tensors and the predictor.
    """
    x, state, n_v = acts.x, acts.state, acts.n_vision
    if upstream.shape != x.shape:
        raise ValueError(f"🛑 Upstream gradient of shape {upstream.shape} does not match the layer output {x.shape}")
    sel, skip = state.selected, state.skipped
    k = len(sel)
    f = state.normalized_weights
    string = acts.pmod.mode == ReweightMode.TANH_NORM_STRING
    y_sel = acts.block_out[:k]
    dy_sub = np.vstack([(1.0 + f[sel])[:, None] * upstream[sel], upstream[n_v:]])
    dx_sub, block_grads = block_backward(config, lp, acts.block, dy_sub)
    dx = np.zeros_like(x)
    dx[sel] = dx_sub[:k]
    dx[n_v:] = dx_sub[k:]
    df = np.zeros(n_v)
    df[sel] = np.sum(upstream[sel] * y_sel, axis = 1)
    if string:
        dx[skip] = (1.0 + f[skip])[:, None] * upstream[skip]
        df[skip] = np.sum(upstream[skip] * x[skip], axis = 1)
    else:
        dx[skip] = upstream[skip]
    dw = normalize_weights_backward(state.raw_weights, df, acts.pmod)
    weight = np.asarray(router.weight, dtype = np.float64)
    dx[:n_v] += np.outer(dw, weight)
    return LayerGrads(inputs = dx, block = block_grads, predictor_weight = numerics.matmul(x[:n_v].T, dw),
                      predictor_bias = np.array([np.sum(dw)]))


def router_of(params: dict, layer: int) -> Router:
    """The :class:`Router` of a layer from a parameter dict."""
    return Router(params[f"layers.{layer}.router_w"], params[f"layers.{layer}.router_b"])


def init_router_params(config: ModelConfig) -> dict:
    """Zero-initialized predictors for every layer (all weights 0, hence `f(w) = 0` under tanh)."""
    params = {}
    for l in range(config.n_layers):
        params[f"layers.{l}.router_w"] = np.zeros(config.d_model)
        params[f"layers.{l}.router_b"] = np.zeros(1)
    return params


class PModModel(Model):
    """
    Decoder whose layers route vision tokens according to a retention schedule.

    Parameters
    ----------
    config
        A :class:`~pmodlab.models.ModelConfig`.
    params
        Vanilla tensors plus `layers.{l}.router_w` / `layers.{l}.router_b` for every layer.
    pmod
        The :class:`PModConfig`.
    ratios
        Per-layer retention ratio, length `n_layers`. Layers at ratio 1 are vanilla unless `pmod.route_full_layers`.
    description
        Free-form metadata stored in checkpoints.
    """
    def __init__(self, config: ModelConfig, params: dict, pmod: Optional[PModConfig] = None,
                 ratios: Optional[Sequence[float]] = None, description: Optional[dict] = None):
        super().__init__(config, params, description)
        self.pmod = pmod or PModConfig()
        ratios = np.ones(config.n_layers) if ratios is None else np.asarray(ratios, dtype = np.float64)
        if ratios.shape != (config.n_layers,):
            raise ValueError(f"🛑 Got {ratios.size} retention ratios for {config.n_layers} layers")
        if np.any(ratios <= 0) or np.any(ratios > 1):
            raise ValueError("🛑 Retention ratios should be in (0, 1]")
        self.ratios = ratios

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, pmod: Optional[PModConfig] = None,
             ratios: Optional[Sequence[float]] = None) -> 'PModModel':
        """Vanilla initialization (same tensors as :meth:`Model.init` with this seed) plus zero predictors."""
        params = init_params(config, numerics.make_rng(seed))
        params.update(init_router_params(config))
        return cls(config, params, pmod, ratios)

    @classmethod
    def from_model(cls, model: Model, pmod: Optional[PModConfig] = None, ratios: Optional[Sequence[float]] = None) -> 'PModModel':
        """Insert zero-initialized routers into a vanilla model."""
        params = dict(model.params)
        params.update(init_router_params(model.config))
        return cls(model.config, params, pmod, ratios, dict(model.description))

    def __repr__(self):
        return f"{super().__repr__()}, routing {self.routed_layers.size} layers in {self.pmod.mode.value} mode"

    @property
    def routed_layers(self) -> np.ndarray:
        """Indices (0-based) of the layers that route vision tokens."""
        if self.pmod.route_full_layers:
            return np.arange(self.config.n_layers)
        return np.flatnonzero(self.ratios < 1.0)

    def is_routed(self, layer: int) -> bool:
        return self.pmod.route_full_layers or self.ratios[layer] < 1.0

    def with_params(self, params: dict) -> 'PModModel':
        return PModModel(self.config, params, self.pmod, self.ratios, dict(self.description))

    def with_ratios(self, ratios: Sequence[float]) -> 'PModModel':
        """Same parameters under another retention schedule (no retraining)."""
        return PModModel(self.config, self.params, self.pmod, ratios, dict(self.description))

    def _layer_forward(self, layer: int, seq: TokenSequence, cache: Optional[KvCache]) -> tuple:
        if not self.is_routed(layer) or seq.n_vision == 0:
            return super()._layer_forward(layer, seq, cache)
        out, _, acts = layer_forward(self.config, layer_params(self.params, layer), router_of(self.params, layer), self.pmod,
                                     float(self.ratios[layer]), seq, cache, layer)
        return out.embeddings, acts

    def _layer_backward(self, layer: int, saved, dy: np.ndarray, grads: dict) -> np.ndarray:
        if not isinstance(saved, RoutedActivations):
            return super()._layer_backward(layer, saved, dy, grads)
        g = layer_backward(self.config, layer_params(self.params, layer), router_of(self.params, layer), saved, dy)
        for name, value in g.block.items():
            grads[f"layers.{layer}.{name}"] += value
        grads[f"layers.{layer}.router_w"] += g.predictor_weight
        grads[f"layers.{layer}.router_b"] += g.predictor_bias
        return g.inputs

    def router_states(self, seq: TokenSequence) -> list:
        """
        Routing decisions of every layer for one sequence.

        Returns
        ----------
        list
            One :class:`RouterState` per layer, `None` for layers that did not route.
        """
        _, acts = self.forward(seq)
        return [saved.state if isinstance(saved, RoutedActivations) else None for saved in acts.layers]

    def _checkpoint_extra(self) -> dict:
        return {'pmod': self.pmod.to_dict(), 'ratios': [float(r) for r in self.ratios]}

    @classmethod
    def _from_checkpoint(cls, config: ModelConfig, params: dict, header: dict) -> 'PModModel':
        return cls(config, params, PModConfig(**header['pmod']), header['ratios'], header.get('description', {}))
