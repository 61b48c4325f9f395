"""Contextual causal intervention layer with hand-written gradients.

For a joint feature ``h`` the layer returns::

    out = W_h h + W_g E,    E = sum_i lambda_i z_i P(z_i)

where ``z_i`` are dictionary prototypes, ``P(z_i)`` their priors and
``lambda`` is a softmax over prototypes computed by dot-product or
additive attention between ``h`` and each ``z_i``.

Every function accepts a single vector ``h`` of shape ``(d_h,)`` or a
batch of shape ``(B, d_h)``; outputs follow the input's rank.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .confounder_dictionary import ConfounderDictionary
from .errors import ContractError, DimensionError, ParameterError, ValidationError, VersionError

PARAMS_VERSION = "ccim-params/1"
PARAM_NAMES = ("W_h", "W_g", "W_q", "W_k", "W_t")


class AttentionKind(str, Enum):
    DOT_PRODUCT = "dot_product"
    ADDITIVE = "additive"
    UNIFORM = "uniform"
    NONE = "none"


@dataclass(frozen=True)
class CcimDims:
    d: int
    d_h: int
    d_m: int = 128
    d_n: int = 256
    n: int = 1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ParameterError(f"CcimDims.{name} must be a positive integer, got {value}")


@dataclass
class CcimParams:
    W_h: np.ndarray
    W_g: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_t: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(d, d_h, d_m, d_n) implied by the matrix shapes."""
        return self.W_g.shape[1], self.W_h.shape[1], self.W_h.shape[0], self.W_q.shape[0]

    def check(self, dims: CcimDims | None = None) -> None:
        d, d_h, d_m, d_n = self.dims
        expected = {
            "W_h": (d_m, d_h), "W_g": (d_m, d), "W_q": (d_n, d_h),
            "W_k": (d_n, d), "W_t": (d_n,),
        }
        if dims is not None:
            expected = {
                "W_h": (dims.d_m, dims.d_h), "W_g": (dims.d_m, dims.d),
                "W_q": (dims.d_n, dims.d_h), "W_k": (dims.d_n, dims.d), "W_t": (dims.d_n,),
            }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "CcimParams":
        return CcimParams(**{k: v.copy() for k, v in self.as_dict().items()})


def init_params(dims: CcimDims, seed: int, scale: float = 0.1) -> CcimParams:
    """Draw every entry i.i.d. from U[-scale, scale]."""
    if not scale > 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    rng = np.random.default_rng(seed)
    shapes = {
        "W_h": (dims.d_m, dims.d_h), "W_g": (dims.d_m, dims.d),
        "W_q": (dims.d_n, dims.d_h), "W_k": (dims.d_n, dims.d), "W_t": (dims.d_n,),
    }
    return CcimParams(**{k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()})


def _batch(h) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        return h[None, :], True
    if h.ndim != 2:
        raise DimensionError(f"h must be 1-D or 2-D, got shape {h.shape}")
    return h, False


def _check_shapes(h: np.ndarray, dictionary: ConfounderDictionary, params: CcimParams) -> None:
    d, d_h, _, _ = params.dims
    if h.shape[1] != d_h:
        raise DimensionError(f"h has dimension {h.shape[1]}, W_h expects {d_h}")
    if dictionary.d != d:
        raise DimensionError(f"prototypes have dimension {dictionary.d}, W_g expects {d}")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _logits(h, dictionary, params, kind, scale_dim):
    """Attention logits and the intermediates the backward pass needs."""
    z = dictionary.prototypes
    q = h @ params.W_q.T
    k = z @ params.W_k.T
    if kind is AttentionKind.DOT_PRODUCT:
        denom = np.sqrt(scale_dim if scale_dim is not None else dictionary.d)
        return q @ k.T / denom, {"q": q, "k": k, "denom": denom}
    if kind is AttentionKind.ADDITIVE:
        t = np.tanh(q[:, None, :] + k[None, :, :])
        return t @ params.W_t, {"q": q, "k": k, "t": t}
    return np.zeros((h.shape[0], dictionary.n)), {}


def attention_weights(h, dictionary: ConfounderDictionary, params: CcimParams,
                      kind: AttentionKind | str = AttentionKind.DOT_PRODUCT,
                      scale_dim: int | None = None) -> np.ndarray:
    """Per-prototype weights, normalised over the prototype axis.

    ``uniform`` returns ``1/n`` everywhere; ``none`` returns all ones so
    that the expectation collapses to ``sum_i z_i P(z_i)``. The dot-product
    logits are divided by ``sqrt(scale_dim)``, defaulting to the prototype
    dimension.
    """
    kind = AttentionKind(kind)
    hb, single = _batch(h)
    _check_shapes(hb, dictionary, params)
    lam = _lambda(hb, dictionary, params, kind, scale_dim)[0]
    return lam[0] if single else lam


def _lambda(hb, dictionary, params, kind, scale_dim):
    n = dictionary.n
    if kind is AttentionKind.UNIFORM:
        return np.full((hb.shape[0], n), 1.0 / n), None, {}
    if kind is AttentionKind.NONE:
        return np.ones((hb.shape[0], n)), None, {}
    logits, inter = _logits(hb, dictionary, params, kind, scale_dim)
    return softmax(logits, axis=1), logits, inter


def _weighted_prototypes(dictionary: ConfounderDictionary, use_prior: bool) -> np.ndarray:
    if use_prior:
        return dictionary.prototypes * dictionary.priors[:, None]
    return dictionary.prototypes


def intervention_expectation(lam, dictionary: ConfounderDictionary, use_prior: bool = True) -> np.ndarray:
    """``sum_i lam_i z_i P(z_i)``, or ``sum_i lam_i z_i`` without priors."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != dictionary.n:
        raise DimensionError(f"got {lam.shape[-1]} weights for {dictionary.n} prototypes")
    return lam @ _weighted_prototypes(dictionary, use_prior)


@dataclass
class CcimCache:
    h: np.ndarray
    lam: np.ndarray
    logits: np.ndarray | None
    expectation: np.ndarray
    inter: dict
    kind: AttentionKind
    use_prior: bool
    scale_dim: int | None
    param_dims: tuple
    dict_shape: tuple
    single: bool


def ccim_forward(h, dictionary: ConfounderDictionary, params: CcimParams,
                 kind: AttentionKind | str = AttentionKind.DOT_PRODUCT, use_prior: bool = True,
                 scale_dim: int | None = None) -> tuple[np.ndarray, CcimCache]:
    kind = AttentionKind(kind)
    hb, single = _batch(h)
    _check_shapes(hb, dictionary, params)
    lam, logits, inter = _lambda(hb, dictionary, params, kind, scale_dim)
    e = intervention_expectation(lam, dictionary, use_prior)
    out = hb @ params.W_h.T + e @ params.W_g.T
    cache = CcimCache(h=hb, lam=lam, logits=logits, expectation=e, inter=inter, kind=kind,
                      use_prior=use_prior, scale_dim=scale_dim, param_dims=params.dims,
                      dict_shape=dictionary.prototypes.shape, single=single)
    return (out[0] if single else out), cache


def ccim_backward(cache: CcimCache, dictionary: ConfounderDictionary, params: CcimParams,
                  kind: AttentionKind | str, use_prior: bool, grad_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(out * grad_out)`` for every parameter and for ``h``.

    Returns a dict keyed by ``W_h, W_g, W_q, W_k, W_t, h``. Gradients are
    summed over the batch; ``h`` keeps the batch layout of the forward call.
    """
    kind = AttentionKind(kind)
    if (cache.kind is not kind or cache.use_prior != use_prior
            or cache.param_dims != params.dims or cache.dict_shape != dictionary.prototypes.shape):
        raise ContractError("cache was produced by a forward call with different settings")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != (cache.h.shape[0], params.W_h.shape[0]):
        raise ContractError(f"grad_out shape {g.shape} does not match the cached forward pass")

    h = cache.h
    grads = {
        "W_h": g.T @ h,
        "W_g": g.T @ cache.expectation,
        "W_q": np.zeros_like(params.W_q),
        "W_k": np.zeros_like(params.W_k),
        "W_t": np.zeros_like(params.W_t),
    }
    dh = g @ params.W_h

    if kind in (AttentionKind.DOT_PRODUCT, AttentionKind.ADDITIVE):
        z = dictionary.prototypes
        de = g @ params.W_g
        dlam = de @ _weighted_prototypes(dictionary, use_prior).T
        lam = cache.lam
        dlogits = lam * (dlam - np.sum(dlam * lam, axis=1, keepdims=True))
        inter = cache.inter
        if kind is AttentionKind.DOT_PRODUCT:
            dq = dlogits @ inter["k"] / inter["denom"]
            dk = dlogits.T @ inter["q"] / inter["denom"]
        else:
            t = inter["t"]
            grads["W_t"] = np.einsum("bi,bij->j", dlogits, t)
            dpre = dlogits[:, :, None] * params.W_t[None, None, :] * (1.0 - t**2)
            dq = dpre.sum(axis=1)
            dk = dpre.sum(axis=0)
        grads["W_q"] = dq.T @ h
        grads["W_k"] = dk.T @ z
        dh = dh + dq @ params.W_q

    grads["h"] = dh[0] if cache.single else dh
    return grads


def params_to_doc(params: CcimParams) -> dict:
    d, d_h, d_m, d_n = params.dims
    return {
        "version": PARAMS_VERSION,
        "dims": {"d": d, "d_h": d_h, "d_m": d_m, "d_n": d_n},
        **{name: getattr(params, name).tolist() for name in PARAM_NAMES},
    }


def params_from_doc(doc: dict) -> CcimParams:
    if doc.get("version") != PARAMS_VERSION:
        raise VersionError(f"unsupported CCIM parameter version {doc.get('version')!r}")
    try:
        params = CcimParams(**{name: np.array(doc[name], dtype=np.float64) for name in PARAM_NAMES})
    except KeyError as exc:
        raise ValidationError(f"parameter file is missing {exc}") from exc
    dims = doc.get("dims", {})
    if dims and tuple(dims[k] for k in ("d", "d_h", "d_m", "d_n")) != params.dims:
        raise ValidationError("declared dims disagree with matrix shapes")
    params.check()
    return params


def params_to_json(params: CcimParams) -> str:
    return json.dumps(params_to_doc(params))


def params_from_json(text: str) -> CcimParams:
    return params_from_doc(json.loads(text))
