"""Two-branch classifier, optional CCIM insertion, training and ablations.

The subject and context branches are bias-free one-hidden-layer tanh
encoders whose outputs are concatenated into the joint feature ``h``.
The baseline classifies ``h`` directly; the deconfounded model routes
``h`` through the CCIM layer and classifies its ``d_m``-dimensional
output. All gradients are written out by hand and every run is a pure
function of (config, data, dictionary, seed).
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import ccim as ccim_layer
from .ccim import AttentionKind, CcimDims, CcimParams
from .confounder_dictionary import (
    ConfounderDictionary,
    build_dictionary,
    random_dictionary,
)
from .errors import ConfigError, DimensionError, ValidationError, VersionError
from .metrics import MetricsReport, classification_report
from .synthetic_caer import Dataset, context_features

CHECKPOINT_VERSION = "ccim-model/1"

# joint-feature widths of the four host models the layer was plugged into
D_H_PRESETS = {"emot-net": 256, "gcn-cnn": 1024, "caer-net": 128, "emoticon": 78}


@dataclass
class ModelConfig:
    enc_hidden: int = 32
    s_out: int = 16
    c_out: int = 16
    use_ccim: bool = False
    d_m: int = 128
    d_n: int = 256
    attention: str = "dot_product"
    use_prior: bool = True
    scale_dim: int | None = None
    ccim_init_scale: float = 0.1
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("enc_hidden", "s_out", "c_out", "d_m", "d_n", "batch"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 0:
            raise ConfigError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if not self.ccim_init_scale > 0:
            raise ConfigError("ccim_init_scale must be > 0")
        try:
            AttentionKind(self.attention)
        except ValueError as exc:
            raise ConfigError(f"unknown attention kind {self.attention!r}") from exc

    @property
    def d_h(self) -> int:
        return self.s_out + self.c_out

    @property
    def classifier_in(self) -> int:
        return self.d_m if self.use_ccim else self.d_h

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ccim: CcimParams | None
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    loss_curve: list[float] = field(default_factory=list)
    dictionary_fingerprint: str | None = None

    def all_params(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        if self.ccim is not None:
            out.update({f"ccim.{k}": v for k, v in self.ccim.as_dict().items()})
        return out


# ------------------------------------------------------------------ pieces

def encode(W1: np.ndarray, W2: np.ndarray, x) -> np.ndarray:
    """``tanh(W2 tanh(W1 x))`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W1.shape[1] or W2.shape[1] != W1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not fit encoder {W1.shape} -> {W2.shape}")
    return np.tanh(np.tanh(x @ W1.T) @ W2.T)


def _encode_cached(W1, W2, x):
    u = np.tanh(x @ W1.T)
    return np.tanh(u @ W2.T), u


def encode_backward(W1, W2, x, u, out, grad_out):
    """Gradients of ``sum(encode(x) * grad_out)`` with respect to W1, W2 and x."""
    da2 = grad_out * (1.0 - out**2)
    dW2 = da2.T @ u
    da1 = (da2 @ W2) * (1.0 - u**2)
    return da1.T @ x, dW2, da1 @ W1


def fuse(s, c) -> np.ndarray:
    return np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(c, dtype=np.float64)], axis=-1)


def classify(W: np.ndarray, feat) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-1] != W.shape[1]:
        raise DimensionError(f"classifier expects width {W.shape[1]}, got {feat.shape[-1]}")
    return feat @ W.T


def loss_ce(logits, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n_cls = logits.shape[1]
    if y.shape[0] != logits.shape[0]:
        raise DimensionError("one label per row of logits is required")
    if np.any(y < 0) or np.any(y >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(y.shape[0])
    loss = float(np.mean(logsum - shifted[rows, y]))
    probs = np.exp(shifted - logsum[:, None])
    probs[rows, y] -= 1.0
    grad = probs / y.shape[0]
    return loss, (grad[0] if single else grad)


# ----------------------------------------------------------------- model

def _component_rng(seed: int, tag: int) -> np.random.Generator:
    # one stream per component so encoders initialise identically across variants
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def init_state(config: ModelConfig, d_s: int, d_c: int, n_classes: int,
               dictionary: ConfounderDictionary | None = None) -> TrainState:
    if config.use_ccim and dictionary is None:
        raise ConfigError("use_ccim requires a confounder dictionary")
    seed = config.seed

    def glorot(rng, rows, cols):
        return rng.normal(0.0, np.sqrt(1.0 / cols), size=(rows, cols))

    params = {
        "fs_W1": glorot(_component_rng(seed, 1), config.enc_hidden, d_s),
        "fs_W2": glorot(_component_rng(seed, 2), config.s_out, config.enc_hidden),
        "fc_W1": glorot(_component_rng(seed, 3), config.enc_hidden, d_c),
        "fc_W2": glorot(_component_rng(seed, 4), config.c_out, config.enc_hidden),
        "cls": glorot(_component_rng(seed, 5), n_classes, config.classifier_in),
    }
    ccim = None
    if config.use_ccim:
        dims = CcimDims(d=dictionary.d, d_h=config.d_h, d_m=config.d_m, d_n=config.d_n, n=dictionary.n)
        ccim = ccim_layer.init_params(dims, int(np.random.SeedSequence([seed, 6]).generate_state(1)[0]),
                                      config.ccim_init_scale)
    state = TrainState(config=config, params=params, ccim=ccim, velocity={},
                       dictionary_fingerprint=dictionary.fingerprint() if dictionary is not None else None)
    state.velocity = {k: np.zeros_like(v) for k, v in state.all_params().items()}
    return state


def _forward(state: TrainState, subjects, contexts, dictionary):
    p = state.params
    s, us = _encode_cached(p["fs_W1"], p["fs_W2"], subjects)
    c, uc = _encode_cached(p["fc_W1"], p["fc_W2"], contexts)
    h = fuse(s, c)
    cache = None
    feat = h
    if state.ccim is not None:
        cfg = state.config
        feat, cache = ccim_layer.ccim_forward(h, dictionary, state.ccim, cfg.attention,
                                              cfg.use_prior, cfg.scale_dim)
    logits = classify(p["cls"], feat)
    return logits, {"s": s, "us": us, "c": c, "uc": uc, "h": h, "feat": feat, "ccim": cache}


def logits_for(state: TrainState, subjects, contexts, dictionary=None) -> np.ndarray:
    _check_dictionary(state, dictionary)
    return _forward(state, np.asarray(subjects, float), np.asarray(contexts, float), dictionary)[0]


def joint_features(state: TrainState, subjects, contexts, dictionary=None) -> tuple[np.ndarray, np.ndarray]:
    """Fused feature ``h`` and the classifier input (CCIM output or ``h``)."""
    _check_dictionary(state, dictionary)
    _, aux = _forward(state, np.asarray(subjects, float), np.asarray(contexts, float), dictionary)
    return aux["h"], aux["feat"]


def loss_and_grads(state: TrainState, subjects, contexts, labels, dictionary=None):
    logits, aux = _forward(state, subjects, contexts, dictionary)
    loss, dlogits = loss_ce(logits, labels)
    p = state.params
    grads = {"cls": dlogits.T @ aux["feat"]}
    dfeat = dlogits @ p["cls"]
    if state.ccim is not None:
        cfg = state.config
        cg = ccim_layer.ccim_backward(aux["ccim"], dictionary, state.ccim, cfg.attention,
                                      cfg.use_prior, dfeat)
        dh = cg.pop("h")
        grads.update({f"ccim.{k}": v for k, v in cg.items()})
    else:
        dh = dfeat
    s_out = state.config.s_out
    g1, g2, _ = encode_backward(p["fs_W1"], p["fs_W2"], subjects, aux["us"], aux["s"], dh[:, :s_out])
    grads["fs_W1"], grads["fs_W2"] = g1, g2
    g1, g2, _ = encode_backward(p["fc_W1"], p["fc_W2"], contexts, aux["uc"], aux["c"], dh[:, s_out:])
    grads["fc_W1"], grads["fc_W2"] = g1, g2
    return loss, grads


def _sgd_step(state: TrainState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    for name, g in grads.items():
        v = state.velocity[name]
        v *= cfg.momentum
        v -= cfg.lr * g
        if name.startswith("ccim."):
            getattr(state.ccim, name[5:])[...] += v
        else:
            state.params[name] += v


def _check_dictionary(state: TrainState, dictionary) -> None:
    if state.ccim is None:
        return
    if dictionary is None:
        raise ConfigError("this model uses CCIM and needs its confounder dictionary")
    d, _, _, _ = state.ccim.dims
    if dictionary.d != d:
        raise DimensionError(f"dictionary dimension {dictionary.d} does not match the model's {d}")


def train(config: ModelConfig, data: Dataset, dictionary: ConfounderDictionary | None = None,
          state: TrainState | None = None) -> TrainState:
    """Minibatch SGD with momentum over ``config.epochs`` epochs.

    The loss curve records the mean minibatch loss of every epoch. The
    dictionary, when present, stays frozen.
    """
    if config.use_ccim and dictionary is None:
        raise ConfigError("use_ccim requires a confounder dictionary")
    if state is None:
        state = init_state(config, data.subjects.shape[1], data.contexts.shape[1],
                           data.n_emotions, dictionary)
    _check_dictionary(state, dictionary)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    m = len(data)
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(m)
        losses = []
        for start in range(0, m, config.batch):
            idx = order[start:start + config.batch]
            loss, grads = loss_and_grads(state, data.subjects[idx], data.contexts[idx],
                                         data.labels[idx], dictionary)
            _sgd_step(state, grads)
            losses.append(loss)
        state.epoch += 1
        state.loss_curve.append(float(np.mean(losses)))
    return state


def predict_proba(state: TrainState, data: Dataset, dictionary=None) -> np.ndarray:
    logits = logits_for(state, data.subjects, data.contexts, dictionary)
    return ccim_layer.softmax(logits, axis=1)


def evaluate(state: TrainState, data: Dataset, dictionary=None) -> MetricsReport:
    scores = predict_proba(state, data, dictionary)
    return classification_report(scores, data.labels, data.n_emotions, state.loss_curve)


# ------------------------------------------------------------ checkpoints

def state_to_doc(state: TrainState) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "params": {k: v.tolist() for k, v in state.params.items()},
        "ccim": ccim_layer.params_to_doc(state.ccim) if state.ccim is not None else None,
        "velocity": {k: v.tolist() for k, v in state.velocity.items()},
        "loss_curve": state.loss_curve,
        "dictionary_fingerprint": state.dictionary_fingerprint,
    }


def state_from_doc(doc: dict) -> TrainState:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        params = {k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()}
        ccim = ccim_layer.params_from_doc(doc["ccim"]) if doc["ccim"] is not None else None
        velocity = {k: np.array(v, dtype=np.float64) for k, v in doc["velocity"].items()}
    except KeyError as exc:
        raise ValidationError(f"checkpoint is missing {exc}") from exc
    if config.use_ccim != (ccim is not None):
        raise ValidationError("checkpoint CCIM parameters disagree with its config")
    return TrainState(config=config, params=params, ccim=ccim, velocity=velocity,
                      epoch=int(doc["epoch"]), loss_curve=list(doc["loss_curve"]),
                      dictionary_fingerprint=doc.get("dictionary_fingerprint"))


def state_to_json(state: TrainState) -> str:
    return json.dumps(state_to_doc(state))


def state_from_json(text: str) -> TrainState:
    return state_from_doc(json.loads(text))


# --------------------------------------------------------------- ablations

VARIANTS = (
    "baseline", "ccim_full_dot", "ccim_full_additive", "random_Z",
    "uniform_lambda", "no_prior", "no_masking",
)


@dataclass(frozen=True)
class VariantRun:
    variant: str
    n: int
    seed: int


@dataclass
class AblationRow:
    variant: str
    n: int
    seed: int
    report: MetricsReport


@dataclass
class AblationResult:
    rows: list[AblationRow]
    warnings: list[str]


def parse_variants(variants) -> tuple[list[tuple[str, int | None]], list[str]]:
    """Normalise variant ids into ``(variant, n_override)`` pairs.

    ``n_sweep`` entries may be given as ``("n_sweep", [2, 4])`` or as the
    string ``"n_sweep:2,4"``; each size expands to a full dot-product CCIM
    run with that dictionary size. Duplicates are dropped with a warning.
    """
    out: list[tuple[str, int | None]] = []
    warnings: list[str] = []
    for v in variants:
        if isinstance(v, str) and v.startswith("n_sweep"):
            _, _, tail = v.partition(":")
            sizes = [int(t) for t in tail.split(",") if t.strip()]
            items = [("n_sweep", n) for n in sizes]
        elif isinstance(v, (tuple, list)) and len(v) == 2 and v[0] == "n_sweep":
            items = [("n_sweep", int(n)) for n in v[1]]
        elif v in VARIANTS:
            items = [(v, None)]
        else:
            raise ConfigError(f"unknown variant {v!r}; valid ids: {', '.join(VARIANTS)}, n_sweep:<list>")
        for item in items:
            if item in out:
                msg = f"duplicate variant {item[0]}" + (f" N={item[1]}" if item[1] is not None else "")
                warnings.append(msg)
            else:
                out.append(item)
    return out, warnings


def variant_setup(variant: str, base: ModelConfig, train_data: Dataset, n: int, seed: int,
                  d_p: int | None = None) -> tuple[ModelConfig, ConfounderDictionary | None]:
    """Model config and dictionary for one ablation variant."""
    cfg = replace(base, seed=seed)
    if variant == "baseline":
        return replace(cfg, use_ccim=False), None
    cfg = replace(cfg, use_ccim=True, attention="dot_product", use_prior=True)
    masked = context_features(train_data, mask_subject=True)
    if variant in ("ccim_full_dot", "n_sweep"):
        return cfg, build_dictionary(masked, n, d_p, seed)
    if variant == "ccim_full_additive":
        return replace(cfg, attention="additive"), build_dictionary(masked, n, d_p, seed)
    if variant == "random_Z":
        clustered = build_dictionary(masked, n, d_p, seed)
        scale = float(np.sqrt(np.mean(clustered.prototypes**2)))
        return cfg, random_dictionary(n, masked.shape[1], seed, scale)
    if variant == "uniform_lambda":
        return replace(cfg, attention="uniform"), build_dictionary(masked, n, d_p, seed)
    if variant == "no_prior":
        return replace(cfg, use_prior=False), build_dictionary(masked, n, d_p, seed)
    if variant == "no_masking":
        unmasked = context_features(train_data, mask_subject=False)
        return cfg, build_dictionary(unmasked, n, d_p, seed)
    raise ConfigError(f"unknown variant {variant!r}")


def run_variant(base: ModelConfig, train_data: Dataset, test_data: Dataset,
                run: VariantRun, d_p: int | None = None) -> AblationRow:
    cfg, dictionary = variant_setup(run.variant, base, train_data, run.n, run.seed, d_p)
    state = train(cfg, train_data, dictionary)
    return AblationRow(run.variant, run.n, run.seed, evaluate(state, test_data, dictionary))


def _run_variant_args(args):
    return run_variant(*args)


def run_ablation(base_config: ModelConfig, train_data: Dataset, test_data: Dataset,
                 variants, seeds=(0,), n: int = 8, d_p: int | None = None,
                 jobs: int = 1) -> AblationResult:
    """Train every variant for every seed on the same data.

    Variants of one seed share encoder and classifier initialisation
    streams. Rows are returned sorted by (seed, variant order, N)
    regardless of ``jobs``.
    """
    parsed, warnings = parse_variants(variants)
    runs = []
    for seed in seeds:
        for variant, n_override in parsed:
            runs.append(VariantRun(variant, n_override if n_override is not None else n, int(seed)))
    args = [(base_config, train_data, test_data, r, d_p) for r in runs]
    if jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_variant_args, args))
    else:
        rows = [_run_variant_args(a) for a in args]
    return AblationResult(rows=rows, warnings=warnings)
