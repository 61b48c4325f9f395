"""Synthetic context-aware emotion data with a tunable context bias.

Each sample has a subject vector carrying a noisy copy of its label's
mean, and a context vector carrying its context cluster's mean. In the
training split every context cluster ``k`` is tied to a designated
emotion ``k mod E`` with strength ``rho``; the test split draws labels
independently of context, so a model that leans on the context shortcut
loses accuracy there.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParameterError, ValidationError

FINGERPRINT_VERSION = "ccim-data/1"


@dataclass(frozen=True)
class GeneratorConfig:
    n_contexts: int = 8
    n_emotions: int = 4
    d_s: int = 16
    d_c: int = 16
    rho: float = 0.95
    sigma_s: float = 1.0
    sigma_c: float = 0.3
    subject_signal: float = 1.0
    n_train: int = 2000
    n_test: int = 2000
    leak_alpha: float = 0.0
    min_separation: float = 0.5
    max_attempts: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_contexts", "n_emotions", "d_s", "d_c", "n_train", "n_test", "max_attempts"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho!r}")
        for name in ("sigma_s", "sigma_c", "subject_signal", "leak_alpha", "min_separation"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be a finite value >= 0, got {value!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown generator field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def config_fingerprint(config: GeneratorConfig, seed: int) -> str:
    payload = json.dumps({"config": config.to_dict(), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Dataset:
    """Column-oriented samples of one split.

    ``subjects`` is ``(m, d_s)``, ``contexts`` is ``(m, d_c)`` and holds the
    unmasked context view (background plus any subject leakage).
    ``context_ids`` are ground-truth strata, never shown to models.
    """

    subjects: np.ndarray
    contexts: np.ndarray
    labels: np.ndarray
    context_ids: np.ndarray
    split: str
    config: GeneratorConfig
    seed: int
    fingerprint: str

    def __post_init__(self):
        m = self.labels.shape[0]
        if m < 1:
            raise ValidationError("dataset is empty")
        if self.subjects.shape[0] != m or self.contexts.shape[0] != m or self.context_ids.shape[0] != m:
            raise ValidationError("dataset columns have different lengths")
        if self.split not in ("train", "test"):
            raise ValidationError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_emotions(self) -> int:
        return self.config.n_emotions


def subject_padding(subjects: np.ndarray, d_c: int) -> np.ndarray:
    """Zero-pad or truncate subject vectors to the context width."""
    m, d_s = subjects.shape
    out = np.zeros((m, d_c))
    k = min(d_s, d_c)
    out[:, :k] = subjects[:, :k]
    return out


def _separated_unit_vectors(rng: np.random.Generator, count: int, dim: int,
                            min_sep: float, max_attempts: int, what: str) -> np.ndarray:
    out: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(max_attempts):
            v = rng.normal(size=dim)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                continue
            v = v / norm
            if all(np.linalg.norm(v - u) >= min_sep for u in out):
                out.append(v)
                break
        else:
            raise GenerationError(
                f"could not place {count} {what} means {min_sep} apart in {dim} dimensions "
                f"within {max_attempts} attempts")
    return np.array(out)


def _biased_labels(rng, context_ids, config: GeneratorConfig) -> np.ndarray:
    e_count = config.n_emotions
    designated = context_ids % e_count
    p_keep = config.rho + (1.0 - config.rho) / e_count
    keep = rng.random(context_ids.shape[0]) < p_keep
    if e_count == 1:
        return designated
    # uniform over the other E-1 emotions
    offset = rng.integers(1, e_count, size=context_ids.shape[0])
    return np.where(keep, designated, (designated + offset) % e_count)


def generate(config: GeneratorConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Draw the train (biased) and test (decorrelated) splits for one seed."""
    config.validate()
    root = np.random.SeedSequence(seed)
    means_ss, train_ss, test_ss = root.spawn(3)
    mrng = np.random.default_rng(means_ss)
    ctx_means = _separated_unit_vectors(mrng, config.n_contexts, config.d_c,
                                        config.min_separation, config.max_attempts, "context")
    emo_means = _separated_unit_vectors(mrng, config.n_emotions, config.d_s,
                                        config.min_separation, config.max_attempts, "emotion")
    fp = config_fingerprint(config, seed)

    def draw(ss, m, split):
        rng = np.random.default_rng(ss)
        ctx = rng.integers(0, config.n_contexts, size=m)
        if split == "train":
            labels = _biased_labels(rng, ctx, config)
        else:
            labels = rng.integers(0, config.n_emotions, size=m)
        subj = config.subject_signal * emo_means[labels] + rng.normal(0.0, config.sigma_s, size=(m, config.d_s))
        background = ctx_means[ctx] + rng.normal(0.0, config.sigma_c, size=(m, config.d_c))
        contexts = background + config.leak_alpha * subject_padding(subj, config.d_c)
        return Dataset(subjects=subj, contexts=contexts, labels=labels.astype(np.int64),
                       context_ids=ctx.astype(np.int64), split=split, config=config, seed=seed,
                       fingerprint=fp)

    return draw(train_ss, config.n_train, "train"), draw(test_ss, config.n_test, "test")


def context_features(data: Dataset, mask_subject: bool = True) -> np.ndarray:
    """Context rows for dictionary building.

    With ``mask_subject`` the subject leakage is subtracted, leaving pure
    background context; without it the rows are the raw context view.
    """
    if not mask_subject or data.config.leak_alpha == 0.0:
        return data.contexts.copy()
    return data.contexts - data.config.leak_alpha * subject_padding(data.subjects, data.config.d_c)


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p) variable, with 0 log 0 = 0."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


@dataclass
class BiasAuditReport:
    emotion: int
    context_ids: list[int]
    counts: list[int]
    positives: list[int]
    p: list[float]
    per_context_entropy: list[float]
    zero_entropy_fraction: float

    @property
    def co_occurrence(self) -> np.ndarray:
        """``(K_nonempty, 2)`` counts of positive / negative samples per context."""
        pos = np.array(self.positives)
        return np.stack([pos, np.array(self.counts) - pos], axis=1)

    def summary(self) -> dict:
        return {
            "emotion": self.emotion,
            "n_contexts": len(self.context_ids),
            "zero_entropy_fraction": self.zero_entropy_fraction,
            "mean_entropy": float(np.mean(self.per_context_entropy)),
        }


def bias_audit(data: Dataset, emotion: int) -> BiasAuditReport:
    """Normalised conditional entropy of one emotion (one-vs-rest) per context."""
    if not 0 <= emotion < data.n_emotions:
        raise ParameterError(f"emotion must lie in [0, {data.n_emotions}), got {emotion}")
    ids, counts, positives, ps, ents = [], [], [], [], []
    for k in range(data.config.n_contexts):
        member = data.context_ids == k
        count = int(member.sum())
        if count == 0:
            continue
        pos = int(np.sum(data.labels[member] == emotion))
        p = pos / count
        ids.append(k)
        counts.append(count)
        positives.append(pos)
        ps.append(p)
        ents.append(binary_entropy(p))
    zero = sum(1 for e in ents if e == 0.0)
    return BiasAuditReport(emotion=emotion, context_ids=ids, counts=counts, positives=positives,
                           p=ps, per_context_entropy=ents, zero_entropy_fraction=zero / len(ids))


def mutual_information_bits(a, b) -> float:
    """Plug-in estimate of I(a; b) in bits from paired integer samples."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    joint = table / table.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])))


# ---------------------------------------------------------------- file I/O

def _header(config: GeneratorConfig) -> list[str]:
    return (["split", "label", "context_id"] + [f"s_{i}" for i in range(config.d_s)]
            + [f"c_{i}" for i in range(config.d_c)])


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(data.config))
    for i in range(len(data)):
        writer.writerow([data.split, int(data.labels[i]), int(data.context_ids[i])]
                        + [repr(float(v)) for v in data.subjects[i]]
                        + [repr(float(v)) for v in data.contexts[i]])
    return buf.getvalue()


def fingerprint_doc(config: GeneratorConfig, seed: int) -> dict:
    return {
        "version": FINGERPRINT_VERSION,
        "seed": seed,
        "config": config.to_dict(),
        "fingerprint": config_fingerprint(config, seed),
    }


def write_dataset(train: Dataset, test: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.csv").write_text(dataset_to_csv(train))
    (out / "test.csv").write_text(dataset_to_csv(test))
    doc = fingerprint_doc(train.config, train.seed)
    (out / "fingerprint.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_fingerprint(data_dir) -> tuple[GeneratorConfig, int, str]:
    path = Path(data_dir) / "fingerprint.json"
    if not path.is_file():
        raise ValidationError(f"missing dataset fingerprint: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != FINGERPRINT_VERSION:
        raise ValidationError(f"unsupported dataset fingerprint version {doc.get('version')!r}")
    config = GeneratorConfig.from_dict(doc["config"])
    seed = int(doc["seed"])
    if config_fingerprint(config, seed) != doc.get("fingerprint"):
        raise ValidationError("dataset fingerprint does not match its stored config")
    return config, seed, doc["fingerprint"]


def read_split(path, config: GeneratorConfig, seed: int, fingerprint: str) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _header(config):
            raise ValidationError(f"{path}: header does not match the dataset config")
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no samples")
    splits = {r[0] for r in rows}
    if len(splits) != 1:
        raise ValidationError(f"{path}: mixed splits {sorted(splits)}")
    arr = np.array([[float(v) for v in r[1:]] for r in rows])
    d_s = config.d_s
    return Dataset(subjects=arr[:, 2:2 + d_s], contexts=arr[:, 2 + d_s:],
                   labels=arr[:, 0].astype(np.int64), context_ids=arr[:, 1].astype(np.int64),
                   split=splits.pop(), config=config, seed=seed, fingerprint=fingerprint)


def read_dataset(data_dir) -> tuple[Dataset, Dataset]:
    config, seed, fp = read_fingerprint(data_dir)
    root = Path(data_dir)
    return (read_split(root / "train.csv", config, seed, fp),
            read_split(root / "test.csv", config, seed, fp))


def audit_to_csv(report: BiasAuditReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["context_id", "count", "p", "entropy"])
    for k, c, p, e in zip(report.context_ids, report.counts, report.p, report.per_context_entropy):
        writer.writerow([k, c, repr(p), repr(e)])
    return buf.getvalue()
