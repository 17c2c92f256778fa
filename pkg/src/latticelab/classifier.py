"""Lightweight text classifier used as a stand-in evaluation head.

Features are hashed word and character n-gram counts, reweighted by
inverse document frequency fitted on the training split only, then
L2-normalized per document.  The model is logistic regression trained by
deterministic full-batch gradient descent with step halving, so identical
inputs and settings always give identical weights.

Hashing uses crc32, which is stable across processes and platforms
(unlike the builtin ``hash``).
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse


class TrainingError(ValueError):
    """Raised when a dataset cannot be trained on."""


class ModelFormatError(ValueError):
    """Raised when a saved model fails validation on load."""


@dataclass(frozen=True)
class FeatureSpec:
    """Hashed n-gram feature configuration.

    Character n-grams slide over the raw text (spaces included, no
    padding); word n-grams slide over whitespace tokens.  ``n_features``
    must be a power of two so the hash can be masked instead of reduced
    modulo.
    """

    word_ngram_orders: tuple[int, ...] = (1, 2)
    char_ngram_orders: tuple[int, ...] = (3, 4, 5)
    n_features: int = 2**18

    def __post_init__(self):
        if self.n_features < 2 or self.n_features & (self.n_features - 1):
            raise ValueError("n_features must be a power of two, at least 2")
        for order in (*self.word_ngram_orders, *self.char_ngram_orders):
            if order < 1:
                raise ValueError("n-gram orders must be positive")


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 1.0
    max_iterations: int = 200
    l2_penalty: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be non-negative")


def _bucket(key: str, n_features: int) -> int:
    return zlib.crc32(key.encode("utf-8")) & (n_features - 1)


def featurize(text: str, spec: FeatureSpec) -> dict[int, float]:
    """Hashed raw term counts for one document."""
    counts: dict[int, float] = {}
    words = text.split()
    for order in spec.word_ngram_orders:
        for i in range(len(words) - order + 1):
            key = f"w{order}:{' '.join(words[i : i + order])}"
            idx = _bucket(key, spec.n_features)
            counts[idx] = counts.get(idx, 0.0) + 1.0
    for order in spec.char_ngram_orders:
        for i in range(len(text) - order + 1):
            key = f"c{order}:{text[i : i + order]}"
            idx = _bucket(key, spec.n_features)
            counts[idx] = counts.get(idx, 0.0) + 1.0
    return counts


def _count_matrix(texts: Sequence[str], spec: FeatureSpec) -> sparse.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for text in texts:
        counts = featurize(text, spec)
        for idx in sorted(counts):
            indices.append(idx)
            data.append(counts[idx])
        indptr.append(len(indices))
    return sparse.csr_matrix(
        (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(texts), spec.n_features),
    )


def _fit_idf(counts: sparse.csr_matrix) -> np.ndarray:
    n_docs = counts.shape[0]
    df = np.asarray((counts > 0).sum(axis=0)).ravel()
    return np.log((1.0 + n_docs) / (1.0 + df)) + 1.0


def _apply_idf(counts: sparse.csr_matrix, idf: np.ndarray) -> sparse.csr_matrix:
    weighted = counts.multiply(idf).tocsr()
    norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    inv = sparse.diags(1.0 / norms)
    return (inv @ weighted).tocsr()


def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    features: sparse.csr_matrix | np.ndarray,
    labels: np.ndarray,
    l2_penalty: float,
) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss with an L2 penalty on the weights (not the bias).

    Returns (loss, gradient wrt weights, gradient wrt bias).
    """
    n = labels.shape[0]
    z = np.asarray(features @ weights).ravel() + bias
    # log(1 + e^z) - y z, computed stably for large |z|
    loss = float(np.mean(np.logaddexp(0.0, z) - labels * z))
    loss += 0.5 * l2_penalty * float(weights @ weights)
    residual = _sigmoid(z) - labels
    grad_w = np.asarray(features.T @ residual).ravel() / n + l2_penalty * weights
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


@dataclass
class ProxyModel:
    """A trained classifier: feature config, idf vector, and weights."""

    spec: FeatureSpec
    settings: TrainSettings
    weights: np.ndarray = field(repr=False)
    bias: float
    idf: np.ndarray = field(repr=False)
    seed: int
    final_loss: float

    def __post_init__(self):
        if self.weights.shape != (self.spec.n_features,):
            raise ValueError("weights shape must match n_features")
        if self.idf.shape != (self.spec.n_features,):
            raise ValueError("idf shape must match n_features")


def train(
    dataset: Sequence[tuple[str, int]],
    spec: FeatureSpec | None = None,
    settings: TrainSettings | None = None,
    seed: int = 0,
) -> ProxyModel:
    """Fit the classifier on (text, label) pairs with labels in {0, 1}.

    Training is deterministic: zero-initialized weights, full-batch
    descent, and a step that halves whenever a candidate update would
    increase the loss.  The seed is recorded for provenance; the optimizer
    itself draws no randomness.
    """
    spec = spec or FeatureSpec()
    settings = settings or TrainSettings()
    if not dataset:
        raise TrainingError("dataset is empty")
    texts = [t for t, _ in dataset]
    labels = np.array([label for _, label in dataset], dtype=np.float64)
    if not set(np.unique(labels)) <= {0.0, 1.0}:
        raise TrainingError("labels must be 0 or 1")
    if len(set(labels.tolist())) < 2:
        raise TrainingError("training needs both classes present")

    counts = _count_matrix(texts, spec)
    idf = _fit_idf(counts)
    x = _apply_idf(counts, idf)

    weights = np.zeros(spec.n_features)
    bias = 0.0
    step = settings.learning_rate
    loss, grad_w, grad_b = loss_and_gradient(weights, bias, x, labels, settings.l2_penalty)
    for _ in range(settings.max_iterations):
        while True:
            cand_w = weights - step * grad_w
            cand_b = bias - step * grad_b
            cand_loss, cand_gw, cand_gb = loss_and_gradient(
                cand_w, cand_b, x, labels, settings.l2_penalty
            )
            if cand_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        if step < 1e-12 or cand_loss > loss:
            break
        weights, bias = cand_w, cand_b
        loss, grad_w, grad_b = cand_loss, cand_gw, cand_gb

    return ProxyModel(
        spec=spec,
        settings=settings,
        weights=weights,
        bias=bias,
        idf=idf,
        seed=seed,
        final_loss=loss,
    )


def predict_proba(model: ProxyModel, text: str | Sequence[str]) -> float | np.ndarray:
    """Probability of the positive class for one text or a batch."""
    single = isinstance(text, str)
    texts = [text] if single else list(text)
    x = _apply_idf(_count_matrix(texts, model.spec), model.idf)
    z = np.asarray(x @ model.weights).ravel() + model.bias
    probs = _sigmoid(z)
    return float(probs[0]) if single else probs


def _content_hash(model: ProxyModel, meta: dict) -> str:
    digest = hashlib.sha256()
    digest.update(model.weights.tobytes())
    digest.update(np.float64(model.bias).tobytes())
    digest.update(model.idf.tobytes())
    digest.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


MODEL_FORMAT_VERSION = 1


def save_model(model: ProxyModel, path: str | Path) -> None:
    """Write weights and metadata to one .npz archive with a content hash."""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": asdict(model.spec),
        "settings": asdict(model.settings),
        "seed": model.seed,
        "final_loss": model.final_loss,
    }
    meta["sha256"] = _content_hash(model, meta)
    np.savez_compressed(
        path,
        weights=model.weights,
        bias=np.float64(model.bias),
        idf=model.idf,
        meta=np.str_(json.dumps(meta, sort_keys=True)),
    )


def load_model(path: str | Path) -> ProxyModel:
    """Read a model archive, verifying version and content hash."""
    with np.load(path, allow_pickle=False) as archive:
        try:
            meta = json.loads(str(archive["meta"]))
            weights = archive["weights"]
            bias = float(archive["bias"])
            idf = archive["idf"]
        except KeyError as exc:
            raise ModelFormatError(f"model archive missing field {exc}") from exc
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {meta.get('format_version')!r}"
        )
    spec_fields = dict(meta["spec"])
    for key in ("word_ngram_orders", "char_ngram_orders"):
        spec_fields[key] = tuple(spec_fields[key])
    model = ProxyModel(
        spec=FeatureSpec(**spec_fields),
        settings=TrainSettings(**meta["settings"]),
        weights=weights,
        bias=bias,
        idf=idf,
        seed=meta["seed"],
        final_loss=meta["final_loss"],
    )
    expected = meta.pop("sha256")
    if _content_hash(model, meta) != expected:
        raise ModelFormatError("model archive content hash mismatch")
    return model
