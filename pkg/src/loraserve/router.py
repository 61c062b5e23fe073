"""Adapter router: profiling, multi-label logistic scorer and cache-aware selection.

The scorer follows the scikit-learn estimator protocol (``fit`` /
``predict_proba`` / ``get_params``) so it drops into pipelines and
``sklearn.base.clone``. Inputs are prompts, i.e. sequences of token ids; they
are turned into hashed bag-of-token features internally.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, FormatError
from .model import decode_step, process_prompt
from .workload import topic_prompt, topic_tokens

EXPLICIT = "explicit"
CACHED_TOPK = "cached_topk"
LOADED_TOP1 = "loaded_top1"

_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)
ROUTER_MAGIC = b"ELORARTR"
ROUTER_VERSION = 1
_ROUTER_HEADER = struct.Struct("<8sIII")


def hash_buckets(tokens, n_features):
    """Fibonacci hash of each token id, range-reduced to ``[0, n_features)``."""
    t = np.asarray(tokens, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = t * _HASH_MULT
    return ((h >> np.uint64(32)) * np.uint64(n_features)) >> np.uint64(32)


def featurize(prompt, n_features=256):
    """L1-normalised hashed bag of tokens."""
    tokens = list(prompt)
    if not tokens:
        raise ValueError("prompt must be non-empty")
    counts = np.bincount(hash_buckets(tokens, n_features).astype(np.intp), minlength=n_features)
    return counts / counts.sum()


class HashedBagFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from prompts to hashed bag-of-token vectors."""

    def __init__(self, n_features=256):
        self.n_features = n_features

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([featurize(p, self.n_features) for p in X])


def bce_loss_and_grad(coef, intercept, X, Y):
    """Summed per-output mean binary cross-entropy and its gradient.

    ``X`` is ``(m, F)`` (dense or scipy sparse), ``Y`` is ``(m, n)`` in {0, 1};
    ``coef`` is ``(n, F)``.
    """
    m = X.shape[0]
    z = np.asarray(X @ coef.T) + intercept
    softplus = np.logaddexp(0.0, z)
    loss = float(np.sum(softplus - Y * z) / m)
    g = (np.exp(z - softplus) - Y) / m
    return loss, np.asarray(X.T @ g).T, g.sum(axis=0)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class AdapterRouter(ClassifierMixin, BaseEstimator):
    """One independent logistic output per adapter, trained by full-batch
    gradient descent on binary cross-entropy.

    Parameters
    ----------
    n_features : int
        Hash buckets for the bag-of-tokens featurizer.
    epochs : int
        Full-batch gradient steps. ``0`` leaves the seeded initial weights.
    learning_rate : float
        Initial step size; halved whenever a step would raise the loss.
    init_scale : float
        Std-dev of the Gaussian initial weights; biases start at zero.
    random_state : int
    """

    def __init__(self, n_features=256, epochs=300, learning_rate=20.0, init_scale=0.01, random_state=0):
        self.n_features = n_features
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.init_scale = init_scale
        self.random_state = random_state

    def _features(self, prompts):
        return HashedBagFeaturizer(self.n_features).transform(prompts)

    def init_params(self, n_outputs):
        rng = np.random.default_rng(self.random_state)
        self.coef_ = rng.normal(0.0, self.init_scale, size=(n_outputs, self.n_features))
        self.intercept_ = np.zeros(n_outputs)
        self.n_outputs_ = n_outputs
        self.classes_ = np.arange(n_outputs)
        self.loss_history_ = []
        return self

    def fit(self, prompts, Y):
        Y = np.asarray(Y, dtype=np.float64)
        if len(prompts) == 0 or Y.shape[0] == 0:
            raise ValueError("empty training set")
        if Y.ndim != 2 or Y.shape[0] != len(prompts):
            raise ValueError(f"label matrix shape {Y.shape} does not match {len(prompts)} prompts")
        return self.fit_features(sparse.csr_matrix(self._features(prompts)), Y)

    def fit_features(self, X, Y):
        self.init_params(Y.shape[1])
        if not self.epochs:
            return self
        lr = self.learning_rate
        loss, g_coef, g_int = bce_loss_and_grad(self.coef_, self.intercept_, X, Y)
        for _ in range(self.epochs):
            self.loss_history_.append(loss)
            coef = self.coef_ - lr * g_coef
            intercept = self.intercept_ - lr * g_int
            new = bce_loss_and_grad(coef, intercept, X, Y)
            if new[0] > loss:
                # overshoot: keep the old point, take smaller steps from here on
                lr *= 0.5
                continue
            self.coef_, self.intercept_ = coef, intercept
            loss, g_coef, g_int = new
        self.loss_history_.append(loss)
        return self

    def decision_function(self, prompts):
        check_is_fitted(self, "coef_")
        return self._features(prompts) @ self.coef_.T + self.intercept_

    def predict_proba(self, prompts):
        return _sigmoid(self.decision_function(prompts))

    def predict(self, prompts):
        """Top-1 adapter id per prompt (lowest id on ties)."""
        return np.argmax(self.decision_function(prompts), axis=1)

    def score_prompt(self, prompt):
        return self.predict_proba([prompt])[0]


def score(router: AdapterRouter, prompt):
    return router.score_prompt(prompt)


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")


def top_k(scores, k):
    """Indices of the ``k`` highest scores, descending; ties go to the lower id."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:k]]


def select_adapter(prompt, explicit_adapter, router, resident, config=SelectionConfig(), n_adapters=None):
    """Return ``(adapter_id, kind)``.

    ``resident`` is anything supporting ``in`` (a cache, a set). The function
    never mutates it; loading the chosen adapter is the caller's job.
    """
    if explicit_adapter is not None:
        if n_adapters is not None and not 0 <= explicit_adapter < n_adapters:
            raise KeyError(f"unknown adapter id {explicit_adapter}")
        return int(explicit_adapter), EXPLICIT
    scores = router.score_prompt(prompt)
    if config.k > scores.size:
        raise ConfigError(f"k={config.k} exceeds the {scores.size} router outputs")
    candidates = top_k(scores, config.k)
    for adapter_id in candidates:
        if adapter_id in resident:
            return adapter_id, CACHED_TOPK
    return candidates[0], LOADED_TOP1


# profiling ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalDataset:
    id: int
    examples: tuple  # of (prompt tuple, expected token)

    def __post_init__(self):
        if not self.examples:
            raise ValueError(f"dataset {self.id} has no examples")


def profile(model, registry, datasets):
    """``P[i, j]`` = next-token exact-match accuracy of adapter j on dataset i."""
    if not datasets:
        raise ValueError("need at least one dataset")
    P = np.zeros((len(datasets), registry.n))
    for j in range(registry.n):
        adapter = registry.load(j)
        for i, ds in enumerate(datasets):
            hits = 0
            for prompt, expected in ds.examples:
                token, _ = decode_step(model, adapter, process_prompt(model, adapter, prompt))
                hits += token == expected
            P[i, j] = hits / len(ds.examples)
    return P


def make_topic_datasets(model, registry, examples_per_dataset=20, prompt_bounds=(4, 12), seed=0, topic_size=4):
    """One dataset per adapter whose targets are that adapter's own greedy answers.

    Prompts for dataset ``i`` come from topic ``i``, so adapter ``i`` scores 1.0
    on it by construction and the router learns topic -> adapter.
    """
    rng = np.random.default_rng([seed, 101])
    datasets = []
    for i in range(registry.n):
        adapter = registry.load(i)
        examples = []
        for _ in range(examples_per_dataset):
            length = int(rng.integers(prompt_bounds[0], prompt_bounds[1], endpoint=True))
            prompt = tuple(topic_prompt(i, length, rng, model.vocab_size, topic_size))
            token, _ = decode_step(model, adapter, process_prompt(model, adapter, prompt))
            examples.append((prompt, token))
        datasets.append(EvalDataset(i, tuple(examples)))
    return datasets


def build_labels(P, epsilon=0.05):
    """Mark every adapter within ``epsilon`` of the row best as a positive."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    P = np.asarray(P, dtype=np.float64)
    return (P >= P.max(axis=1, keepdims=True) - epsilon).astype(np.int8)


def make_corpus(n_datasets, per_dataset, prompt_bounds=(4, 32), seed=0, vocab_size=2048, topic_size=4):
    """Topic-token prompts labelled with the dataset (topic) they came from."""
    rng = np.random.default_rng([seed, 202])
    prompts, labels = [], []
    for i in range(n_datasets):
        for _ in range(per_dataset):
            length = int(rng.integers(prompt_bounds[0], prompt_bounds[1], endpoint=True))
            prompts.append(tuple(topic_prompt(i, length, rng, vocab_size, topic_size)))
            labels.append(i)
    return prompts, np.asarray(labels)


def train_router(prompts, dataset_ids, labels, epochs=300, learning_rate=20.0, seed=0, n_features=256):
    """Fit a router where each prompt's target row is its dataset's label row."""
    if len(prompts) == 0:
        raise ValueError("empty training set")
    Y = np.asarray(labels)[np.asarray(dataset_ids)]
    router = AdapterRouter(n_features=n_features, epochs=epochs, learning_rate=learning_rate, random_state=seed)
    return router.fit(list(prompts), Y)


# persistence -------------------------------------------------------------

def save_router(router: AdapterRouter, path):
    check_is_fitted(router, "coef_")
    n, f = router.coef_.shape
    with open(path, "wb") as fh:
        fh.write(_ROUTER_HEADER.pack(ROUTER_MAGIC, ROUTER_VERSION, f, n))
        fh.write(np.ascontiguousarray(router.coef_, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(router.intercept_, dtype="<f8").tobytes())


def load_router(path) -> AdapterRouter:
    data = Path(path).read_bytes()
    if len(data) < _ROUTER_HEADER.size:
        raise FormatError(f"{path}: truncated router header")
    magic, version, f, n = _ROUTER_HEADER.unpack_from(data)
    if magic != ROUTER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ROUTER_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _ROUTER_HEADER.size + 8 * (n * f + n)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    params = np.frombuffer(data, dtype="<f8", offset=_ROUTER_HEADER.size).astype(np.float64)
    router = AdapterRouter(n_features=f).init_params(n)
    router.coef_ = params[: n * f].reshape(n, f).copy()
    router.intercept_ = params[n * f:].copy()
    return router


def write_corpus(path, prompts, dataset_ids):
    with open(path, "w") as fh:
        for p, d in zip(prompts, dataset_ids):
            fh.write(json.dumps({"prompt": [int(t) for t in p], "dataset": int(d)}) + "\n")


def read_corpus(path):
    prompts, ids = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                prompts.append(tuple(int(t) for t in rec["prompt"]))
                ids.append(int(rec["dataset"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed corpus record ({exc})") from None
    return prompts, np.asarray(ids, dtype=np.intp)


__all__ = [
    "AdapterRouter", "HashedBagFeaturizer", "SelectionConfig", "EvalDataset",
    "featurize", "score", "select_adapter", "top_k", "profile", "build_labels",
    "train_router", "make_topic_datasets", "make_corpus", "bce_loss_and_grad",
    "save_router", "load_router", "write_corpus", "read_corpus", "topic_tokens",
]
