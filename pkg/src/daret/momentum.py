"""The momentum queue of detached embeddings and the linear domain classifier.

The queue is a FIFO of frozen embedding copies from the last n training
batches, balanced 1:1 between source and target and, within source
documents, 1:1 between positives and negatives (checked on every push).
Detachment is mechanical: pushed vectors are copied and marked read-only, and
no tape accompanies them, so classifier training cannot touch encoder
parameters by construction.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .numerics import PROB_EPS

ROLE_QUERY = "query"
ROLE_POS = "positive_doc"
ROLE_NEG = "negative_doc"
ROLE_DOC = "doc"  # unlabeled target-side document
ROLES = (ROLE_QUERY, ROLE_POS, ROLE_NEG, ROLE_DOC)
_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}

DOMAIN_CODE = {"source": 0, "target": 1}


@dataclass
class DetachedEmbedding:
    vector: np.ndarray
    domain: str
    role: str
    born_step: int


@dataclass
class DomainClassifier:
    """softmax(W_f e); optional bias, off by default."""

    W: np.ndarray  # (2, D_emb)
    bias: Optional[np.ndarray] = None  # (2,)

    @property
    def d_emb(self):
        return self.W.shape[1]

    def checksum(self) -> float:
        s = float(np.abs(self.W).sum())
        if self.bias is not None:
            s += float(np.abs(self.bias).sum())
        return s


def init_classifier(d_emb: int, with_bias: bool = False) -> DomainClassifier:
    # zero init: convex objective, so no symmetry breaking is needed
    bias = np.zeros(2) if with_bias else None
    return DomainClassifier(W=np.zeros((2, d_emb)), bias=bias)


def logits_batch(clf: DomainClassifier, E: np.ndarray) -> np.ndarray:
    Z = np.asarray(E, dtype=np.float64) @ clf.W.T
    if clf.bias is not None:
        Z = Z + clf.bias
    return Z


def classify_batch(clf: DomainClassifier, E: np.ndarray) -> np.ndarray:
    """p(source) per row of E, computed with a max-shifted softmax."""
    Z = logits_batch(clf, E)
    m = Z.max(axis=1, keepdims=True)
    ez = np.exp(Z - m)
    return ez[:, 0] / ez.sum(axis=1)


def classify(clf: DomainClassifier, e: np.ndarray) -> float:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (clf.d_emb,):
        raise ValueError(f"classify: expected dim {clf.d_emb}, got shape {e.shape}")
    return float(classify_batch(clf, e[None, :])[0])


@dataclass
class _QueueBatch:
    X: np.ndarray  # (M, D_emb), read-only
    y: np.ndarray  # (M,) int64 domain codes
    roles: np.ndarray  # (M,) int64 role codes
    born_step: int


@dataclass
class MomentumQueue:
    n: int
    batches: list = field(default_factory=list)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("momentum step n must be >= 1")

    def __len__(self):
        return sum(b.X.shape[0] for b in self.batches)

    def n_batches(self):
        return len(self.batches)

    def matrix(self):
        """Concatenated (X, y) over all held batches, oldest first."""
        if not self.batches:
            raise ValueError("momentum queue is empty")
        X = np.concatenate([b.X for b in self.batches])
        y = np.concatenate([b.y for b in self.batches])
        return X, y

    def entries(self):
        for b in self.batches:
            for i in range(b.X.shape[0]):
                yield DetachedEmbedding(
                    vector=b.X[i], domain="source" if b.y[i] == 0 else "target",
                    role=ROLES[b.roles[i]], born_step=b.born_step,
                )


def push_batch(queue: MomentumQueue, source_embs, target_embs, born_step: int = 0):
    """Append one batch of detached copies, evicting beyond n batches.

    source_embs and target_embs are sequences of (vector, role). The caller
    must supply equal source/target counts and, among source documents,
    equally many positives and negatives.
    """
    if len(source_embs) != len(target_embs):
        raise ValueError(
            f"queue balance violated: {len(source_embs)} source vs {len(target_embs)} target embeddings"
        )
    if not source_embs:
        raise ValueError("push_batch: empty batch")
    n_pos = sum(1 for _, role in source_embs if role == ROLE_POS)
    n_neg = sum(1 for _, role in source_embs if role == ROLE_NEG)
    if n_pos != n_neg:
        raise ValueError(f"queue balance violated: {n_pos} positive vs {n_neg} negative source docs")
    vecs, doms, roles = [], [], []
    for domain, embs in (("source", source_embs), ("target", target_embs)):
        for vec, role in embs:
            if role not in _ROLE_CODE:
                raise ValueError(f"unknown role {role!r}")
            vecs.append(np.array(vec, dtype=np.float64, copy=True))
            doms.append(DOMAIN_CODE[domain])
            roles.append(_ROLE_CODE[role])
    X = np.stack(vecs)
    X.setflags(write=False)  # the stop-gradient copy is frozen for good
    queue.batches.append(
        _QueueBatch(X=X, y=np.array(doms, dtype=np.int64), roles=np.array(roles, dtype=np.int64), born_step=born_step)
    )
    while len(queue.batches) > queue.n:
        queue.batches.pop(0)


def mean_queue_loss(clf: DomainClassifier, queue: MomentumQueue) -> float:
    """Mean discrimination loss of the current classifier over the queue."""
    X, y = queue.matrix()
    p0 = np.clip(classify_batch(clf, X), PROB_EPS, 1.0 - PROB_EPS)
    p_true = np.where(y == 0, p0, 1.0 - p0)
    return float(np.mean(-np.log(p_true)))


def queue_accuracy(clf: DomainClassifier, queue: MomentumQueue) -> float:
    X, y = queue.matrix()
    pred = (classify_batch(clf, X) < 0.5).astype(np.int64)  # p(source) < 1/2 -> target
    return float(np.mean(pred == y))


def train_classifier_step(clf: DomainClassifier, queue: MomentumQueue, lr: float, passes: int, rng) -> float:
    """`passes` shuffled per-sample SGD sweeps over the queue; W_f only.

    Returns the mean discrimination loss of the final sweep (measured sample
    by sample before each update), or the current mean loss when passes=0.
    """
    if passes < 0:
        raise ValueError("passes must be >= 0")
    if passes == 0:
        return mean_queue_loss(clf, queue)
    X, y = queue.matrix()
    X = np.ascontiguousarray(X)
    if clf.bias is not None:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
        W = np.ascontiguousarray(np.hstack([clf.W, clf.bias[:, None]]))
    else:
        W = np.ascontiguousarray(clf.W)
    mean_loss = 0.0
    for _ in range(passes):
        order = rng.permutation(X.shape[0]).astype(np.int64)
        mean_loss = _backend.classifier_sweep(W, X, y, order, lr)
    if clf.bias is not None:
        clf.W[...] = W[:, :-1]
        clf.bias[...] = W[:, -1]
    else:
        clf.W[...] = W
    return float(mean_loss)


def classifier_state(clf: DomainClassifier) -> dict:
    arrays = {"clf_w": clf.W}
    if clf.bias is not None:
        arrays["clf_b"] = clf.bias
    return arrays


def classifier_from_state(arrays: dict) -> DomainClassifier:
    W = np.array(arrays["clf_w"], dtype=np.float64)
    bias = np.array(arrays["clf_b"], dtype=np.float64) if "clf_b" in arrays else None
    return DomainClassifier(W=W, bias=bias)


def queue_state(queue: MomentumQueue) -> dict:
    """Checkpoint fragment: one array triple per held batch."""
    arrays = {"queue_n_batches": np.array([len(queue.batches)], dtype=np.int64)}
    for i, b in enumerate(queue.batches):
        arrays[f"queue{i}_x"] = b.X
        arrays[f"queue{i}_y"] = b.y
        arrays[f"queue{i}_roles"] = b.roles
        arrays[f"queue{i}_step"] = np.array([b.born_step], dtype=np.int64)
    return arrays


def queue_from_state(n: int, arrays: dict) -> MomentumQueue:
    queue = MomentumQueue(n=n)
    count = int(arrays["queue_n_batches"][0])
    for i in range(count):
        X = np.array(arrays[f"queue{i}_x"], dtype=np.float64)
        X.setflags(write=False)
        queue.batches.append(
            _QueueBatch(
                X=X,
                y=np.array(arrays[f"queue{i}_y"], dtype=np.int64),
                roles=np.array(arrays[f"queue{i}_roles"], dtype=np.int64),
                born_step=int(arrays[f"queue{i}_step"][0]),
            )
        )
    return queue
