"""Diagnostics: nDCG@k, joint-index neighborhood mixing, domain probes.

This module is the only place that may read target relevance labels; the
trainer sees them exclusively through the opaque evaluator callback built by
make_evaluator. Reported quantities per evaluation step:

- ndcg at k per domain (binary gains, log2 discount, 1-based positions);
- knn_source_pct: mean percentage of source docs among each target query's
  top-K neighbors in the joint source+target index;
- global_domain_acc: held-out accuracy of a fresh linear probe trained to
  convergence on embedding snapshots;
- local_domain_acc: accuracy of the in-training classifier on a balanced
  batch it has never trained on, in two variants (a reserved slice of the
  corpora, and the trainer's own next batch).
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder as enc_mod
from .momentum import DomainClassifier, classify_batch, logits_batch
from .numerics import PROB_EPS, stream_rng
from .retrieval import EmbeddingIndex, top_k_positions
from .synthdata import Corpus, stack, train_count


def ndcg_at_k(ranking, relevant, k: int):
    """Binary-gain nDCG at cutoff k; None when the query has no relevant docs
    (callers count such queries as skipped instead of averaging them)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return None
    dcg = 0.0
    for pos, doc in enumerate(ranking[:k]):
        if doc in relevant:
            dcg += 1.0 / np.log2(pos + 2.0)  # 1-based rank pos+1
    ideal_hits = min(k, len(relevant))
    idcg = float(np.sum(1.0 / np.log2(np.arange(2, ideal_hits + 2))))
    return dcg / idcg


def mean_ndcg(values):
    """(mean over non-None values, count of skipped queries)."""
    kept = [v for v in values if v is not None]
    skipped = len(values) - len(kept)
    if not kept:
        return 0.0, skipped
    return float(np.mean(kept)), skipped


def ndcg_over_index(index: EmbeddingIndex, query_ids, query_embs, qrels, k: int):
    """Mean nDCG@k of the given queries against one domain's index."""
    positions = top_k_positions(index, query_embs, k)
    vals = []
    for row, qid in enumerate(query_ids):
        ranking = [index.ids[p] for p in positions[row]]
        vals.append(ndcg_at_k(ranking, qrels.get(qid, frozenset()), k))
    return mean_ndcg(vals)


def knn_source_pct(index: EmbeddingIndex, target_query_embs, k: int = 100, allow_single_domain: bool = False):
    """Mean percent of source-tagged docs among each target query's top-k."""
    tags = set(index.domains)
    if not allow_single_domain and tags != {"source", "target"}:
        raise ValueError(f"joint index must contain both domains, has {sorted(tags)}")
    is_source = np.array([1.0 if d == "source" else 0.0 for d in index.domains])
    positions = top_k_positions(index, target_query_embs, min(k, len(index)))
    frac = is_source[positions].mean(axis=1)
    return float(frac.mean() * 100.0)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1.0
    tol: float = 1e-5
    max_sweeps: int = 500


def train_probe(X: np.ndarray, y: np.ndarray, probe: ProbeConfig) -> np.ndarray:
    """Fresh linear head (2, D), full-batch GD until the per-sweep loss
    improvement drops below tol or max_sweeps is hit. Deterministic: starts
    at zero, no sampling involved."""
    n = X.shape[0]
    W = np.zeros((2, X.shape[1]))
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), y] = 1.0
    prev = np.inf
    for _ in range(probe.max_sweeps):
        Z = X @ W.T
        m = Z.max(axis=1, keepdims=True)
        E = np.exp(Z - m)
        P = E / E.sum(axis=1, keepdims=True)
        p_true = np.clip(P[np.arange(n), y], PROB_EPS, None)
        loss = float(np.mean(-np.log(p_true)))
        W -= probe.lr * ((P - onehot).T @ X) / n
        if prev - loss < probe.tol:
            break
        prev = loss
    return W


def _accuracy(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    pred = np.argmax(X @ W.T, axis=1)
    return float(np.mean(pred == y) * 100.0)


def global_domain_acc(source_embs, target_embs, probe: ProbeConfig, rng) -> float:
    """Held-out accuracy (percent) of a freshly converged domain probe.

    Domains are balanced by subsampling to the smaller side; each side is
    shuffled by rng and split 80/20 train/held-out.
    """
    S = np.asarray(source_embs, dtype=np.float64)
    T = np.asarray(target_embs, dtype=np.float64)
    m = min(S.shape[0], T.shape[0])
    if m < 5:
        raise ValueError("need at least 5 embeddings per domain for the 80/20 split")
    S = S[rng.permutation(S.shape[0])[:m]]
    T = T[rng.permutation(T.shape[0])[:m]]
    cut = (4 * m) // 5
    X_tr = np.concatenate([S[:cut], T[:cut]])
    y_tr = np.concatenate([np.zeros(cut, dtype=np.int64), np.ones(cut, dtype=np.int64)])
    X_ho = np.concatenate([S[cut:], T[cut:]])
    y_ho = np.concatenate([np.zeros(m - cut, dtype=np.int64), np.ones(m - cut, dtype=np.int64)])
    W = train_probe(X_tr, y_tr, probe)
    return _accuracy(W, X_ho, y_ho)


def local_domain_acc(clf: DomainClassifier, embs: np.ndarray, domains: np.ndarray) -> float:
    """Percent of correct argmax domain predictions on one balanced batch."""
    pred = np.argmax(logits_batch(clf, embs), axis=1)
    return float(np.mean(pred == np.asarray(domains)) * 100.0)


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks on ties."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length 1-d sequences, size >= 2")
    rx, ry = _avg_ranks(x), _avg_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        return 0.0
    return float((rx @ ry) / denom)


def _avg_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass
class EvalReport:
    step: int
    lambda_value: Optional[float]
    mean_ranking_loss: Optional[float]
    mean_clf_loss: Optional[float]
    mean_adv_loss: Optional[float]
    ndcg_source: float
    ndcg_target: float
    ndcg_source_skipped: int
    ndcg_target_skipped: int
    knn_source_pct: float
    global_domain_acc: Optional[float]
    local_domain_acc_reserved: Optional[float]
    local_domain_acc_next: Optional[float]

    def to_json(self) -> str:
        # fixed key order and repr floats keep the metrics file byte-stable
        d = {
            "step": self.step,
            "lambda": self.lambda_value,
            "mean_ranking_loss": self.mean_ranking_loss,
            "mean_clf_loss": self.mean_clf_loss,
            "mean_adv_loss": self.mean_adv_loss,
            "ndcg_source": self.ndcg_source,
            "ndcg_target": self.ndcg_target,
            "ndcg_source_skipped": self.ndcg_source_skipped,
            "ndcg_target_skipped": self.ndcg_target_skipped,
            "knn_source_pct": self.knn_source_pct,
            "global_domain_acc": self.global_domain_acc,
            "local_domain_acc_reserved": self.local_domain_acc_reserved,
            "local_domain_acc_next": self.local_domain_acc_next,
        }
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EvalReport":
        d = json.loads(line)
        return cls(
            step=d["step"],
            lambda_value=d["lambda"],
            mean_ranking_loss=d["mean_ranking_loss"],
            mean_clf_loss=d["mean_clf_loss"],
            mean_adv_loss=d["mean_adv_loss"],
            ndcg_source=d["ndcg_source"],
            ndcg_target=d["ndcg_target"],
            ndcg_source_skipped=d["ndcg_source_skipped"],
            ndcg_target_skipped=d["ndcg_target_skipped"],
            knn_source_pct=d["knn_source_pct"],
            global_domain_acc=d["global_domain_acc"],
            local_domain_acc_reserved=d["local_domain_acc_reserved"],
            local_domain_acc_next=d["local_domain_acc_next"],
        )


@dataclass
class EvalContext:
    """What the trainer hands the evaluator at an evaluation step."""

    step: int
    encoder: object
    classifier: Optional[DomainClassifier] = None
    domain_metrics: bool = False
    lambda_value: Optional[float] = None
    mean_ranking_loss: Optional[float] = None
    mean_clf_loss: Optional[float] = None
    mean_adv_loss: Optional[float] = None
    next_batch: Optional[tuple] = None  # (embeddings, domain codes)


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    knn_k: int = 100
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    local_batch_per_domain: int = 64


def make_evaluator(source: Corpus, target: Corpus, cfg: EvalConfig, reserve_frac: float, seed: int):
    """Close over the labeled corpora and return evaluate(ctx) -> EvalReport.

    The returned callable is the trainer's only window onto target qrels.
    Per-step randomness (probe split, reserved batch draw) is derived from
    (seed, step), so evaluating a given state is order-independent.
    """
    if not isinstance(source, Corpus) or not isinstance(target, Corpus):
        raise TypeError("make_evaluator needs labeled Corpus objects for both domains")
    src_q_ids = [i for i, _ in source.queries]
    tgt_q_ids = [i for i, _ in target.queries]
    src_q = stack(source.queries)
    tgt_q = stack(target.queries)
    src_d = stack(source.documents)
    tgt_d = stack(target.documents)
    src_d_ids = source.doc_ids()
    tgt_d_ids = target.doc_ids()
    if sorted(src_d_ids) != src_d_ids or sorted(tgt_d_ids) != tgt_d_ids:
        raise ValueError("corpus documents must be stored in ascending id order")
    if set(src_d_ids) & set(tgt_d_ids):
        raise ValueError("source and target doc ids overlap; joint index would be ambiguous")
    # reserved pool per domain: tail slices of queries and documents
    res_pools = {}
    for tag, qmat, dmat in (("source", src_q, src_d), ("target", tgt_q, tgt_d)):
        q0 = train_count(qmat.shape[0], reserve_frac)
        d0 = train_count(dmat.shape[0], reserve_frac)
        pool = np.concatenate([qmat[q0:], dmat[d0:]]) if reserve_frac > 0 else np.zeros((0, qmat.shape[1]))
        res_pools[tag] = pool

    def evaluate(ctx: EvalContext) -> EvalReport:
        enc = ctx.encoder
        e_sq, _ = enc_mod.encode_batch(enc, src_q, need_tape=False)
        e_tq, _ = enc_mod.encode_batch(enc, tgt_q, need_tape=False)
        e_sd, _ = enc_mod.encode_batch(enc, src_d, need_tape=False)
        e_td, _ = enc_mod.encode_batch(enc, tgt_d, need_tape=False)
        src_index = EmbeddingIndex(ids=src_d_ids, domains=["source"] * len(src_d_ids), embs=e_sd, built_at_step=ctx.step)
        tgt_index = EmbeddingIndex(ids=tgt_d_ids, domains=["target"] * len(tgt_d_ids), embs=e_td, built_at_step=ctx.step)
        joint_ids = src_d_ids + tgt_d_ids
        order = np.argsort(np.array(joint_ids))
        joint_index = EmbeddingIndex(
            ids=[joint_ids[i] for i in order],
            domains=[("source" if i < len(src_d_ids) else "target") for i in order],
            embs=np.concatenate([e_sd, e_td])[order],
            built_at_step=ctx.step,
        )
        nd_s, sk_s = ndcg_over_index(src_index, src_q_ids, e_sq, source.qrels, cfg.k)
        nd_t, sk_t = ndcg_over_index(tgt_index, tgt_q_ids, e_tq, target.qrels, cfg.k)
        knn = knn_source_pct(joint_index, e_tq, cfg.knn_k)
        g_acc = l_res = l_next = None
        if ctx.domain_metrics:
            prng = stream_rng(seed, "probe", ctx.step)
            g_acc = global_domain_acc(
                np.concatenate([e_sq, e_sd]), np.concatenate([e_tq, e_td]), cfg.probe, prng
            )
        if ctx.domain_metrics and ctx.classifier is not None:
            s_pool, t_pool = res_pools["source"], res_pools["target"]
            b = min(cfg.local_batch_per_domain, s_pool.shape[0], t_pool.shape[0])
            if b > 0:
                lrng = stream_rng(seed, "local-reserved", ctx.step)
                pick_s = lrng.choice(s_pool.shape[0], size=b, replace=False)
                pick_t = lrng.choice(t_pool.shape[0], size=b, replace=False)
                feats = np.concatenate([s_pool[pick_s], t_pool[pick_t]])
                embs, _ = enc_mod.encode_batch(enc, feats, need_tape=False)
                doms = np.concatenate([np.zeros(b, dtype=np.int64), np.ones(b, dtype=np.int64)])
                l_res = local_domain_acc(ctx.classifier, embs, doms)
            if ctx.next_batch is not None:
                l_next = local_domain_acc(ctx.classifier, ctx.next_batch[0], ctx.next_batch[1])
        return EvalReport(
            step=ctx.step,
            lambda_value=ctx.lambda_value,
            mean_ranking_loss=ctx.mean_ranking_loss,
            mean_clf_loss=ctx.mean_clf_loss,
            mean_adv_loss=ctx.mean_adv_loss,
            ndcg_source=nd_s,
            ndcg_target=nd_t,
            ndcg_source_skipped=sk_s,
            ndcg_target_skipped=sk_t,
            knn_source_pct=knn,
            global_domain_acc=g_acc,
            local_domain_acc_reserved=l_res,
            local_domain_acc_next=l_next,
        )

    return evaluate
