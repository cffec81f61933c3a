"""Exact brute-force dense retrieval over encoder embeddings.

Indices are immutable once built and hold entries sorted by doc id, so the
deterministic ranking order is (score descending, doc id ascending) and the
backends' top-k selection realizes it exactly. Used for evaluation, the
joint-domain neighborhood diagnostic, and hard-negative mining.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend, encoder as enc_mod
from .synthdata import stack


@dataclass
class EmbeddingIndex:
    ids: list  # sorted ascending; position == tie rank
    domains: list  # domain tag per entry
    embs: np.ndarray  # (N, D_emb)
    built_at_step: int

    def __len__(self):
        return len(self.ids)


def build_index(enc, corpora, built_at_step: int = 0, doc_subset=None) -> EmbeddingIndex:
    """Encode every document of the given corpora into one index.

    doc_subset, when given, is a set of ids restricting which documents are
    indexed (the trainer uses it to keep reserved docs out of mining).
    """
    entries = []
    for corpus in corpora:
        for ident, vec in corpus.documents:
            if doc_subset is not None and ident not in doc_subset:
                continue
            entries.append((ident, corpus.domain_tag, vec))
    entries.sort(key=lambda e: e[0])
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate doc ids across indexed corpora")
    domains = [e[1] for e in entries]
    if entries:
        X = np.stack([e[2] for e in entries]).astype(np.float64, copy=False)
        embs, _ = enc_mod.encode_batch(enc, X, need_tape=False)
    else:
        embs = np.zeros((0, 0))
    return EmbeddingIndex(ids=ids, domains=domains, embs=embs, built_at_step=built_at_step)


def top_k(index: EmbeddingIndex, query_emb: np.ndarray, k: int):
    """Ranked [(doc_id, score, domain_tag)] with the deterministic tie order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    scores = index.embs @ np.asarray(query_emb, dtype=np.float64)
    picks = _backend.top_k_select(np.ascontiguousarray(scores), k)
    return [(index.ids[i], float(scores[i]), index.domains[i]) for i in picks]


def top_k_positions(index: EmbeddingIndex, query_embs: np.ndarray, k: int) -> np.ndarray:
    """Batch form returning entry positions, shape (Q, min(k, N))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.ascontiguousarray(query_embs @ index.embs.T)
    return _backend.top_k_batch(scores, k)


def mine_hard_negatives(enc, index: EmbeddingIndex, queries, qrels, per_query: int, rng) -> dict:
    """Top-ranked non-relevant doc ids per query, ANCE style.

    Retrieves per_query + |relevant| candidates and keeps the per_query best
    non-relevant ones; if the index is too small to fill the quota, pads with
    uniform draws from the remaining non-relevant docs.
    """
    if per_query < 1:
        raise ValueError("per_query must be >= 1")
    all_ids = index.ids
    indexed = set(all_ids)
    qmat = stack(queries)
    qembs, _ = enc_mod.encode_batch(enc, qmat, need_tape=False)
    deepest = max(per_query + len(qrels.get(qid, ())) for qid, _ in queries)
    ranked = top_k_positions(index, qembs, min(deepest, len(index)))
    out = {}
    for row, (qid, _) in enumerate(queries):
        relevant = qrels.get(qid, frozenset())
        if len(index) - len(relevant & indexed) == 0:
            raise ValueError(f"query {qid}: no non-relevant documents available to mine")
        negs = []
        for pos in ranked[row]:
            doc = all_ids[pos]
            if doc not in relevant:
                negs.append(doc)
                if len(negs) == per_query:
                    break
        if len(negs) < per_query:
            chosen = set(negs)
            spare = [d for d in all_ids if d not in relevant and d not in chosen]
            extra = rng.choice(len(spare), size=min(per_query - len(negs), len(spare)), replace=False)
            negs.extend(spare[i] for i in sorted(extra))
        out[qid] = negs
    return out
