"""Synthetic paired corpora with a shared latent relevance structure.

Both domains draw latent vectors around the same topic centers; relevance is
topic equality, so ground truth is identical across domains by construction
and a latent-space oracle ranks perfectly. The observed features are affine
images of the latents, with the target map rotated/perturbed/translated away
from the source map by a controllable magnitude.

Topic centers are placed on a spherical cap, c_i = beta e1 + sqrt(1-beta^2)
r_i with r_i unit vectors orthogonal to e1 kept well separated. The shared
positive e1 component matters: it keeps each domain's feature cloud off the
origin so a bias-free linear probe can separate fully shifted domains, which
the diagnostics (and the degenerate zero-shift case) rely on.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import stream_rng

FORMAT_VERSION = 1
SHIFT_KINDS = ("rotation", "affine", "rotation+translation")

CENTER_BETA = 0.5  # shared e1 component of every topic center
CENTER_MIN_SEP = 1.0  # min pairwise distance between the r_i on their sphere


@dataclass(frozen=True)
class GenConfig:
    latent_dim: int = 8
    feature_dim: int = 32
    n_topics: int = 16
    queries_per_domain: int = 256
    docs_per_domain: int = 2048
    docs_per_query_relevant: int = 8
    shift_kind: str = "rotation"
    shift_magnitude: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.feature_dim < self.latent_dim:
            raise ValueError("feature_dim must be >= latent_dim")
        if self.shift_kind in ("rotation", "rotation+translation") and self.feature_dim < 2 * self.latent_dim:
            raise ValueError("rotation shifts need feature_dim >= 2 * latent_dim")
        if self.shift_kind not in SHIFT_KINDS:
            raise ValueError(f"shift_kind must be one of {SHIFT_KINDS}")
        if not 0.0 <= self.shift_magnitude <= 1.0:
            raise ValueError("shift_magnitude must be in [0, 1]")
        if self.n_topics < 2 or self.queries_per_domain < 1 or self.docs_per_domain < 1:
            raise ValueError("n_topics >= 2 and at least one query and document required")
        if self.docs_per_domain // self.n_topics < self.docs_per_query_relevant:
            raise ValueError(
                f"docs_per_domain={self.docs_per_domain} cannot give every one of "
                f"{self.n_topics} topics {self.docs_per_query_relevant} relevant docs"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Corpus:
    """One domain's retrieval data, relevance labels included."""

    domain_tag: str
    queries: list  # [(id, feature vector)]
    documents: list
    qrels: dict  # query id -> frozenset of relevant doc ids
    gen_config: Optional[dict] = None

    def doc_ids(self):
        return [d[0] for d in self.documents]


@dataclass
class UnlabeledCorpus:
    """A corpus with the relevance labels structurally removed.

    The trainer accepts only this type for the target domain, so target
    qrels are unrepresentable on the training path.
    """

    domain_tag: str
    queries: list
    documents: list

    @classmethod
    def strip(cls, corpus: Corpus) -> "UnlabeledCorpus":
        return cls(domain_tag=corpus.domain_tag, queries=list(corpus.queries), documents=list(corpus.documents))


def stack(items) -> np.ndarray:
    """Stack [(id, vec), ...] into a (N, D) matrix in list order."""
    return np.stack([v for _, v in items]).astype(np.float64, copy=False)


def _topic_centers(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm centers on the e1 cap with a pairwise separation floor."""
    k = cfg.latent_dim
    radial = np.sqrt(1.0 - CENTER_BETA**2)
    centers = np.zeros((cfg.n_topics, k))
    rs = []
    for i in range(cfg.n_topics):
        for _ in range(2000):
            r = rng.standard_normal(k - 1)
            r /= np.linalg.norm(r)
            if all(np.linalg.norm(r - prev) >= CENTER_MIN_SEP for prev in rs):
                rs.append(r)
                break
        else:
            raise ValueError(f"cannot place {cfg.n_topics} separated topic centers in latent_dim {k}")
        centers[i, 0] = CENTER_BETA
        centers[i, 1:] = radial * rs[i]
    return centers


def _domain_maps(cfg: GenConfig, rng: np.random.Generator):
    """(A_source, b_source), (A_target, b_target) for the configured shift."""
    d, k = cfg.feature_dim, cfg.latent_dim
    g = rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix the sign convention so QR is canonical
    a_src = q[:, :k].copy()
    b_src = np.zeros(d)
    m = cfg.shift_magnitude
    if cfg.shift_kind in ("rotation", "rotation+translation"):
        f = q[:, k : 2 * k]
        ang = m * np.pi / 2.0
        a_tgt = a_src * np.cos(ang) + f * np.sin(ang)
    else:  # affine
        g2 = rng.standard_normal((d, k))
        g2 *= np.linalg.norm(a_src) / np.linalg.norm(g2)
        a_tgt = a_src + m * g2
    b_tgt = np.zeros(d)
    if cfg.shift_kind == "rotation+translation":
        t = rng.standard_normal(d)
        t /= np.linalg.norm(t)
        b_tgt = m * t
    return (a_src, b_src), (a_tgt, b_tgt)


def _sample_domain(cfg, centers, a, b, tag, prefix, rng):
    latents = {}

    def draw(n, id_prefix):
        items = []
        for j in range(n):
            topic = j % cfg.n_topics
            z = centers[topic] + cfg.noise_sigma * rng.standard_normal(cfg.latent_dim)
            x = a @ z + b + cfg.noise_sigma * rng.standard_normal(cfg.feature_dim)
            ident = f"{id_prefix}{j:04d}"
            items.append((ident, x, topic))
            latents[ident] = z
        return items

    queries = draw(cfg.queries_per_domain, prefix + "q")
    docs = draw(cfg.docs_per_domain, prefix + "d")
    qrels = {}
    by_topic = {}
    for ident, _, topic in docs:
        by_topic.setdefault(topic, []).append(ident)
    for ident, _, topic in queries:
        qrels[ident] = frozenset(by_topic[topic])
    corpus = Corpus(
        domain_tag=tag,
        queries=[(i, x) for i, x, _ in queries],
        documents=[(i, x) for i, x, _ in docs],
        qrels=qrels,
        gen_config=config_dict(cfg),
    )
    return corpus, latents


def generate_with_latents(cfg: GenConfig):
    """Like generate, but also returns the id -> latent map for oracle tests."""
    cfg.validate()
    centers = _topic_centers(cfg, stream_rng(cfg.seed, "gen-centers"))
    (a_s, b_s), (a_t, b_t) = _domain_maps(cfg, stream_rng(cfg.seed, "gen-maps"))
    source, lat_s = _sample_domain(cfg, centers, a_s, b_s, "source", "s", stream_rng(cfg.seed, "gen-source"))
    target, lat_t = _sample_domain(cfg, centers, a_t, b_t, "target", "t", stream_rng(cfg.seed, "gen-target"))
    lat_s.update(lat_t)
    return source, target, lat_s


def generate(cfg: GenConfig):
    """Deterministic paired corpora; same cfg gives bit-identical output."""
    source, target, _ = generate_with_latents(cfg)
    return source, target


def config_dict(cfg: GenConfig) -> dict:
    return {
        "latent_dim": cfg.latent_dim,
        "feature_dim": cfg.feature_dim,
        "n_topics": cfg.n_topics,
        "queries_per_domain": cfg.queries_per_domain,
        "docs_per_domain": cfg.docs_per_domain,
        "docs_per_query_relevant": cfg.docs_per_query_relevant,
        "shift_kind": cfg.shift_kind,
        "shift_magnitude": cfg.shift_magnitude,
        "noise_sigma": cfg.noise_sigma,
        "seed": cfg.seed,
    }


def config_from_dict(d: dict) -> GenConfig:
    return GenConfig(**d)


def corpus_lines(corpus: Corpus):
    """Serialize to the line-delimited JSON interchange form.

    First line is a header with the format version and generating config;
    then one line per query, document, and qrel record. Key order and float
    text are fixed, so equal corpora serialize to identical bytes.
    """
    header = {
        "kind": "header",
        "format_version": FORMAT_VERSION,
        "domain_tag": corpus.domain_tag,
        "gen_config": corpus.gen_config,
    }
    yield json.dumps(header, sort_keys=True)
    for ident, vec in corpus.queries:
        yield json.dumps({"kind": "query", "id": ident, "vector": [float(v) for v in vec]}, sort_keys=True)
    for ident, vec in corpus.documents:
        yield json.dumps({"kind": "doc", "id": ident, "vector": [float(v) for v in vec]}, sort_keys=True)
    for qid in sorted(corpus.qrels):
        yield json.dumps({"kind": "qrel", "query_id": qid, "doc_ids": sorted(corpus.qrels[qid])}, sort_keys=True)


def save_corpus(path, corpus: Corpus):
    with open(path, "w", encoding="ascii") as fh:
        for line in corpus_lines(corpus):
            fh.write(line + "\n")


def load_corpus(path) -> Corpus:
    queries, documents, qrels = [], [], {}
    domain_tag, gen_config = None, None
    with open(path, "r", encoding="ascii") as fh:
        for ln, raw in enumerate(fh):
            rec = json.loads(raw)
            kind = rec.get("kind")
            if ln == 0:
                if kind != "header" or rec.get("format_version") != FORMAT_VERSION:
                    raise ValueError(f"{path}: missing or unsupported corpus header")
                domain_tag = rec["domain_tag"]
                gen_config = rec.get("gen_config")
            elif kind == "query":
                queries.append((rec["id"], np.array(rec["vector"], dtype=np.float64)))
            elif kind == "doc":
                documents.append((rec["id"], np.array(rec["vector"], dtype=np.float64)))
            elif kind == "qrel":
                qrels[rec["query_id"]] = frozenset(rec["doc_ids"])
            else:
                raise ValueError(f"{path}:{ln + 1}: unknown record kind {kind!r}")
    if domain_tag is None:
        raise ValueError(f"{path}: empty corpus file")
    known = {i for i, _ in documents}
    for qid, rel in qrels.items():
        if not rel <= known:
            raise ValueError(f"{path}: qrels for {qid} reference unknown documents")
    return Corpus(domain_tag=domain_tag, queries=queries, documents=documents, qrels=qrels, gen_config=gen_config)


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for line in corpus_lines(corpus):
        h.update(line.encode("ascii"))
        h.update(b"\n")
    return h.hexdigest()


def unlabeled_hash(corpus: UnlabeledCorpus) -> str:
    """Content hash of an unlabeled corpus (queries and documents only)."""
    h = hashlib.sha256()
    h.update(json.dumps({"domain_tag": corpus.domain_tag, "kind": "unlabeled"}, sort_keys=True).encode("ascii"))
    for kind, items in (("query", corpus.queries), ("doc", corpus.documents)):
        for ident, vec in items:
            line = json.dumps({"kind": kind, "id": ident, "vector": [float(v) for v in vec]}, sort_keys=True)
            h.update(line.encode("ascii"))
            h.update(b"\n")
    return h.hexdigest()


def train_count(n: int, reserve_frac: float) -> int:
    """Size of the leading training slice when a tail fraction is reserved."""
    if not 0.0 <= reserve_frac < 1.0:
        raise ValueError("reserve_frac must be in [0, 1)")
    return n - int(round(n * reserve_frac))
