"""Joint training loop: classifier on the queue first, then the encoder.

Per step the trainer samples a labeled source batch and an unlabeled target
batch, encodes everything once, pushes detached copies to the momentum queue,
trains the domain classifier on the queue, and finally updates the encoder on
ranking loss plus the decayed adversarial weight times the mean adversarial
loss over all encoded pairs (classifier parameters frozen during that
update). Hard negatives are refreshed by synchronous index rebuilds on a
fixed cadence.

The target side enters as an UnlabeledCorpus; a labeled Corpus is rejected
with TypeError, so target relevance labels are unrepresentable on this path.
Evaluation happens through an opaque callback (see metrics.make_evaluator).

Determinism: every stochastic choice draws from a named Philox stream, and
checkpoints capture all mutable state (parameters, optimizer velocity, queue,
RNG states, mined negatives, loss accumulators), so a resumed run is
bit-identical to an uninterrupted one.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder as enc_mod
from . import momentum as mom
from . import objectives as obj
from . import retrieval
from .metrics import EvalContext
from .numerics import clone_rng, rng_from_state, rng_state, stream_rng
from .synthdata import Corpus, UnlabeledCorpus, corpus_hash, train_count, unlabeled_hash

MODES = ("baseline", "adversarial")
NEGATIVE_MODES = ("mined_hard", "in_batch_random")
CKPT_FORMAT = 1
_STREAMS = ("data", "target_data", "clf", "mining")


class TrainDiverged(RuntimeError):
    """Raised when any loss goes non-finite; carries the offending step."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "adversarial"
    adv_loss: str = obj.CONFUSION
    momentum_n: int = 8
    batch_size: int = 16
    negatives_per_query: int = 1
    negative_mode: str = "mined_hard"
    mining_refresh_steps: int = 100
    lambda0: float = 0.1
    half_life_steps: int = 500
    encoder_lr: float = 0.1
    classifier_lr: float = 0.05
    classifier_passes: int = 1
    total_steps: int = 2000
    eval_every: int = 50
    seed: int = 7
    warmup_steps: int = 500
    hidden_dims: tuple = (64,)
    emb_dim: int = 32
    activation: str = "tanh"
    classifier_bias: bool = False
    encoder_momentum: float = 0.0
    reserve_frac: float = 0.1

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.adv_loss not in obj.ADV_LOSS_KINDS:
            raise ValueError(f"adv_loss must be one of {obj.ADV_LOSS_KINDS}")
        if self.momentum_n < 1:
            raise ValueError("momentum_n must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2 (queue ratios)")
        if self.negatives_per_query < 1:
            raise ValueError("negatives_per_query must be >= 1")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.mining_refresh_steps < 1:
            raise ValueError("mining_refresh_steps must be >= 1")
        if self.lambda0 < 0 or self.half_life_steps < 1:
            raise ValueError("lambda0 must be >= 0 and half_life_steps >= 1")
        if self.encoder_lr <= 0 or self.classifier_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.classifier_passes < 0:
            raise ValueError("classifier_passes must be >= 0")
        if self.eval_every < 1 or self.total_steps < self.eval_every:
            raise ValueError("need total_steps >= eval_every >= 1")
        if self.total_steps % self.eval_every:
            raise ValueError("total_steps must be a multiple of eval_every")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 <= self.reserve_frac <= 0.4:
            raise ValueError("reserve_frac must be in [0, 0.4]")
        if self.emb_dim < 1 or not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("invalid encoder dimensions")
        if self.activation not in enc_mod.ACTIVATIONS:
            raise ValueError(f"activation must be one of {enc_mod.ACTIVATIONS}")
        if not 0.0 <= self.encoder_momentum < 1.0:
            raise ValueError("encoder_momentum must be in [0, 1)")


def config_dict(cfg: TrainConfig) -> dict:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "hidden_dims" in d:
        d["hidden_dims"] = tuple(d["hidden_dims"])
    return TrainConfig(**d)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("ascii")).hexdigest()


@dataclass
class _State:
    enc: enc_mod.Encoder
    clf: Optional[mom.DomainClassifier]
    queue: Optional[mom.MomentumQueue]
    rngs: dict
    velocity: Optional[tuple]
    mined: Optional[dict]
    accum: dict
    step: int = 0


def _fresh_accum() -> dict:
    return {"rank_sum": 0.0, "rank_n": 0, "clf_sum": 0.0, "clf_n": 0, "adv_sum": 0.0, "adv_n": 0}


def _check_inputs(cfg: TrainConfig, source, target):
    cfg.validate()
    if not isinstance(source, Corpus):
        raise TypeError("source must be a labeled Corpus")
    if isinstance(target, Corpus) or hasattr(target, "qrels"):
        raise TypeError(
            "trainer cannot accept target relevance labels; pass UnlabeledCorpus.strip(corpus)"
        )
    if not isinstance(target, UnlabeledCorpus):
        raise TypeError("target must be an UnlabeledCorpus")
    if source.domain_tag != "source" or target.domain_tag != "target":
        raise ValueError("corpora must carry domain tags 'source' and 'target'")


class _Data:
    """Precomputed train-slice views of the corpora (reserved tail excluded)."""

    def __init__(self, cfg: TrainConfig, source: Corpus, target: UnlabeledCorpus):
        f = cfg.reserve_frac
        self.sq = source.queries[: train_count(len(source.queries), f)]
        self.sd = source.documents[: train_count(len(source.documents), f)]
        self.tq = target.queries[: train_count(len(target.queries), f)]
        self.td = target.documents[: train_count(len(target.documents), f)]
        if not (self.sq and self.sd and self.tq and self.td):
            raise ValueError("reserve_frac leaves an empty training slice")
        self.doc_feat = dict(source.documents)
        self.q_feat = dict(self.sq)
        self.train_doc_ids = [i for i, _ in self.sd]
        self.train_doc_set = set(self.train_doc_ids)
        self.qrels = source.qrels
        self.pos_lists = {}
        for qid, _ in self.sq:
            pos = sorted(source.qrels.get(qid, frozenset()) & self.train_doc_set)
            if not pos:
                raise ValueError(f"train query {qid} has no relevant document in the training slice")
            self.pos_lists[qid] = pos
        self.d_in = len(source.queries[0][1])


def _sample_source(data: _Data, cfg: TrainConfig, rng, mined):
    """One source batch: (query ids, positive ids, negative id lists)."""
    b = cfg.batch_size
    qpick = rng.integers(0, len(data.sq), size=b)
    qids = [data.sq[i][0] for i in qpick]
    pos_ids = [data.pos_lists[q][rng.integers(0, len(data.pos_lists[q]))] for q in qids]
    negs = []
    if cfg.negative_mode == "mined_hard":
        for q in qids:
            negs.append(list(mined[q][: cfg.negatives_per_query]))
    else:
        for bi, q in enumerate(qids):
            rel = data.qrels[q]
            row = []
            for _ in range(cfg.negatives_per_query):
                cand = None
                if b > 1:
                    o = int(rng.integers(0, b - 1))
                    o = o if o < bi else o + 1
                    if pos_ids[o] not in rel:
                        cand = pos_ids[o]
                tries = 0
                while cand is None:
                    c = data.train_doc_ids[int(rng.integers(0, len(data.train_doc_ids)))]
                    if c not in rel:
                        cand = c
                    tries += 1
                    if tries > 1000:
                        raise ValueError(f"query {q}: cannot sample a non-relevant document")
                row.append(cand)
            negs.append(row)
    return qids, pos_ids, negs


def _sample_target(data: _Data, cfg: TrainConfig, rng):
    """Random unlabeled target pairings: 3B/2 queries and 3B/2 docs."""
    m = (3 * cfg.batch_size) // 2
    qpick = rng.integers(0, len(data.tq), size=m)
    dpick = rng.integers(0, len(data.td), size=m)
    return [data.tq[i] for i in qpick], [data.td[i] for i in dpick]


def _lambda_value(cfg: TrainConfig, step: int) -> float:
    if cfg.mode != "adversarial" or cfg.lambda0 == 0.0 or step <= cfg.warmup_steps:
        return 0.0
    sched = obj.LambdaSchedule(cfg.lambda0, cfg.half_life_steps)
    return obj.lambda_at(sched, step - cfg.warmup_steps - 1)


def train(cfg: TrainConfig, source: Corpus, target: UnlabeledCorpus, evaluator=None, on_eval=None):
    """Run from scratch; returns (final checkpoint state, eval reports)."""
    _check_inputs(cfg, source, target)
    data = _Data(cfg, source, target)
    dims = [data.d_in, *cfg.hidden_dims, cfg.emb_dim]
    enc = enc_mod.init(dims, cfg.activation, stream_rng(cfg.seed, "init"))
    adversarial = cfg.mode == "adversarial"
    clf = mom.init_classifier(cfg.emb_dim, cfg.classifier_bias) if adversarial else None
    queue = mom.MomentumQueue(n=cfg.momentum_n) if adversarial else None
    velocity = None
    if cfg.encoder_momentum > 0:
        velocity = ([np.zeros_like(w) for w in enc.weights], [np.zeros_like(b) for b in enc.biases])
    st = _State(
        enc=enc,
        clf=clf,
        queue=queue,
        rngs={name: stream_rng(cfg.seed, name) for name in _STREAMS},
        velocity=velocity,
        mined=None,
        accum=_fresh_accum(),
        step=0,
    )
    return _run(cfg, source, target, data, st, evaluator, on_eval)


def resume(ckpt: dict, cfg: TrainConfig, source: Corpus, target: UnlabeledCorpus, evaluator=None, on_eval=None):
    """Continue a checkpointed run; bit-identical to the uninterrupted run."""
    _check_inputs(cfg, source, target)
    meta = ckpt["meta"]
    if meta.get("format") != CKPT_FORMAT:
        raise ValueError("unsupported checkpoint format")
    if meta["config_hash"] != config_hash(cfg):
        raise ValueError("checkpoint was produced by a different config; refusing to resume")
    if meta["source_hash"] != corpus_hash(source) or meta["target_hash"] != unlabeled_hash(target):
        raise ValueError("checkpoint corpora differ from the supplied corpora; refusing to resume")
    data = _Data(cfg, source, target)
    arrays = ckpt["arrays"]
    enc = enc_mod.from_state(meta["encoder"], arrays)
    adversarial = cfg.mode == "adversarial"
    clf = mom.classifier_from_state(arrays) if adversarial else None
    queue = mom.queue_from_state(cfg.momentum_n, arrays) if adversarial else None
    velocity = None
    if cfg.encoder_momentum > 0:
        velocity = (
            [np.array(arrays[f"vel_w{i}"]) for i in range(len(enc.weights))],
            [np.array(arrays[f"vel_b{i}"]) for i in range(len(enc.biases))],
        )
    rngs = {name: rng_from_state(state) for name, state in meta["rng"].items()}
    st = _State(
        enc=enc,
        clf=clf,
        queue=queue,
        rngs=rngs,
        velocity=velocity,
        mined=meta["mined"],
        accum=dict(meta["accum"]),
        step=int(meta["step"]),
    )
    if st.step >= cfg.total_steps:
        return ckpt, []
    return _run(cfg, source, target, data, st, evaluator, on_eval)


def _run(cfg, source, target, data, st, evaluator, on_eval):
    adversarial = cfg.mode == "adversarial"
    src_hash = corpus_hash(source)
    tgt_hash = unlabeled_hash(target)
    b = cfg.batch_size
    npq = cfg.negatives_per_query
    # fixed row layout of the per-step encoding batch
    off_pos = b
    off_neg = 2 * b
    off_tq = 2 * b + b * npq
    m_t = (3 * b) // 2
    off_td = off_tq + m_t

    def build_ckpt():
        meta = {
            "format": CKPT_FORMAT,
            "step": st.step,
            "config_hash": config_hash(cfg),
            "source_hash": src_hash,
            "target_hash": tgt_hash,
            "rng": {name: rng_state(g) for name, g in st.rngs.items()},
            "mined": st.mined,
            "accum": dict(st.accum),
        }
        arrays = {}
        enc_state = enc_mod.to_state(st.enc)
        meta["encoder"] = enc_state["meta"]
        arrays.update(enc_state["arrays"])
        if adversarial:
            arrays.update(mom.classifier_state(st.clf))
            arrays.update(mom.queue_state(st.queue))
        if st.velocity is not None:
            for i, (vw, vb) in enumerate(zip(*st.velocity)):
                arrays[f"vel_w{i}"] = vw
                arrays[f"vel_b{i}"] = vb
        return {"meta": meta, "arrays": arrays}

    def sample_batch(rng_data, rng_target):
        """Full draw for one step; used for real steps and the eval peek."""
        qids, pos_ids, negs = _sample_source(data, cfg, rng_data, st.mined)
        tgt_q = tgt_d = None
        if adversarial:
            tgt_q, tgt_d = _sample_target(data, cfg, rng_target)
        return qids, pos_ids, negs, tgt_q, tgt_d

    def features_for(qids, pos_ids, negs, tgt_q, tgt_d):
        rows = [data.q_feat[q] for q in qids]
        rows += [data.doc_feat[d] for d in pos_ids]
        for row_negs in negs:
            rows += [data.doc_feat[d] for d in row_negs]
        if tgt_q is not None:
            rows += [v for _, v in tgt_q]
            rows += [v for _, v in tgt_d]
        return np.stack(rows)

    def refresh_mining(step):
        index = retrieval.build_index(st.enc, [source], built_at_step=step, doc_subset=data.train_doc_set)
        st.mined = retrieval.mine_hard_negatives(
            st.enc, index, data.sq, source.qrels, cfg.negatives_per_query, st.rngs["mining"]
        )

    def emit_eval(step):
        lam = _lambda_value(cfg, step)
        acc = st.accum
        ctx = EvalContext(
            step=step,
            encoder=st.enc,
            classifier=st.clf,
            domain_metrics=adversarial,
            lambda_value=lam if adversarial else None,
            mean_ranking_loss=(acc["rank_sum"] / acc["rank_n"]) if acc["rank_n"] else None,
            mean_clf_loss=(acc["clf_sum"] / acc["clf_n"]) if acc["clf_n"] else None,
            mean_adv_loss=(acc["adv_sum"] / acc["adv_n"]) if acc["adv_n"] else None,
            next_batch=None,
        )
        if adversarial:
            peek_q, peek_t = clone_rng(st.rngs["data"]), clone_rng(st.rngs["target_data"])
            qids, pos_ids, negs, tgt_q, tgt_d = sample_batch(peek_q, peek_t)
            feats = features_for(qids, pos_ids, negs, tgt_q, tgt_d)
            embs, _ = enc_mod.encode_batch(st.enc, feats, need_tape=False)
            doms = np.concatenate(
                [np.zeros(off_tq, dtype=np.int64), np.ones(2 * m_t, dtype=np.int64)]
            )
            ctx.next_batch = (embs, doms)
        report = evaluator(ctx) if evaluator is not None else None
        st.accum = _fresh_accum()
        if report is not None and on_eval is not None:
            on_eval(report, build_ckpt())
        return report

    if cfg.negative_mode == "mined_hard" and st.mined is None:
        refresh_mining(st.step)
    reports = []
    if st.step == 0:
        rep = emit_eval(0)
        if rep is not None:
            reports.append(rep)

    grad = enc_mod.grad_like(st.enc)
    for step in range(st.step + 1, cfg.total_steps + 1):
        qids, pos_ids, negs, tgt_q, tgt_d = sample_batch(st.rngs["data"], st.rngs["target_data"])
        feats = features_for(qids, pos_ids, negs, tgt_q, tgt_d)
        embs, tape = enc_mod.encode_batch(st.enc, feats)
        if not np.all(np.isfinite(embs)):
            raise TrainDiverged(step, "non-finite embeddings")

        clf_loss = None
        if adversarial:
            src_entries = [(embs[i], mom.ROLE_QUERY) for i in range(b)]
            src_entries += [(embs[off_pos + i], mom.ROLE_POS) for i in range(b)]
            src_entries += [(embs[off_neg + i * npq], mom.ROLE_NEG) for i in range(b)]
            tgt_entries = [(embs[off_tq + i], mom.ROLE_QUERY) for i in range(m_t)]
            tgt_entries += [(embs[off_td + i], mom.ROLE_DOC) for i in range(m_t)]
            mom.push_batch(st.queue, src_entries, tgt_entries, born_step=step)
            clf_loss = mom.train_classifier_step(
                st.clf, st.queue, cfg.classifier_lr, cfg.classifier_passes, st.rngs["clf"]
            )
            st.accum["clf_sum"] += clf_loss
            st.accum["clf_n"] += 1

        # encoder update; classifier (if any) is frozen from here on
        upstream = np.zeros_like(embs)
        rank_total = 0.0
        wq = 1.0 / b
        for bi in range(b):
            qi = bi
            pi = off_pos + bi
            nis = [off_neg + bi * npq + j for j in range(npq)]
            s_pos = float(embs[qi] @ embs[pi])
            s_negs = [float(embs[qi] @ embs[ni]) for ni in nis]
            if not np.isfinite(s_pos) or not np.all(np.isfinite(s_negs)):
                raise TrainDiverged(step, "non-finite similarity scores")
            loss, dpos, dnegs = obj.ranking_loss(s_pos, s_negs)
            rank_total += loss
            upstream[qi] += wq * dpos * embs[pi]
            upstream[pi] += wq * dpos * embs[qi]
            for ni, dn in zip(nis, dnegs):
                upstream[qi] += wq * dn * embs[ni]
                upstream[ni] += wq * dn * embs[qi]
        rank_mean = rank_total / b

        lam = _lambda_value(cfg, step)
        adv_mean = None
        if adversarial and lam > 0.0:
            p_all = mom.classify_batch(st.clf, embs)
            pairs = [(bi, off_pos + bi, obj.SOURCE) for bi in range(b)]
            pairs += [(bi, off_neg + bi * npq + j, obj.SOURCE) for bi in range(b) for j in range(npq)]
            pairs += [(off_tq + i, off_td + i, obj.TARGET) for i in range(m_t)]
            wp = lam / len(pairs)
            adv_total = 0.0
            for qi, di, dom in pairs:
                loss, dpq, dpd = obj.adversarial_loss(cfg.adv_loss, p_all[qi], p_all[di], dom)
                adv_total += loss
                upstream[qi] += wp * (st.clf.W.T @ obj.dprob_to_dlogits(p_all[qi], dpq))
                upstream[di] += wp * (st.clf.W.T @ obj.dprob_to_dlogits(p_all[di], dpd))
            adv_mean = adv_total / len(pairs)
            st.accum["adv_sum"] += adv_mean
            st.accum["adv_n"] += 1
        st.accum["rank_sum"] += rank_mean
        st.accum["rank_n"] += 1

        checks = [rank_mean]
        if clf_loss is not None:
            checks.append(clf_loss)
        if adv_mean is not None:
            checks.append(adv_mean)
        if not np.all(np.isfinite(checks)):
            raise TrainDiverged(step, f"ranking/classifier/adversarial losses = {checks}")

        grad.zero_()
        enc_mod.backprop_batch(st.enc, tape, upstream, grad)
        enc_mod.sgd_step(st.enc, grad, cfg.encoder_lr, cfg.encoder_momentum, st.velocity)
        st.step = step

        if cfg.negative_mode == "mined_hard" and step % cfg.mining_refresh_steps == 0 and step < cfg.total_steps:
            refresh_mining(step)
        if step % cfg.eval_every == 0:
            rep = emit_eval(step)
            if rep is not None:
                reports.append(rep)

    return build_ckpt(), reports


def save_checkpoint(path, ckpt: dict):
    """Atomic write (temp then rename) of the npz checkpoint."""
    payload = dict(ckpt["arrays"])
    payload["__meta__"] = np.array(json.dumps(ckpt["meta"]))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(data[k]) for k in data.files if k != "__meta__"}
        meta = json.loads(str(data["__meta__"][()]))
    return {"meta": meta, "arrays": arrays}
