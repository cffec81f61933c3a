import dataclasses
import json

import numpy as np
import pytest

from daret import encoder as enc_mod
from daret import metrics as mt
from daret import numerics as nm
from daret import synthdata as sd
from daret import trainer as tr

GEN = sd.GenConfig(queries_per_domain=48, docs_per_domain=192, docs_per_query_relevant=4, seed=41)

CFG = tr.TrainConfig(
    batch_size=8,
    momentum_n=4,
    total_steps=60,
    eval_every=20,
    warmup_steps=20,
    half_life_steps=30,
    mining_refresh_steps=20,
    hidden_dims=(16,),
    emb_dim=8,
    seed=5,
)


def _cfg(**kw):
    return dataclasses.replace(CFG, **kw)


@pytest.fixture(scope="module")
def corpora():
    source, target_labeled = sd.generate(GEN)
    return source, target_labeled, sd.UnlabeledCorpus.strip(target_labeled)


def _evaluator(source, target_labeled, cfg):
    return mt.make_evaluator(source, target_labeled, mt.EvalConfig(), cfg.reserve_frac, cfg.seed)


def _run(cfg, corpora, on_eval=None):
    source, target_labeled, target = corpora
    ev = _evaluator(source, target_labeled, cfg)
    return tr.train(cfg, source, target, ev, on_eval)


# ---------------------------------------------------------------- config


def test_config_validation():
    for bad in (
        dict(mode="gan"),
        dict(adv_loss="other"),
        dict(batch_size=7),
        dict(momentum_n=0),
        dict(total_steps=50, eval_every=20),
        dict(eval_every=0),
        dict(reserve_frac=0.5),
        dict(encoder_lr=0.0),
        dict(negative_mode="random"),
        dict(hidden_dims=()),
        dict(encoder_momentum=1.0),
    ):
        with pytest.raises(ValueError):
            _cfg(**bad).validate()
    CFG.validate()


def test_config_dict_round_trip_and_hash():
    d = tr.config_dict(CFG)
    assert isinstance(d["hidden_dims"], list)
    assert tr.config_from_dict(d) == CFG
    json.dumps(d)
    assert tr.config_hash(CFG) == tr.config_hash(tr.config_from_dict(d))
    assert tr.config_hash(CFG) != tr.config_hash(_cfg(seed=6))


# ---------------------------------------------------------------- contracts


def test_trainer_rejects_labeled_target(corpora):
    source, target_labeled, _ = corpora
    with pytest.raises(TypeError):
        tr.train(CFG, source, target_labeled)

    class Sneaky(sd.UnlabeledCorpus):
        pass

    sneaky = Sneaky(domain_tag="target", queries=target_labeled.queries, documents=target_labeled.documents)
    sneaky.qrels = target_labeled.qrels  # smuggling labels back in must fail
    with pytest.raises(TypeError):
        tr.train(CFG, source, sneaky)


def test_trainer_rejects_swapped_or_unlabeled_source(corpora):
    source, target_labeled, target = corpora
    with pytest.raises(TypeError):
        tr.train(CFG, sd.UnlabeledCorpus.strip(source), target)
    with pytest.raises(ValueError):
        tr.train(CFG, source, sd.UnlabeledCorpus(domain_tag="source", queries=target.queries, documents=target.documents))


# ---------------------------------------------------------------- training runs


def test_train_report_schedule_and_losses(corpora):
    ckpt, reports = _run(CFG, corpora)
    assert [r.step for r in reports] == [0, 20, 40, 60]
    first, post = reports[0], reports[1]
    assert first.mean_ranking_loss is None  # nothing accumulated before step 1
    assert post.mean_ranking_loss > 0.0
    assert post.mean_clf_loss > 0.0
    assert first.lambda_value == 0.0
    # eval at the warmup boundary still reports lambda 0; later evals decay from lambda0
    assert reports[1].lambda_value == 0.0
    assert reports[2].lambda_value == pytest.approx(CFG.lambda0 * 2.0 ** (-19 / 30))
    assert ckpt["meta"]["step"] == 60
    assert "clf_w" in ckpt["arrays"]
    assert any(k.startswith("queue0_") for k in ckpt["arrays"])


def test_train_is_bit_deterministic(corpora):
    ckpt_a, reps_a = _run(CFG, corpora)
    ckpt_b, reps_b = _run(CFG, corpora)
    assert [r.to_json() for r in reps_a] == [r.to_json() for r in reps_b]
    for key in ckpt_a["arrays"]:
        assert np.array_equal(ckpt_a["arrays"][key], ckpt_b["arrays"][key]), key
    ckpt_c, _ = _run(_cfg(seed=6), corpora)
    assert not np.array_equal(ckpt_a["arrays"]["enc_w0"], ckpt_c["arrays"]["enc_w0"])


def test_lambda_zero_matches_baseline_encoder_trajectory(corpora):
    # with lambda0 = 0 the classifier trains but can never touch the encoder,
    # so the encoder must follow the baseline run bit for bit
    adv, _ = _run(_cfg(lambda0=0.0), corpora)
    base, _ = _run(_cfg(mode="baseline", lambda0=0.0), corpora)
    for i in (0, 1):
        assert np.array_equal(adv["arrays"][f"enc_w{i}"], base["arrays"][f"enc_w{i}"])
        assert np.array_equal(adv["arrays"][f"enc_b{i}"], base["arrays"][f"enc_b{i}"])
    assert "clf_w" not in base["arrays"]
    # and the classifier did actually train on the adversarial side
    assert np.abs(adv["arrays"]["clf_w"]).sum() > 0.0


def test_baseline_reports_null_domain_metrics(corpora):
    _, reports = _run(_cfg(mode="baseline"), corpora)
    for r in reports:
        assert r.lambda_value is None
        assert r.mean_clf_loss is None
        assert r.mean_adv_loss is None
        assert r.global_domain_acc is None
        assert r.local_domain_acc_reserved is None
        assert r.local_domain_acc_next is None
        assert 0.0 <= r.ndcg_target <= 1.0
        assert 0.0 <= r.knn_source_pct <= 100.0


def test_adversarial_reports_carry_domain_metrics(corpora):
    _, reports = _run(CFG, corpora)
    for r in reports:
        assert r.global_domain_acc is not None
        assert r.local_domain_acc_reserved is not None
        assert r.local_domain_acc_next is not None
    post_warmup = [r for r in reports if r.step > CFG.warmup_steps]
    assert any(r.mean_adv_loss is not None for r in post_warmup)


def test_in_batch_random_negative_mode_runs(corpora):
    ckpt, reports = _run(_cfg(negative_mode="in_batch_random", total_steps=20, eval_every=20, warmup_steps=5, lambda0=0.05), corpora)
    assert ckpt["meta"]["mined"] is None
    assert len(reports) == 2
    assert reports[-1].mean_ranking_loss > 0.0


def test_gan_and_minimax_losses_run(corpora):
    for kind in ("gan", "minimax"):
        _, reports = _run(_cfg(adv_loss=kind, total_steps=40, eval_every=20, warmup_steps=10), corpora)
        post = reports[-1]
        assert post.mean_adv_loss is not None
        assert np.isfinite(post.mean_adv_loss)


def test_encoder_momentum_changes_trajectory(corpora):
    plain, _ = _run(CFG, corpora)
    heavy, _ = _run(_cfg(encoder_momentum=0.5), corpora)
    assert not np.array_equal(plain["arrays"]["enc_w0"], heavy["arrays"]["enc_w0"])
    assert "vel_w0" in heavy["arrays"]


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_raises_with_step(corpora):
    with pytest.raises(tr.TrainDiverged) as exc:
        _run(_cfg(encoder_lr=1e30, negative_mode="in_batch_random", total_steps=20, eval_every=20, warmup_steps=0), corpora)
    assert exc.value.step >= 1


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_save_load_round_trip(tmp_path, corpora):
    ckpt, _ = _run(CFG, corpora)
    path = tmp_path / "ckpt.npz"
    tr.save_checkpoint(path, ckpt)
    assert not (tmp_path / "ckpt.npz.tmp").exists()
    back = tr.load_checkpoint(path)
    assert back["meta"] == json.loads(json.dumps(ckpt["meta"]))
    assert set(back["arrays"]) == set(ckpt["arrays"])
    for key in ckpt["arrays"]:
        assert np.array_equal(back["arrays"][key], ckpt["arrays"][key]), key


def test_resume_midpoint_is_bit_identical(tmp_path, corpora):
    source, target_labeled, target = corpora
    saved = {}

    def keep(report, ckpt):
        path = tmp_path / f"ck_{report.step}.npz"
        tr.save_checkpoint(path, ckpt)
        saved[report.step] = path

    ckpt_full, reps_full = _run(CFG, corpora, on_eval=keep)
    mid = tr.load_checkpoint(saved[20])
    ev = _evaluator(source, target_labeled, CFG)
    ckpt_res, reps_res = tr.resume(mid, CFG, source, target, ev)
    tail_full = [r.to_json() for r in reps_full if r.step > 20]
    assert [r.to_json() for r in reps_res] == tail_full
    for key in ckpt_full["arrays"]:
        assert np.array_equal(ckpt_full["arrays"][key], ckpt_res["arrays"][key]), key
    assert ckpt_res["meta"]["rng"] == ckpt_full["meta"]["rng"]


def test_resume_at_final_step_is_noop(tmp_path, corpora):
    source, target_labeled, target = corpora
    ckpt, _ = _run(CFG, corpora)
    path = tmp_path / "final.npz"
    tr.save_checkpoint(path, ckpt)
    again, reports = tr.resume(tr.load_checkpoint(path), CFG, source, target)
    assert reports == []
    assert again["meta"]["step"] == 60


def test_resume_refuses_mismatches(tmp_path, corpora):
    source, target_labeled, target = corpora
    ckpt, _ = _run(CFG, corpora)
    with pytest.raises(ValueError, match="different config"):
        tr.resume(ckpt, _cfg(seed=9), source, target)
    other_s, other_t = sd.generate(dataclasses.replace(GEN, seed=42))
    with pytest.raises(ValueError, match="corpora differ"):
        tr.resume(ckpt, CFG, other_s, sd.UnlabeledCorpus.strip(other_t))
    bad = {"meta": dict(ckpt["meta"], format=99), "arrays": ckpt["arrays"]}
    with pytest.raises(ValueError, match="format"):
        tr.resume(bad, CFG, source, target)


# ---------------------------------------------------------------- internals


def test_lambda_value_gating():
    cfg = _cfg(lambda0=0.2, warmup_steps=10, half_life_steps=20)
    assert tr._lambda_value(cfg, 0) == 0.0
    assert tr._lambda_value(cfg, 10) == 0.0
    assert tr._lambda_value(cfg, 11) == pytest.approx(0.2)  # first adversarial step
    assert tr._lambda_value(cfg, 31) == pytest.approx(0.1)  # one half-life later
    assert tr._lambda_value(_cfg(mode="baseline", lambda0=0.2), 50) == 0.0


def test_reserved_tail_never_sampled(corpora):
    source, _, target = corpora
    data = tr._Data(CFG, source, target)
    n_res_q = len(source.queries) - len(data.sq)
    assert n_res_q == round(len(source.queries) * CFG.reserve_frac)
    reserved_docs = {i for i, _ in source.documents} - data.train_doc_set
    rng = nm.stream_rng(0, "data")
    mined = {qid: ["sd0000"] * CFG.negatives_per_query for qid, _ in data.sq}
    for _ in range(50):
        qids, pos_ids, negs = tr._sample_source(data, CFG, rng, mined)
        assert not (set(qids) & {i for i, _ in source.queries[len(data.sq):]})
        assert not (set(pos_ids) & reserved_docs)
