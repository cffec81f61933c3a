"""Command-line entry point: generate / train / eval / project / report / defaults.

One JSON config file drives every command; sections "gen", "train", "eval"
mirror the library config types, "corpora" and "checkpoint" locate files
(paths are resolved relative to the config file), and a top-level "seed" is
shared by generation and training unless a section carries its own. The
--seed flag overrides all of them. A run directory is populated with a config
snapshot (written before any training step), metrics.jsonl, and one
checkpoint per evaluation point.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import encoder as enc_mod
from . import metrics, momentum, synthdata, trainer
from .trainer import TrainDiverged

SCHEMA_VERSION = 1

_EVAL_KEYS = ("k", "knn_k", "probe_lr", "probe_tol", "probe_max_sweeps", "local_batch_per_domain")
_TOP_KEYS = ("schema_version", "seed", "corpora", "checkpoint", "gen", "train", "eval")


def default_config() -> dict:
    gen = synthdata.config_dict(synthdata.GenConfig())
    del gen["seed"]
    train = trainer.config_dict(trainer.TrainConfig())
    del train["seed"]
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 7,
        "corpora": {"source": "source.jsonl", "target": "target.jsonl"},
        "checkpoint": None,
        "gen": gen,
        "train": train,
        "eval": {
            "k": 10,
            "knn_k": 100,
            "probe_lr": 1.0,
            "probe_tol": 1e-5,
            "probe_max_sweeps": 500,
            "local_batch_per_domain": 64,
        },
    }


def _merge_section(name, defaults, user):
    unknown = set(user) - set(defaults) - ({"seed"} if name in ("gen", "train") else set())
    if unknown:
        raise ValueError(f"config section {name!r} has unknown keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(user)
    return merged


def load_config(path, seed_override=None) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    if user.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"config {path}: schema_version must be {SCHEMA_VERSION}")
    unknown = set(user) - set(_TOP_KEYS)
    if unknown:
        raise ValueError(f"config {path}: unknown top-level keys {sorted(unknown)}")
    conf = default_config()
    for section in ("gen", "train", "eval"):
        conf[section] = _merge_section(section, conf[section], user.get(section, {}))
    conf["corpora"] = _merge_section("corpora", conf["corpora"], user.get("corpora", {}))
    conf["seed"] = user.get("seed", conf["seed"])
    conf["checkpoint"] = user.get("checkpoint")
    if seed_override is not None:
        conf["seed"] = int(seed_override)
        conf["gen"].pop("seed", None)
        conf["train"].pop("seed", None)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("source", "target"):
        conf["corpora"][key] = _resolve(conf["corpora"][key], base)
    if conf["checkpoint"]:
        conf["checkpoint"] = _resolve(conf["checkpoint"], base)
    return conf


def _resolve(p, base):
    return p if os.path.isabs(p) else os.path.join(base, p)


def _gen_config(conf) -> synthdata.GenConfig:
    section = dict(conf["gen"])
    section.setdefault("seed", conf["seed"])
    return synthdata.config_from_dict(section)


def _train_config(conf) -> trainer.TrainConfig:
    section = dict(conf["train"])
    section.setdefault("seed", conf["seed"])
    return trainer.config_from_dict(section)


def _eval_config(conf) -> metrics.EvalConfig:
    s = conf["eval"]
    unknown = set(s) - set(_EVAL_KEYS)
    if unknown:
        raise ValueError(f"eval section has unknown keys: {sorted(unknown)}")
    probe = metrics.ProbeConfig(lr=s["probe_lr"], tol=s["probe_tol"], max_sweeps=s["probe_max_sweeps"])
    return metrics.EvalConfig(k=s["k"], knn_k=s["knn_k"], probe=probe, local_batch_per_domain=s["local_batch_per_domain"])


def _load_corpora(conf):
    source = synthdata.load_corpus(conf["corpora"]["source"])
    target = synthdata.load_corpus(conf["corpora"]["target"])
    return source, target


def _load_encoder_and_classifier(conf):
    if not conf["checkpoint"]:
        raise ValueError("config has no checkpoint path")
    ckpt = trainer.load_checkpoint(conf["checkpoint"])
    enc = enc_mod.from_state(ckpt["meta"]["encoder"], ckpt["arrays"])
    clf = momentum.classifier_from_state(ckpt["arrays"]) if "clf_w" in ckpt["arrays"] else None
    return ckpt, enc, clf


def cmd_generate(args) -> int:
    conf = load_config(args.config, args.seed)
    gen_cfg = _gen_config(conf)
    os.makedirs(args.out, exist_ok=True)
    source, target = synthdata.generate(gen_cfg)
    synthdata.save_corpus(os.path.join(args.out, "source.jsonl"), source)
    synthdata.save_corpus(os.path.join(args.out, "target.jsonl"), target)
    with open(os.path.join(args.out, "gen_config.json"), "w", encoding="utf-8") as fh:
        json.dump(synthdata.config_dict(gen_cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote source.jsonl and target.jsonl to {args.out}")
    return 0


def _report_table(report: metrics.EvalReport) -> str:
    rows = [
        ("step", report.step),
        ("lambda", report.lambda_value),
        ("mean ranking loss", report.mean_ranking_loss),
        ("mean classifier loss", report.mean_clf_loss),
        ("mean adversarial loss", report.mean_adv_loss),
        ("source nDCG", report.ndcg_source),
        ("target nDCG", report.ndcg_target),
        ("KNN source pct", report.knn_source_pct),
        ("global domain acc", report.global_domain_acc),
        ("local domain acc (reserved)", report.local_domain_acc_reserved),
        ("local domain acc (next batch)", report.local_domain_acc_next),
    ]
    width = max(len(name) for name, _ in rows)
    lines = []
    for name, value in rows:
        if isinstance(value, float):
            value = f"{value:.4f}"
        lines.append(f"{name:<{width}}  {value}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    conf = load_config(args.config, args.seed)
    run_dir = args.out
    if os.path.isdir(run_dir) and os.listdir(run_dir) and not args.force:
        raise ValueError(f"run dir {run_dir} is not empty; pass --force to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    # snapshot before any training step
    with open(os.path.join(run_dir, "config_snapshot.json"), "w", encoding="utf-8") as fh:
        json.dump(conf, fh, indent=2, sort_keys=True)
        fh.write("\n")
    source, target_labeled = _load_corpora(conf)
    train_cfg = _train_config(conf)
    eval_cfg = _eval_config(conf)
    evaluator = metrics.make_evaluator(
        source, target_labeled, eval_cfg, train_cfg.reserve_frac, train_cfg.seed
    )
    target = synthdata.UnlabeledCorpus.strip(target_labeled)
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="ascii") as metrics_fh:

        def on_eval(report, ckpt):
            metrics_fh.write(report.to_json() + "\n")
            metrics_fh.flush()
            trainer.save_checkpoint(os.path.join(ckpt_dir, f"ckpt_{report.step:06d}.npz"), ckpt)

        _, reports = trainer.train(train_cfg, source, target, evaluator, on_eval)
    print(f"run complete: {len(reports)} evaluation points in {metrics_path}")
    print(_report_table(reports[-1]))
    return 0


def cmd_eval(args) -> int:
    conf = load_config(args.config, args.seed)
    source, target_labeled = _load_corpora(conf)
    train_cfg = _train_config(conf)
    eval_cfg = _eval_config(conf)
    ckpt, enc, clf = _load_encoder_and_classifier(conf)
    evaluator = metrics.make_evaluator(
        source, target_labeled, eval_cfg, train_cfg.reserve_frac, train_cfg.seed
    )
    ctx = metrics.EvalContext(
        step=int(ckpt["meta"]["step"]),
        encoder=enc,
        classifier=clf,
        domain_metrics=clf is not None,
    )
    report = evaluator(ctx)
    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.json"), "w", encoding="ascii") as fh:
            fh.write(report.to_json() + "\n")
    return 0


def cmd_project(args) -> int:
    conf = load_config(args.config, args.seed)
    source, target = _load_corpora(conf)
    _, enc, _ = _load_encoder_and_classifier(conf)
    rows = []
    mats = []
    for corpus in (source, target):
        for role, items in (("query", corpus.queries), ("doc", corpus.documents)):
            for ident, vec in items:
                rows.append((ident, role, corpus.domain_tag))
            mats.append(synthdata.stack(items))
    embs, _ = enc_mod.encode_batch(enc, np.concatenate(mats), need_tape=False)
    coords = _pca2(embs)
    out = args.out
    if not out.endswith(".csv"):
        os.makedirs(out, exist_ok=True)
        out = os.path.join(out, "projection.csv")
    with open(out, "w", encoding="ascii") as fh:
        fh.write("id,role,domain,pc1,pc2\n")
        for (ident, role, domain), (pc1, pc2) in zip(rows, coords):
            fh.write(f"{ident},{role},{domain},{float(pc1)!r},{float(pc2)!r}\n")
    print(f"wrote {out}")
    return 0


def _pca2(embs: np.ndarray) -> np.ndarray:
    """Two principal components, variance-ordered, largest loading positive."""
    if embs.shape[0] < 3:
        raise ValueError("projection needs at least 3 points")
    X = embs - embs.mean(axis=0)
    cov = (X.T @ X) / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, ::-1][:, :2].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    return X @ comps.T


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_report(args) -> int:
    run_dir = args.out
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(metrics_path):
        raise ValueError(f"no metrics.jsonl in {run_dir}")
    reports = []
    with open(metrics_path, "r", encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                reports.append(metrics.EvalReport.from_json(line))
    if not reports:
        raise ValueError(f"{metrics_path} is empty")
    reports.sort(key=lambda r: r.step)
    acc_path = os.path.join(run_dir, "domain_acc_vs_step.csv")
    with open(acc_path, "w", encoding="ascii") as fh:
        fh.write("step,global,local\n")
        for r in reports:
            fh.write(f"{r.step},{_csv_cell(r.global_domain_acc)},{_csv_cell(r.local_domain_acc_next)}\n")
    inv_path = os.path.join(run_dir, "invariance_vs_ndcg.csv")
    with open(inv_path, "w", encoding="ascii") as fh:
        fh.write("step,knn_source_pct,target_ndcg,source_ndcg\n")
        for r in reports:
            fh.write(
                f"{r.step},{_csv_cell(r.knn_source_pct)},{_csv_cell(r.ndcg_target)},{_csv_cell(r.ndcg_source)}\n"
            )
    print(f"wrote {acc_path} and {inv_path}")
    return 0


def cmd_defaults(args) -> int:
    text = json.dumps(default_config(), indent=2, sort_keys=True) + "\n"
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daret", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config=True, needs_out=True, out_required=True):
        sp = sub.add_parser(name)
        if needs_config:
            sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override every configured seed")
        if needs_out:
            sp.add_argument("--out", required=out_required, help="output directory (or file where noted)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty run dir")
        sp.set_defaults(fn=fn)
        return sp

    add("generate", cmd_generate)
    add("train", cmd_train)
    add("eval", cmd_eval, out_required=False)
    add("project", cmd_project)
    add("report", cmd_report, needs_config=False)
    add("defaults", cmd_defaults, needs_config=False, out_required=False)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
