"""Command-line entry point.

Every command is driven by one JSON config file (defaults below; unknown keys
are rejected with the full list of offenders) plus a few path flags. Outputs
are written atomically under the output directory, so a failed command never
leaves partial files behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import teacher as teacher_mod
from . import theory
from ._fileio import atomic_write_text
from .errors import ConfigError, ScmdError
from .losses import LossWeights, SelectionConfig
from .student import StudentConfig, load_checkpoint, save_checkpoint
from .trainer import (
    DEFAULT_SWEEP_SPACE,
    TrainConfig,
    evaluate,
    run_experiment,
    sweep,
    train,
)

ABLATION_STRATEGIES = ("none", "kl", "distill", "focal", "ce")

DEFAULTS = {
    "output_dir": "runs",
    "data": {
        "classes": 4,
        "domains": 4,
        "n_per_domain": 150,
        "feature_dim": 16,
        "shift_strength": 0.3,
        "noise": 0.15,
        "seed": 7,
        "held_out_domain": 0,
        "train_fraction": 0.8,
        "split_seed": 0,
    },
    "teacher": {
        "embed_dim": 16,
        "anchor_seed": 11,
        "image_noise": 0.35,
        "logit_scale": 10.0,
        "prompt_template": "this is a photo of a {}",
        "class_names": None,
    },
    "student": {
        "hidden_dims": [64, 64],
        "init_seed": 3,
        "projector_bias": True,
        "normalize_projected": True,
    },
    "train": {
        "optimizer": "adam",
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "batch_size": 32,
        "total_steps": 600,
        "ma_start_frac": 0.5,
        "eval_every": 50,
        "seed": 0,
        "loss": {
            "lambda_ce": 1.0,
            "lambda_kd": 0.5,
            "lambda_cm": 0.5,
            "temperature": 3.0,
            "gamma": None,
            "t_squared": True,
        },
    },
    "selection": {"strategy": "ce", "rho": 1.0 / 3.0, "focal_gamma": 2.0},
    "schedule": {"kappa": 0.25},
    "experiment": {
        "algorithms": ["ERM", "VanillaKD", "SCMD_full"],
        "seeds": [0, 1, 2, 3, 4],
        "held_out_domains": None,
    },
    "sweep": {
        "n_trials": 5,
        "seeds_per_trial": 3,
        "seed": 0,
        "held_out": 0,
        "space": DEFAULT_SWEEP_SPACE,
    },
    "theory": {
        "tv_bound": {"trials": 100000, "support_size": 12, "seed": 0},
        "finite_sample": {
            "hypotheses": 16,
            "support_size": 10,
            "num_classes": 2,
            "n": 10,
            "delta": 0.1,
            "resamples": 1000,
            "seed": 0,
        },
        "selection_comparison": {
            "trials": 2000,
            "members": 4,
            "support_size": 6,
            "cluster_range": [0.05, 0.25],
            "outlier_range": [0.8, 0.95],
            "seed": 0,
        },
    },
}

# sections whose values may be swapped out wholesale without key-by-key checks
_OPAQUE_PATHS = {"sweep.space", "teacher.class_names",
                 "experiment.algorithms", "experiment.seeds",
                 "experiment.held_out_domains", "student.hidden_dims",
                 "theory.selection_comparison.cluster_range",
                 "theory.selection_comparison.outlier_range"}


def _merge(defaults, user, path, problems):
    """Deep-merge user over defaults, recording unknown keys and type clashes."""
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if user is None or key not in user:
            out[key] = dval
            continue
        uval = user[key]
        if isinstance(dval, dict) and here not in _OPAQUE_PATHS:
            if not isinstance(uval, dict):
                problems.append(f"{here}: expected an object")
                out[key] = dval
            else:
                out[key] = _merge(dval, uval, here, problems)
        else:
            out[key] = uval
    if isinstance(user, dict):
        for key in user:
            if key not in defaults:
                problems.append(f"unknown key {f'{path}.{key}' if path else key}")
    return out


def load_config(path=None):
    user = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError([f"config is not valid JSON: {e}"]) from e
        if not isinstance(user, dict):
            raise ConfigError(["config root must be a JSON object"])
    problems = []
    cfg = _merge(DEFAULTS, user, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def build_dataset(cfg):
    d = cfg["data"]
    return data_mod.gen_synthetic(
        num_classes=d["classes"], num_domains=d["domains"],
        n_per_domain=d["n_per_domain"], feature_dim=d["feature_dim"],
        shift_strength=d["shift_strength"], noise=d["noise"], seed=d["seed"])


def build_teacher(cfg, ds):
    t = cfg["teacher"]
    oracle_cfg = teacher_mod.OracleTeacherConfig(
        embed_dim=t["embed_dim"], anchor_seed=t["anchor_seed"],
        image_noise=t["image_noise"], logit_scale=t["logit_scale"])
    return teacher_mod.make_oracle_teacher(
        oracle_cfg, ds, prompt_template=t["prompt_template"],
        class_names=t["class_names"])


def build_train_config(cfg, ds, teacher):
    s, t, l = cfg["student"], cfg["train"], cfg["train"]["loss"]
    student = StudentConfig(
        input_dim=ds.feature_dim, num_classes=ds.num_classes,
        teacher_embed_dim=teacher.embed_dim if teacher is not None else ds.num_classes,
        hidden_dims=tuple(s["hidden_dims"]), init_seed=s["init_seed"],
        projector_bias=s["projector_bias"],
        normalize_projected=s["normalize_projected"])
    return TrainConfig(
        student=student,
        total_steps=t["total_steps"],
        optimizer=t["optimizer"],
        lr=t["lr"],
        weight_decay=t["weight_decay"],
        batch_size=t["batch_size"],
        loss=LossWeights(lambda_ce=l["lambda_ce"], lambda_kd=l["lambda_kd"],
                         lambda_cm=l["lambda_cm"], temperature=l["temperature"],
                         gamma=l["gamma"], t_squared=l["t_squared"]),
        selection=SelectionConfig(strategy=cfg["selection"]["strategy"],
                                  rho=cfg["selection"]["rho"],
                                  focal_gamma=cfg["selection"]["focal_gamma"]),
        kappa=cfg["schedule"]["kappa"],
        ma_start_frac=t["ma_start_frac"],
        eval_every=t["eval_every"],
        seed=t["seed"],
    )


def _load_or_build_dataset(cfg, data_path):
    if data_path:
        return data_mod.load_dataset(data_path)
    return build_dataset(cfg)


def _load_or_build_teacher(cfg, teacher_path, ds):
    if teacher_path:
        return teacher_mod.load_artifact(teacher_path)
    return build_teacher(cfg, ds)


def _splits(cfg, ds):
    d = cfg["data"]
    train_part, test_part = data_mod.split_lodo(ds, d["held_out_domain"])
    tr, val = data_mod.split_train_val(train_part, d["train_fraction"], d["split_seed"])
    return tr, val, test_part


# ---- commands ----

def cmd_gen_data(args):
    cfg = load_config(args.config)
    ds = build_dataset(cfg)
    out = os.path.join(args.out or cfg["output_dir"], "dataset.csv")
    data_mod.save_dataset(ds, out)
    print(f"wrote {out}: {len(ds)} samples, "
          f"{ds.num_classes} classes, {ds.num_domains} domains, dim {ds.feature_dim}")
    return 0


def cmd_oracle_teacher(args):
    cfg = load_config(args.config)
    ds = _load_or_build_dataset(cfg, args.data)
    artifact = build_teacher(cfg, ds)
    out = os.path.join(args.out or cfg["output_dir"], "teacher.bin")
    teacher_mod.save_artifact(artifact, out)
    acc = teacher_mod.zero_shot_accuracy(artifact, ds)
    print(f"wrote {out}: {artifact.num_classes} classes, dim {artifact.embed_dim}, "
          f"{artifact.num_samples} image embeddings, zero-shot accuracy {acc:.4f}")
    return 0


def _apply_seed_override(cfg, args):
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed


def cmd_train(args):
    cfg = load_config(args.config)
    _apply_seed_override(cfg, args)
    ds = _load_or_build_dataset(cfg, args.data)
    artifact = _load_or_build_teacher(cfg, args.teacher, ds)
    tr, val, test = _splits(cfg, ds)
    tcfg = build_train_config(cfg, ds, artifact)
    log = None if args.quiet else print
    report = train(tcfg, tr, val, artifact, test, log_fn=log)
    outdir = args.out or cfg["output_dir"]
    report_path = os.path.join(outdir, "report.json")
    ckpt_path = os.path.join(outdir, "checkpoint.bin")
    atomic_write_text(report_path, _dump_json(report.to_dict()))
    save_checkpoint(report.chosen_params, report.chosen_step, ckpt_path)
    print(f"wrote {report_path} and {ckpt_path}; "
          f"chosen step {report.chosen_step}, "
          f"held-out accuracy {report.headline_accuracy:.4f}")
    return 0


def cmd_eval(args):
    params, step = load_checkpoint(args.checkpoint)
    ds = data_mod.load_dataset(args.data)
    if args.domain is not None:
        subset = [s for s in ds.samples if s.d == args.domain]
        ds = ds._view(subset)
    acc = evaluate(params, ds)
    payload = {"accuracy": acc, "checkpoint_step": step,
               "domain": args.domain, "samples": len(ds)}
    text = _dump_json(payload)
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(os.path.join(args.out, "eval.json"), text)
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    ds = _load_or_build_dataset(cfg, args.data)
    artifact = _load_or_build_teacher(cfg, args.teacher, ds)
    tcfg = build_train_config(cfg, ds, artifact)
    e = cfg["experiment"]
    held = e["held_out_domains"] or [cfg["data"]["held_out_domain"]]
    algorithms = [f"SCMD_variant:{s}" for s in ABLATION_STRATEGIES]
    result = run_experiment(ds, artifact, tcfg, algorithms, e["seeds"],
                            held_out_domains=held,
                            train_fraction=cfg["data"]["train_fraction"],
                            split_seed=cfg["data"]["split_seed"],
                            workers=args.workers, log_fn=print)
    outdir = args.out or cfg["output_dir"]
    # one row per selection strategy in the summary table
    summary = result.summary_csv().replace("SCMD_variant:", "")
    atomic_write_text(os.path.join(outdir, "ablate.csv"), summary)
    atomic_write_text(os.path.join(outdir, "ablate_cells.csv"), result.cells_csv())
    print(f"wrote {os.path.join(outdir, 'ablate.csv')}")
    failed = [c for c in result.cells if c["status"] != "ok"]
    if failed:
        print(f"error: {len(failed)} cells failed", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    ds = _load_or_build_dataset(cfg, args.data)
    artifact = _load_or_build_teacher(cfg, args.teacher, ds)
    tcfg = build_train_config(cfg, ds, artifact)
    s = cfg["sweep"]
    result = sweep(ds, artifact, tcfg, search_space=s["space"],
                   n_trials=s["n_trials"], seeds_per_trial=s["seeds_per_trial"],
                   sweep_seed=s["seed"], held_out=s["held_out"],
                   train_fraction=cfg["data"]["train_fraction"],
                   split_seed=cfg["data"]["split_seed"], log_fn=print)
    outdir = args.out or cfg["output_dir"]
    atomic_write_text(os.path.join(outdir, "sweep_trials.csv"), result.trials_csv())
    atomic_write_text(os.path.join(outdir, "best_config.json"), _dump_json({
        "sampled": result.trials[0]["sampled"],
        "mean_val_accuracy": result.trials[0]["mean_val_accuracy"],
        "train_config": result.best_config.to_dict(),
    }))
    print(f"wrote {os.path.join(outdir, 'sweep_trials.csv')} and best_config.json")
    return 0


def cmd_verify_theory(args):
    cfg = load_config(args.config)
    t = cfg["theory"]
    outdir = args.out or cfg["output_dir"]
    ok = True

    tb = t["tv_bound"]
    r1 = theory.check_tv_risk_bound(tb["trials"], tb["support_size"], tb["seed"])
    atomic_write_text(os.path.join(outdir, "theory_tv_bound.json"), _dump_json(r1))
    print(f"tv risk bound: {r1['violations']} violations in {r1['trials']} trials")
    ok &= r1["violations"] == 0

    fs = t["finite_sample"]
    rng = np.random.default_rng(fs["seed"])
    labeling = rng.integers(0, fs["num_classes"], size=fs["support_size"])
    hypotheses = [theory.Hypothesis(
        labels=rng.integers(0, fs["num_classes"], size=fs["support_size"]))
        for _ in range(fs["hypotheses"])]
    p = rng.dirichlet(np.ones(fs["support_size"]))
    p_prime = rng.dirichlet(np.ones(fs["support_size"]))
    r2 = theory.check_finite_sample_bound(hypotheses, p, p_prime, labeling,
                                          fs["n"], fs["delta"], fs["resamples"],
                                          fs["seed"])
    atomic_write_text(os.path.join(outdir, "theory_finite_sample.json"), _dump_json(r2))
    allowed = fs["delta"] + 3 * np.sqrt(fs["delta"] * (1 - fs["delta"]) / fs["resamples"])
    print(f"finite-sample bound: violation rate {r2['violation_rate']:.4f} "
          f"(allowed {allowed:.4f})")
    ok &= r2["violation_rate"] <= allowed

    sc = t["selection_comparison"]
    r3 = theory.check_selection_comparison(
        sc["trials"], sc["seed"], m=sc["members"], support_size=sc["support_size"],
        cluster_range=tuple(sc["cluster_range"]),
        outlier_range=tuple(sc["outlier_range"]))
    atomic_write_text(os.path.join(outdir, "theory_selection_comparison.json"),
                      _dump_json(r3))
    print(f"selection comparison: E_tv farthest {r3['e_tv_farthest']:.4f} "
          f"vs random {r3['e_tv_random']:.4f}; "
          f"assumption residual max {r3['assumption_residual_max']:.4f} (diagnostic)")

    if not ok:
        print("error: a verified bound was violated", file=sys.stderr)
        return 1
    return 0


def cmd_inspect_teacher(args):
    artifact = teacher_mod.load_artifact(args.path)
    text_norms = np.linalg.norm(artifact.text_embeddings, axis=1)
    print(f"classes: {artifact.num_classes} {artifact.class_names}")
    print(f"embed_dim: {artifact.embed_dim}")
    print(f"logit_scale: {artifact.logit_scale}")
    print(f"prompt_template: {artifact.prompt_template!r}")
    print(f"text norms: [{text_norms.min():.6f}, {text_norms.max():.6f}]")
    if artifact.image_ids is not None:
        img_norms = np.linalg.norm(artifact.image_embeddings, axis=1)
        print(f"image embeddings: {artifact.num_samples} "
              f"(ids {int(artifact.image_ids.min())}..{int(artifact.image_ids.max())}, "
              f"norms [{img_norms.min():.6f}, {img_norms.max():.6f}])")
    else:
        print("image embeddings: none")
    print("crc: ok")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="scmd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, teacher=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=1)
        if data:
            p.add_argument("--data", default=None, help="dataset file (else generated)")
        if teacher:
            p.add_argument("--teacher", default=None,
                           help="teacher artifact file (else oracle teacher)")

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("oracle-teacher", help="export a synthetic frozen teacher")
    common(p, data=True)
    p.set_defaults(func=cmd_oracle_teacher)

    p = sub.add_parser("train", help="run one training job")
    common(p, data=True, teacher=True)
    p.add_argument("--quiet", action="store_true", help="suppress per-step lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, default=None,
                   help="restrict to one domain index")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare selection strategies")
    common(p, data=True, teacher=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="random hyperparameter search")
    common(p, data=True, teacher=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory", help="run the bound verification suite")
    common(p)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("inspect-teacher", help="summarize a teacher artifact")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect_teacher)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScmdError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: FileNotFound: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
