"""Training loop with hard-sample selection, a full-batch tail, decoupled
weight decay, and running-mean weight averaging, plus the leave-one-domain-out
experiment driver and a small random-search sweep."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import backend as K, backend_name
from .autodiff import Tape, Tensor, backward
from .data import DomainDataset, make_batches, split_lodo, split_train_val
from .errors import ContractError, ParameterError, TrainingDiverged
from .losses import (
    LossWeights,
    ScheduleConfig,
    SelectionConfig,
    combined_loss,
    is_full_batch_step,
    np_focal,
    np_per_sample_ce,
    np_per_sample_cm_kl,
    np_per_sample_kl,
    score_samples,
    select_hard,
)
from .student import (
    StudentConfig,
    StudentParams,
    classify,
    forward_features,
    forward_logits,
    init_student,
    project,
)
from .teacher import TeacherArtifact, teacher_soft_targets

FIDELITY_NOTE = (
    "desk-scale run: MLP student on synthetic domains with a frozen "
    "oracle/imported teacher and uniform running-mean weight averaging; "
    "not comparable to full-scale image benchmarks"
)

ALGORITHMS = ("ERM", "VanillaKD", "SCMD_logits", "SCMD_full")


@dataclass(frozen=True)
class TrainConfig:
    student: StudentConfig
    total_steps: int
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    loss: LossWeights = field(default_factory=LossWeights)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    kappa: float = 0.25
    ma_start_frac: float = 0.5
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ParameterError(f"optimizer must be adam|sgd_momentum, got {self.optimizer!r}")
        if not 0.0 <= self.ma_start_frac < 1.0:
            raise ParameterError(f"ma_start_frac must be in [0, 1), got {self.ma_start_frac}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ParameterError("batch_size and eval_every must be >= 1")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(total_steps=self.total_steps, kappa=self.kappa)

    def to_dict(self):
        return {
            "student": self.student.to_dict(),
            "total_steps": self.total_steps,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "loss": {
                "lambda_ce": self.loss.lambda_ce,
                "lambda_kd": self.loss.lambda_kd,
                "lambda_cm": self.loss.lambda_cm,
                "temperature": self.loss.temperature,
                "gamma": self.loss.gamma,
                "t_squared": self.loss.t_squared,
            },
            "selection": {
                "strategy": self.selection.strategy,
                "rho": self.selection.rho,
                "focal_gamma": self.selection.focal_gamma,
            },
            "kappa": self.kappa,
            "ma_start_frac": self.ma_start_frac,
            "eval_every": self.eval_every,
            "seed": self.seed,
        }


class Adam:
    """Adam with decoupled weight decay (decay is independent of lr)."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay = float(lr), float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros(p.size) for p in self.params]
        self._v = [np.zeros(p.size) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad.ravel() if p.grad is not None else np.zeros(p.size)
            K.adam_step(p.data.reshape(-1), np.ascontiguousarray(g), m, v,
                        self.t, self.lr, self.beta1, self.beta2, self.eps,
                        self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SGDMomentum:
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9):
        self.params = list(params)
        self.lr, self.weight_decay, self.momentum = float(lr), float(weight_decay), momentum
        self._buf = [np.zeros(p.size) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self._buf):
            g = p.grad.ravel() if p.grad is not None else np.zeros(p.size)
            K.sgd_momentum_step(p.data.reshape(-1), np.ascontiguousarray(g), buf,
                                self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.weight_decay)
    return SGDMomentum(params, cfg.lr, cfg.weight_decay)


@dataclass
class MAState:
    """Running arithmetic mean of parameter snapshots."""

    buffer: np.ndarray
    count: int
    start_step: int


def update_ma(ma: MAState, params: StudentParams, step) -> MAState:
    if step < ma.start_step:
        raise ParameterError(f"step {step} precedes averaging start {ma.start_step}")
    flat = params.flatten()
    if flat.shape != ma.buffer.shape:
        raise ContractError(
            f"parameter vector has {flat.size} entries, buffer has {ma.buffer.size}"
        )
    ma.buffer += (flat - ma.buffer) / (ma.count + 1)
    ma.count += 1
    return ma


def evaluate(params: StudentParams, ds: DomainDataset) -> float:
    """Argmax accuracy over the dataset; never touches the projector."""
    if not ds.samples:
        raise ParameterError("cannot evaluate on an empty dataset")
    _, x, y, _ = ds.arrays()
    logits = forward_logits(Tape(), params, Tensor(x))
    return float((logits.data.argmax(axis=1) == y).mean())


@dataclass
class TrainReport:
    config: dict
    steps: list
    evals: list
    chosen_step: int
    final: dict
    headline_accuracy: float
    ma_start_step: int
    kernels: str
    wall_clock_sec: float
    created_at: str
    fidelity_note: str = FIDELITY_NOTE
    # chosen-model parameters ride along for checkpointing; not serialized
    chosen_params: StudentParams = None

    VOLATILE_KEYS = ("wall_clock_sec", "created_at")

    def to_dict(self):
        return {
            "config": self.config,
            "fidelity_note": self.fidelity_note,
            "kernels": self.kernels,
            "steps": self.steps,
            "evals": self.evals,
            "chosen_step": self.chosen_step,
            "final": self.final,
            "headline_accuracy": self.headline_accuracy,
            "ma_start_step": self.ma_start_step,
            "wall_clock_sec": self.wall_clock_sec,
            "created_at": self.created_at,
        }


def select_model_by_val(report: TrainReport) -> int:
    """Earliest evaluation step achieving the maximum validation accuracy."""
    evals = report.evals if isinstance(report, TrainReport) else report
    if not evals:
        raise ParameterError("no evaluations recorded")
    best = max(e["val_ma"] for e in evals)
    for e in evals:
        if e["val_ma"] == best:
            return e["step"]
    raise AssertionError("unreachable")


def _materialize(params: StudentParams, flat) -> StudentParams:
    fresh = init_student(params.config)
    fresh.load_flat(flat)
    return fresh


def train(cfg: TrainConfig, train_data: DomainDataset, val_data: DomainDataset,
          teacher: TeacherArtifact = None, test_data: DomainDataset = None,
          log_fn=None) -> TrainReport:
    """Run the full selective-distillation loop; deterministic per config+seed."""
    t_start = time.time()
    weights, sel, schedule = cfg.loss, cfg.selection, cfg.schedule

    needs_kl = weights.lambda_kd > 0 or sel.strategy in ("kl", "distill")
    needs_cm = weights.lambda_cm > 0
    needs_teacher = needs_kl or needs_cm
    if needs_teacher and teacher is None:
        raise ParameterError("this configuration distills but no teacher was given")

    ids_tr, x_tr, y_tr, _ = train_data.arrays()
    row_of = {int(i): r for r, i in enumerate(ids_tr)}

    p_teacher = text = None
    gamma = weights.gamma
    if needs_teacher:
        p_teacher = teacher_soft_targets(teacher, ids_tr, weights.temperature)
        text = teacher.text_embeddings
        if gamma is None:
            gamma = teacher.logit_scale

    params = init_student(cfg.student)
    opt = make_optimizer(cfg, params.parameters())
    ma = MAState(buffer=params.flatten() * 0.0, count=0,
                 start_step=math.ceil(cfg.ma_start_frac * cfg.total_steps))

    steps_log, evals = [], []
    snapshots = {}
    queue, epoch = [], 0

    for t in range(cfg.total_steps):
        if not queue:
            queue = make_batches(train_data, cfg.batch_size, cfg.seed + epoch)
            epoch += 1
        batch_ids = queue.pop(0)
        rows = np.array([row_of[i] for i in batch_ids], dtype=np.int64)
        xb, yb = x_tr[rows], y_tr[rows]
        ptb = p_teacher[rows] if p_teacher is not None else None

        tape = Tape()
        feats = forward_features(tape, params, Tensor(xb))
        logits = classify(tape, params, feats)
        projected = project(tape, params, feats) if needs_cm else None

        full_batch = is_full_batch_step(t, schedule)
        if full_batch or sel.strategy == "none":
            selected = np.arange(len(rows), dtype=np.int64)
        else:
            ce_np = np_per_sample_ce(logits.data, yb)
            kl_np = (np_per_sample_kl(ptb, logits.data, weights.temperature)
                     if sel.strategy in ("kl", "distill") and ptb is not None else None)
            cm_np = (np_per_sample_cm_kl(ptb, projected.data, text, gamma,
                                         weights.temperature)
                     if sel.strategy == "distill" and needs_cm else None)
            focal_np = (np_focal(logits.data, yb, sel.focal_gamma)
                        if sel.strategy == "focal" else None)
            scores = score_samples(sel, weights, ce=ce_np, kl=kl_np, cm=cm_np,
                                   focal=focal_np, batch_size=len(rows))
            selected = select_hard(scores, sel.rho)

        total, parts = combined_loss(
            tape, weights, logits=logits, labels=yb, teacher_probs=ptb,
            projected=projected, text_embeddings=text, teacher_scale=gamma,
            selected=selected)

        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(
                f"non-finite loss at step {t}",
                diagnostics={"step": t, "parts": parts,
                             "param_norm": float(np.linalg.norm(params.flatten())),
                             "batch_ids": list(map(int, batch_ids))},
            )

        opt.zero_grad()
        backward(total)
        opt.step()

        if t >= ma.start_step:
            update_ma(ma, params, t)

        steps_log.append({
            "step": t,
            "total": parts["total"],
            "ce": parts["ce"],
            "kd": parts["kd"],
            "cm": parts["cm"],
            "selected": int(len(selected)),
            "batch": int(len(rows)),
            "full_batch": bool(full_batch),
        })
        if log_fn is not None:
            log_fn(f"step {t} loss {parts['total']:.6f} "
                   f"ce {parts['ce']:.6f} kd {parts['kd']:.6f} cm {parts['cm']:.6f} "
                   f"selected {len(selected)}/{len(rows)}")

        if (t + 1) % cfg.eval_every == 0 or t == cfg.total_steps - 1:
            raw_flat = params.flatten()
            ma_flat = ma.buffer.copy() if ma.count > 0 else raw_flat.copy()
            ma_params = _materialize(params, ma_flat)
            entry = {
                "step": t,
                "val_raw": evaluate(params, val_data),
                "val_ma": evaluate(ma_params, val_data),
            }
            if test_data is not None:
                entry["test_raw"] = evaluate(params, test_data)
                entry["test_ma"] = evaluate(ma_params, test_data)
            evals.append(entry)
            snapshots[t] = (raw_flat, ma_flat)

    report = TrainReport(
        config=cfg.to_dict(),
        steps=steps_log,
        evals=evals,
        chosen_step=0,
        final={},
        headline_accuracy=float("nan"),
        ma_start_step=ma.start_step,
        kernels=backend_name(),
        wall_clock_sec=time.time() - t_start,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )
    chosen = select_model_by_val(report)
    report.chosen_step = chosen
    row = next(e for e in evals if e["step"] == chosen)
    report.final = dict(row)
    report.headline_accuracy = row.get("test_ma", row["val_ma"])
    report.chosen_params = _materialize(params, snapshots[chosen][1])
    return report


# ---- experiment driver ----

def algorithm_config(name: str, base: TrainConfig, seed: int) -> TrainConfig:
    """Named training configurations used by experiments and ablations.

    ERM            plain cross-entropy, no selection, no schedule
    VanillaKD      CE + tempered logits KL on the full batch
    SCMD_logits    selection + schedule, logits KL only
    SCMD_full      selection + schedule, logits KL + cross-modality term
    SCMD_variant:X SCMD_full with selection strategy X
    """
    strategy = None
    if name.startswith("SCMD_variant:"):
        name, strategy = "SCMD_variant", name.split(":", 1)[1]
    if name == "ERM":
        cfg = replace(base,
                      loss=replace(base.loss, lambda_kd=0.0, lambda_cm=0.0),
                      selection=replace(base.selection, strategy="none"),
                      kappa=0.0)
    elif name == "VanillaKD":
        cfg = replace(base,
                      loss=replace(base.loss, lambda_cm=0.0),
                      selection=replace(base.selection, strategy="none"),
                      kappa=0.0)
    elif name == "SCMD_logits":
        cfg = replace(base, loss=replace(base.loss, lambda_cm=0.0))
    elif name == "SCMD_full":
        cfg = base
    elif name == "SCMD_variant":
        cfg = replace(base, selection=replace(base.selection, strategy=strategy))
    else:
        raise ParameterError(f"unknown algorithm {name!r}")
    return replace(cfg, seed=seed)


def _run_cell(args):
    (name, held_out, seed, dataset, teacher, base_cfg,
     train_fraction, split_seed) = args
    cfg = algorithm_config(name, base_cfg, seed)
    train_part, test_part = split_lodo(dataset, held_out)
    tr, val = split_train_val(train_part, train_fraction, split_seed)
    report = train(cfg, tr, val, teacher, test_part)
    return {
        "algorithm": name,
        "held_out": int(held_out),
        "seed": int(seed),
        "accuracy": report.headline_accuracy,
        "chosen_step": report.chosen_step,
        "status": "ok",
    }


def _run_cell_safe(args):
    try:
        return _run_cell(args)
    except Exception as e:  # keep the grid going; mark the cell
        return {"algorithm": args[0], "held_out": int(args[1]), "seed": int(args[2]),
                "accuracy": None, "status": f"failed: {type(e).__name__}: {e}"}


@dataclass
class ExperimentResult:
    cells: list
    summary: list  # one row per algorithm: mean/std over ok cells

    def cells_csv(self):
        lines = ["algorithm,held_out,seed,accuracy,chosen_step,status"]
        for c in self.cells:
            acc = "" if c["accuracy"] is None else repr(c["accuracy"])
            lines.append(f"{c['algorithm']},{c['held_out']},{c['seed']},{acc},"
                         f"{c.get('chosen_step', '')},{c['status']}")
        return "\n".join(lines) + "\n"

    def summary_csv(self):
        lines = ["algorithm,runs,failed,mean_accuracy,std_accuracy"]
        for row in self.summary:
            lines.append(f"{row['algorithm']},{row['runs']},{row['failed']},"
                         f"{repr(row['mean_accuracy'])},{repr(row['std_accuracy'])}")
        return "\n".join(lines) + "\n"


def run_experiment(dataset: DomainDataset, teacher, base_cfg: TrainConfig,
                   algorithms, seeds, held_out_domains=None,
                   train_fraction=0.8, split_seed=0, workers=1,
                   log_fn=None) -> ExperimentResult:
    """Leave-one-domain-out grid: algorithms x held-out domains x seeds."""
    held = list(held_out_domains) if held_out_domains is not None \
        else list(range(dataset.num_domains))
    tasks = [(name, h, seed, dataset, teacher, base_cfg, train_fraction, split_seed)
             for name in algorithms for h in held for seed in seeds]
    cells = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_safe, tasks))
        if log_fn:
            for cell in cells:
                log_fn(f"{cell['algorithm']} held_out={cell['held_out']} "
                       f"seed={cell['seed']} acc={cell['accuracy']} [{cell['status']}]")
    else:
        for task in tasks:
            cell = _run_cell_safe(task)
            cells.append(cell)
            if log_fn:
                log_fn(f"{cell['algorithm']} held_out={cell['held_out']} "
                       f"seed={cell['seed']} acc={cell['accuracy']} [{cell['status']}]")

    summary = []
    for name in algorithms:
        accs = [c["accuracy"] for c in cells
                if c["algorithm"] == name and c["status"] == "ok"]
        failed = sum(1 for c in cells
                     if c["algorithm"] == name and c["status"] != "ok")
        summary.append({
            "algorithm": name,
            "runs": len(accs),
            "failed": failed,
            "mean_accuracy": float(np.mean(accs)) if accs else float("nan"),
            "std_accuracy": float(np.std(accs)) if accs else float("nan"),
        })
    return ExperimentResult(cells=cells, summary=summary)


# ---- hyperparameter sweep ----

DEFAULT_SWEEP_SPACE = {
    "loss.lambda_kd": {"uniform": [0.5, 1.0]},
    "loss.lambda_cm": {"uniform": [0.5, 1.0]},
    "loss.temperature": {"uniform": [2.0, 5.0]},
    "selection.rho": {"choice": [0.2, 0.25, 0.3]},
    "kappa": {"uniform": [0.2, 0.4]},
}


def _with_field(cfg, dotted, value):
    head, _, rest = dotted.partition(".")
    if not hasattr(cfg, head):
        raise ParameterError(f"unknown config field {dotted!r}")
    if rest:
        return replace(cfg, **{head: _with_field(getattr(cfg, head), rest, value)})
    return replace(cfg, **{head: value})


def _sample_space(space, rng):
    out = {}
    for key in sorted(space):
        spec = space[key]
        if "uniform" in spec:
            lo, hi = spec["uniform"]
            out[key] = float(rng.uniform(lo, hi))
        elif "choice" in spec:
            choices = list(spec["choice"])
            out[key] = choices[int(rng.integers(len(choices)))]
        else:
            raise ParameterError(f"search entry {key!r} needs 'uniform' or 'choice'")
    return out


@dataclass
class SweepResult:
    trials: list  # ranked by mean validation accuracy, best first
    best_config: TrainConfig

    def trials_csv(self):
        keys = sorted(self.trials[0]["sampled"]) if self.trials else []
        lines = ["rank,trial," + ",".join(keys) + ",mean_val_accuracy,std_val_accuracy"]
        for rank, t in enumerate(self.trials):
            vals = ",".join(repr(t["sampled"][k]) for k in keys)
            lines.append(f"{rank},{t['trial']},{vals},"
                         f"{repr(t['mean_val_accuracy'])},{repr(t['std_val_accuracy'])}")
        return "\n".join(lines) + "\n"


def sweep(dataset: DomainDataset, teacher, base_cfg: TrainConfig,
          search_space=None, n_trials=5, seeds_per_trial=3, sweep_seed=0,
          held_out=0, train_fraction=0.8, split_seed=0, log_fn=None) -> SweepResult:
    """Random search over the declared ranges; ranks configurations by mean
    validation accuracy across per-trial seeds."""
    space = search_space if search_space is not None else DEFAULT_SWEEP_SPACE
    rng = np.random.default_rng(sweep_seed)
    train_part, _ = split_lodo(dataset, held_out)
    tr, val = split_train_val(train_part, train_fraction, split_seed)

    trials = []
    for trial in range(n_trials):
        sampled = _sample_space(space, rng)
        cfg = base_cfg
        for key, value in sampled.items():
            cfg = _with_field(cfg, key, value)
        vals = []
        for s in range(seeds_per_trial):
            report = train(replace(cfg, seed=base_cfg.seed + s), tr, val, teacher)
            vals.append(report.final["val_ma"])
        trials.append({
            "trial": trial,
            "sampled": sampled,
            "mean_val_accuracy": float(np.mean(vals)),
            "std_val_accuracy": float(np.std(vals)),
        })
        if log_fn:
            log_fn(f"trial {trial} {sampled} -> {trials[-1]['mean_val_accuracy']:.4f}")

    order = sorted(range(len(trials)),
                   key=lambda i: (-trials[i]["mean_val_accuracy"], i))
    ranked = [trials[i] for i in order]
    best_cfg = base_cfg
    for key, value in ranked[0]["sampled"].items():
        best_cfg = _with_field(best_cfg, key, value)
    return SweepResult(trials=ranked, best_config=best_cfg)
