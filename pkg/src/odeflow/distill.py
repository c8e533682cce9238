"""Training loops and the teacher-student trajectory framework.

The teacher's block outputs are treated as points the student's continuous
trajectory must pass through.  Each teacher layer gets a checkpoint on the
student's step grid, placed by a softmax over the distances between
consecutive teacher layers; the student is trained to match the teacher's CLS
rows there, with a JaSMin penalty on its attention maps.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import diffcore as dc
from .container import atomic_write_text
from .data import DatasetSplit, batch_indices
from .diffcore import Tensor
from .dynamics import OdeBlockParams, psi, psi_with_maps
from .integrator import DivergenceError, Trajectory, euler_integrate
from .models import (
    OdeViT,
    TeacherViT,
    cls_of,
    odevit_forward,
    patchify,
    predict,
    save_model,
    set_trainable,
    teacher_forward,
    teacher_hidden,
)
from .stability import closed_form_for, jasmin_loss

EVAL_BATCH = 250


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-2
    warmup_frac: float = 0.1
    cycles: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise dc.ContractError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise dc.ContractError("lr must be positive and weight_decay non-negative")


@dataclass
class EarlyStopConfig:
    enabled: bool = False
    patience: int = 10
    window: int = 50  # batches in the running average

    def __post_init__(self):
        if self.patience < 1 or self.window < 1:
            raise dc.ContractError("patience and window must be >= 1")


@dataclass
class DistillConfig(TrainConfig):
    w_mse: float = 1.0
    w_jasmin: float = 0.1
    w_ce: float = 0.0
    jasmin_k: int = 2
    jasmin_maps: int = 12  # attention maps sampled per trajectory
    match_cls_only: bool = True
    temperature: float = 1.0
    R: float = 10.0
    L_assumed: float = 0.5
    freeze_embedder: bool = True
    freeze_head: bool = True
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)

    def __post_init__(self):
        super().__post_init__()
        if min(self.w_mse, self.w_jasmin, self.w_ce) < 0:
            raise dc.ContractError("loss weights must be non-negative")
        if self.temperature <= 0 or self.R <= 0 or self.L_assumed <= 0:
            raise dc.ContractError("temperature, R and L_assumed must be positive")
        if self.jasmin_k < 2 or self.jasmin_maps < 1:
            raise dc.ContractError("jasmin_k must be >= 2 and jasmin_maps >= 1")
        if isinstance(self.early_stop, dict):
            self.early_stop = EarlyStopConfig(**self.early_stop)


class TrainingDiverged(DivergenceError):
    def __init__(self, step: int, epoch: int, log: list[dict]):
        super().__init__(step, f"training diverged at epoch {epoch} (integration step {step})")
        self.epoch = epoch
        self.log = log


# ---------------------------------------------------------------- checkpoints


@dataclass
class CheckpointSchedule:
    fractions: list[float]
    cumulative: list[float]
    step_indices: list[int]


def layer_distances(hidden: Sequence, cls_only: bool = False) -> np.ndarray:
    """Mean row-wise distance between consecutive teacher states.

    ``hidden`` holds L+1 arrays of shape ``(..., n_tokens, D)``; the mean runs
    over tokens (or only CLS) and any batch axes.
    """
    hs = [np.asarray(h.data if isinstance(h, Tensor) else h) for h in hidden]
    if cls_only:
        hs = [h[..., :1, :] for h in hs]
    return np.array([np.linalg.norm(b - a, axis=-1).mean() for a, b in zip(hs[:-1], hs[1:])])


def schedule_from_distances(d, N: int, temperature: float = 1.0) -> CheckpointSchedule:
    d = np.asarray(d, dtype=np.float64)
    L = d.size
    if L < 1:
        raise dc.ContractError("need at least one teacher layer")
    if N < L:
        raise dc.ContractError(f"cannot place {L} distinct checkpoints on {N} steps")
    z = d / temperature
    e = np.exp(z - z.max())
    frac = e / e.sum()
    cum = np.cumsum(frac)
    cum[-1] = 1.0
    idx = [int(math.floor(c * N + 0.5)) for c in cum]
    idx[0] = max(idx[0], 1)
    for i in range(1, L):
        idx[i] = max(idx[i], idx[i - 1] + 1)
    idx[-1] = N
    for i in range(L - 2, -1, -1):
        idx[i] = min(idx[i], idx[i + 1] - 1)
    return CheckpointSchedule(frac.tolist(), cum.tolist(), idx)


def checkpoint_schedule(hidden: Sequence, N: int, temperature: float = 1.0,
                        cls_only: bool = False) -> CheckpointSchedule:
    """Place one student step per teacher layer from a softmax over layer distances.

    Rounding collisions are pushed to the next free step; the last checkpoint
    is always step N.
    """
    if len(hidden) < 2:
        raise dc.ContractError("need at least one teacher layer")
    return schedule_from_distances(layer_distances(hidden, cls_only), N, temperature)


# ---------------------------------------------------------------- loss


def _rows(x, cls_only: bool):
    x = dc.as_tensor(x)
    return cls_of(x) if cls_only else x


def distill_loss(
    traj: Trajectory,
    hidden: Sequence,
    sched: CheckpointSchedule,
    maps: Sequence,
    cfg: DistillConfig,
    logits: Tensor | None = None,
    labels=None,
) -> tuple[Tensor, dict]:
    """Weighted sum of checkpoint MSEs, JaSMin on ``maps`` and optional CE.

    ``hidden[l]`` is the teacher state after layer l (``hidden[0]`` the
    embedding).  Returns ``(total, parts)`` where ``parts`` has ``mse`` (one
    tensor per checkpoint), ``jasmin`` and ``ce``.
    """
    if len(hidden) != len(sched.step_indices) + 1:
        raise dc.ContractError("schedule does not match the teacher depth")
    if sched.step_indices[-1] > traj.N or not traj.recorded:
        raise dc.ContractError("schedule does not fit the trajectory")
    use_ce = cfg.w_ce > 0
    if use_ce and (labels is None or logits is None):
        raise dc.ContractError("w_ce > 0 needs logits and labels")
    mses = [
        dc.mse(_rows(traj.states[s], cfg.match_cls_only), _rows(hidden[l + 1], cfg.match_cls_only))
        for l, s in enumerate(sched.step_indices)
    ]
    jas = jasmin_loss(maps, cfg.jasmin_k) if maps else Tensor(0.0)
    ce = dc.cross_entropy(logits, labels) if use_ce else Tensor(0.0)
    total = dc.scale(mses[0], cfg.w_mse)
    for m in mses[1:]:
        total = dc.add(total, dc.scale(m, cfg.w_mse))
    if cfg.w_jasmin > 0:
        total = dc.add(total, dc.scale(jas, cfg.w_jasmin))
    if use_ce:
        total = dc.add(total, dc.scale(ce, cfg.w_ce))
    return total, {"mse": mses, "jasmin": jas, "ce": ce}


def integrate_with_maps(x0, p: OdeBlockParams, N: int, T: float, n_maps: int = 12) -> tuple[Trajectory, list]:
    """Euler trajectory plus the attention maps at every ``ceil(N / n_maps)``-th step."""
    stride = max(1, math.ceil(N / n_maps))
    maps = []
    count = [0]

    def field_(x):
        n = count[0]
        count[0] += 1
        if n % stride == 0:
            out, P = psi_with_maps(x, p)
            maps.append(P)
            return out
        return psi(x, p)

    return euler_integrate(x0, field_, N, T, record=True), maps


# ---------------------------------------------------------------- early stopping


def early_stop_check(history: Sequence[Sequence[float]], bounds: Sequence[Sequence[float]],
                     patience: int) -> bool:
    """True once every checkpoint's running MSE sat below its bound for ``patience`` epochs.

    ``history[e][l]`` and ``bounds[e][l]`` are the values at epoch ``e`` for
    checkpoint ``l``.
    """
    if patience < 1:
        raise dc.ContractError("patience must be >= 1")
    if len(history) != len(bounds):
        raise dc.ContractError("history and bounds cover different epochs")
    if len(history) < patience:
        return False
    for h, b in zip(history[-patience:], bounds[-patience:]):
        if not all(x < y for x, y in zip(h, b)):
            return False
    return True


def first_below(history, bounds) -> list[int | None]:
    """Epoch at which each checkpoint's running MSE first dropped below its bound."""
    L = len(history[0]) if history else 0
    out: list[int | None] = [None] * L
    for e, (h, b) in enumerate(zip(history, bounds)):
        for l in range(L):
            if out[l] is None and h[l] < b[l]:
                out[l] = e
    return out


# ---------------------------------------------------------------- evaluation


def embed_split(embedder, split: DatasetSplit, batch: int = EVAL_BATCH) -> np.ndarray:
    return np.concatenate([
        patchify(split.normalized(idx), embedder).data
        for idx in batch_indices(len(split), batch, None)
    ]) if len(split) else np.empty((0,))


def teacher_states(teacher: TeacherViT, x0: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """Teacher hidden states ``(n, L+1, n_tokens, D)`` from embedded inputs."""
    out = []
    for idx in batch_indices(len(x0), batch, None):
        hs = teacher_hidden(x0[idx], teacher)
        out.append(np.stack([h.data for h in hs], axis=1))
    return np.concatenate(out)


def student_final(m: OdeViT, x0: np.ndarray, N: int | None = None, T: float | None = None,
                  batch: int = EVAL_BATCH) -> np.ndarray:
    """Final student states from embedded inputs, without recording."""
    N = m.N if N is None else N
    T = m.T if T is None else T
    return np.concatenate([
        euler_integrate(x0[idx], m.block, N, T, record=False).final
        for idx in batch_indices(len(x0), batch, None)
    ])


def head_logits(head, cls_rows: np.ndarray) -> np.ndarray:
    return head(Tensor(cls_rows)).data


def model_logits(model, split: DatasetSplit, batch: int = EVAL_BATCH) -> np.ndarray:
    out = []
    for idx in batch_indices(len(split), batch, None):
        x = split.normalized(idx)
        if isinstance(model, TeacherViT):
            out.append(teacher_forward(x, model)[1].data)
        else:
            out.append(odevit_forward(x, model, record=False)[1].data)
    return np.concatenate(out)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(logits) == labels)) if len(labels) else math.nan


# ---------------------------------------------------------------- loops


def _optimise(params: list[Tensor], loss: Tensor, g: dc.Graph, state: dc.OptimState) -> None:
    for p in params:
        p.grad = None
    g.backward(loss)
    dc.adamw_step(params, [p.grad for p in params], state)


def _log_row(epoch, lr, total, mse, jas, ce, bound, armed, acc) -> dict:
    return {
        "epoch": epoch,
        "lr": lr,
        "loss_total": total,
        "loss_mse": list(mse),
        "loss_jasmin": jas,
        "loss_ce": ce,
        "bound": list(bound),
        "early_stop_armed": armed,
        "acc_eval": acc,
    }


def log_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)


def write_log(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    atomic_write_text(path, log_jsonl(rows))


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data[...] = s


def _ce_loop(model, params, forward, train, cfg, eval_split, checkpoint_path, callback):
    """Shared cross-entropy loop for the teacher and the free student."""
    set_trainable(model.parameters(), False)
    set_trainable(params, True)
    state = dc.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log: list[dict] = []
    good = _snapshot(params)
    for epoch in range(cfg.epochs):
        chunks = batch_indices(len(train), cfg.batch_size, cfg.seed, epoch)
        lr0 = dc.lr_at(epoch, cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.lr)
        losses = []
        try:
            for bi, idx in enumerate(chunks):
                state.lr = dc.lr_at(epoch + bi / len(chunks), cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.lr)
                with dc.Graph() as g:
                    loss = dc.cross_entropy(forward(train.normalized(idx)), train.labels[idx])
                _optimise(params, loss, g, state)
                losses.append(float(loss.data))
        except DivergenceError as e:
            _restore(params, good)
            if checkpoint_path is not None:
                save_model(checkpoint_path, model)
            raise TrainingDiverged(e.step, epoch, log) from e
        good = _snapshot(params)
        acc = None
        if eval_split is not None and len(eval_split):
            acc = accuracy(model_logits(model, eval_split), eval_split.labels)
        ce = float(np.mean(losses))
        log.append(_log_row(epoch, lr0, ce, [], 0.0, ce, [], False, acc))
        if callback is not None:
            callback(log[-1])
    set_trainable(model.parameters(), False)
    return log


def train_teacher(teacher: TeacherViT, train: DatasetSplit, cfg: TrainConfig,
                  eval_split: DatasetSplit | None = None, checkpoint_path=None,
                  callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Cross-entropy training of every teacher parameter."""
    return _ce_loop(teacher, teacher.parameters(), lambda x: teacher_forward(x, teacher)[1],
                    train, cfg, eval_split, checkpoint_path, callback)


def train_free(model: OdeViT, train: DatasetSplit, cfg: TrainConfig,
               eval_split: DatasetSplit | None = None, checkpoint_path=None,
               callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Cross-entropy training of a whole ODE-ViT (embedder, block, head) from scratch."""
    return _ce_loop(model, model.parameters(), lambda x: odevit_forward(x, model, record=False)[1],
                    train, cfg, eval_split, checkpoint_path, callback)


@dataclass
class ContractionRecord:
    sample_id: int
    distance: float
    teacher_correct: bool
    student_correct: bool
    agrees: bool


@dataclass
class DistillResult:
    log: list[dict]
    schedule: CheckpointSchedule
    records: list[ContractionRecord]
    stopped_epoch: int | None = None  # epoch at which early stopping fired
    stop_snapshot: OdeBlockParams | None = None  # block at that epoch when not enabled
    first_below: list[int | None] = field(default_factory=list)


def contraction_records(student: OdeViT, teacher: TeacherViT, split: DatasetSplit) -> list[ContractionRecord]:
    """Final-CLS distance between student and teacher plus correctness, per sample."""
    x_t = embed_split(teacher.embedder, split)
    x_s = x_t if student.embedder is teacher.embedder else embed_split(student.embedder, split)
    t_cls = np.concatenate([
        teacher_hidden(x_t[idx], teacher)[-1].data[:, 0]
        for idx in batch_indices(len(split), EVAL_BATCH, None)
    ])
    s_cls = student_final(student, x_s)[:, 0]
    t_pred = predict(head_logits(teacher.head, t_cls))
    s_pred = predict(head_logits(student.head, s_cls))
    dist = np.linalg.norm(s_cls - t_cls, axis=-1)
    y = split.labels
    return [
        ContractionRecord(i, float(dist[i]), bool(t_pred[i] == y[i]), bool(s_pred[i] == y[i]),
                          bool(t_pred[i] == s_pred[i]))
        for i in range(len(split))
    ]


def checkpoint_bounds(block: OdeBlockParams, sched: CheckpointSchedule, R: float, L: float) -> list[float]:
    """Closed-form bound at each checkpoint, with the step index in place of N."""
    return [closed_form_for(block, s, R, L) for s in sched.step_indices]


def train_distill(
    student: OdeViT,
    teacher: TeacherViT,
    train: DatasetSplit,
    cfg: DistillConfig,
    eval_split: DatasetSplit | None = None,
    checkpoint_path=None,
    callback: Callable[[dict], None] | None = None,
) -> DistillResult:
    """Fit the student's block so its trajectory passes through the teacher's states.

    Only the block is optimised unless the freeze flags are cleared.  The
    schedule comes from the teacher's training-set states.  When early
    stopping is disabled, the block at the epoch where it would have fired is
    kept in ``stop_snapshot``.
    """
    set_trainable(teacher.parameters(), False)
    set_trainable(student.parameters(), False)
    params = list(student.block.parameters())
    if not cfg.freeze_embedder:
        params += student.embedder.parameters()
    if not cfg.freeze_head:
        params += student.head.parameters()
    set_trainable(params, True)

    x_teacher = embed_split(teacher.embedder, train)
    hidden = teacher_states(teacher, x_teacher)  # (n, L+1, tokens, D)
    L = hidden.shape[1] - 1
    sched = checkpoint_schedule([hidden[:, l] for l in range(L + 1)], student.N, cfg.temperature)
    # a frozen embedder lets the student's initial states be computed once
    x_student = None
    if cfg.freeze_embedder:
        same_embed = student.embedder is teacher.embedder
        x_student = x_teacher if same_embed else embed_split(student.embedder, train)
    eval_x = None
    if eval_split is not None and len(eval_split) and cfg.freeze_embedder:
        eval_x = embed_split(student.embedder, eval_split)

    state = dc.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    es = cfg.early_stop
    windows = [deque(maxlen=es.window) for _ in range(L)]
    history: list[list[float]] = []
    bound_hist: list[list[float]] = []
    log: list[dict] = []
    stopped = None
    snapshot = None
    good = _snapshot(params)
    for epoch in range(cfg.epochs):
        chunks = batch_indices(len(train), cfg.batch_size, cfg.seed, epoch)
        lr0 = dc.lr_at(epoch, cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.lr)
        sums = np.zeros(L + 3)
        try:
            for bi, idx in enumerate(chunks):
                state.lr = dc.lr_at(epoch + bi / len(chunks), cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.lr)
                with dc.Graph() as g:
                    if x_student is not None:
                        x0 = Tensor(x_student[idx])
                    else:
                        x0 = patchify(train.normalized(idx), student.embedder)
                    traj, maps = integrate_with_maps(x0, student.block, student.N, student.T, cfg.jasmin_maps)
                    logits = student.head(cls_of(traj.final)) if cfg.w_ce > 0 else None
                    targets = [hidden[idx, l] for l in range(L + 1)]
                    total, parts = distill_loss(traj, targets, sched, maps if cfg.w_jasmin > 0 else [],
                                                cfg, logits, train.labels[idx])
                _optimise(params, total, g, state)
                mse = [float(m.data) for m in parts["mse"]]
                for w, v in zip(windows, mse):
                    w.append(v)
                sums += np.array([float(total.data), *mse, float(parts["jasmin"].data), float(parts["ce"].data)]) * len(idx)
        except DivergenceError as e:
            _restore(params, good)
            if checkpoint_path is not None:
                save_model(checkpoint_path, student)
            raise TrainingDiverged(e.step, epoch, log) from e
        good = _snapshot(params)
        means = sums / len(train)
        running = [float(np.mean(w)) for w in windows]
        bounds = checkpoint_bounds(student.block, sched, cfg.R, cfg.L_assumed)
        history.append(running)
        bound_hist.append(bounds)
        armed = all(r < b for r, b in zip(running, bounds))
        acc = None
        if eval_split is not None and len(eval_split):
            if eval_x is not None:
                fin = student_final(student, eval_x)
                acc = accuracy(head_logits(student.head, fin[:, 0]), eval_split.labels)
            else:
                acc = accuracy(model_logits(student, eval_split), eval_split.labels)
        log.append(_log_row(epoch, lr0, float(means[0]), means[1:L + 1].tolist(), float(means[L + 1]),
                            float(means[L + 2]), bounds, armed, acc))
        if callback is not None:
            callback(log[-1])
        if stopped is None and early_stop_check(history, bound_hist, es.patience):
            stopped = epoch
            if es.enabled:
                break
            snapshot = student.block.copy(requires_grad=False)
    set_trainable(student.parameters(), False)
    records = contraction_records(student, teacher, eval_split) if eval_split is not None else []
    return DistillResult(log, sched, records, stopped, snapshot, first_below(history, bound_hist))


# ---------------------------------------------------------------- contraction analysis


@dataclass
class ContractionBin:
    lo: float
    hi: float
    count: int
    agreement: float
    teacher_acc: float
    student_acc: float


@dataclass
class ContractionTable:
    bins: list[ContractionBin]
    threshold: float
    spearman: float

    def to_dict(self) -> dict:
        return asdict(self)


def contraction_analysis(records: Sequence[ContractionRecord], n_bins: int = 10,
                         level: float = 0.95) -> ContractionTable:
    """Bin records by CLS distance and summarise agreement per bin.

    ``threshold`` is the upper edge of the last bin in the leading run of
    non-empty bins whose agreement is at least ``level`` (0 when the first bin
    already falls short).  ``spearman`` is the rank correlation of bin centre
    against agreement, taken as 0 when either side is constant.
    """
    if not records:
        raise dc.ContractError("no records")
    d = np.array([r.distance for r in records])
    agree = np.array([r.agrees for r in records], dtype=float)
    tc = np.array([r.teacher_correct for r in records], dtype=float)
    sc = np.array([r.student_correct for r in records], dtype=float)
    top = float(d.max())
    edges = np.linspace(0.0, top if top > 0 else 1.0, n_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            bins.append(ContractionBin(float(edges[b]), float(edges[b + 1]), int(sel.sum()),
                                       float(agree[sel].mean()), float(tc[sel].mean()), float(sc[sel].mean())))
    threshold = 0.0
    for b in bins:
        if b.agreement < level:
            break
        threshold = b.hi
    centres = [(b.lo + b.hi) / 2 for b in bins]
    rates = [b.agreement for b in bins]
    rho = 0.0
    if len(bins) >= 2 and np.ptp(rates) > 0:
        rho = float(stats.spearmanr(centres, rates).statistic)
    return ContractionTable(bins, threshold, rho)


def records_csv(records: Sequence[ContractionRecord]) -> str:
    lines = ["sample_id,distance,teacher_correct,student_correct,agrees"]
    for r in records:
        lines.append(f"{r.sample_id},{r.distance!r},{int(r.teacher_correct)},{int(r.student_correct)},{int(r.agrees)}")
    return "\n".join(lines) + "\n"
