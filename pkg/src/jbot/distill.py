"""Self-distillation pre-training: teacher/student state, EMA and centering
updates, the particle / [CLS] / KoLeo losses and the training loop."""
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from . import tensor as T
from .augment import AugmentConfig, batch_views
from .checkpoint import save_params
from .network import NetworkConfig, as_tensors, encode, init_params, project, resolve_feature_scale, tokenize
from .optim import AdamW
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step",
    "epoch",
    "lr",
    "tau_ema",
    "loss_total",
    "loss_part",
    "loss_cls",
    "loss_koleo",
    "teacher_entropy",
    "teacher_batch_entropy",
    "center_norm",
    "center_part_norm",
    "n_masked",
)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    tau_teacher: float = 0.04
    tau_student: float = 0.1
    tau_center: float = 0.9
    # "zero", or "first_batch": seed both centers with the first step's
    # teacher means so the random-init teacher is centred from step 0
    center_init: str = "zero"
    ema_start: float = 0.996
    ema_end: float = 1.0
    ema_per_step: bool = True
    koleo_lambda: float = 0.01
    base_lr: float = 5e-4
    lr_ref_batch: int = 256
    warmup_epochs: float = 10
    lr_schedule: str = "constant"  # or "cosine" after warmup
    batch_size: int = 1024
    weight_decay: float = 1e-4
    epochs: int = 100
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_clamp: float = 1e-12
    koleo_eps: float = 1e-8

    def __post_init__(self):
        if self.tau_teacher <= 0 or self.tau_student <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.tau_center < 1.0:
            raise ValueError(f"tau_center must be in [0, 1), got {self.tau_center}")
        if self.koleo_lambda < 0:
            raise ValueError("koleo_lambda must be >= 0")
        if not 0.0 <= self.ema_start <= self.ema_end <= 1.0:
            raise ValueError("need 0 <= ema_start <= ema_end <= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.center_init not in ("zero", "first_batch"):
            raise ValueError(f"unknown center_init {self.center_init!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def peak_lr(self):
        return self.base_lr * self.batch_size / self.lr_ref_batch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# schedules and moving averages


def ema_momentum_at(step, total_steps, start=0.996, end=1.0):
    """Cosine schedule from ``start`` (step 0) to ``end`` (last step)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return start
    if step == total_steps:
        return end
    return end - (end - start) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def lr_at(step, cfg, steps_per_epoch=1, total_steps=None):
    """Linear warm-up to ``base_lr * batch / 256``, then constant (or cosine)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = cfg.peak_lr
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step < warmup:
        return peak * step / warmup
    if cfg.lr_schedule == "cosine" and total_steps and total_steps > warmup:
        frac = min(1.0, (step - warmup) / (total_steps - warmup))
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak


def ema_update(teacher, student, tau_ema):
    """``teacher <- tau * teacher + (1 - tau) * student`` for every array, in place."""
    if not 0.0 <= tau_ema <= 1.0:
        raise ValueError(f"tau_ema must be in [0, 1], got {tau_ema}")
    for name, t in teacher.items():
        s = student[name]
        t[...] = tau_ema * t.astype(np.float64) + (1.0 - tau_ema) * s.astype(np.float64)
    return teacher


def update_center(center, batch_mean, tau_center):
    if not 0.0 <= tau_center < 1.0:
        raise ValueError(f"tau_center must be in [0, 1), got {tau_center}")
    center = np.asarray(center, dtype=np.float64)
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    if center.shape != batch_mean.shape:
        raise T.ShapeError("update_center", center.shape, batch_mean.shape)
    return tau_center * center + (1.0 - tau_center) * batch_mean


def center_and_sharpen(logits, center, tau_teacher):
    """Rowwise ``softmax((logits - center) / tau_teacher)`` as a float64 array."""
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if c.shape != x.shape[-1:]:
        raise T.ShapeError("center_and_sharpen", x.shape, c.shape)
    z = np.ascontiguousarray((x - c).reshape(-1, x.shape[-1]))
    return kernels.softmax_fwd(z, None, 1.0 / tau_teacher).reshape(x.shape)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.clip(p, 1e-30, None))).sum(axis=-1)


# ---------------------------------------------------------------------------
# losses (graph versions)


def _log_student(student_logits, tau_student, clamp):
    return T.log(T.softmax(student_logits, temperature=tau_student), min_value=clamp)


def cross_entropy_rows(teacher_probs, student_logits, tau_student=0.1, clamp=1e-12):
    """Per-row ``-P_t . log P_s`` with ``P_s = softmax(student / tau)``."""
    pt = Tensor(teacher_probs, dtype=student_logits.dtype)
    return -(pt * _log_student(student_logits, tau_student, clamp)).sum(axis=-1)


def particle_weights(masks):
    """Per-token weights ``m_i / (M(view) * n_views)`` so that summing the
    weighted cross-entropies gives the mean over jets of
    ``(l(u) + l(v)) / 2``; views without masked particles contribute 0."""
    masks = np.asarray(masks, dtype=bool)
    counts = masks.sum(axis=1)
    w = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / masks.shape[0]
    return (masks * w[:, None])[masks]


def loss_particle(teacher_probs, student_logits, masks, tau_student=0.1, clamp=1e-12):
    """Masked-token distillation loss.

    ``teacher_probs`` and ``student_logits`` hold one row per masked token,
    ordered as ``np.nonzero(masks)``; ``masks`` is ``(2B, n)`` with u views in
    the first half.
    """
    if student_logits.shape[0] == 0:
        return Tensor(0.0, dtype=student_logits.dtype)
    ce = cross_entropy_rows(teacher_probs, student_logits, tau_student, clamp)
    return (ce * Tensor(particle_weights(masks), dtype=ce.dtype)).sum()


def loss_cls(teacher_probs, student_logits, tau_student=0.1, clamp=1e-12):
    """Cross-view [CLS] loss. Rows ``0..B-1`` are view u, ``B..2B-1`` view v;
    the teacher of one view supervises the student of the other."""
    b = teacher_probs.shape[0] // 2
    swapped = np.concatenate([teacher_probs[b:], teacher_probs[:b]], axis=0)
    return cross_entropy_rows(swapped, student_logits, tau_student, clamp).mean()


def loss_koleo(embeddings, eps=1e-8):
    """``-mean log(min_j ||x_j - x_i|| + eps)`` over l2-normalised rows."""
    if embeddings.shape[0] < 2:
        raise ValueError("loss_koleo: need at least two embeddings")
    x = T.l2_normalize(embeddings)
    dist = T.pairwise_distance(x, x)
    blocked = np.zeros(dist.shape, dtype=dist.dtype)
    np.fill_diagonal(blocked, np.inf)
    nearest = T.min_(dist + Tensor(blocked, dtype=dist.dtype), axis=1)
    return -T.log(nearest + Tensor(eps, dtype=nearest.dtype)).mean()


def total_loss(l_part, l_cls, l_koleo, koleo_lambda):
    if koleo_lambda < 0:
        raise ValueError("koleo_lambda must be >= 0")
    return l_part + l_cls + l_koleo * koleo_lambda


# ---------------------------------------------------------------------------
# training state and step


@dataclass
class TrainState:
    student: dict
    teacher: dict
    center_cls: np.ndarray
    center_part: np.ndarray
    optimizer: AdamW
    net_cfg: NetworkConfig
    seed: int = 0
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(net_cfg, dcfg, seed, dtype=np.float32):
    student = init_params(net_cfg, stream(seed, "init"), dtype=dtype)
    teacher = {k: v.copy() for k, v in student.items()}
    opt = AdamW(student, dcfg.weight_decay, dcfg.adam_betas, dcfg.adam_eps)
    zeros = np.zeros(net_cfg.d_proj)
    return TrainState(student, teacher, zeros.copy(), zeros.copy(), opt, net_cfg, seed)


def _teacher_outputs(views, rows, cols, state):
    p = as_tensors(state.teacher, requires_grad=False)
    with T.no_grad():
        tokens, validity = tokenize(views, None, p, state.net_cfg)
        emb = encode(tokens, validity, p, state.net_cfg, train=False)
        cls_logits = project(emb[:, 0], p, state.net_cfg.proj_norm).data.astype(np.float64)
        part_logits = project(Tensor(emb.data[rows, 1 + cols], dtype=emb.dtype), p, state.net_cfg.proj_norm).data.astype(np.float64)
    return cls_logits, part_logits


def compute_losses(state, views, masks, dcfg, train=True, dropout_rng=None, params=None):
    """Forward both networks on a view batch and return the loss tensors plus
    the teacher logits needed for the centering update.

    ``params`` optionally supplies the student as ready-made tensors (used by
    gradient checks); by default fresh leaves are built from ``state.student``.
    """
    rows, cols = np.nonzero(masks)
    t_cls, t_part = _teacher_outputs(views, rows, cols, state)
    pt_cls = center_and_sharpen(t_cls, state.center_cls, dcfg.tau_teacher)
    pt_part = center_and_sharpen(t_part, state.center_part, dcfg.tau_teacher)

    sp = as_tensors(state.student, requires_grad=True) if params is None else params
    tokens, validity = tokenize(views, masks, sp, state.net_cfg)
    emb = encode(tokens, validity, sp, state.net_cfg, train=train, rng=dropout_rng)
    n2 = views.shape[0]
    s_cls = emb[:, 0]
    heads = [s_cls]
    if rows.size:
        heads.append(emb[rows, 1 + cols])
    logits = project(T.concat(heads, axis=0) if len(heads) > 1 else s_cls, sp, state.net_cfg.proj_norm)
    l_cls = loss_cls(pt_cls, logits[:n2], dcfg.tau_student, dcfg.log_clamp)
    if rows.size:
        l_part = loss_particle(pt_part, logits[n2:], masks, dcfg.tau_student, dcfg.log_clamp)
    else:
        l_part = Tensor(0.0, dtype=l_cls.dtype)
    l_koleo = loss_koleo(s_cls[: n2 // 2], dcfg.koleo_eps)
    total = total_loss(l_part, l_cls, l_koleo, dcfg.koleo_lambda)
    return {
        "params": sp,
        "total": total,
        "part": l_part,
        "cls": l_cls,
        "koleo": l_koleo,
        "teacher_cls_logits": t_cls,
        "teacher_part_logits": t_part,
        "teacher_cls_probs": pt_cls,
    }


def train_step(state, features, indices, dcfg, aug_cfg=AugmentConfig(), total_steps=1, steps_per_epoch=1):
    """One optimisation step on a batch of jets; returns the metrics row."""
    if len(features) < 2:
        raise ValueError("train_step: batch size must be >= 2")
    views, masks = batch_views(features, indices, state.epoch, state.seed, aug_cfg)
    if state.step == 0 and dcfg.center_init == "first_batch":
        rows, cols = np.nonzero(masks)
        t_cls, t_part = _teacher_outputs(views, rows, cols, state)
        state.center_cls = t_cls.mean(axis=0)
        if rows.size:
            state.center_part = t_part.mean(axis=0)
    out = compute_losses(state, views, masks, dcfg, True, stream(state.seed, "dropout", state.step))
    total = out["total"]
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: part={out['part'].item()} "
            f"cls={out['cls'].item()} koleo={out['koleo'].item()}",
        )
    T.backward(total)
    grads = {k: t.grad for k, t in out["params"].items() if t.grad is not None}
    lr = lr_at(state.step, dcfg, steps_per_epoch, total_steps)
    state.optimizer.step(grads, lr)

    tau = ema_momentum_at(min(state.step, total_steps), total_steps, dcfg.ema_start, dcfg.ema_end)
    if not dcfg.ema_per_step:
        epochs = max(1, round(total_steps / steps_per_epoch))
        tau = ema_momentum_at(min(state.epoch, epochs), epochs, dcfg.ema_start, dcfg.ema_end)
    ema_update(state.teacher, state.student, tau)

    state.center_cls = update_center(state.center_cls, out["teacher_cls_logits"].mean(axis=0), dcfg.tau_center)
    if out["teacher_part_logits"].shape[0]:
        state.center_part = update_center(
            state.center_part, out["teacher_part_logits"].mean(axis=0), dcfg.tau_center
        )
    pt = out["teacher_cls_probs"]
    metrics = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "tau_ema": tau,
        "loss_total": total.item(),
        "loss_part": out["part"].item(),
        "loss_cls": out["cls"].item(),
        "loss_koleo": out["koleo"].item(),
        "teacher_entropy": float(entropy(pt).mean()),
        "teacher_batch_entropy": float(entropy(pt.mean(axis=0))),
        "center_norm": float(np.linalg.norm(state.center_cls)),
        "center_part_norm": float(np.linalg.norm(state.center_part)),
        "n_masked": int(masks.sum()),
    }
    state.step += 1
    state.history.append(metrics)
    return metrics


# ---------------------------------------------------------------------------
# loop


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_state(directory, state, dcfg, aug_cfg, tag_extra=None):
    extra = {"seed": state.seed, "epoch": state.epoch, **(tag_extra or {})}
    save_params(os.path.join(directory, "student"), state.student, state.net_cfg, "student", state.step, extra)
    save_params(os.path.join(directory, "teacher"), state.teacher, state.net_cfg, "teacher", state.step, extra)
    aux = os.path.join(directory, "train_state")
    os.makedirs(aux, exist_ok=True)
    T.save_npy(os.path.join(aux, "center_cls.npy"), state.center_cls)
    T.save_npy(os.path.join(aux, "center_part.npy"), state.center_part)


def pretrain(features, net_cfg, dcfg, aug_cfg=AugmentConfig(), seed=0, out_dir=None,
             checkpoint_every=0, dtype=np.float32, progress=None):
    """Run the full pre-training loop and return the final :class:`TrainState`.

    Each epoch shuffles the jets with its own stream and drops the last
    partial batch. When ``out_dir`` is given, ``metrics.csv``, periodic
    ``checkpoints/epoch_<n>/`` and final ``student/`` + ``teacher/``
    checkpoints are written there.
    """
    features = np.asarray(features)
    n = len(features)
    batch = min(dcfg.batch_size, n)
    if batch < 2:
        raise ValueError("need at least two jets to pre-train")
    steps_per_epoch = n // batch
    total_steps = steps_per_epoch * dcfg.epochs
    net_cfg = resolve_feature_scale(net_cfg, features)
    state = init_state(net_cfg, dcfg, seed, dtype)
    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    try:
        for epoch in range(dcfg.epochs):
            state.epoch = epoch
            order = stream(seed, "shuffle", epoch).permutation(n)
            for s in range(steps_per_epoch):
                idx = order[s * batch : (s + 1) * batch]
                try:
                    m = train_step(state, features[idx], idx, dcfg, aug_cfg, total_steps, steps_per_epoch)
                except NonFiniteLossError:
                    if out_dir:
                        np.savez(os.path.join(out_dir, "nonfinite_batch.npz"), features=features[idx], indices=idx)
                    raise
                if writer:
                    writer.writerow([_fmt(m[k]) for k in METRIC_FIELDS])
            if progress:
                progress(epoch, state.history[-1])
            else:
                log.info("epoch %d loss %.4f", epoch, state.history[-1]["loss_total"])
            if out_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0 and epoch + 1 < dcfg.epochs:
                save_state(os.path.join(out_dir, "checkpoints", f"epoch_{epoch + 1:04d}"), state, dcfg, aug_cfg)
        state.epoch = dcfg.epochs
        if out_dir:
            save_state(out_dir, state, dcfg, aug_cfg)
    finally:
        if fh:
            fh.close()
    return state
