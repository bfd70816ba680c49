"""Server-side aggregation: multi-teacher channel-wise distillation and FedAvg."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector, tensornn as tnn
from .detector import DetectorModel, ModelOutput


@dataclass(frozen=True)
class DistillConfig:
    lambda_fea: float = 1.0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    temperature: float = 4.0
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 8

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda_fea, self.lambda_cls, self.lambda_reg) < 0:
            raise ValueError("distillation weights must be non-negative")


LOG_FIELDS = ("round", "epoch", "L_det", "L_fea", "L_cls", "L_reg", "total")


def init_student(prev_global: DetectorModel, teachers: list[DetectorModel]) -> DetectorModel:
    """Elementwise mean of the previous global model and the N teachers."""
    models = [prev_global, *teachers]
    detector.check_same_architecture(models)
    params = {name: np.mean(np.stack([m.params[name] for m in models]), axis=0) for name in prev_global.params}
    return DetectorModel(params, prev_global.arch)


def fedavg_aggregate(models: list[DetectorModel], weights) -> DetectorModel:
    """Weighted parameter average; weights must be non-negative and sum to 1."""
    if not models:
        raise ValueError("no models to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1, got sum {weights.sum()!r}")
    detector.check_same_architecture(models)
    params = {
        name: np.tensordot(weights, np.stack([m.params[name] for m in models]), axes=1) for name in models[0].params
    }
    return DetectorModel(params, models[0].arch)


def _check_teachers(student_out: ModelOutput, teacher_outs: list[ModelOutput], attr: str):
    if not teacher_outs:
        raise ValueError("at least one teacher output is required")
    s_maps = getattr(student_out, attr)
    for t in teacher_outs:
        t_maps = getattr(t, attr)
        if len(t_maps) != len(s_maps) or any(a.shape != b.shape for a, b in zip(s_maps, t_maps)):
            raise tnn.ShapeError(f"teacher {attr} shapes differ from the student's")


def _kl_term(student_out, teacher_outs, attr, temperature):
    """(1/N) sum_l sum_i KL(student_l, teacher_i_l) and its grads per scale."""
    _check_teachers(student_out, teacher_outs, attr)
    n = len(teacher_outs)
    s_maps = getattr(student_out, attr)
    loss = 0.0
    grads = [np.zeros_like(m) for m in s_maps]
    for lvl, s in enumerate(s_maps):
        for t in teacher_outs:
            val, cache = tnn.kl_channelwise_forward(s, getattr(t, attr)[lvl], temperature)
            loss += val / n
            grads[lvl] += tnn.kl_channelwise_backward(cache, 1.0 / n)
    return loss, grads


def loss_fea(student_out: ModelOutput, teacher_outs: list[ModelOutput], temperature: float = 4.0) -> float:
    return _kl_term(student_out, teacher_outs, "features", temperature)[0]


def loss_cls(student_out: ModelOutput, teacher_outs: list[ModelOutput], temperature: float = 4.0) -> float:
    return _kl_term(student_out, teacher_outs, "cls_maps", temperature)[0]


def _reg_term(student_out, teacher_outs):
    _check_teachers(student_out, teacher_outs, "reg_maps")
    n = len(teacher_outs)
    loss = 0.0
    grads = [np.zeros_like(m) for m in student_out.reg_maps]
    for lvl, s in enumerate(student_out.reg_maps):
        for t in teacher_outs:
            val, diff = tnn.l2_loss_forward(s, t.reg_maps[lvl])
            loss += val / n
            grads[lvl] += tnn.l2_loss_backward(diff, 1.0 / n)
    return loss, grads


def loss_reg(student_out: ModelOutput, teacher_outs: list[ModelOutput]) -> float:
    return _reg_term(student_out, teacher_outs)[0]


def total_loss_and_grads(student, teachers, images, targets, config: DistillConfig):
    """L_det + l1*L_fea + l2*L_cls + l3*L_reg on one batch.

    Returns (parts, grads) where parts maps log field names to values.
    Teacher forward passes carry no gradient.
    """
    s_out = detector.forward(student, images, keep_cache=True)
    t_outs = [detector.forward(t, images) for t in teachers]
    l_det, _, dcls, dreg = detector.detection_loss_and_grads(s_out, targets, student.arch)
    l_fea, g_fea = _kl_term(s_out, t_outs, "features", config.temperature)
    l_cls, g_cls = _kl_term(s_out, t_outs, "cls_maps", config.temperature)
    l_reg, g_reg = _reg_term(s_out, t_outs)
    dfeat = [config.lambda_fea * g for g in g_fea]
    dcls = [d + config.lambda_cls * g for d, g in zip(dcls, g_cls)]
    dreg = [d + config.lambda_reg * g for d, g in zip(dreg, g_reg)]
    total = l_det + config.lambda_fea * l_fea + config.lambda_cls * l_cls + config.lambda_reg * l_reg
    grads = detector.backward(student, s_out, dfeat, dcls, dreg)
    parts = {"L_det": l_det, "L_fea": l_fea, "L_cls": l_cls, "L_reg": l_reg, "total": total}
    return parts, grads


def distill_aggregate(
    prev_global: DetectorModel,
    teachers: list[DetectorModel],
    server_data,
    config: DistillConfig,
    seed: int,
    round_index: int = 0,
    log: list | None = None,
) -> DetectorModel:
    """Initialise the student by parameter averaging, then distil on server data.

    Batches are drawn exactly as in ``detector.train_local`` so that with all
    lambdas at zero the two produce the same parameter trajectory. Per-epoch
    mean losses are appended to ``log`` as dicts keyed by LOG_FIELDS.
    """
    if not teachers:
        raise ValueError("distillation needs at least one teacher")
    n = len(server_data.images)
    if n == 0:
        raise ValueError("distillation needs non-empty server data")
    student = init_student(prev_global, teachers)
    targets = detector.dataset_targets(server_data, student.arch)
    params = student.parameters()
    rng = np.random.default_rng(seed)
    for epoch in range(config.epochs):
        sums = dict.fromkeys(LOG_FIELDS[2:], 0.0)
        for idx in detector.minibatches(n, config.batch_size, rng):
            parts, grads = total_loss_and_grads(
                student, teachers, server_data.images[idx], [targets[i] for i in idx], config
            )
            for p in params:
                p.grad = grads[p.name]
            tnn.sgd_step(params, config.lr)
            student.params = {p.name: p.value for p in params}
            for k in sums:
                sums[k] += parts[k] * len(idx)
        if log is not None:
            log.append({"round": round_index, "epoch": epoch + 1, **{k: v / n for k, v in sums.items()}})
    return student
