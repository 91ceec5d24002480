"""Teacher-student training with masked hard instance mining.

One iteration per training bag (batch size 1):

1. the teacher scores every instance of the full bag;
2. high / low / random masks are drawn from those scores and unioned;
3. the student sees only the surviving instances and is trained on
   ``cls + alpha * con`` where ``con`` pulls the student bag embedding
   towards the sharpened teacher embedding;
4. Adam updates the student, then the teacher follows by EMA.

Validation and test always run the student on complete bags.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngs
from . import tensor as T
from .data import Dataset, Split
from .errors import IncompatibleParameterSets, NonFiniteLoss, ShapeMismatch
from .masking import MaskRatios, build_masks, union_and_apply
from .metrics import EvalResult, auc, evaluate
from .models import PROJ_PREFIX, build_model, extract_teacher_attention
from .tensor import ParameterSet, Tape, Tensor

TEACHER_MODES = ("none", "student-copy", "momentum", "init", "init+momentum")
PROB_EPS = 1e-12


@dataclass
class TrainerConfig:
    model_kind: str = "gated"
    d_in: int = 64
    dim: int = 32
    attn_dim: int = 32
    n_heads: int = 2
    n_layers: int = 2
    attn_layer: int = 0
    teacher: str = "init+momentum"
    lambda_ema: float = 0.9999
    tau: float = 0.1
    alpha: float = 0.5
    lr0: float = 2e-4
    weight_decay: float = 1e-5
    max_epochs: int = 200
    patience: int = 30
    pretrain_epochs: int = 10
    mask: MaskRatios = field(default_factory=MaskRatios)
    seed: int = 0
    cell: str = ""

    def validate(self, size_range: tuple[int, int] | None = None) -> None:
        if self.model_kind not in ("gated", "msa"):
            raise ValueError(f"model_kind must be gated or msa, got {self.model_kind!r}")
        if self.teacher not in TEACHER_MODES:
            raise ValueError(f"teacher must be one of {TEACHER_MODES}, got {self.teacher!r}")
        if not 0 <= self.lambda_ema <= 1:
            raise ValueError(f"lambda_ema {self.lambda_ema} outside [0, 1]")
        if self.tau <= 0 or self.lr0 <= 0:
            raise ValueError("tau and lr0 must be positive")
        if self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("alpha and weight_decay must be non-negative")
        if self.max_epochs < 1 or self.patience < 1 or self.pretrain_epochs < 0:
            raise ValueError("need max_epochs >= 1, patience >= 1, pretrain_epochs >= 0")
        if size_range is not None:
            self.mask.validate(*size_range)

    def new_model(self, stream_key: str):
        init = rngs.stream(self.seed, "init", stream_key)
        return build_model(self.model_kind, self.d_in, self.dim, self.attn_dim,
                           self.n_heads, self.n_layers, seed=init)

    @property
    def uses_pretrain(self) -> bool:
        return self.teacher in ("init", "init+momentum")

    @property
    def ema_lambda(self) -> float | None:
        """EMA momentum for this teacher mode; ``None`` when there is no EMA state."""
        if self.teacher in ("momentum", "init+momentum"):
            return self.lambda_ema
        if self.teacher == "init":
            return 1.0
        return None


# ---------------------------------------------------------------- losses

def classification_loss(probability, label: int) -> Tensor:
    """Binary negative log-likelihood with the probability clamped away from 0 and 1."""
    p = T.clip(T.as_tensor(probability), PROB_EPS, 1.0 - PROB_EPS)
    if label:
        return T.scale(T.sum_all(T.log(p)), -1.0)
    return T.scale(T.sum_all(T.log(T.sub(np.ones(p.shape), p))), -1.0)


def consistency_loss(teacher_embedding, student_embedding: Tensor, tau: float) -> Tensor:
    """``-sum_d softmax(F_t / tau)_d * log_softmax(F_s)_d``; the teacher side is constant."""
    f_t = np.asarray(getattr(teacher_embedding, "data", teacher_embedding), dtype=np.float64)
    target = T.row_softmax(Tensor(f_t), tau).data
    log_s = T.row_log_softmax(student_embedding)
    return T.scale(T.sum_all(T.mul(Tensor(target), log_s)), -1.0)


@dataclass
class LossBreakdown:
    cls: float
    con: float
    total: float


# ---------------------------------------------------------------- optimisation

def ema_update(teacher: ParameterSet, student: ParameterSet, lam: float) -> ParameterSet:
    """In place ``theta_t <- lam * theta_t + (1 - lam) * theta_s``."""
    if not teacher.compatible(student):
        raise IncompatibleParameterSets("teacher and student parameters differ in names or shapes")
    if lam == 1.0:
        return teacher
    for name in teacher:
        t = teacher[name]
        t.data = lam * t.data + (1.0 - lam) * student[name].data
    return teacher


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParameterSet, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> ParameterSet:
    """Bias-corrected Adam; weight decay is added to the gradient (L2 style)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params:
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs)))


# ---------------------------------------------------------------- evaluation helpers

def predict(model, bags) -> np.ndarray:
    """Student probabilities on complete bags (no tape, no masking)."""
    return np.array([model.forward(b.features).probability.item() for b in bags])


def _labels(bags) -> np.ndarray:
    return np.array([b.label for b in bags])


def evaluate_model(model, bags) -> EvalResult:
    return evaluate(predict(model, bags), _labels(bags))


# ---------------------------------------------------------------- training

def _sgd_step(model, x, label, state, lr, weight_decay, teacher_embedding=None,
              alpha=0.0, tau=1.0) -> LossBreakdown:
    with Tape() as tape:
        out = model.forward(x)
        l_cls = classification_loss(out.probability, label)
        if teacher_embedding is None:
            total, con = l_cls, 0.0
        else:
            l_con = consistency_loss(teacher_embedding, out.embedding, tau)
            total = T.add(l_cls, T.scale(l_con, alpha))
            con = l_con.item()
    tape.backward(total)
    breakdown = LossBreakdown(l_cls.item(), con, total.item())
    if not math.isfinite(breakdown.total):
        raise NonFiniteLoss(f"non-finite loss {breakdown}")
    adam_step(model.params, model.params.grads(), state, lr, weight_decay)
    return breakdown


def fit_vanilla(model, bags, epochs: int, config: TrainerConfig, stream: str = "pretrain"):
    """Plain attention-MIL training (no teacher, no masking) for ``epochs`` epochs."""
    state = AdamState()
    history = []
    for epoch in range(epochs):
        lr = cosine_lr(config.lr0, epoch, epochs)
        order = rngs.stream(config.seed, stream, epoch).permutation(len(bags))
        losses = [_sgd_step(model, bags[i].features, bags[i].label, state, lr,
                            config.weight_decay).cls for i in order]
        history.append(float(np.mean(losses)))
    return history


@dataclass
class Initialization:
    pretrained: ParameterSet
    student: object
    teacher: object | None


def pretrain_init(train_bags, config: TrainerConfig, pretrained: ParameterSet | None = None
                  ) -> Initialization:
    """Build ``f_p``, the teacher (a copy of ``f_p``) and the student.

    ``f_p`` is trained as a vanilla model for ``pretrain_epochs`` when the
    teacher mode uses initialisation; otherwise it stays at its random init.
    The student is freshly initialised except for its projection head,
    which is copied from ``f_p``.  Teacherless modes get a plain fresh student.
    """
    f_p = config.new_model("pretrain")
    if pretrained is not None:
        if not f_p.params.compatible(pretrained):
            raise IncompatibleParameterSets("pretrained parameters do not match the model")
        f_p = f_p.with_params(pretrained.copy())
    elif config.uses_pretrain and config.pretrain_epochs > 0:
        fit_vanilla(f_p, train_bags, config.pretrain_epochs, config)
    student = config.new_model("student")
    if config.teacher in ("none", "student-copy"):
        return Initialization(f_p.params.copy(), student, None)
    for name in student.params:
        if name.startswith(PROJ_PREFIX):
            student.params[name].data = f_p.params[name].data.copy()
    teacher = f_p.with_params(f_p.params.copy())
    return Initialization(f_p.params.copy(), student, teacher)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    beta_h: float
    loss_cls: float
    loss_con: float
    loss_total: float
    val_auc: float


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1
    best_val_auc: float = float("nan")
    test: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        rows = [dict(record="epoch", **asdict(e)) for e in self.epochs]
        rows.append(dict(record="summary", seed=self.seed, best_epoch=self.best_epoch,
                         stopped_epoch=self.stopped_epoch, best_val_auc=self.best_val_auc,
                         test=self.test, config=self.config))
        return rows

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.records():
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    report: TrainReport
    student: object
    teacher: object | None
    pretrained: ParameterSet
    step_losses: list = field(default_factory=list)


def config_dict(config: TrainerConfig) -> dict:
    return asdict(config)


def train(dataset: Dataset, split: Split, config: TrainerConfig,
          pretrained: ParameterSet | None = None,
          on_event: Callable[[str, dict], None] | None = None) -> TrainResult:
    """Run the full teacher-student loop and report test metrics at the best val epoch.

    ``on_event(name, info)`` is called after every ``"adam"`` and ``"ema"``
    update (useful for auditing which parameters each update touches).
    """
    train_bags = dataset.subset(split.train)
    val_bags = dataset.subset(split.val)
    test_bags = dataset.subset(split.test)
    config.validate(dataset.size_range())
    emit = on_event or (lambda name, info: None)

    init = pretrain_init(train_bags, config, pretrained)
    student = init.student
    mode = config.teacher
    if mode == "none":
        teacher = None
    elif mode == "student-copy":
        teacher = student
    else:
        teacher = init.teacher
    lam = config.ema_lambda
    ratios = config.mask if mode != "none" else MaskRatios()
    report = TrainReport(config.seed, config_dict(config))
    result = TrainResult(report, student, teacher if mode not in ("none", "student-copy") else None,
                         init.pretrained)

    state = AdamState()
    best_auc, best_params = -math.inf, student.params.copy()
    best_teacher = teacher.params.copy() if result.teacher is not None else None
    for epoch in range(config.max_epochs):
        lr = cosine_lr(config.lr0, epoch, config.max_epochs)
        beta_h = ratios.high_ratio(epoch, config.max_epochs)
        order = rngs.stream(config.seed, "shuffle", epoch).permutation(len(train_bags))
        losses = []
        for i in order:
            bag = train_bags[i]
            x, f_t = bag.features, None
            if teacher is not None:
                t_out = teacher.forward(bag.features)
                f_t = t_out.embedding.data
                if ratios.active:
                    att = extract_teacher_attention(t_out, config.model_kind, config.attn_layer)
                    mask_rng = rngs.stream(config.seed, "mask", config.cell, epoch, bag.bag_id)
                    masks = build_masks(att, ratios, beta_h, mask_rng)
                    if masks:
                        x = union_and_apply(bag.features, masks.values()).features
            try:
                lb = _sgd_step(student, x, bag.label, state, lr, config.weight_decay,
                               f_t, config.alpha, config.tau)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch}, bag {bag.bag_id}: {exc}") from None
            emit("adam", {"epoch": epoch, "bag_id": bag.bag_id})
            if result.teacher is not None:
                ema_update(result.teacher.params, student.params, lam)
                emit("ema", {"epoch": epoch, "bag_id": bag.bag_id})
            losses.append(lb)
            result.step_losses.append(lb)

        val_auc = auc(predict(student, val_bags), _labels(val_bags))
        report.epochs.append(EpochRecord(
            epoch, lr, beta_h,
            float(np.mean([lb.cls for lb in losses])),
            float(np.mean([lb.con for lb in losses])),
            float(np.mean([lb.total for lb in losses])),
            val_auc))
        report.stopped_epoch = epoch
        if val_auc > best_auc:
            best_auc, report.best_epoch = val_auc, epoch
            best_params = student.params.copy()
            if result.teacher is not None:
                best_teacher = result.teacher.params.copy()
        elif epoch - report.best_epoch >= config.patience:
            break

    report.best_val_auc = best_auc
    result.student = student.with_params(best_params)
    if result.teacher is not None:
        result.teacher = result.teacher.with_params(best_teacher)
    report.test = evaluate_model(result.student, test_bags).as_dict()
    return result
