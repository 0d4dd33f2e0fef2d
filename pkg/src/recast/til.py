"""Task-incremental learning on synthetic Gaussian-mixture task suites.

Every task gets a fresh classifier head. In ``coefficients+head`` mode the
template banks are frozen and only the module coefficients plus the head
are trained, so a task is fully described by a small :class:`TaskSnapshot`
and earlier tasks can be restored exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Head, RecastConfig, RecastModel, forward_backbone, head_logits
from .exceptions import BudgetExceededError, TopologyError, TrainingError
from .mimicry import TeacherModel
from .optim import AdamW, StepDecay
from .tensor import Tensor, add_bias, gelu, matmul, no_grad, relu, softmax_cross_entropy, transpose

logger = logging.getLogger(__name__)

MODES = ("coefficients+head", "head-only", "full")
SHIFTS = ("rotation", "mean-shuffle", "identity")


@dataclass
class TaskSpec:
    task_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    seed: int
    rotation: np.ndarray = None
    permutation: np.ndarray = None

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def class_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres with pairwise distance ``separation`` (exact when ``n_classes <= dim``)."""
    if n_classes <= dim:
        basis = _random_orthogonal(rng, dim)[:n_classes]
        return basis * (separation / math.sqrt(2.0))
    return rng.standard_normal((n_classes, dim)) * (separation / math.sqrt(2.0))


def make_task_suite(n_tasks: int, n_classes: int, dim: int, shift: str = "rotation", seed: int = 0,
                    n_train: int = 64, n_val: int = 16, n_test: int = 64,
                    separation: float = 6.0, cluster_std: float = 1.0) -> List[TaskSpec]:
    """Seeded suite of ``n_tasks`` classification tasks.

    Task 0 draws ``n_*`` points per class around :func:`class_means`. Each
    later task relabels the centres with a random permutation and, for
    ``shift="rotation"``, maps every point through a random orthogonal
    matrix. ``shift="identity"`` repeats task 0's distribution.
    """
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if shift not in SHIFTS:
        raise ValueError(f"shift must be one of {SHIFTS}, got {shift!r}")
    seeds = np.random.SeedSequence(seed).spawn(n_tasks + 1)
    means = class_means(n_classes, dim, separation, np.random.default_rng(seeds[0]))
    suite = []
    for t in range(n_tasks):
        rng = np.random.default_rng(seeds[t + 1])
        if t == 0 or shift == "identity":
            Q, perm = np.eye(dim), np.arange(n_classes)
        else:
            Q = _random_orthogonal(rng, dim) if shift == "rotation" else np.eye(dim)
            perm = rng.permutation(n_classes)

        def split(per_class):
            y = np.repeat(np.arange(n_classes), per_class)
            X = means[perm[y]] + cluster_std * rng.standard_normal((y.size, dim))
            order = rng.permutation(y.size)
            return (X @ Q.T)[order], y[order]

        Xtr, ytr = split(n_train)
        Xva, yva = split(n_val)
        Xte, yte = split(n_test)
        suite.append(TaskSpec(t, Xtr, ytr, Xva, yva, Xte, yte, n_classes,
                              int(seeds[t + 1].generate_state(1)[0]), Q, perm))
    return suite


@dataclass
class TrainConfig:
    """Task-training recipe: AdamW with the rate cut by ``gamma`` every third of the run."""

    epochs: int = 30
    lr: float = 5e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    seed: int = 0
    gamma: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class ParamBudget:
    R_max: int
    R: Optional[int] = None

    def check(self, required: int) -> None:
        self.R = required
        if required > self.R_max:
            raise BudgetExceededError(required, self.R_max)


@dataclass
class TaskSnapshot:
    task_id: int
    coefficients: Dict[Tuple[int, int], np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    accuracy: float
    mode: str = "coefficients+head"

    @property
    def n_params(self) -> int:
        return sum(c.size for c in self.coefficients.values()) + self.head_weight.size + self.head_bias.size


# -- plain teacher network ---------------------------------------------------
def _act(x, name):
    return relu(x) if name == "relu" else gelu(x) if name == "gelu" else x


def _teacher_forward(weights, biases, keys, activation, head, X):
    h = Tensor(X) if not isinstance(X, Tensor) else X
    for key in keys:
        h = _act(add_bias(matmul(h, transpose(weights[key])), biases[key]), activation)
    return add_bias(matmul(h, transpose(head[0])), head[1])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def pretrain_teacher(task: TaskSpec, config: RecastConfig, train: Optional[TrainConfig] = None,
                     min_accuracy: float = 0.9) -> TeacherModel:
    """Train a plain fully-connected network of ``config``'s topology on ``task``.

    Raises :class:`TrainingError` when validation accuracy stays below
    ``min_accuracy``.
    """
    train = train or TrainConfig(epochs=60, lr=5e-3)
    rng = np.random.default_rng(train.seed)
    keys = [(l, m) for l, m, mk in config.modules()]
    weights, biases = {}, {}
    for l, m, mk in config.modules():
        if mk.kind != "fc":
            raise TopologyError("teacher pretraining supports fully-connected layouts only")
        bound = 1.0 / math.sqrt(mk.fan_in)
        weights[(l, m)] = Tensor(rng.uniform(-bound, bound, mk.weight_shape), requires_grad=True)
        biases[(l, m)] = Tensor(np.zeros(mk.bias_shape), requires_grad=True)
    first_in = config.layout[0][0].dims[1]
    if task.dim != first_in:
        raise TopologyError(f"task dimension {task.dim} does not match input width {first_in}")
    feat = config.layout[-1][-1].dims[0]
    bound = 1.0 / math.sqrt(feat)
    head = (Tensor(rng.uniform(-bound, bound, (task.n_classes, feat)), requires_grad=True),
            Tensor(np.zeros(task.n_classes), requires_grad=True))
    params = list(weights.values()) + list(biases.values()) + list(head)
    opt = AdamW(params, train.lr, weight_decay=train.weight_decay)
    sched = StepDecay(opt, max(1, math.ceil(train.epochs / 3)), train.gamma)
    for _ in range(train.epochs):
        for idx in _batches(len(task.y_train), train.batch_size, rng):
            opt.zero_grad()
            logits = _teacher_forward(weights, biases, keys, config.activation, head, task.X_train[idx])
            softmax_cross_entropy(logits, task.y_train[idx]).backward()
            opt.step()
        sched.step()
    with no_grad():
        val = _teacher_forward(weights, biases, keys, config.activation, head, task.X_val).data
    acc = accuracy(val, task.y_val)
    if acc < min_accuracy:
        raise TrainingError(f"teacher reached {acc:.3f} validation accuracy, needs {min_accuracy}")
    logger.info("teacher validation accuracy %.4f", acc)
    return TeacherModel(
        layout=[list(mods) for mods in config.layout],
        weights={k: w.data.copy() for k, w in weights.items()},
        biases={k: b.data.copy() for k, b in biases.items()},
        activation=config.activation,
        head=(head[0].data.copy(), head[1].data.copy()),
    )


def teacher_logits(teacher: TeacherModel, X: np.ndarray) -> np.ndarray:
    keys = [(l, m) for l, m, _ in teacher.modules()]
    with no_grad():
        return _teacher_forward({k: Tensor(w) for k, w in teacher.weights.items()},
                                {k: Tensor(b) for k, b in teacher.biases.items()},
                                keys, teacher.activation, tuple(Tensor(a) for a in teacher.head), X).data


# -- task adaptation -----------------------------------------------------------
def feature_width(model: RecastModel) -> int:
    return model.config.layout[-1][-1].dims[0]


def new_head(model: RecastModel, n_classes: int, seed: int) -> Head:
    d = feature_width(model)
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    return Head(Tensor(rng.uniform(-bound, bound, (n_classes, d)), requires_grad=True),
                Tensor(np.zeros(n_classes), requires_grad=True))


def trainable_params(model: RecastModel, n_classes: int, mode: str) -> int:
    """Number of parameters ``train_task`` will update in ``mode``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    head = n_classes * feature_width(model) + n_classes
    if mode == "head-only":
        return head
    task = model.n_task_params()
    if mode == "coefficients+head":
        return task + head
    templates = sum(t.size for t in model.template_tensors())
    biases = sum(b.size for b in model.biases.values())
    return templates + task + biases + head


def logits(model: RecastModel, head: Head, X) -> Tensor:
    return head_logits(forward_backbone(model, X), head)


def evaluate(model: RecastModel, head: Head, X: np.ndarray) -> np.ndarray:
    with no_grad():
        return logits(model, head, X).data


def train_task(model: RecastModel, task: TaskSpec, budget: ParamBudget, mode: str = "coefficients+head",
               train: Optional[TrainConfig] = None) -> TaskSnapshot:
    """Adapt ``model`` to ``task`` and return the task's snapshot.

    The budget is checked before anything is touched. Templates are frozen
    except in ``full`` mode; ``head-only`` also freezes coefficients.
    """
    train = train or TrainConfig()
    budget.check(trainable_params(model, task.n_classes, mode))
    head = new_head(model, task.n_classes, train.seed * 1_000_003 + task.task_id)
    coeffs = model.coefficient_tensors()
    model.set_templates_trainable(mode == "full")
    for c in coeffs:
        c.requires_grad = mode != "head-only"
        c.zero_grad()
    biases = list(model.biases.values())
    for b in biases:
        b.requires_grad = mode == "full"
        b.zero_grad()
    params = [head.weight, head.bias]
    if mode != "head-only":
        params += coeffs
    if mode == "full":
        params += model.template_tensors() + biases
    try:
        if train.epochs > 0:
            rng = np.random.default_rng([train.seed, task.task_id])
            opt = AdamW(params, train.lr, weight_decay=train.weight_decay)
            sched = StepDecay(opt, max(1, math.ceil(train.epochs / 3)), train.gamma)
            for _ in range(train.epochs):
                for idx in _batches(len(task.y_train), train.batch_size, rng):
                    opt.zero_grad()
                    loss = softmax_cross_entropy(logits(model, head, task.X_train[idx]), task.y_train[idx])
                    loss.backward()
                    opt.step()
                sched.step()
    finally:
        for b in biases:
            b.requires_grad = False
            b.grad = None
        model.set_templates_trainable(False)
        for c in coeffs:
            c.requires_grad = True
    model.heads[task.task_id] = head
    acc = accuracy(evaluate(model, head, task.X_test), task.y_test)
    return TaskSnapshot(task.task_id, model.get_coefficients(), head.weight.data.copy(),
                        head.bias.data.copy(), acc, mode)


def check_snapshot(model: RecastModel, snapshot: TaskSnapshot) -> None:
    current = model.get_coefficients()
    if set(snapshot.coefficients) != set(current):
        raise TopologyError("snapshot modules do not match the model")
    for key, arr in snapshot.coefficients.items():
        if arr.shape != current[key].shape:
            raise TopologyError(f"snapshot coefficients {key} have shape {arr.shape}, model {current[key].shape}")
    if snapshot.head_weight.ndim != 2 or snapshot.head_weight.shape[1] != feature_width(model):
        raise TopologyError(f"snapshot head {snapshot.head_weight.shape} does not fit "
                            f"{feature_width(model)} backbone features")


def restore(model: RecastModel, snapshot: TaskSnapshot) -> Head:
    """Write the snapshot's coefficients and head into ``model``; banks are untouched."""
    check_snapshot(model, snapshot)
    model.set_coefficients(snapshot.coefficients)
    head = Head(Tensor(snapshot.head_weight), Tensor(snapshot.head_bias))
    model.heads[snapshot.task_id] = head
    return head


def restore_and_eval(model: RecastModel, snapshot: TaskSnapshot, task: TaskSpec) -> float:
    head = restore(model, snapshot)
    return accuracy(evaluate(model, head, task.X_test), task.y_test)


def snapshot_logits(model: RecastModel, snapshot: TaskSnapshot, X: np.ndarray) -> np.ndarray:
    return evaluate(model, restore(model, snapshot), X)


@dataclass
class SequenceResult:
    """``accuracy[j, i]``: accuracy on task i after training task j (NaN for i > j)."""

    accuracy: np.ndarray
    snapshots: List[TaskSnapshot]
    logits: List[np.ndarray] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracy[-1]))


def run_sequence(model: RecastModel, suite: Sequence[TaskSpec], budget: ParamBudget,
                 mode: str = "coefficients+head", train: Optional[TrainConfig] = None) -> SequenceResult:
    """Train the tasks in order, re-evaluating every earlier task after each one.

    Each task starts from the coefficients the model held on entry, and those
    coefficients are back in place on return.
    """
    if not suite:
        raise ValueError("task suite is empty")
    for task in suite:
        budget.check(trainable_params(model, task.n_classes, mode))
    base = model.get_coefficients()
    D = len(suite)
    acc = np.full((D, D), np.nan)
    snaps, recorded = [], []
    for j, task in enumerate(suite):
        model.set_coefficients(base)
        snap = train_task(model, task, budget, mode, train)
        snaps.append(snap)
        recorded.append(evaluate(model, model.heads[task.task_id], task.X_test))
        for i in range(j + 1):
            acc[j, i] = restore_and_eval(model, snaps[i], suite[i])
        logger.info("task %d: accuracy row %s", j, np.round(acc[j, :j + 1], 4).tolist())
    model.set_coefficients(base)
    return SequenceResult(acc, snaps, recorded)
