"""scikit-learn style wrappers around the functional API.

``TeacherClassifier`` trains the plain network that mimicry starts from,
``NeuralMimicry`` fits a templated model to a teacher, and
``RecastClassifier`` adapts a templated backbone to one task. All three
follow the usual ``get_params``/``set_params``/``fit`` contract and can be
cloned.
"""
from __future__ import annotations

import copy

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import RecastConfig, RecastModel
from .mimicry import MimicryConfig, TeacherModel, run_mimicry
from .til import (ParamBudget, TaskSnapshot, TaskSpec, TrainConfig, evaluate, pretrain_teacher, restore,
                  teacher_logits, train_task)


def _task_from_arrays(X, y, n_classes, task_id=0, seed=0) -> TaskSpec:
    return TaskSpec(task_id, X, y, X, y, X, y, n_classes, seed)


class TeacherClassifier(ClassifierMixin, BaseEstimator):
    """Plain fully-connected classifier whose hidden layers are all ``width`` wide.

    The input dimension must equal ``width``.
    """

    def __init__(self, n_layers=3, width=16, activation="relu", epochs=60, lr=5e-3,
                 weight_decay=1e-6, batch_size=32, random_state=0):
        self.n_layers = n_layers
        self.width = width
        self.activation = activation
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        config = RecastConfig.uniform_fc(self.n_layers, self.width, 1, 1, 1, activation=self.activation)
        train = TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                            batch_size=self.batch_size, seed=self.random_state)
        task = _task_from_arrays(X, y_idx, len(self.classes_))
        self.teacher_ = pretrain_teacher(task, config, train, min_accuracy=0.0)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "teacher_")
        X = check_array(X, dtype=np.float64)
        return teacher_logits(self.teacher_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class NeuralMimicry(BaseEstimator):
    """Fit template banks and coefficients so generated weights match a teacher.

    ``fit`` takes a :class:`~recast.mimicry.TeacherModel`; the reconstructed
    model is ``model_`` and the per-module losses and similarities are in
    ``report_``.
    """

    def __init__(self, n_groups=3, n_templates=2, n_sets=2, loss="smoothl1", beta=1.0, lr=0.01,
                 max_epochs=2000, sigma=0.01, noise=False, optimizer="sgd", schedule="module",
                 random_state=0):
        self.n_groups = n_groups
        self.n_templates = n_templates
        self.n_sets = n_sets
        self.loss = loss
        self.beta = beta
        self.lr = lr
        self.max_epochs = max_epochs
        self.sigma = sigma
        self.noise = noise
        self.optimizer = optimizer
        self.schedule = schedule
        self.random_state = random_state

    def _mimicry_config(self) -> MimicryConfig:
        return MimicryConfig(loss=self.loss, beta=self.beta, lr=self.lr, max_epochs=self.max_epochs,
                             sigma=self.sigma, noise=self.noise, seed=self.random_state,
                             optimizer=self.optimizer, schedule=self.schedule)

    def fit(self, teacher: TeacherModel, y=None):
        if not isinstance(teacher, TeacherModel):
            raise TypeError(f"NeuralMimicry.fit expects a TeacherModel, got {type(teacher).__name__}")
        cfg = self._mimicry_config()
        config = RecastConfig(teacher.layout, self.n_groups, self.n_templates, self.n_sets, teacher.activation)
        self.model_ = RecastModel.initialize(config, self.random_state)
        self.report_ = run_mimicry(teacher, self.model_, cfg)
        self.n_epochs_ = self.report_.epochs
        return self

    def transform(self, teacher: TeacherModel = None):
        """Generated weights keyed by ``(layer, module)``."""
        check_is_fitted(self, "model_")
        return {(l, m): self.model_.weight(l, m).numpy() for l, m, _ in self.model_.config.modules()}

    def score(self, teacher: TeacherModel = None, y=None) -> float:
        """Smallest per-module cosine similarity reached during ``fit``."""
        check_is_fitted(self, "report_")
        return self.report_.min_cosine()


class RecastClassifier(ClassifierMixin, BaseEstimator):
    """Adapt a templated backbone to one classification task.

    ``fit`` works on a private copy of ``backbone`` and keeps the task's
    coefficients and head as ``snapshot_``.
    """

    def __init__(self, backbone=None, mode="coefficients+head", epochs=30, lr=5e-3, weight_decay=1e-6,
                 batch_size=32, budget=None, task_id=0, random_state=0):
        self.backbone = backbone
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.budget = budget
        self.task_id = task_id
        self.random_state = random_state

    def fit(self, X, y):
        if not isinstance(self.backbone, RecastModel):
            raise TypeError("RecastClassifier needs a RecastModel backbone")
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.model_ = copy.deepcopy(self.backbone)
        train = TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                            batch_size=self.batch_size, seed=self.random_state)
        budget = ParamBudget(np.iinfo(np.int64).max if self.budget is None else self.budget)
        task = _task_from_arrays(X, y_idx, len(self.classes_), self.task_id, self.random_state)
        self.snapshot_: TaskSnapshot = train_task(self.model_, task, budget, self.mode, train)
        self.n_trainable_params_ = budget.R
        return self

    def decision_function(self, X):
        check_is_fitted(self, "snapshot_")
        X = check_array(X, dtype=np.float64)
        return evaluate(self.model_, restore(self.model_, self.snapshot_), X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
