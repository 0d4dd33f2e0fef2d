"""Neural Mimicry: fit banks and coefficients to a teacher's weights.

For every epoch and every module in layer-major order, the module weight is
generated from (optionally noise-perturbed) coefficients, compared with the
teacher weight, and the coefficients plus the group's templates take one
optimizer step on that module's loss.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .core import ModuleKind, RecastConfig, RecastModel, generate_weight
from .exceptions import NonFiniteError, NumericalError, ShapeError, TopologyError, UndefinedMetricError
from .optim import make_optimizer
from .tensor import Tensor, add, as_tensor, make_node

logger = logging.getLogger(__name__)

LOSSES = ("smoothl1", "mse")
OPTIMIZERS = ("sgd", "momentum", "adam")
SCHEDULES = ("module", "epoch")


@dataclass
class TeacherModel:
    """Plain (non-templated) weights and biases keyed by ``(layer, module)``."""

    layout: List[List[ModuleKind]]
    weights: Dict[Tuple[int, int], np.ndarray]
    biases: Dict[Tuple[int, int], np.ndarray]
    activation: str = "relu"
    head: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def modules(self):
        for l, mods in enumerate(self.layout):
            for m, mk in enumerate(mods):
                yield l, m, mk

    def check_topology(self, config: RecastConfig) -> None:
        if len(self.layout) != config.n_layers:
            raise TopologyError(f"teacher has {len(self.layout)} layers, config has {config.n_layers}")
        for l, (mine, theirs) in enumerate(zip(self.layout, config.layout)):
            if [mk.weight_shape for mk in mine] != [mk.weight_shape for mk in theirs]:
                raise TopologyError(f"layer {l}: teacher modules {[mk.weight_shape for mk in mine]} "
                                    f"vs config {[mk.weight_shape for mk in theirs]}")
        for l, m, mk in self.modules():
            if self.weights[(l, m)].shape != mk.weight_shape:
                raise TopologyError(f"teacher weight ({l},{m}) has shape {self.weights[(l, m)].shape}")


@dataclass
class MimicryConfig:
    loss: str = "smoothl1"
    beta: float = 1.0
    lr: float = 0.01
    max_epochs: int = 2000
    sigma: float = 0.01
    noise: bool = False
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    schedule: str = "module"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be non-negative, got {self.max_epochs}")


@dataclass
class ReconstructionReport:
    losses: Dict[Tuple[int, int], float]
    cosine: Dict[Tuple[int, int], float]
    epochs: int
    seconds: float
    history: List[float] = field(default_factory=list)

    def rows(self):
        """``(layer, module, loss, cosine_sim)`` in layer-major order."""
        return [(l, m, self.losses[(l, m)], self.cosine[(l, m)]) for l, m in sorted(self.losses)]

    def min_cosine(self) -> float:
        return min(self.cosine.values())


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def smooth_l1(a, b, beta: float = 1.0) -> Tensor:
    """Mean of ``0.5 x^2 / beta`` where ``|x| < beta`` else ``|x| - 0.5 beta``, with ``x = a - b``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "smooth_l1")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = a.data - b.data
    small = np.abs(x) < beta
    val = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta).mean()
    dx = np.where(small, x / beta, np.sign(x)) / x.size

    def grad_fn(g):
        return (dx * g, -dx * g)

    return make_node(val, (a, b), grad_fn, "smooth_l1")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mse")
    x = a.data - b.data
    dx = 2.0 * x / x.size
    return make_node(np.mean(x * x), (a, b), lambda g: (dx * g, -dx * g), "mse")


def perturb_coefficients(coeffs, sigma: float, rng: np.random.Generator) -> Tensor:
    """``coeffs + eps`` with ``eps ~ N(0, sigma^2)`` per scalar; the input is left untouched.

    Gradients reach ``coeffs`` through the addition. ``sigma == 0`` returns
    ``coeffs`` itself without consuming random numbers.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    coeffs = as_tensor(coeffs)
    if sigma == 0:
        return coeffs
    return add(coeffs, Tensor(rng.normal(0.0, sigma, size=coeffs.shape)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between flattened ``a`` and ``b``."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"cosine_similarity: {a.size} vs {b.size} elements")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _loss_fn(cfg: MimicryConfig) -> Callable:
    if cfg.loss == "mse":
        return mse
    return lambda a, b: smooth_l1(a, b, cfg.beta)


def run_mimicry(teacher: TeacherModel, model: RecastModel, cfg: MimicryConfig,
                log: Optional[Callable[[str], None]] = None, threads: int = 1) -> ReconstructionReport:
    """Reconstruct ``teacher`` inside ``model`` (mutated in place).

    ``log`` receives one ``epoch=<e> total_loss=<v>`` line per epoch.
    ``threads > 1`` visits groups concurrently; banks are disjoint between
    groups, so only the summation order of the epoch total can differ.
    """
    teacher.check_topology(model.config)
    config = model.config
    for key in model.biases:
        model.biases[key] = Tensor(np.array(teacher.biases[key], dtype=np.float64), name=model.biases[key].name)
    model.set_templates_trainable(True)
    for cs in model.coefficients.values():
        cs.values.requires_grad = True
        cs.values.zero_grad()
    params = model.coefficient_tensors() + model.template_tensors()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, momentum=cfg.momentum)
    loss_fn = _loss_fn(cfg)
    targets = {k: Tensor(w) for k, w in teacher.weights.items()}
    keys = [(l, m) for l, m, _ in config.modules()]
    rngs = dict(zip(keys, (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(len(keys)))))
    sigma = cfg.sigma if cfg.noise else 0.0

    def module_loss(key) -> Tensor:
        l, m = key
        C = model.coefficients[key].values
        W = generate_weight(model.bank_for(l), perturb_coefficients(C, sigma, rngs[key]))
        return loss_fn(W, targets[key])

    def visit(key) -> float:
        C = model.coefficients[key].values
        bank = model.bank_for(key[0])
        C.zero_grad()
        for t in bank.templates:
            t.zero_grad()
        loss = module_loss(key)
        loss.backward()
        opt.step([C, *bank.templates])
        return loss.item()

    def visit_group(g) -> Dict:
        return {key: visit(key) for key in keys if config.group_of(key[0]) == g}

    history = []
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and cfg.schedule == "module" else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                if cfg.schedule == "epoch":
                    opt.zero_grad()
                    per_module = {}
                    for key in keys:
                        loss = module_loss(key)
                        loss.backward()
                        per_module[key] = loss.item()
                    opt.step()
                elif pool is not None:
                    per_module = {}
                    for part in pool.map(visit_group, range(config.n_groups)):
                        per_module.update(part)
                else:
                    per_module = {key: visit(key) for key in keys}
            except NonFiniteError as exc:
                raise NumericalError(f"mimicry diverged at epoch {epoch}: {exc}") from exc
            total = 0.0
            for key in keys:
                total += per_module[key]
            if not np.isfinite(total):
                raise NumericalError(f"mimicry diverged at epoch {epoch}: total_loss={total}")
            history.append(total)
            if log is not None:
                log(f"epoch={epoch} total_loss={total:.17g}")
    finally:
        if pool is not None:
            pool.shutdown()
    seconds = time.perf_counter() - start

    losses, cosine = {}, {}
    for key in keys:
        W = model.weight(*key)
        losses[key] = loss_fn(W, targets[key]).item()
        cosine[key] = cosine_similarity(W, targets[key])
    logger.debug("mimicry finished: %d epochs in %.2fs, min cosine %.6f",
                 cfg.max_epochs, seconds, min(cosine.values()))
    return ReconstructionReport(losses, cosine, cfg.max_epochs, seconds, history)
