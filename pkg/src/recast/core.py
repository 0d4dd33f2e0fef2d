"""Template banks, coefficient sets and dynamic weight generation.

A model of ``L`` layers is split into ``G`` contiguous groups. Every group
owns a bank of ``n`` templates shaped like the weights of its modules, and
every module owns a ``K x n`` coefficient matrix. The module weight is

    W = (1/K) * sum_k sum_i C[k, i] * T_i

Layers and modules are indexed from 0 in this API; :func:`group_index` keeps
the 1-based formula for direct comparison with hand calculations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError, TopologyError
from .tensor import Tensor, add_bias, as_tensor, columns, conv2d, gelu, make_node, matmul, relu, reshape, transpose

ACTIVATIONS = ("relu", "gelu", "identity")


@dataclass(frozen=True)
class ModuleKind:
    """What a templated module computes and the weight shape it needs.

    ``kind`` is ``"fc"`` (dims = (d_out, d_in)), ``"qkv"`` (dims = (d,)) or
    ``"conv"`` (dims = (c_out, c_in, k)).
    """

    kind: str
    dims: Tuple[int, ...]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        expected = {"fc": 2, "qkv": 1, "conv": 3}
        if self.kind not in expected:
            raise ValueError(f"unknown module kind {self.kind!r}")
        if len(self.dims) != expected[self.kind]:
            raise ValueError(f"{self.kind} needs {expected[self.kind]} dims, got {self.dims}")
        if any(int(d) < 1 for d in self.dims):
            raise ValueError(f"module extents must be positive, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @classmethod
    def fc(cls, d_out: int, d_in: int) -> "ModuleKind":
        return cls("fc", (d_out, d_in))

    @classmethod
    def qkv(cls, d: int) -> "ModuleKind":
        return cls("qkv", (d,))

    @classmethod
    def conv(cls, c_out: int, c_in: int, k: int, stride: int = 1, padding: int = 0) -> "ModuleKind":
        return cls("conv", (c_out, c_in, k), stride=stride, padding=padding)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "fc":
            return self.dims
        if self.kind == "qkv":
            d = self.dims[0]
            return (3 * d, d)
        c_out, c_in, k = self.dims
        return (c_out, c_in, k, k)

    @property
    def bias_shape(self) -> Tuple[int]:
        return (self.weight_shape[0],)

    @property
    def fan_in(self) -> int:
        return math.prod(self.weight_shape[1:])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "stride": self.stride, "padding": self.padding}

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleKind":
        return cls(d["kind"], tuple(d["dims"]), stride=d.get("stride", 1), padding=d.get("padding", 0))


@dataclass
class RecastConfig:
    """Topology and sharing hyper-parameters.

    Parameters
    ----------
    layout : list of list of ModuleKind
        Target modules of each layer; ``len(layout)`` is the layer count L.
    n_groups : int
        Number of template banks G, ``1 <= G <= L``.
    n_templates : int
        Templates per bank n.
    n_sets : int
        Coefficient sets per module K.
    activation : str
        Nonlinearity applied after fully-connected modules.
    """

    layout: List[List[ModuleKind]]
    n_groups: int
    n_templates: int
    n_sets: int
    activation: str = "relu"

    def __post_init__(self):
        self.layout = [list(mods) for mods in self.layout]
        L = len(self.layout)
        if L < 1:
            raise ValueError("need at least one layer")
        if any(len(mods) < 1 for mods in self.layout):
            raise ValueError("every layer needs at least one target module")
        if not 1 <= self.n_groups <= L:
            raise ValueError(f"need 1 <= G <= L, got G={self.n_groups}, L={L}")
        if self.n_templates < 1 or self.n_sets < 1:
            raise ValueError(f"need n >= 1 and K >= 1, got n={self.n_templates}, K={self.n_sets}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        for g in range(self.n_groups):
            shapes = {mk.weight_shape for l in self.layers_in_group(g) for mk in self.layout[l]}
            if len(shapes) > 1:
                raise ShapeError(f"group {g} mixes weight shapes {sorted(shapes)}; one bank needs one shape")

    @classmethod
    def uniform_fc(cls, n_layers: int, width: int, n_groups: int, n_templates: int, n_sets: int,
                   modules_per_layer: int = 1, activation: str = "relu") -> "RecastConfig":
        """``n_layers`` layers of ``modules_per_layer`` square width x width FC modules."""
        layout = [[ModuleKind.fc(width, width) for _ in range(modules_per_layer)] for _ in range(n_layers)]
        return cls(layout, n_groups, n_templates, n_sets, activation)

    @property
    def n_layers(self) -> int:
        return len(self.layout)

    def modules(self):
        """Yield ``(layer, module, kind)`` in layer-major order."""
        for l, mods in enumerate(self.layout):
            for m, mk in enumerate(mods):
                yield l, m, mk

    def group_of(self, layer: int) -> int:
        """0-based group of 0-based ``layer``."""
        return group_index(layer + 1, self.n_layers, self.n_groups) - 1

    def layers_in_group(self, g: int) -> List[int]:
        return [l for l in range(self.n_layers) if self.group_of(l) == g]

    def group_shape(self, g: int) -> Tuple[int, ...]:
        return self.layout[self.layers_in_group(g)[0]][0].weight_shape

    def to_dict(self) -> dict:
        return {
            "layout": [[mk.to_dict() for mk in mods] for mods in self.layout],
            "n_groups": self.n_groups,
            "n_templates": self.n_templates,
            "n_sets": self.n_sets,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecastConfig":
        layout = [[ModuleKind.from_dict(mk) for mk in mods] for mods in d["layout"]]
        return cls(layout, d["n_groups"], d["n_templates"], d["n_sets"], d.get("activation", "relu"))


def group_index(l: int, L: int, G: int) -> int:
    """Return ``ceil(l / (L/G))`` for 1-based layer ``l``, using exact integer arithmetic."""
    if not 1 <= l <= L:
        raise ValueError(f"layer index {l} outside [1, {L}]")
    if not 1 <= G <= L:
        raise ValueError(f"need 1 <= G <= L, got G={G}, L={L}")
    return -(-l * G // L)


@dataclass
class TemplateBank:
    group: int
    templates: List[Tensor]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("a template bank needs at least one template")
        shape = self.templates[0].shape
        if any(t.shape != shape for t in self.templates):
            raise ShapeError(f"templates of bank {self.group} differ in shape")

    @property
    def n(self) -> int:
        return len(self.templates)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.templates[0].shape

    def stacked(self) -> np.ndarray:
        return np.stack([t.data for t in self.templates])

    def set_trainable(self, flag: bool) -> None:
        for t in self.templates:
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data)


@dataclass
class CoefficientSet:
    layer: int
    module: int
    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"coefficients must be K x n, got shape {self.values.shape}")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


def generate_weight(bank: TemplateBank, coeffs) -> Tensor:
    """Average of the K template mixtures, differentiable in templates and coefficients."""
    C = as_tensor(coeffs.values if isinstance(coeffs, CoefficientSet) else coeffs)
    if C.ndim != 2 or C.shape[1] != bank.n:
        raise ShapeError(f"coefficients {C.shape} do not match a bank of {bank.n} templates")
    K = C.shape[0]
    T = bank.stacked()
    per_set = np.tensordot(C.data, T, axes=(1, 0))
    W = per_set.sum(axis=0) / K

    def grad_fn(g):
        gC = np.tensordot(T, g, axes=(list(range(1, T.ndim)), list(range(g.ndim)))) / K
        gC = np.broadcast_to(gC, C.shape).copy()
        colsum = C.data.sum(axis=0) / K
        return (gC,) + tuple(c * g for c in colsum)

    return make_node(W, (C, *bank.templates), grad_fn, "generate_weight")


def _orthonormal_rows(rng: np.random.Generator, rows: int, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, rows)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T


def init_coefficients(config: RecastConfig, seed: int) -> Dict[Tuple[int, int], np.ndarray]:
    """Orthogonal initialisation of every module's K x n coefficient matrix.

    Rows are orthonormal when K <= n. For K > n the rows are filled in blocks
    of n, each block orthonormal.
    """
    rng = np.random.default_rng(seed)
    K, n = config.n_sets, config.n_templates
    out = {}
    for l, m, _ in config.modules():
        blocks = []
        remaining = K
        while remaining > 0:
            rows = min(n, remaining)
            blocks.append(_orthonormal_rows(rng, rows, n))
            remaining -= rows
        out[(l, m)] = np.vstack(blocks)
    return out


def init_templates(config: RecastConfig, seed: int) -> List[np.ndarray]:
    """Per group, an ``n x shape`` array drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    banks = []
    for g in range(config.n_groups):
        mk = config.layout[config.layers_in_group(g)[0]][0]
        bound = 1.0 / math.sqrt(mk.fan_in)
        banks.append(rng.uniform(-bound, bound, size=(config.n_templates,) + mk.weight_shape))
    return banks


@dataclass
class Head:
    """Task-private linear classifier on top of the backbone features."""

    weight: Tensor
    bias: Tensor

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


class RecastModel:
    """Templated network: banks shared per group, coefficients and biases per module."""

    def __init__(self, config: RecastConfig, banks: Sequence[np.ndarray],
                 coefficients: Dict[Tuple[int, int], np.ndarray],
                 biases: Optional[Dict[Tuple[int, int], np.ndarray]] = None):
        self.config = config
        if len(banks) != config.n_groups:
            raise TopologyError(f"expected {config.n_groups} banks, got {len(banks)}")
        self.banks: List[TemplateBank] = []
        for g, arr in enumerate(banks):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (config.n_templates,) + config.group_shape(g):
                raise TopologyError(f"bank {g} has shape {arr.shape}, expected "
                                    f"{(config.n_templates,) + config.group_shape(g)}")
            self.banks.append(TemplateBank(g, [Tensor(t, requires_grad=True, name=f"T[{g},{i}]")
                                               for i, t in enumerate(arr)]))
        self.coefficients: Dict[Tuple[int, int], CoefficientSet] = {}
        self.biases: Dict[Tuple[int, int], Tensor] = {}
        biases = biases or {}
        for l, m, mk in config.modules():
            C = np.asarray(coefficients[(l, m)], dtype=np.float64)
            if C.shape != (config.n_sets, config.n_templates):
                raise TopologyError(f"coefficients of ({l},{m}) have shape {C.shape}")
            self.coefficients[(l, m)] = CoefficientSet(l, m, Tensor(C, requires_grad=True, name=f"C[{l},{m}]"))
            b = np.asarray(biases.get((l, m), np.zeros(mk.bias_shape)), dtype=np.float64)
            if b.shape != mk.bias_shape:
                raise TopologyError(f"bias of ({l},{m}) has shape {b.shape}, expected {mk.bias_shape}")
            self.biases[(l, m)] = Tensor(b, name=f"b[{l},{m}]")
        self.heads: Dict[int, Head] = {}

    @classmethod
    def initialize(cls, config: RecastConfig, seed: int = 0) -> "RecastModel":
        """Fresh model: uniform templates, orthogonal coefficients, zero biases."""
        ss = np.random.SeedSequence(seed)
        t_seed, c_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        return cls(config, init_templates(config, t_seed), init_coefficients(config, c_seed))

    def bank_for(self, layer: int) -> TemplateBank:
        return self.banks[self.config.group_of(layer)]

    def weight(self, layer: int, module: int, coeffs=None) -> Tensor:
        c = self.coefficients[(layer, module)] if coeffs is None else coeffs
        return generate_weight(self.bank_for(layer), c)

    def coefficient_tensors(self) -> List[Tensor]:
        return [self.coefficients[k].values for k in sorted(self.coefficients)]

    def template_tensors(self) -> List[Tensor]:
        return [t for bank in self.banks for t in bank.templates]

    def set_templates_trainable(self, flag: bool) -> None:
        for bank in self.banks:
            bank.set_trainable(flag)

    def get_coefficients(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {k: cs.values.data.copy() for k, cs in self.coefficients.items()}

    def set_coefficients(self, values: Dict[Tuple[int, int], np.ndarray]) -> None:
        if set(values) != set(self.coefficients):
            raise TopologyError("coefficient keys do not match the model's modules")
        for key, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            cur = self.coefficients[key].values
            if arr.shape != cur.shape:
                raise TopologyError(f"coefficients of {key} have shape {arr.shape}, expected {cur.shape}")
            cur.data = arr.copy()
            if cur.requires_grad:
                cur.grad = np.zeros_like(cur.data)

    def n_task_params(self) -> int:
        return param_accounting(self.config).task_params


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "gelu":
        return gelu(x)
    return x


def forward_module(model: RecastModel, l: int, m: int, x, coeffs=None):
    """Apply module ``(l, m)`` with its generated weight.

    Fully-connected modules return ``f(x W^T + b)``; QKV modules return the
    tuple ``(Q, K, V)`` of ``x W^T + b`` split into thirds (a 3-D
    ``batch x seq x d`` input gives 3-D outputs); convolution modules return
    ``conv2d(x, W) + b``.
    """
    mk = model.config.layout[l][m]
    x = as_tensor(x)
    W = model.weight(l, m, coeffs)
    b = model.biases[(l, m)]
    if mk.kind == "fc":
        d_out, d_in = mk.dims
        if x.ndim != 2 or x.shape[1] != d_in:
            raise ShapeError(f"fc module ({l},{m}) expects batch x {d_in} input, got {x.shape}")
        return _activate(add_bias(matmul(x, transpose(W)), b), model.config.activation)
    if mk.kind == "qkv":
        d = mk.dims[0]
        if x.ndim not in (2, 3) or x.shape[-1] != d:
            raise ShapeError(f"qkv module ({l},{m}) expects (..., {d}) input, got {x.shape}")
        lead = x.shape[:-1]
        flat = reshape(x, (math.prod(lead), d))
        y = add_bias(matmul(flat, transpose(W)), b)
        parts = [columns(y, j * d, (j + 1) * d) for j in range(3)]
        if x.ndim == 3:
            parts = [reshape(p, lead + (d,)) for p in parts]
        return tuple(parts)
    c_out, c_in, k = mk.dims
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ShapeError(f"conv module ({l},{m}) expects batch x {c_in} x H x W input, got {x.shape}")
    return conv2d(x, W, b, stride=mk.stride, padding=mk.padding)


def forward_backbone(model: RecastModel, x, coefficients=None) -> Tensor:
    """Run every fully-connected module in layer-major order, feeding each output forward."""
    h = as_tensor(x)
    for l, m, mk in model.config.modules():
        if mk.kind != "fc":
            raise TopologyError("sequential backbone forward supports fully-connected modules only")
        c = None if coefficients is None else coefficients[(l, m)]
        h = forward_module(model, l, m, h, c)
    return h


def head_logits(features: Tensor, head: Head) -> Tensor:
    return add_bias(matmul(features, transpose(head.weight)), head.bias)


@dataclass(frozen=True)
class ParamAccount:
    """Parameter counts of a templated model.

    ``savings`` is dense weight count minus (template count + coefficient
    count); biases appear on both sides and cancel.
    """

    task_params: int
    template_params: int
    dense_params: int

    @property
    def savings(self) -> int:
        return self.dense_params - (self.template_params + self.task_params)


def param_accounting(config: RecastConfig) -> ParamAccount:
    K, n = config.n_sets, config.n_templates
    task = sum(len(mods) for mods in config.layout) * n * K
    dense = sum(math.prod(mk.weight_shape) for _, _, mk in config.modules())
    templates = sum(n * math.prod(config.group_shape(g)) for g in range(config.n_groups))
    return ParamAccount(task_params=task, template_params=templates, dense_params=dense)


def savings_closed_form(L: int, M_l: int, d: int, G: int, n: int, K: int) -> int:
    """``L*M_l*d^2 - (G*n*d^2 + L*M_l*n*K)`` for uniform square d x d modules."""
    return L * M_l * d * d - (G * n * d * d + L * M_l * n * K)
