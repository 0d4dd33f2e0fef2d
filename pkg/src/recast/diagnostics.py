"""Template-bank diversity and coefficient-usage metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .core import RecastModel, TemplateBank
from .exceptions import NumericalError, ShapeError, UndefinedMetricError
from .mimicry import cosine_similarity

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100
SVD_MAX_DIM = 512


def svd_small(a, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> np.ndarray:
    """Singular values of a small dense matrix, descending.

    One-sided (Hestenes) Jacobi: plane rotations orthogonalise the columns
    until every pair satisfies ``|a_i . a_j| <= tol * |a_i| |a_j|``; the
    singular values are then the column norms. Columns whose squared norm
    falls below ``(eps * |A|_F)^2`` are rounding noise of a zero singular
    value and are left alone.
    """
    A = np.array(a, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError(f"svd_small expects a 2-D matrix, got shape {A.shape}")
    if max(A.shape) > SVD_MAX_DIM:
        raise ShapeError(f"svd_small is limited to {SVD_MAX_DIM} rows/columns, got {A.shape}")
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    n = A.shape[1]
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(A)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = A[:, p], A[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
        if not rotated:
            return np.sort(np.linalg.norm(A, axis=0))[::-1]
    raise NumericalError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def _matricize(t: np.ndarray) -> np.ndarray:
    return t.reshape(t.shape[0], -1) if t.ndim != 2 else t


def frobenius_diversity(bank) -> float:
    """``1/(n(n-1)) * sum_{i<j} ||T_i - T_j||_F`` over the bank's templates."""
    T = bank.stacked() if isinstance(bank, TemplateBank) else np.asarray(bank, dtype=np.float64)
    n = T.shape[0]
    if n < 2:
        raise UndefinedMetricError("template diversity needs at least two templates")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += np.linalg.norm((T[i] - T[j]).ravel())
    return total / (n * (n - 1))


def template_entropy(template) -> float:
    """Shannon entropy (nats) of the template's normalised singular values."""
    s = svd_small(_matricize(np.asarray(template, dtype=np.float64)))
    total = s.sum()
    if total == 0:
        raise UndefinedMetricError("singular-value entropy is undefined for an all-zero template")
    p = s / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def sv_entropy(bank) -> float:
    """Mean singular-value entropy over the templates of a bank."""
    T = bank.stacked() if isinstance(bank, TemplateBank) else np.asarray(bank, dtype=np.float64)
    return float(np.mean([template_entropy(t) for t in T]))


def layer_coefficients(model: RecastModel, layer: int) -> np.ndarray:
    """Flattened concatenation of every coefficient of every module in ``layer``."""
    n_mod = len(model.config.layout[layer])
    return np.concatenate([model.coefficients[(layer, m)].values.data.ravel() for m in range(n_mod)])


def coefficient_similarity(model: RecastModel, group: int) -> np.ndarray:
    """Cosine similarity between the coefficient vectors of each pair of layers in ``group``."""
    layers = model.config.layers_in_group(group)
    if len(layers) < 2:
        raise UndefinedMetricError(f"group {group} has {len(layers)} layer(s); similarity needs two")
    vecs = [layer_coefficients(model, l) for l in layers]
    k = len(vecs)
    sim = np.eye(k)
    for i in range(k):
        if not np.any(vecs[i]):
            raise UndefinedMetricError(f"layer {layers[i]} has an all-zero coefficient vector")
        for j in range(i + 1, k):
            sim[i, j] = sim[j, i] = cosine_similarity(vecs[i], vecs[j])
    return sim


@dataclass
class DiagnosticsReport:
    """Per-group metrics. Entries are ``None`` where a metric is undefined."""

    frobenius: Dict[int, float]
    entropy: Dict[int, float]
    similarity: Dict[int, np.ndarray]
    layers: Dict[int, List[int]]


def diagnose(model: RecastModel) -> DiagnosticsReport:
    frob, ent, sim, layers = {}, {}, {}, {}
    for g, bank in enumerate(model.banks):
        layers[g] = model.config.layers_in_group(g)
        frob[g] = frobenius_diversity(bank) if bank.n >= 2 else None
        ent[g] = sv_entropy(bank)
        sim[g] = coefficient_similarity(model, g) if len(layers[g]) >= 2 else None
    return DiagnosticsReport(frob, ent, sim, layers)
