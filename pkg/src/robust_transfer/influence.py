"""Influence-function analysis of a trained MiniNet.

The influence of a training example on a test example is
``-g_train^T H^+ g_test`` with ``g`` the loss gradient w.r.t. a selected
parameter subset at the trained parameters and ``H`` the Hessian of the
mean training loss.  ``H^+`` is an SVD pseudo-inverse.

By default only the head (``head.weight`` row-major, then ``head.bias``)
is analysed; for that subset the logits are linear in the parameters and
the Hessian is exact: ``J^T (diag(p) - p p^T) J`` per example.

Adding the same vector to every class row of a softmax head leaves the loss
unchanged, so the head Hessian has an exact null space that floating point
turns into singular values near 1e-17, far above the 1e-20 cut.  Influence
scores for head targets are therefore computed in an orthonormal basis of
the complement of those shift directions; every loss gradient already lies
in it, so the reduction is exact.  Penultimate units that are zero on every
training example are dropped for the same reason: their Hessian rows are
exactly zero and an exact pseudo-inverse ignores them.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gradcore import Batch, Network, forward, grad_params, softmax

HEAD = ("head.weight", "head.bias")


@dataclass(frozen=True)
class HessianTarget:
    params: tuple[str, ...] = HEAD

    def dimension(self, net: Network) -> int:
        return sum(net.params[name].size for name in self.params)

    def validate(self, net: Network) -> None:
        names = list(net.params)
        missing = [p for p in self.params if p not in net.params]
        if missing:
            raise ValueError(f"unknown parameters in Hessian target: {missing}")
        positions = [names.index(p) for p in self.params]
        if positions != sorted(positions):
            raise ValueError("Hessian target parameters must follow network parameter order")

    @property
    def is_head(self) -> bool:
        return tuple(self.params) == HEAD or tuple(self.params) == ("head.weight",)


def _head_jacobian(pen, num_labels, with_bias):
    # d logits / d theta for each example: (n, C, d)
    n, width = pen.shape
    d = num_labels * width + (num_labels if with_bias else 0)
    jac = np.zeros((n, num_labels, d))
    for c in range(num_labels):
        jac[:, c, c * width:(c + 1) * width] = pen
        if with_bias:
            jac[:, c, num_labels * width + c] = 1.0
    return jac


def per_example_grads(net: Network, data_or_batch, target: HessianTarget = HessianTarget()) -> np.ndarray:
    """``(n, d_h)`` matrix of per-example loss gradients for the target subset."""
    x, y = _xy(data_or_batch)
    target.validate(net)
    if target.is_head:
        logits, pen = forward(net, x)
        resid = softmax(logits)
        resid[np.arange(len(y)), y] -= 1.0
        jac = _head_jacobian(pen, net.spec.num_labels, "head.bias" in target.params)
        return np.einsum("nc,ncd->nd", resid, jac)
    rows = []
    for i in range(len(y)):
        g = grad_params(net, Batch(x[i:i + 1], y[i:i + 1]))
        rows.append(np.concatenate([g[name].ravel() for name in target.params]))
    return np.array(rows)


def _xy(data_or_batch):
    if isinstance(data_or_batch, Batch):
        return data_or_batch.inputs, data_or_batch.labels
    return data_or_batch.images, data_or_batch.labels


def _flat_params(net, target):
    return np.concatenate([net.params[name].ravel() for name in target.params])


def _set_flat(net, target, flat):
    out = net.copy()
    start = 0
    for name in target.params:
        size = out.params[name].size
        out.params[name] = flat[start:start + size].reshape(out.params[name].shape).copy()
        start += size
    return out


def _chunk_hessian_head(net, x, y, with_bias):
    logits, pen = forward(net, x)
    p = softmax(logits)
    curvature = np.einsum("nc,ce->nce", p, np.eye(p.shape[1])) - np.einsum("nc,ne->nce", p, p)
    jac = _head_jacobian(pen, net.spec.num_labels, with_bias)
    return np.tensordot(jac, np.matmul(curvature, jac), axes=([0, 1], [0, 1]))


def _chunk_hessian_numeric(net, x, y, target, h=1e-5):
    # central differences of the summed analytic gradient, symmetrised
    theta = _flat_params(net, target)
    d = theta.size
    out = np.zeros((d, d))
    for j in range(d):
        cols = []
        for sign in (1.0, -1.0):
            shifted = theta.copy()
            shifted[j] += sign * h
            g = grad_params(_set_flat(net, target, shifted), Batch(x, y))
            cols.append(np.concatenate([g[name].ravel() for name in target.params]) * len(y))
        out[:, j] = (cols[0] - cols[1]) / (2 * h)
    return 0.5 * (out + out.T)


def assemble_hessian(net: Network, train_subset, target: HessianTarget = HessianTarget(),
                     batch: int = 5) -> np.ndarray:
    """Mean per-example loss Hessian over ``train_subset``, accumulated in
    chunks of ``batch`` examples.

    Head targets are exact; any other subset falls back to finite
    differences of the analytic gradient.
    """
    x, y = _xy(train_subset)
    if len(y) == 0:
        raise ValueError("cannot assemble a Hessian over an empty subset")
    target.validate(net)
    d = target.dimension(net)
    total = np.zeros((d, d))
    for start in range(0, len(y), batch):
        xs, ys = x[start:start + batch], y[start:start + batch]
        if target.is_head:
            total += _chunk_hessian_head(net, xs, ys, "head.bias" in target.params)
        else:
            total += _chunk_hessian_numeric(net, xs, ys, target)
    return total / len(y)


def pinv(matrix, threshold: float = 1e-20) -> np.ndarray:
    """Moore-Penrose pseudo-inverse keeping singular values above ``threshold``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise ValueError("pinv: matrix has non-finite entries")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    keep = s > threshold
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def shift_free_basis(num_labels: int, width: int, with_bias: bool = True, live=None) -> np.ndarray:
    """Orthonormal ``(d, d_r)`` basis of head parameters orthogonal to the
    softmax shift directions (same change in every class row).

    ``live`` optionally restricts the weight columns to those penultimate
    units; the rest get no basis vectors.
    """
    # columns 1..C-1 of a QR of [1, I] span the complement of the ones vector
    q, _ = np.linalg.qr(np.column_stack([np.ones(num_labels), np.eye(num_labels)[:, :-1]]))
    uc = q[:, 1:]
    units = np.eye(width) if live is None else np.eye(width)[:, np.asarray(live)]
    blocks = [np.kron(uc, units)]
    if with_bias:
        blocks.append(uc)
    rows = sum(b.shape[0] for b in blocks)
    out = np.zeros((rows, sum(b.shape[1] for b in blocks)))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r, c = r + b.shape[0], c + b.shape[1]
    return out


def influence_value(g_train, h_inv, g_test) -> float:
    """Effect of up-weighting the training example on the test loss."""
    return float(-np.asarray(g_train) @ np.asarray(h_inv) @ np.asarray(g_test))


def influence_values(g_train, h_inv, g_test) -> np.ndarray:
    """All pairs: ``(n_train, n_test)`` matrix of ``-g_i^T H^+ g_j``."""
    return -(np.asarray(g_train) @ np.asarray(h_inv)) @ np.asarray(g_test).T


@dataclass
class InfluenceReport:
    """Train x test support scores, sorted by label then index, with unit
    Frobenius norm.

    ``matrix[i, j]`` is the *negated* influence ``g_i^T H^+ g_j`` rescaled,
    i.e. proportional to the predicted rise in test loss if training row ``i``
    were removed.  Larger means the training example supports the test
    prediction more; rankings use this order.
    """
    matrix: np.ndarray
    train_labels: np.ndarray
    test_labels: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        self.train_index = np.asarray(self.train_index, dtype=np.int64)
        self.test_index = np.asarray(self.test_index, dtype=np.int64)
        if self.matrix.shape != (len(self.train_labels), len(self.test_labels)):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match "
                             f"{len(self.train_labels)} train / {len(self.test_labels)} test labels")

    def write(self, csv_path, sidecar_path=None) -> None:
        """CSV of ``train_idx,test_idx,value`` (17 significant digits) and a
        JSON sidecar with labels and metadata."""
        csv_path = Path(csv_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["train_idx", "test_idx", "value"])
            for i, ti in enumerate(self.train_index):
                for j, tj in enumerate(self.test_index):
                    writer.writerow([int(ti), int(tj), format(self.matrix[i, j], ".17g")])
        sidecar = {
            "train_index": self.train_index.tolist(),
            "train_labels": self.train_labels.tolist(),
            "test_index": self.test_index.tolist(),
            "test_labels": self.test_labels.tolist(),
            "metadata": self.metadata,
        }
        sidecar_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, csv_path, sidecar_path=None) -> InfluenceReport:
        csv_path = Path(csv_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
        side = json.loads(sidecar_path.read_text())
        rows = {int(t): i for i, t in enumerate(side["train_index"])}
        cols = {int(t): j for j, t in enumerate(side["test_index"])}
        matrix = np.full((len(rows), len(cols)), np.nan)
        with open(csv_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                matrix[rows[int(rec["train_idx"])], cols[int(rec["test_idx"])]] = float(rec["value"])
        if np.isnan(matrix).any():
            raise ValueError(f"{csv_path}: missing influence entries")
        return cls(matrix, side["train_labels"], side["test_labels"], side["train_index"],
                   side["test_index"], side["metadata"])


def _label_order(labels):
    labels = np.asarray(labels)
    return np.lexsort((np.arange(len(labels)), labels))


def influence_scores(net: Network, train_subset, test_set, target: HessianTarget = HessianTarget(),
                     *, batch: int = 5, threshold: float = 1e-20) -> np.ndarray:
    """Raw ``(n_train, n_test)`` influence values in input order."""
    g_train = per_example_grads(net, train_subset, target)
    g_test = per_example_grads(net, test_set, target)
    hessian = assemble_hessian(net, train_subset, target, batch=batch)
    if target.is_head:
        pen = forward(net, _xy(train_subset)[0])[1]
        live = np.flatnonzero(np.any(pen != 0, axis=0))
        basis = shift_free_basis(net.spec.num_labels, net.spec.width, "head.bias" in target.params, live)
        g_train, g_test = g_train @ basis, g_test @ basis
        hessian = basis.T @ hessian @ basis
    return influence_values(g_train, pinv(hessian, threshold), g_test)


def influence_matrix(net: Network, train_subset, test_set, target: HessianTarget = HessianTarget(),
                     *, batch: int = 5, threshold: float = 1e-20, metadata=None) -> InfluenceReport:
    support = -influence_scores(net, train_subset, test_set, target, batch=batch, threshold=threshold)
    norm = np.linalg.norm(support)
    if norm > 0:
        support = support / norm
    rows, cols = _label_order(train_subset.labels), _label_order(test_set.labels)
    meta = {"hessian_params": list(target.params), "threshold": threshold, "batch": batch}
    meta.update(metadata or {})
    return InfluenceReport(support[np.ix_(rows, cols)], train_subset.labels[rows], test_set.labels[cols],
                           rows, cols, meta)


def _ranked(report: InfluenceReport, k: int):
    n_train = len(report.train_labels)
    if k < 1 or k > n_train:
        raise ValueError(f"k must lie in [1, {n_train}], got {k}")
    # descending value; ties go to the lower training index
    keys = np.broadcast_to(report.train_index[:, None], report.matrix.shape)
    order = np.lexsort((keys, -report.matrix), axis=0)
    return report.train_labels[order[:k]]  # (k, n_test)


def topk_label_match(report: InfluenceReport, k: int) -> float:
    """Percentage of test columns whose k-th ranked training example shares their label."""
    top = _ranked(report, k)
    return 100.0 * float(np.mean(top[k - 1] == report.test_labels))


def top_majority_match(report: InfluenceReport, k: int = 5, m: int = 3) -> float:
    """Percentage of test columns where at least ``m`` of the top ``k`` match."""
    if m > k:
        raise ValueError("m cannot exceed k")
    top = _ranked(report, k)
    return 100.0 * float(np.mean((top == report.test_labels[None]).sum(axis=0) >= m))
