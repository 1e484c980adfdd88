"""Second-order statistics of weights.

Two estimators produce per-layer weight correlation matrices ``R_l``:

* Laplace: Kronecker-factored inverse curvature. With the row-major
  ``vec`` used throughout (entry ``W[i, k]`` at position ``i*cols + k``) the
  layer covariance is ``inv(E[H]) kron inv(E[A])``: the pre-activation
  curvature indexes rows, the input second moment indexes columns.
* Sampling: empirical correlation across noisy weight snapshots.

Both land in :class:`LayerCorrelation`, which keeps ``R_l`` in whichever
structured form is cheapest (dense, Kronecker, or low-rank sample factor).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from s2o import autodiff as ad
from s2o import kernels
from s2o.attacks import AttackConfig, pgd_perturb
from s2o.autodiff import Tensor
from s2o.linalg import (default_damping, log_det_spd, normalize_to_correlation, spd_inverse,
                        sym_extreme_eigenvalues)
from s2o.model import LabeledBatch, MlpNetwork, cross_entropy, forward, forward_tensor

log = logging.getLogger(__name__)

DENSE_CAP = 4096  # largest R dimension (h_out*h_in) materialized on request


class StaleCacheError(RuntimeError):
    pass


class DegenerateSampleError(ValueError):
    pass


# ---------------------------------------------------------------- accumulators

@dataclass
class ActivationStats:
    """Running mean of ``a_{l-1} a_{l-1}^T`` for every layer ``l``."""

    sums: list[np.ndarray]
    count: int = 0
    domain_tag: str = "clean"

    @classmethod
    def empty(cls, net: MlpNetwork, domain_tag="clean"):
        return cls([np.zeros((d, d)) for d in net.dims[:-1]], 0, domain_tag)

    @property
    def means(self) -> list[np.ndarray]:
        if self.count <= 0:
            raise ValueError("ActivationStats read before any sample was accumulated")
        return [s / self.count for s in self.sums]


def accumulate_activations(net: MlpNetwork, batch: LabeledBatch,
                           stats: ActivationStats | None = None) -> ActivationStats:
    """Add the batch's activation outer products; needs ``forward(net, batch)`` first."""
    cache = net.cache
    if not cache or cache.get("inputs_id") != id(batch.inputs) or cache.get("n") != len(batch):
        raise StaleCacheError("forward cache does not belong to this batch; run forward(net, batch) first")
    if stats is None:
        stats = ActivationStats.empty(net, batch.domain_tag)
    elif stats.domain_tag != batch.domain_tag:
        raise ValueError(f"cannot mix {batch.domain_tag} batch into {stats.domain_tag} stats")
    for l, a in enumerate(cache["post"]):
        stats.sums[l] = stats.sums[l] + a.T @ a
    stats.count += len(batch)
    return stats


@dataclass
class CurvatureStats:
    """Batch-mean Gauss-Newton curvature w.r.t. each layer's pre-activation."""

    means: list[np.ndarray]
    count: int
    domain_tag: str = "clean"


def _output_curvature(logits: np.ndarray, head: str) -> np.ndarray:
    b, c = logits.shape
    if head == "squared":
        return np.broadcast_to(np.eye(c), (b, c, c)).copy()
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return np.einsum("bi,ij->bij", p, np.eye(c)) - np.einsum("bi,bj->bij", p, p)


def ggn_preactivation_curvature(net: MlpNetwork, batch: LabeledBatch, head: str = "softmax",
                                chunk: int = 512) -> CurvatureStats:
    """``H_n`` from the loss head, then ``H_l = D_l W_{l+1}^T H_{l+1} W_{l+1} D_l``."""
    if head not in ("softmax", "squared"):
        raise ValueError(f"unknown head {head!r}")
    sums = [np.zeros((d, d)) for d in net.dims[1:]]
    for start in range(0, len(batch), chunk):
        part = batch.subset(slice(start, start + chunk))
        forward(net, part)
        pres = net.cache["pre"]
        cur = _output_curvature(pres[-1], head)
        sums[-1] += cur.sum(axis=0)
        for l in range(net.depth - 2, -1, -1):
            w_next = net.weights[l + 1]
            d = net.act_derivative(pres[l])
            back = np.einsum("ki,bkm,mj->bij", w_next, cur, w_next, optimize=True)
            cur = d[:, :, None] * back * d[:, None, :]
            sums[l] += cur.sum(axis=0)
    n = max(len(batch), 1)
    return CurvatureStats([s / n for s in sums], len(batch), batch.domain_tag)


def activation_stats(net: MlpNetwork, dataset: LabeledBatch, chunk: int = 512) -> ActivationStats:
    stats = ActivationStats.empty(net, dataset.domain_tag)
    for start in range(0, len(dataset), chunk):
        part = dataset.subset(slice(start, start + chunk))
        forward(net, part)
        accumulate_activations(net, part, stats)
    return stats


def layer_hessian_kron(act_moment: np.ndarray, curvature: np.ndarray) -> np.ndarray:
    """Dense Kronecker weight-Hessian block in row-major ``vec`` order (``H kron A``)."""
    return np.kron(curvature, act_moment)


def kfac_residual(net: MlpNetwork, batch: LabeledBatch, head="softmax") -> list[float]:
    """Relative error of ``E[A] kron E[H]`` against ``E[A kron H]`` per layer (tiny nets only)."""
    out = []
    forward(net, batch)
    posts = [p.copy() for p in net.cache["post"]]
    per_sample = []
    for i in range(len(batch)):
        c = ggn_preactivation_curvature(net, batch.subset(slice(i, i + 1)), head)
        per_sample.append(c.means)
    for l in range(net.depth):
        exact = np.mean([np.kron(per_sample[i][l], np.outer(posts[l][i], posts[l][i]))
                         for i in range(len(batch))], axis=0)
        approx = np.kron(np.mean([p[l] for p in per_sample], axis=0),
                         posts[l].T @ posts[l] / len(batch))
        out.append(float(np.linalg.norm(exact - approx) / max(np.linalg.norm(exact), 1e-300)))
    return out


# ---------------------------------------------------------------- correlations

@dataclass
class LayerCorrelation:
    """Correlation matrix of ``vec(W_l) + u_l`` (size ``rows*cols``).

    Exactly one representation is populated: ``dense``; the Kronecker pair
    ``row_factor kron col_factor``; or ``sample_factor`` Z with
    ``R = Z^T Z / (N - 1)``.
    """

    rows: int
    cols: int
    sigma: float = float("nan")
    dense: np.ndarray | None = None
    row_factor: np.ndarray | None = None
    col_factor: np.ndarray | None = None
    sample_factor: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.rows * self.cols

    @property
    def kind(self) -> str:
        if self.dense is not None:
            return "dense"
        if self.row_factor is not None:
            return "kron"
        return "sample"

    def matrix(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        if self.dim > cap:
            raise MemoryError(f"refusing to materialize a {self.dim}x{self.dim} correlation matrix (cap {cap})")
        if self.row_factor is not None:
            return np.kron(self.row_factor, self.col_factor)
        z = self.sample_factor
        return z.T @ z / (z.shape[0] - 1)

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """``(R', R'') = (E[U^T U], E[U U^T]) / sigma^2``."""
        if "marg" not in self._cache:
            if self.dense is not None:
                out = kronecker_marginals_dense(self.dense, self.rows, self.cols)
            elif self.row_factor is not None:
                out = kronecker_marginals_closed(self.row_factor, self.col_factor)
            else:
                z = self.sample_factor.reshape(-1, self.rows, self.cols)
                scale = 1.0 / (z.shape[0] - 1)
                out = (np.einsum("nik,nil->kl", z, z) * scale, np.einsum("nik,njk->ij", z, z) * scale)
            self._cache["marg"] = out
        return self._cache["marg"]

    def marginal_norms(self) -> tuple[float, float]:
        """Spectral norms of ``R'`` and ``R''``."""
        rp, rpp = self.marginals()
        return float(np.linalg.eigvalsh(rp)[-1]), float(np.linalg.eigvalsh(rpp)[-1])

    def extreme_eigenvalues(self) -> tuple[float, float]:
        if "ext" not in self._cache:
            if self.dense is not None:
                ext = sym_extreme_eigenvalues(self.dense)
            elif self.row_factor is not None:
                a, b = np.linalg.eigvalsh(self.row_factor), np.linalg.eigvalsh(self.col_factor)
                ext = (float(max(a[0], 0.0) * max(b[0], 0.0)), float(a[-1] * b[-1]))
            else:
                z = self.sample_factor
                if z.shape[0] > self.dim:
                    ext = sym_extreme_eigenvalues(z.T @ z / (z.shape[0] - 1))
                else:
                    # rank <= N-1 < dim, so the bottom of the spectrum is exactly zero
                    w = np.linalg.eigvalsh(z @ z.T / (z.shape[0] - 1))
                    ext = (0.0, float(w[-1]))
            self._cache["ext"] = ext
        return self._cache["ext"]

    def logdet(self) -> float:
        if "logdet" not in self._cache:
            if self.dense is not None:
                val = log_det_spd(self.dense)
            elif self.row_factor is not None:
                val = self.cols * log_det_spd(self.row_factor) + self.rows * log_det_spd(self.col_factor)
            else:
                z = self.sample_factor
                val = log_det_spd(z.T @ z / (z.shape[0] - 1)) if z.shape[0] > self.dim else -np.inf
            self._cache["logdet"] = float(val)
        return self._cache["logdet"]

    def frob_sq(self) -> float:
        if self.dense is not None:
            return float(np.sum(self.dense ** 2))
        if self.row_factor is not None:
            return float(np.sum(self.row_factor ** 2) * np.sum(self.col_factor ** 2))
        z = self.sample_factor
        g = z @ z.T / (z.shape[0] - 1)
        return float(np.sum(g * g))


@dataclass
class CorrelationEstimate:
    layers: list[LayerCorrelation]
    domain_tag: str = "clean"
    estimator_tag: str = "laplace"
    input_factors: list[np.ndarray] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def save(self, stem) -> Path:
        """Write ``<stem>.json`` metadata and ``<stem>.npz`` matrix payloads."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        arrays, layer_meta = {}, []
        for l, layer in enumerate(self.layers):
            entry = {"rows": layer.rows, "cols": layer.cols, "sigma": layer.sigma, "kind": layer.kind}
            for name in ("dense", "row_factor", "col_factor", "sample_factor"):
                val = getattr(layer, name)
                if val is not None:
                    arrays[f"l{l}_{name}"] = val
            rp, rpp = layer.marginals()
            arrays[f"l{l}_r_prime"], arrays[f"l{l}_r_dprime"] = rp, rpp
            layer_meta.append(entry)
        for l, a in enumerate(self.input_factors):
            arrays[f"a{l}_normalized"] = a
        np.savez(stem.with_suffix(".npz"), **arrays)
        meta = {"domain_tag": self.domain_tag, "estimator_tag": self.estimator_tag,
                "layers": layer_meta, "vec_order": "row-major", **self.metadata}
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))
        return stem.with_suffix(".json")

    @classmethod
    def load(cls, stem) -> "CorrelationEstimate":
        stem = Path(stem)
        if stem.suffix in (".json", ".npz"):
            stem = stem.with_suffix("")
        meta = json.loads(stem.with_suffix(".json").read_text())
        data = np.load(stem.with_suffix(".npz"))
        layers = []
        for l, entry in enumerate(meta.pop("layers")):
            kw = {name: data[f"l{l}_{name}"] for name in ("dense", "row_factor", "col_factor", "sample_factor")
                  if f"l{l}_{name}" in data.files}
            layers.append(LayerCorrelation(entry["rows"], entry["cols"], entry["sigma"], **kw))
        inputs = [data[k] for k in sorted((k for k in data.files if k.startswith("a")),
                                          key=lambda k: int(k[1:].split("_")[0]))]
        domain, est = meta.pop("domain_tag"), meta.pop("estimator_tag")
        meta.pop("vec_order", None)
        return cls(layers, domain, est, inputs, meta)


def kronecker_marginals_dense(corr, rows: int | None = None, cols: int | None = None):
    """Hadamard-mask contraction of a dense ``R`` into ``(R', R'')``."""
    r = np.asarray(corr, dtype=np.float64)
    if rows is None or cols is None:
        h = int(round(np.sqrt(r.shape[0])))
        if h * h != r.shape[0]:
            raise ValueError(f"dimension {r.shape[0]} is not a perfect square; pass rows and cols")
        rows = cols = h
    if r.shape != (rows * cols, rows * cols):
        raise ValueError(f"correlation shape {r.shape} does not match a {rows}x{cols} layer")
    return kernels.kron_marginals(r, rows, cols)


def kronecker_marginals_closed(row_factor, col_factor):
    """Closed forms for ``R = B kron A``: ``R' = tr(B) A``, ``R'' = tr(A) B``."""
    b, a = np.asarray(row_factor), np.asarray(col_factor)
    return np.trace(b) * a, np.trace(a) * b


def kronecker_marginals(estimate, path: str = "auto"):
    """Per-layer ``(R', R'')`` for an estimate (or a single layer)."""
    if isinstance(estimate, LayerCorrelation):
        if path == "mask":
            return kronecker_marginals_dense(estimate.matrix(), estimate.rows, estimate.cols)
        return estimate.marginals()
    return [kronecker_marginals(layer, path) for layer in estimate.layers]


# ---------------------------------------------------------------- Laplace

@dataclass
class LaplaceFactors:
    act_inverse: np.ndarray  # inv(E[A_{l-1}] + lambda I), column factor
    curv_inverse: np.ndarray  # inv(E[H_l] + lambda I), row factor
    dense: np.ndarray | None = None


def laplace_covariance(stats: ActivationStats, curvature: CurvatureStats,
                       damping: float | None = None, dense_cap: int = 0) -> list[LaplaceFactors]:
    """Kronecker factors of ``Sigma_l = inv(E[H_l]) kron inv(E[A_{l-1}])``."""
    if stats.domain_tag != curvature.domain_tag:
        raise ValueError(f"domain mismatch: activations {stats.domain_tag}, curvature {curvature.domain_tag}")
    out = []
    for l, (a, h) in enumerate(zip(stats.means, curvature.means)):
        try:
            a_inv = spd_inverse(a, damping)
            h_inv = spd_inverse(h, damping)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"layer {l + 1}: factor inversion failed ({exc})") from None
        dense = np.kron(h_inv, a_inv) if a.shape[0] * h.shape[0] <= dense_cap else None
        out.append(LaplaceFactors(a_inv, h_inv, dense))
    return out


def correlation_from_covariance(cov=None, factors: list[LaplaceFactors] | None = None,
                                domain_tag="clean", estimator_tag="laplace", shapes=None):
    """Normalize covariance(s) to correlation.

    Either a dense covariance per layer (``cov`` list plus ``shapes``) or
    Laplace factors. The normalized input-moment inverses (one per layer,
    the matrices penalized by S2O) are attached as ``input_factors``.
    """
    layers, inputs = [], []
    if factors is not None:
        for f in factors:
            row = normalize_to_correlation(f.curv_inverse)
            col = normalize_to_correlation(f.act_inverse)
            sigma = float(np.mean(np.sqrt(np.diag(f.curv_inverse))) * np.mean(np.sqrt(np.diag(f.act_inverse))))
            layers.append(LayerCorrelation(row.shape[0], col.shape[0], sigma, row_factor=row, col_factor=col))
            inputs.append(col)
    else:
        for c, (rows, cols) in zip(cov, shapes):
            c = np.asarray(c, dtype=np.float64)
            sigma = float(np.mean(np.sqrt(np.diag(c))))
            layers.append(LayerCorrelation(rows, cols, sigma, dense=normalize_to_correlation(c)))
    return CorrelationEstimate(layers, domain_tag, estimator_tag, inputs)


def attacked_dataset(net: MlpNetwork, dataset: LabeledBatch, attack: AttackConfig, seed: int = 0,
                     batch_size: int = 256) -> LabeledBatch:
    parts = []
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        part = dataset.subset(slice(start, start + batch_size))
        parts.append(pgd_perturb(net, part, attack, np.random.default_rng([seed, b])).inputs)
    return dataset.with_inputs(np.concatenate(parts, axis=0), "adversarial")


def laplace_estimate(net: MlpNetwork, dataset: LabeledBatch, damping: float | None = None,
                     head: str = "softmax") -> CorrelationEstimate:
    """Dataset-level Laplace correlation estimate on ``dataset``'s domain."""
    stats = activation_stats(net, dataset)
    curv = ggn_preactivation_curvature(net, dataset, head)
    est = correlation_from_covariance(factors=laplace_covariance(stats, curv, damping),
                                      domain_tag=dataset.domain_tag)
    est.metadata.update({"samples": len(dataset), "damping": "1e-6*trace/dim" if damping is None else damping})
    return est


# ---------------------------------------------------------------- sampling

@dataclass
class WeightSampleSet:
    samples: list[list[np.ndarray]]
    base_loss: float
    eps_prime: float
    losses: list[float] = field(default_factory=list)
    domain_tag: str = "clean"
    epochs: int = 0


def _dataset_loss(net: MlpNetwork, data: LabeledBatch) -> float:
    logits = forward(net, data)
    return float(cross_entropy(logits, data.labels).data)


def _loss_grads(net: MlpNetwork, data: LabeledBatch) -> list[np.ndarray]:
    ws = [Tensor(w, requires_grad=True) for w in net.weights]
    logits, _ = forward_tensor(net, data.inputs, ws)
    ad.backward(cross_entropy(logits, data.labels), ws)
    return [w.grad for w in ws]


def sample_posterior_weights(net: MlpNetwork, dataset: LabeledBatch, noise_std: float, epochs: int = 50,
                             lr: float = 1e-4, eps_prime: float = 0.05, seed: int = 0,
                             batch_size: int = 128, min_samples: int = 5) -> WeightSampleSet:
    """Sharpness-constrained noisy training around a converged network.

    Each epoch is one low-lr SGD pass over ``dataset`` in which every step
    also adds Gaussian noise with per-layer std ``noise_std * ||W_l||_F /
    sqrt(size)`` (a Langevin-style walk). The end-of-epoch weights are kept
    as a sample when the dataset loss stays within ``eps_prime`` of the
    starting loss; otherwise the epoch is undone.
    """
    rng = np.random.default_rng(seed)
    live = net.copy()
    base = _dataset_loss(net, dataset)
    scales = [noise_std * np.linalg.norm(w) / np.sqrt(w.size) for w in net.weights]
    samples, losses = [], []
    for _ in range(epochs):
        saved = [w.copy() for w in live.weights]
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            grads = _loss_grads(live, dataset.subset(order[start:start + batch_size]))
            for w, g, s in zip(live.weights, grads, scales):
                w -= lr * g
                w += s * rng.standard_normal(w.shape)
        loss = _dataset_loss(live, dataset)
        if abs(loss - base) <= eps_prime:
            samples.append([w.copy() for w in live.weights])
            losses.append(loss)
        else:
            live.weights = saved
    if len(samples) < min_samples:
        raise DegenerateSampleError(
            f"only {len(samples)} of {epochs} snapshots passed |dL| <= {eps_prime}; "
            "increase eps_prime or lower noise_std")
    return WeightSampleSet(samples, base, eps_prime, losses, dataset.domain_tag, epochs)


def correlation_from_samples(samples: WeightSampleSet, min_samples: int = 5, dense_cap: int = 0,
                             var_floor: float = 1e-24) -> CorrelationEstimate:
    """Empirical per-layer correlation of ``vec(W + eta)`` across snapshots."""
    n = len(samples.samples)
    if n < min_samples:
        raise DegenerateSampleError(f"need at least {min_samples} samples, got {n}")
    layers = []
    for l in range(len(samples.samples[0])):
        rows, cols = samples.samples[0][l].shape
        x = np.stack([s[l].reshape(-1) for s in samples.samples])
        centered = x - x.mean(axis=0)
        var = np.sum(centered * centered, axis=0) / (n - 1)
        scale = np.maximum(np.abs(x).mean(axis=0), 1.0)
        if np.any(var <= var_floor * scale * scale):
            bad = int(np.flatnonzero(var <= var_floor * scale * scale)[0])
            raise DegenerateSampleError(f"layer {l + 1}: zero variance at weight entry {bad}")
        std = np.sqrt(var)
        z = centered / std
        layer = LayerCorrelation(rows, cols, float(std.mean()), sample_factor=z)
        if rows * cols <= dense_cap:
            d = layer.matrix()
            d = 0.5 * (d + d.T)
            np.fill_diagonal(d, 1.0)
            layer = LayerCorrelation(rows, cols, layer.sigma, dense=d)
        layers.append(layer)
    est = CorrelationEstimate(layers, samples.domain_tag, "sampling")
    est.metadata.update({"samples": n, "eps_prime": samples.eps_prime, "base_loss": samples.base_loss})
    return est
