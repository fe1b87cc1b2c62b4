"""Room segmentation of scene positions with a full-covariance Gaussian mixture."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .sim import Scene, sample_free_position

GMM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, 2)
    covariances: np.ndarray  # (K, 2, 2)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def log_weighted_density(self, points) -> np.ndarray:
        """``log(w_k N(x | mu_k, S_k))`` for every point and component, shape (n, K)."""
        return _log_weighted_density(np.atleast_2d(points), self.weights, self.means, self.covariances)

    def to_dict(self) -> dict:
        return {"version": GMM_FORMAT_VERSION, "weights": self.weights.tolist(),
                "means": self.means.tolist(), "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        if d.get("version") != GMM_FORMAT_VERSION:
            raise ValueError(f"unsupported gmm format version {d.get('version')!r}")
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covariances"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GmmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _log_weighted_density(x, weights, means, covs):
    n, d = x.shape
    out = np.empty((n, len(weights)))
    for k in range(len(weights)):
        chol = np.linalg.cholesky(covs[k])
        diff = np.linalg.solve(chol, (x - means[k]).T)
        maha = np.sum(diff * diff, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = math.log(weights[k]) - 0.5 * (d * math.log(2 * math.pi) + logdet + maha)
    return out


def _logsumexp(a, axis=1):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            raise ValueError("k-means++ cannot place distinct centers: fewer distinct points than components")
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def _floor_covariance(cov, floor):
    """Nearest covariance (same eigenvectors) whose eigenvalues are all >= floor."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


class GaussianMixtureEM(ClusterMixin, BaseEstimator):
    """Gaussian mixture fitted by expectation-maximisation.

    Parameters
    ----------
    n_components : int, default=1
    reg_floor : float, default=1e-4
        Lower bound on covariance eigenvalues (m^2).
    tol : float, default=1e-6
        Stop when the total log-likelihood improves by less than this.
    max_iter : int, default=200
    n_lloyd : int, default=10
        Lloyd refinements of the k-means++ seeds before EM starts.
    random_state : int, default=0

    Attributes
    ----------
    model_ : GmmModel
    log_likelihood_ : list of float
        Total log-likelihood after each EM iteration (index 0 is the
        initialisation).
    n_iter_ : int
    """

    def __init__(self, n_components=1, reg_floor=1e-4, tol=1e-6, max_iter=200, n_lloyd=10,
                 random_state=0):
        self.n_components = n_components
        self.reg_floor = reg_floor
        self.tol = tol
        self.max_iter = max_iter
        self.n_lloyd = n_lloyd
        self.random_state = random_state

    def fit(self, X, y=None):
        x = check_array(X, dtype=float)
        k = self.n_components
        if k < 1:
            raise ValueError("n_components must be >= 1")
        if len(x) < 2 * k:
            raise ValueError(f"need at least {2 * k} points for {k} components, got {len(x)}")
        if k > 1 and len(np.unique(x, axis=0)) < k:
            raise ValueError("degenerate input: fewer distinct points than components")
        rng = np.random.default_rng(self.random_state)

        centers = _kmeans_pp(x, k, rng)
        for _ in range(self.n_lloyd):
            assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
            for j in range(k):
                if np.any(assign == j):
                    centers[j] = x[assign == j].mean(axis=0)
        assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        resp = np.eye(k)[assign]
        weights, means, covs = self._m_step(x, resp)

        trace = [float(_logsumexp(_log_weighted_density(x, weights, means, covs)).sum())]
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            log_p = _log_weighted_density(x, weights, means, covs)
            resp = np.exp(log_p - _logsumexp(log_p)[:, None])
            weights, means, covs = self._m_step(x, resp)
            trace.append(float(_logsumexp(_log_weighted_density(x, weights, means, covs)).sum()))
            if trace[-1] - trace[-2] < self.tol:
                break

        if k > 1:
            for a, b in itertools.combinations(range(k), 2):
                if np.allclose(means[a], means[b], atol=1e-9) and np.allclose(covs[a], covs[b], atol=1e-12):
                    raise ValueError("degenerate fit: components collapsed onto each other")
        self.model_ = GmmModel(weights, means, covs)
        self.log_likelihood_ = trace
        self.n_iter_ = n_iter
        return self

    def _m_step(self, x, resp):
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((len(nk), x.shape[1], x.shape[1]))
        for j in range(len(nk)):
            diff = x - means[j]
            covs[j] = _floor_covariance((resp[:, j, None] * diff).T @ diff / nk[j], self.reg_floor)
        return weights, means, covs

    def predict(self, X):
        check_is_fitted(self, "model_")
        x = check_array(X, dtype=float)
        return np.argmax(self.model_.log_weighted_density(x), axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        x = check_array(X, dtype=float)
        return _logsumexp(self.model_.log_weighted_density(x))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))


def fit_gmm(points, K: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            reg_floor: float = 1e-4) -> GmmModel:
    est = GaussianMixtureEM(n_components=K, reg_floor=reg_floor, tol=tol, max_iter=max_iter,
                            random_state=seed).fit(points)
    return est.model_


def assign_label(model: GmmModel, point) -> int:
    """Index of the component with the largest weighted density (lowest index on ties)."""
    return int(np.argmax(model.log_weighted_density(np.asarray(point, float).reshape(1, -1))[0]))


def assign_labels(model: GmmModel, points) -> np.ndarray:
    return np.argmax(model.log_weighted_density(np.asarray(points, float)), axis=1)


def best_permutation(pred, truth) -> dict:
    """Mapping predicted label -> true label maximising agreement (Hungarian)."""
    p_ids = np.unique(pred)
    t_ids = np.unique(truth)
    counts = np.array([[np.sum((pred == p) & (truth == t)) for t in t_ids] for p in p_ids])
    rows, cols = linear_sum_assignment(-counts)
    return {int(p_ids[r]): int(t_ids[c]) for r, c in zip(rows, cols)}


def labeling_agreement(pred, truth) -> float:
    """Chance-adjusted agreement (Cohen's kappa) after the best label permutation.

    Lies in [-1, 1]; a single-class truth matched by a single-class prediction
    scores 1.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mapping = best_permutation(pred, truth)
    mapped = np.array([mapping.get(int(p), -1) for p in pred])
    p_o = np.mean(mapped == truth)
    labels = np.union1d(np.unique(mapped), np.unique(truth))
    p_e = sum(np.mean(mapped == l) * np.mean(truth == l) for l in labels)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def sample_valid_positions(scene: Scene, n: int, seed: int, min_clearance: float = 0.2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([sample_free_position(scene, rng, min_clearance) for _ in range(n)])


def segment_scene(scene: Scene, n_train_points: int = 100, seed: int = 0,
                  K: int | None = None) -> tuple[GmmModel, float]:
    """Fit a room GMM on valid positions and score it against the generator's room ids."""
    K = scene.n_rooms if K is None else K
    try:
        points = sample_valid_positions(scene, n_train_points, seed)
    except ValueError as exc:
        raise ValueError(f"too few valid positions in {scene.name}") from exc
    model = fit_gmm(points, K, seed=seed)
    truth = np.array([scene.room_at(*p) for p in points])
    return model, labeling_agreement(assign_labels(model, points), truth)
