"""Descriptors, room classification, passage detection and their datasets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import accuracy_score, f1_score
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import as_observation_matrix, check_labels
from .segmentation import assign_label
from .sim import (MAX_RANGE, N_RAYS, SIM, DomainParams, Pose, RayObservation, Scene,
                  observe, sample_free_position, segment_clear)

log = logging.getLogger(__name__)

HEADINGS = 18
HEADING_STEP = 2 * math.pi / HEADINGS
P_CLAMP = 1e-3


def heading_angles(n: int = HEADINGS) -> np.ndarray:
    """Headings 0, 20, ..., 340 degrees in radians (wrapped to [-pi, pi))."""
    return np.array([((k * 2 * math.pi / n) + math.pi) % (2 * math.pi) - math.pi for k in range(n)])


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray
    domain: str = "SIM"


class RayFeatureExtractor(TransformerMixin, BaseEstimator):
    """Two-scale max-pooled descriptor over a fan of rays.

    A shared trunk MLP maps each ray's local window (``window`` neighbouring
    rays, depth normalised by ``max_range`` and texture) to ``n_features``
    values. The per-ray feature map is max-pooled into ``n_coarse`` and
    ``n_fine`` contiguous bins, concatenated and L2-normalised.

    ``fit`` only initialises the trunk; supervised training happens through
    :class:`RoomClassifier` or :class:`PassageDetector`.
    """

    def __init__(self, n_rays=N_RAYS, window=5, hidden=32, n_features=8, n_coarse=4, n_fine=16,
                 max_range=MAX_RANGE, random_state=0):
        self.n_rays = n_rays
        self.window = window
        self.hidden = hidden
        self.n_features = n_features
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.max_range = max_range
        self.random_state = random_state

    @property
    def n_output(self) -> int:
        return (self.n_coarse + self.n_fine) * self.n_features

    def fit(self, X=None, y=None):
        if self.n_rays % self.n_fine or self.n_rays % self.n_coarse:
            raise ValueError("n_rays must be divisible by both pooling scales")
        self.trunk_ = nn.Mlp([2 * self.window, self.hidden, self.n_features], seed=self.random_state)
        return self

    @property
    def params(self):
        return self.trunk_.params

    def _windows(self, X):
        X = as_observation_matrix(X, self.n_rays)
        r = self.n_rays
        feats = np.stack([X[:, :r] / self.max_range, X[:, r:]], axis=-1)  # (n, R, 2)
        half = self.window // 2
        padded = np.pad(feats, ((0, 0), (half, self.window - 1 - half), (0, 0)), mode="edge")
        win = sliding_window_view(padded, self.window, axis=1)  # (n, R, 2, window)
        return win.reshape(X.shape[0] * r, 2 * self.window)

    def forward(self, X):
        """Descriptors ``(n, D)`` plus a cache for :meth:`backward`."""
        check_is_fitted(self, "trunk_")
        w = self._windows(X)
        n = w.shape[0] // self.n_rays
        fmap, trunk_cache = self.trunk_.forward(w)
        fmap = fmap.reshape(n, self.n_rays, self.n_features)
        pooled, idx = [], []
        for bins in (self.n_coarse, self.n_fine):
            blocks = fmap.reshape(n, bins, self.n_rays // bins, self.n_features)
            am = np.argmax(blocks, axis=2)
            idx.append(am)
            pooled.append(np.take_along_axis(blocks, am[:, :, None, :], axis=2)[:, :, 0, :].reshape(n, -1))
        z = np.concatenate(pooled, axis=1)
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        safe = np.where(norm > 1e-12, norm, 1.0)
        out = np.where(norm > 1e-12, z / safe, 0.0)
        return out, (trunk_cache, idx, out, safe, n)

    def backward(self, cache, d_out):
        """Trunk parameter gradients for upstream ``d_out`` (n, D)."""
        trunk_cache, idx, out, norm, n = cache
        dz = (d_out - out * np.sum(out * d_out, axis=1, keepdims=True)) / norm
        dfmap = np.zeros((n, self.n_rays, self.n_features))
        offset = 0
        for bins, am in zip((self.n_coarse, self.n_fine), idx):
            size = bins * self.n_features
            g = dz[:, offset:offset + size].reshape(n, bins, 1, self.n_features)
            offset += size
            block = np.zeros((n, bins, self.n_rays // bins, self.n_features))
            np.put_along_axis(block, am[:, :, None, :], g, axis=2)
            dfmap += block.reshape(n, self.n_rays, self.n_features)
        grads, _ = self.trunk_.backward(trunk_cache, dfmap.reshape(n * self.n_rays, self.n_features))
        return grads

    def transform(self, X):
        return self.forward(X)[0]

    def copy(self) -> "RayFeatureExtractor":
        other = RayFeatureExtractor(**self.get_params())
        if hasattr(self, "trunk_"):
            other.trunk_ = self.trunk_.copy()
        return other

    def to_json(self) -> dict:
        check_is_fitted(self, "trunk_")
        return nn.params_to_json({"kind": "RayFeatureExtractor", **self.get_params()}, self.trunk_.params)

    @classmethod
    def from_json(cls, d: dict) -> "RayFeatureExtractor":
        arch, params, _ = nn.params_from_json(d)
        arch = {k: v for k, v in arch.items() if k != "kind"}
        fx = cls(**arch).fit()
        fx.trunk_.params = params
        return fx

    def digest(self) -> str:
        return nn.params_digest(self.trunk_.params)


def shift_rays(X, shifts) -> np.ndarray:
    """Shift each observation's rays by ``shifts[i]`` positions, replicating the edge ray."""
    X = np.asarray(X, dtype=float)
    r = X.shape[1] // 2
    idx = np.clip(np.arange(r)[None, :] + np.asarray(shifts)[:, None], 0, r - 1)
    return np.concatenate([np.take_along_axis(X[:, :r], idx, 1), np.take_along_axis(X[:, r:], idx, 1)], 1)


def extract_descriptor(fx: RayFeatureExtractor, obs: RayObservation) -> Descriptor:
    if obs.n_rays != fx.n_rays:
        raise ValueError(f"observation has {obs.n_rays} rays, extractor expects {fx.n_rays}")
    return Descriptor(fx.transform(obs)[0], obs.domain)


class _TrunkHeadModel(ClassifierMixin, BaseEstimator):
    """Shared training loop for trunk + MLP head classifiers."""

    def _init_models(self, n_out):
        if self.extractor is None:
            fx = RayFeatureExtractor(random_state=self.random_state).fit()
        else:
            fx = self.extractor.copy()
        self.extractor_ = fx
        sizes = [fx.n_output, *self.head_hidden, n_out]
        self.head_ = nn.Mlp(sizes, seed=self.random_state + 1)
        self.optimizer_ = nn.AdamState(lr=self.lr)

    def _trainable(self):
        if self.freeze_trunk:
            return list(self.head_.params)
        return list(self.extractor_.params) + list(self.head_.params)

    def _logits(self, X):
        desc, fcache = self.extractor_.forward(X)
        logits, hcache = self.head_.forward(desc)
        return logits, (fcache, hcache)

    def _loss(self, logits, y):
        raise NotImplementedError

    def _augment(self, X, rng):
        max_shift = getattr(self, "shift_augment", 0)
        if not max_shift:
            return X
        return shift_rays(X, rng.integers(-max_shift, max_shift + 1, size=len(X)))

    def _train(self, X, y_enc, epochs):
        rng = np.random.default_rng(self.random_state + 2 + len(self.loss_curve_))
        params = self._trainable()
        for _ in range(epochs):
            total, count = 0.0, 0
            for batch in nn.iter_minibatches(len(X), self.batch_size, rng):
                logits, (fcache, hcache) = self._logits(self._augment(X[batch], rng))
                loss, dlogits = self._loss(logits, y_enc[batch])
                nn.check_finite_loss(loss)
                hgrads, ddesc = self.head_.backward(hcache, dlogits)
                grads = hgrads if self.freeze_trunk else self.extractor_.backward(fcache, ddesc) + hgrads
                nn.adam_step(self.optimizer_, params, grads)
                total += loss * len(batch)
                count += len(batch)
            self.loss_curve_.append(total / count)

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return self._logits(X)[0]


class RoomClassifier(_TrunkHeadModel):
    """Room-index classifier whose trunk becomes the localisation descriptor.

    Parameters
    ----------
    extractor : RayFeatureExtractor or None
        Initial trunk (copied); a fresh one is created when None.
    head_hidden : tuple of int, default=(64, 64)
    smoothing : float, default=0.1
        Label smoothing for the cross-entropy loss.
    lr : float, default=1e-4
    epochs : int, default=30
    batch_size : int, default=20
    shift_augment : int, default=0
        Training batches are shifted by up to this many rays (edge-padded),
        which stands in for headings between the 20 degree samples.
    random_state : int, default=0
    """

    def __init__(self, extractor=None, head_hidden=(64, 64), smoothing=0.1, lr=1e-4, epochs=30,
                 batch_size=20, freeze_trunk=False, shift_augment=0, random_state=0):
        self.extractor = extractor
        self.shift_augment = shift_augment
        self.head_hidden = head_hidden
        self.smoothing = smoothing
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.freeze_trunk = freeze_trunk
        self.random_state = random_state

    def fit(self, X, y):
        n_rays = self.extractor.n_rays if self.extractor is not None else N_RAYS
        X = as_observation_matrix(X, n_rays)
        y = check_labels(y, X.shape[0])
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("room classification needs at least 2 rooms")
        self._init_models(len(self.classes_))
        self.loss_curve_ = []
        self._train(X, y_enc, self.epochs)
        return self

    def _loss(self, logits, y):
        return nn.cross_entropy_smoothed(logits, y, self.smoothing)

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class PassageDetector(_TrunkHeadModel):
    """Binary navigability classifier on a single observation.

    ``warm_start=True`` continues training from the current weights, which is
    how finetuning on a new domain is expressed.
    """

    def __init__(self, extractor=None, head_hidden=(64, 64), lr=1e-4, epochs=20, batch_size=32,
                 freeze_trunk=False, warm_start=False, random_state=0):
        self.extractor = extractor
        self.head_hidden = head_hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.freeze_trunk = freeze_trunk
        self.warm_start = warm_start
        self.random_state = random_state

    def fit(self, X, y):
        n_rays = self.extractor.n_rays if self.extractor is not None else N_RAYS
        X = as_observation_matrix(X, n_rays)
        y = check_labels(y, X.shape[0]).astype(float)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("passage labels must be 0 or 1")
        self.classes_ = np.array([0, 1])
        if not (self.warm_start and hasattr(self, "head_")):
            self._init_models(1)
            self.loss_curve_ = []
        else:
            self.optimizer_ = nn.AdamState(lr=self.lr)
        self._train(X, y, self.epochs)
        return self

    def _loss(self, logits, y):
        return nn.bce_logit(logits[:, 0], y)[0], nn.bce_logit(logits[:, 0], y)[1][:, None]

    def predict_proba(self, X):
        p = np.clip(nn.sigmoid(self.decision_function(X)[:, 0]), P_CLAMP, 1.0 - P_CLAMP)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X)[:, 0] > 0).astype(int)

    def copy(self) -> "PassageDetector":
        other = PassageDetector(**{**self.get_params(), "extractor": None})
        other.classes_ = np.array([0, 1])
        other.extractor_ = self.extractor_.copy()
        other.head_ = self.head_.copy()
        other.loss_curve_ = list(getattr(self, "loss_curve_", []))
        return other

    def to_json(self) -> dict:
        check_is_fitted(self, "head_")
        return {"kind": "PassageDetector", "head_sizes": self.head_.sizes,
                "extractor": self.extractor_.to_json(),
                "head": nn.params_to_json({"sizes": self.head_.sizes}, self.head_.params,
                                          {"loss_curve": self.loss_curve_})}

    @classmethod
    def from_json(cls, d: dict) -> "PassageDetector":
        pd = cls(head_hidden=tuple(d["head_sizes"][1:-1]))
        pd.classes_ = np.array([0, 1])
        pd.extractor_ = RayFeatureExtractor.from_json(d["extractor"])
        arch, params, meta = nn.params_from_json(d["head"])
        pd.head_ = nn.Mlp(arch["sizes"])
        pd.head_.params = params
        pd.loss_curve_ = meta.get("loss_curve", [])
        return pd

    def digest(self) -> str:
        return nn.params_digest(self.extractor_.params + self.head_.params)


def passage_probability(pd: PassageDetector, fx: RayFeatureExtractor | None, obs) -> float:
    """Clamped passage probability in [1e-3, 1 - 1e-3].

    ``fx`` overrides the detector's own trunk when given.
    """
    check_is_fitted(pd, "head_")
    trunk = pd.extractor_ if fx is None else fx
    logit = pd.head_(trunk.transform(obs))[0, 0]
    return float(np.clip(nn.sigmoid(np.array([logit]))[0], P_CLAMP, 1.0 - P_CLAMP))


def passage_probabilities(pd: PassageDetector, X, fx: RayFeatureExtractor | None = None) -> np.ndarray:
    trunk = pd.extractor_ if fx is None else fx
    return np.clip(nn.sigmoid(pd.head_(trunk.transform(X))[:, 0]), P_CLAMP, 1.0 - P_CLAMP)


# datasets


@dataclass(frozen=True)
class LabeledExample:
    observation: RayObservation
    label: int
    pose: Pose
    scene: str = ""
    position_id: int = -1

    def to_dict(self) -> dict:
        return {"depths": self.observation.depths.tolist(), "textures": self.observation.textures.tolist(),
                "domain": self.observation.domain, "label": int(self.label),
                "pose": [self.pose.x, self.pose.y, self.pose.theta], "scene": self.scene,
                "position_id": self.position_id}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledExample":
        return cls(RayObservation(d["depths"], d["textures"], d["domain"]), int(d["label"]),
                   Pose(*d["pose"]), d.get("scene", ""), int(d.get("position_id", -1)))


def save_examples(path, examples) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def load_examples(path) -> list[LabeledExample]:
    with open(path) as fh:
        return [LabeledExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def examples_to_xy(examples) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([ex.observation.to_vector() for ex in examples])
    y = np.array([ex.label for ex in examples])
    return X, y


def observe_headings(scene: Scene, xy, domain: DomainParams = SIM, rng=None,
                     n: int = HEADINGS) -> list[RayObservation]:
    return [observe(scene, Pose(xy[0], xy[1], a), domain, rng) for a in heading_angles(n)]


def build_room_dataset(scenes, gmms, positions_per_scene: int = 60, headings: int = HEADINGS,
                       seed: int = 0, test_fraction: float = 0.3, min_positions: int = 3,
                       min_clearance: float = 0.2, label_offsets=None):
    """Room-labelled observations, split train/test by position.

    Labels are ``label_offsets[i] + gmm cluster`` so rooms stay distinct
    across scenes (offsets default to cumulative cluster counts).
    """
    rng = np.random.default_rng(seed)
    if label_offsets is None:
        label_offsets = np.concatenate([[0], np.cumsum([g.n_components for g in gmms])[:-1]])
    train, test = [], []
    pid = 0
    for scene, gmm, offset in zip(scenes, gmms, label_offsets):
        try:
            positions = [sample_free_position(scene, rng, min_clearance) for _ in range(positions_per_scene)]
        except ValueError as exc:
            raise ValueError(f"scene {scene.name} yields no valid positions") from exc
        by_room: dict[int, list] = {}
        for p in positions:
            by_room.setdefault(int(offset) + assign_label(gmm, p), []).append(p)
        for label in sorted(by_room):
            pts = by_room[label]
            if len(pts) < min_positions:
                log.info("dropping room %d of %s: %d positions", label, scene.name, len(pts))
                continue
            order = rng.permutation(len(pts))
            n_test = max(1, int(round(test_fraction * len(pts))))
            for rank, i in enumerate(order):
                p = pts[i]
                bucket = test if rank < n_test else train
                for a, obs in zip(heading_angles(headings), observe_headings(scene, p, n=headings)):
                    bucket.append(LabeledExample(obs, label, Pose(p[0], p[1], a), scene.name, pid))
                pid += 1
    return train, test


def _sample_in_cluster(scene, gmm, cluster, rng, min_clearance, max_attempts=20_000):
    for _ in range(max_attempts):
        p = sample_free_position(scene, rng, min_clearance)
        if assign_label(gmm, p) == cluster:
            return p
    raise ValueError(f"could not sample a position in cluster {cluster} of {scene.name}")


def build_passage_dataset(scenes, gmms, sources_per_room: int = 10, targets_per_source: int = 10,
                          radius: float = 2.0, seed: int = 0, n_checks: int = 50,
                          min_clearance: float = 0.3, balance: bool = True):
    """Observations facing a target on a circle around each source.

    Label 1 iff all ``n_checks`` evenly spaced points on the source-target
    segment are free. With ``balance`` the majority class is randomly
    downsampled to a 1:1 ratio.
    """
    rng = np.random.default_rng(seed)
    examples = []
    pid = 0
    for scene, gmm in zip(scenes, gmms):
        for cluster in range(gmm.n_components):
            for _ in range(sources_per_room):
                src = _sample_in_cluster(scene, gmm, cluster, rng, min_clearance)
                phase = rng.uniform(0, 2 * math.pi)
                for j in range(targets_per_source):
                    a = phase + 2 * math.pi * j / targets_per_source
                    tgt = src + radius * np.array([math.cos(a), math.sin(a)])
                    label = int(segment_clear(scene, src, tgt, n_checks))
                    pose = Pose(src[0], src[1], a)
                    examples.append(LabeledExample(observe(scene, pose), label, pose, scene.name, pid))
                pid += 1
    if balance:
        examples = balance_classes(examples, rng)
    return examples


def balance_classes(examples, rng):
    labels = np.array([ex.label for ex in examples])
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n = min(len(pos), len(neg))
    if n == 0:
        return list(examples)
    keep = np.sort(np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)]))
    return [examples[i] for i in keep]


def classification_metrics(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    out = {"accuracy": float(accuracy_score(y_true, y_pred)),
           "f1": float(f1_score(y_true, y_pred, average="binary" if set(np.unique(y_true)) <= {0, 1}
                                and set(np.unique(y_pred)) <= {0, 1} else "macro", zero_division=0))}
    if set(np.unique(np.concatenate([y_true, y_pred]))) <= {0, 1}:
        out.update(tn=int(np.sum((y_true == 0) & (y_pred == 0))), fp=int(np.sum((y_true == 0) & (y_pred == 1))),
                   fn=int(np.sum((y_true == 1) & (y_pred == 0))), tp=int(np.sum((y_true == 1) & (y_pred == 1))))
    return out


def train_room_classifier(train, test, epochs: int = 30, seed: int = 0, lr: float = 1e-4,
                          batch_size: int = 20, smoothing: float = 0.1, extractor=None,
                          shift_augment: int = 0):
    """Returns ``(extractor, head, test_accuracy, macro_f1, classifier)``."""
    X, y = examples_to_xy(train)
    clf = RoomClassifier(extractor=extractor, lr=lr, epochs=epochs, batch_size=batch_size,
                         smoothing=smoothing, shift_augment=shift_augment, random_state=seed).fit(X, y)
    Xt, yt = examples_to_xy(test)
    pred = clf.predict(Xt)
    acc = float(accuracy_score(yt, pred))
    f1 = float(f1_score(yt, pred, average="macro", zero_division=0))
    return clf.extractor_, clf.head_, acc, f1, clf


def train_passage_detector(train, test, extractor=None, epochs: int = 20, seed: int = 0,
                           lr: float = 1e-4, batch_size: int = 32, freeze_trunk: bool = False):
    """Returns ``(detector, metrics)`` with metrics on ``test``."""
    X, y = examples_to_xy(train)
    pd = PassageDetector(extractor=extractor, lr=lr, epochs=epochs, batch_size=batch_size,
                         freeze_trunk=freeze_trunk, random_state=seed).fit(X, y)
    Xt, yt = examples_to_xy(test)
    return pd, classification_metrics(yt, pd.predict(Xt))
