"""Sim-to-real transfer: adversarial feature alignment and passage finetuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import as_observation_matrix
from .perception import (HEADINGS, LabeledExample, PassageDetector, RayFeatureExtractor, balance_classes,
                         classification_metrics, examples_to_xy, heading_angles)
from .sim import REAL, SIM, DomainParams, Pose, Scene, clearance, observe, sample_free_position, segment_clear

FRONTAL_WINDOW = math.radians(40.0)
CONFIGS = ("A", "B", "C", "D")


class Discriminator(BaseEstimator):
    """Descriptor -> logit of "comes from the source domain"."""

    def __init__(self, n_input=160, hidden=(64, 64), lr=1e-3, epochs=20, batch_size=50, random_state=0):
        self.n_input = n_input
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def init(self) -> "Discriminator":
        self.mlp_ = nn.Mlp([self.n_input, *self.hidden, 1], seed=self.random_state)
        return self

    def fit(self, X, y):
        """Train on descriptors ``X`` with ``y = 1`` for source and ``0`` for target."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_input or len(y) != len(X):
            raise ValueError(f"expected descriptors (n, {self.n_input}) and n labels")
        self.init()
        opt = nn.AdamState(lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        for _ in range(self.epochs):
            for batch in nn.iter_minibatches(len(X), self.batch_size, rng):
                logit, cache = self.forward(X[batch])
                loss, g = nn.bce_logit(logit, y[batch])
                nn.check_finite_loss(loss, "discriminator loss")
                nn.adam_step(opt, self.params, self.backward(cache, g)[0])
        return self

    @property
    def params(self):
        return self.mlp_.params

    def forward(self, desc):
        out, cache = self.mlp_.forward(desc)
        return out[:, 0], cache

    def backward(self, cache, d_logit):
        return self.mlp_.backward(cache, d_logit[:, None])

    def decision_function(self, desc):
        check_is_fitted(self, "mlp_")
        return self.forward(np.atleast_2d(desc))[0]

    def predict_proba(self, desc):
        p = nn.sigmoid(self.decision_function(desc))
        return np.column_stack([1 - p, p])

    def accuracy(self, desc_source, desc_target) -> float:
        """Share of source descriptors scored > 0.5 and target descriptors scored <= 0.5."""
        hits = np.sum(self.decision_function(desc_source) > 0) + np.sum(self.decision_function(desc_target) <= 0)
        return float(hits / (len(desc_source) + len(desc_target)))


def discriminator_loss(disc: Discriminator, desc_source, desc_target):
    """``-E log D(source) - E log(1 - D(target))``; returns ``(loss, grads)``."""
    ls, cs = disc.forward(desc_source)
    lt, ct = disc.forward(desc_target)
    l1, g1 = nn.bce_logit(ls, np.ones(len(ls)))
    l0, g0 = nn.bce_logit(lt, np.zeros(len(lt)))
    gs, _ = disc.backward(cs, g1)
    gt, _ = disc.backward(ct, g0)
    return l1 + l0, [a + b for a, b in zip(gs, gt)]


def adversarial_loss(disc: Discriminator, fx_t: RayFeatureExtractor, X_target):
    """Non-saturating alignment loss ``-E log D(f_t(x))``; returns ``(loss, trunk_grads)``.

    Minimising it drives target descriptors toward the region the
    discriminator labels as source.
    """
    desc, fcache = fx_t.forward(X_target)
    logit, dcache = disc.forward(desc)
    loss, g = nn.bce_logit(logit, np.ones(len(logit)))
    _, d_desc = disc.backward(dcache, g)
    return loss, fx_t.backward(fcache, d_desc)


@dataclass
class AdaptationConfig:
    epochs: int = 60
    batch_size: int = 50
    resample_every: int = 20
    pool_size: int = 500
    disc_steps: int = 1
    lr: float = 1e-4
    disc_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "resample_every", "pool_size", "disc_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"AdaptationConfig.{name} must be a positive integer")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class AdaptationDiagnostics:
    disc_accuracy: list = field(default_factory=list)
    mean_distance: list = field(default_factory=list)
    disc_loss: list = field(default_factory=list)
    adv_loss: list = field(default_factory=list)

    def rows(self):
        return [{"epoch": i, "disc_accuracy": a, "mean_distance": d, "disc_loss": l, "adv_loss": g}
                for i, (a, d, l, g) in enumerate(zip(self.disc_accuracy, self.mean_distance,
                                                     self.disc_loss, self.adv_loss))]


def adapt_extractor(f_s: RayFeatureExtractor, X_sim, X_real, cfg: AdaptationConfig = AdaptationConfig()):
    """Train a target extractor, initialised from ``f_s``, against a domain discriminator.

    ``f_s`` is never modified. Every ``resample_every`` epochs a fresh pool
    of sim and real observations is drawn; each minibatch makes
    ``disc_steps`` discriminator updates followed by one extractor update.
    Returns ``(f_t, discriminator, diagnostics)``.
    """
    X_sim = as_observation_matrix(X_sim, f_s.n_rays)
    X_real = as_observation_matrix(X_real, f_s.n_rays)
    if len(X_sim) == 0 or len(X_real) == 0:
        raise ValueError("both observation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    f_t = f_s.copy()
    disc = Discriminator(f_s.n_output, random_state=cfg.seed + 1).init()
    opt_d = nn.AdamState(lr=cfg.disc_lr)
    opt_t = nn.AdamState(lr=cfg.lr)
    probe_s = X_sim[rng.choice(len(X_sim), min(200, len(X_sim)), replace=False)]
    probe_t = X_real[rng.choice(len(X_real), min(200, len(X_real)), replace=False)]
    desc_probe_s = f_s.transform(probe_s)
    diag = AdaptationDiagnostics()
    pool_s = pool_t = None
    for epoch in range(cfg.epochs):
        if epoch % cfg.resample_every == 0:
            n = min(cfg.pool_size, len(X_sim), len(X_real))
            pool_s = X_sim[rng.choice(len(X_sim), n, replace=False)]
            pool_t = X_real[rng.choice(len(X_real), n, replace=False)]
            desc_pool_s = f_s.transform(pool_s)
        d_losses, a_losses = [], []
        for batch in nn.iter_minibatches(len(pool_t), cfg.batch_size, rng):
            for _ in range(cfg.disc_steps):
                ld, gd = discriminator_loss(disc, desc_pool_s[batch], f_t.transform(pool_t[batch]))
                nn.check_finite_loss(ld, "discriminator loss")
                nn.adam_step(opt_d, disc.params, gd)
            la, ga = adversarial_loss(disc, f_t, pool_t[batch])
            nn.check_finite_loss(la, "adversarial loss")
            nn.adam_step(opt_t, f_t.params, ga)
            d_losses.append(ld)
            a_losses.append(la)
        desc_probe_t = f_t.transform(probe_t)
        diag.disc_accuracy.append(disc.accuracy(desc_probe_s, desc_probe_t))
        diag.mean_distance.append(float(np.linalg.norm(desc_probe_s.mean(0) - desc_probe_t.mean(0))))
        diag.disc_loss.append(float(np.mean(d_losses)))
        diag.adv_loss.append(float(np.mean(a_losses)))
    return f_t, disc, diag


# real-domain collection


def frontal_clear(scene: Scene, position, heading: float, radius: float = 2.0, window: float = FRONTAL_WINDOW,
                  step: float = math.radians(20.0), n_checks: int = 50) -> bool:
    """Lenient passage rule: any bearing within ``window`` of ``heading`` has a clear segment."""
    p = np.asarray(position, dtype=float)
    k = int(round(window / step))
    for j in range(-k, k + 1):
        a = heading + j * step
        if segment_clear(scene, p, p + radius * np.array([math.cos(a), math.sin(a)]), n_checks):
            return True
    return False


def choose_real_positions(scene: Scene, n: int = 20, seed: int = 0, min_clearance: float = 0.3,
                          near_wall: float = 0.6, near_fraction: float = 0.5, min_spacing: float = 0.5):
    """Collection spots: a mix of wall-side and free-standing positions, spread apart."""
    rng = np.random.default_rng(seed)
    n_near = int(round(near_fraction * n))
    out = []
    for _ in range(200 * n):
        if len(out) == n:
            break
        p = sample_free_position(scene, rng, min_clearance)
        c = clearance(scene, *p)
        if len(out) < n_near and c > near_wall:
            continue
        if any(np.linalg.norm(p - q) < min_spacing for q in out):
            continue
        out.append(p)
    if len(out) < n:
        raise ValueError(f"could only choose {len(out)} of {n} collection positions in {scene.name}")
    return np.array(out)


def build_real_collection(scene: Scene, positions, domain: DomainParams = REAL, seed: int = 0,
                          headings: int = HEADINGS) -> list[LabeledExample]:
    """Observations at every heading of every position, labelled by :func:`frontal_clear`."""
    rng = np.random.default_rng(seed)
    out = []
    for pid, p in enumerate(np.asarray(positions, dtype=float)):
        if scene.is_occupied(*p) or clearance(scene, *p) <= 0:
            raise ValueError(f"collection position {tuple(np.round(p, 3))} is not free")
        for a in heading_angles(headings):
            pose = Pose(p[0], p[1], float(a))
            label = int(frontal_clear(scene, p, float(a)))
            out.append(LabeledExample(observe(scene, pose, domain, rng), label, pose, scene.name, pid))
    return out


def split_by_position(examples, test_fraction: float = 0.5, seed: int = 0, balance: bool = True):
    """Split by collection position, then optionally balance each side 1:1."""
    rng = np.random.default_rng(seed)
    pids = np.unique([ex.position_id for ex in examples])
    order = rng.permutation(pids)
    n_test = int(round(test_fraction * len(pids)))
    test_ids = set(order[:n_test].tolist())
    train = [ex for ex in examples if ex.position_id not in test_ids]
    test = [ex for ex in examples if ex.position_id in test_ids]
    if balance:
        train, test = balance_classes(train, rng), balance_classes(test, rng)
    return train, test


# finetuning


def finetune_passage(train, test, config: str, sim_detector: PassageDetector | None = None,
                     epochs: int = 10, batch_size: int = 5, lr: float = 1e-4, seed: int = 0,
                     extractor: RayFeatureExtractor | None = None):
    """One of the four transfer configurations; returns ``(detector, metrics)``.

    A: fresh network, no finetuning. B: fresh network trained on ``train``.
    C: sim-trained detector as is. D: sim-trained detector finetuned on ``train``.
    ``extractor`` optionally replaces the trunk of the sim-trained detector in C/D.
    """
    if config not in CONFIGS:
        raise ValueError(f"unknown configuration {config!r}; expected one of {CONFIGS}")
    X, y = examples_to_xy(train)
    Xt, yt = examples_to_xy(test)
    if config in ("A", "B"):
        pd = PassageDetector(lr=lr, epochs=epochs if config == "B" else 0, batch_size=batch_size,
                             random_state=seed)
        pd.fit(X, y)
    else:
        if sim_detector is None:
            raise ValueError(f"configuration {config} needs the sim-trained passage detector")
        pd = sim_detector.copy()
        if extractor is not None:
            pd.extractor_ = extractor.copy()
        if config == "D":
            pd.set_params(lr=lr, batch_size=batch_size, epochs=epochs, warm_start=True, random_state=seed)
            pd.fit(X, y)
    return pd, classification_metrics(yt, pd.predict(Xt))


# retrieval probe


def cross_domain_retrieval(scene: Scene, positions, fx_db: RayFeatureExtractor, fx_query: RayFeatureExtractor,
                           query_domain: DomainParams = REAL, n_queries: int = 200, seed: int = 0) -> float:
    """Top-1 place retrieval of query-domain views against a SIM database.

    The database holds ``fx_db`` descriptors of SIM views at every heading of
    every position; each query is a ``query_domain`` view at a random
    position and heading, described by ``fx_query``. A hit means the best
    matching database view belongs to the query's position.
    """
    positions = np.asarray(positions, dtype=float)
    db = np.stack([fx_db.transform([observe(scene, Pose(p[0], p[1], float(a))) for a in heading_angles()])
                   for p in positions])
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_queries):
        i = int(rng.integers(len(positions)))
        a = rng.uniform(-math.pi, math.pi)
        q = fx_query.transform(observe(scene, Pose(positions[i, 0], positions[i, 1], a), query_domain, rng))[0]
        hits += int(np.argmax(np.max(db @ q, axis=1)) == i)
    return hits / n_queries


def observation_pool(scenes, n: int, domain: DomainParams = SIM, seed: int = 0, min_clearance: float = 0.2):
    """``n`` views at random free poses spread over ``scenes``."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        s = scenes[k % len(scenes)]
        p = sample_free_position(s, rng, min_clearance)
        out.append(observe(s, Pose(p[0], p[1], rng.uniform(-math.pi, math.pi)), domain, rng))
    return out
