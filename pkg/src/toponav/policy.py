"""Recurrent local policy trained by behavioural cloning with a forward model.

The policy has one GRU cell per velocity component. Both cells read the
state embedding ``u_t`` together with both previous hidden states, and each
feeds a small classification head. A forward model ``f(u_t, a_t) -> u_{t+1}``
is pretrained with the policy frozen and then trained jointly with it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import f1_score
from sklearn.utils.validation import check_is_fitted

from . import nn
from .expert import ExpertTrajectory
from .perception import RayFeatureExtractor
from .sim import DT, SIM, V_MAX, W_MAX, DomainParams, Pose, Scene, VelocityCommand, observe, step

log = logging.getLogger(__name__)

N_LINEAR = 3
N_ANGULAR = 5
SEQ_LEN = 50
SEQ_STRIDE = 10
MIN_TURN_FRACTION = 0.2


# action classes


def linear_centers() -> np.ndarray:
    w = V_MAX / N_LINEAR
    return w * (np.arange(N_LINEAR) + 0.5)


def angular_centers() -> np.ndarray:
    w = 2 * W_MAX / N_ANGULAR
    return -W_MAX + w * (np.arange(N_ANGULAR) + 0.5)


def encode_linear(v) -> np.ndarray:
    idx = np.floor(np.asarray(v, dtype=float) / (V_MAX / N_LINEAR)).astype(int)
    return np.clip(idx, 0, N_LINEAR - 1)


def encode_angular(w) -> np.ndarray:
    idx = np.floor((np.asarray(w, dtype=float) + W_MAX) / (2 * W_MAX / N_ANGULAR)).astype(int)
    return np.clip(idx, 0, N_ANGULAR - 1)


def decode(lin_class: int, ang_class: int) -> VelocityCommand:
    return VelocityCommand(float(linear_centers()[lin_class]), float(angular_centers()[ang_class]))


def encode_commands(commands) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([c.v for c in commands], dtype=float)
    w = np.array([c.w for c in commands], dtype=float)
    return encode_linear(v), encode_angular(w)


# dataset


@dataclass
class ExpertSequence:
    """``L`` state/action pairs plus the terminal state: ``u`` has ``L + 1`` rows."""

    u: np.ndarray
    a_lin: np.ndarray
    a_ang: np.ndarray
    source: str

    def __post_init__(self):
        if len(self.u) != len(self.a_lin) + 1 or len(self.a_lin) != len(self.a_ang):
            raise ValueError("sequence needs len(u) == len(actions) + 1")


@dataclass
class BcDataset:
    train: list
    test: list

    @staticmethod
    def stack(seqs):
        if not seqs:
            raise ValueError("no sequences")
        return (np.stack([s.u for s in seqs]), np.stack([s.a_lin for s in seqs]),
                np.stack([s.a_ang for s in seqs]))


def embed_observations(observations, fx_loc: RayFeatureExtractor, fx_pass: RayFeatureExtractor) -> np.ndarray:
    """State embedding: localisation descriptor followed by passage descriptor."""
    return np.hstack([fx_loc.transform(observations), fx_pass.transform(observations)])


def turn_fraction(commands) -> float:
    """Share of commands whose angular class is not the straight-ahead bin."""
    if not commands:
        return 0.0
    _, ang = encode_commands(commands)
    return float(np.mean(ang != N_ANGULAR // 2))


def cut_sequences(n_steps: int, length: int = SEQ_LEN, stride: int = SEQ_STRIDE) -> list[int]:
    """Start indices of windows of ``length`` commands, consecutive windows ``stride`` apart."""
    if n_steps < length:
        return []
    return list(range(0, n_steps - length + 1, stride))


def build_bc_dataset(trajectories, fx_loc, fx_pass, seed: int = 0, test_fraction: float = 0.2,
                     length: int = SEQ_LEN, stride: int = SEQ_STRIDE,
                     min_turn_fraction: float = MIN_TURN_FRACTION) -> BcDataset:
    """Embed, encode, filter and window expert trajectories; split by trajectory.

    Trajectories whose share of turning commands is below ``min_turn_fraction``
    are dropped as near-straight.
    """
    if stride < length - 40:
        raise ValueError("stride too small: sibling sequences may overlap by at most 40 steps")
    kept = []
    for k, traj in enumerate(trajectories):
        if turn_fraction(traj.commands) < min_turn_fraction:
            log.debug("dropping trajectory %d: too few turning commands", k)
            continue
        if not cut_sequences(len(traj.commands), length, stride):
            continue
        kept.append((k, traj))
    if not kept:
        raise ValueError("no trajectories left after filtering")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kept))
    n_test = int(round(test_fraction * len(kept))) if len(kept) > 1 else 0
    if test_fraction > 0 and len(kept) > 1:
        n_test = min(max(n_test, 1), len(kept) - 1)
    test_ids = set(order[:n_test].tolist())
    train, test = [], []
    for j, (k, traj) in enumerate(kept):
        u = embed_observations(traj.observations, fx_loc, fx_pass)
        a_lin, a_ang = encode_commands(traj.commands)
        src = f"{traj.scene}#{k}"
        for s in cut_sequences(len(traj.commands), length, stride):
            seq = ExpertSequence(u[s:s + length + 1], a_lin[s:s + length], a_ang[s:s + length], src)
            (test if j in test_ids else train).append(seq)
    return BcDataset(train, test)


def save_trajectories(path, trajectories) -> None:
    with open(path, "w") as fh:
        for t in trajectories:
            fh.write(json.dumps(t.to_dict()) + "\n")


def load_trajectories(path) -> list[ExpertTrajectory]:
    return [ExpertTrajectory.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line]


# model


def _onehot(idx, n):
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _softmax_backward(p, dp):
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


class LocalPolicy(ClassifierMixin, BaseEstimator):
    """Two-GRU velocity-class policy with a jointly trained forward model.

    Parameters
    ----------
    hidden_size : int
        Size of each GRU hidden state.
    head_hidden : int
        Width of the hidden layer in each classification head.
    fm_hidden : int
        Width of the forward model's hidden layer.
    alpha, lam : float
        Weight of the cross-entropy terms and of the policy-action consistency term.
    lr : float
        Adam step size for both phases.
    pretrain_epochs, joint_epochs : int
        Epochs of forward-model pretraining and of joint training.
    batch_size : int
        Sequences per minibatch.
    random_state : int
    """

    def __init__(self, hidden_size=64, head_hidden=32, fm_hidden=64, alpha=10.0, lam=0.1, lr=1e-4,
                 pretrain_epochs=100, joint_epochs=900, batch_size=50, random_state=0):
        self.hidden_size = hidden_size
        self.head_hidden = head_hidden
        self.fm_hidden = fm_hidden
        self.alpha = alpha
        self.lam = lam
        self.lr = lr
        self.pretrain_epochs = pretrain_epochs
        self.joint_epochs = joint_epochs
        self.batch_size = batch_size
        self.random_state = random_state

    # construction

    def init(self, d_u: int) -> "LocalPolicy":
        h = self.hidden_size
        rng = np.random.default_rng(self.random_state)
        self.d_u_ = int(d_u)
        self.cell_ang_ = nn.GruCell(d_u + 2 * h, h, seed=rng)
        self.cell_lin_ = nn.GruCell(d_u + 2 * h, h, seed=rng)
        self.head_ang_ = nn.Mlp([h, self.head_hidden, N_ANGULAR], seed=rng)
        self.head_lin_ = nn.Mlp([h, self.head_hidden, N_LINEAR], seed=rng)
        self.fm_ = nn.Mlp([d_u + N_LINEAR + N_ANGULAR, self.fm_hidden, d_u], seed=rng)
        self.classes_ = np.arange(N_ANGULAR)
        self.loss_curve_ = []
        self.pretrain_curve_ = []
        return self

    @property
    def policy_params(self):
        return (self.cell_ang_.params + self.cell_lin_.params
                + self.head_ang_.params + self.head_lin_.params)

    @property
    def fm_params(self):
        return self.fm_.params

    # forward

    def zero_state(self, batch=None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return np.zeros(shape), np.zeros(shape)

    def _check_u(self, U):
        U = np.asarray(U, dtype=float)
        if U.shape[-1] != self.d_u_:
            raise ValueError(f"state embedding has dim {U.shape[-1]}, policy expects {self.d_u_}")
        if not np.all(np.isfinite(U)):
            raise ValueError("state embedding contains non-finite values")
        return U

    def step(self, u, h_ang, h_lin):
        """One recurrent step; returns ``(logits_lin, logits_ang, h_ang', h_lin', cache)``."""
        x = np.concatenate([u, h_ang, h_lin], axis=-1)
        ha, ca = self.cell_ang_.step(x, h_ang)
        hl, cl = self.cell_lin_.step(x, h_lin)
        la, cha = self.head_ang_.forward(ha)
        ll, chl = self.head_lin_.forward(hl)
        return ll, la, ha, hl, (ca, cl, cha, chl)

    def _unroll(self, U):
        """Teacher-forced pass over ``U[:, :T]``; returns logits ``(B, T, C)`` and caches."""
        B, T = U.shape[0], U.shape[1] - 1
        ha, hl = self.zero_state(B)
        L_lin = np.empty((B, T, N_LINEAR))
        L_ang = np.empty((B, T, N_ANGULAR))
        caches = []
        for t in range(T):
            ll, la, ha, hl, c = self.step(U[:, t], ha, hl)
            L_lin[:, t], L_ang[:, t] = ll, la
            caches.append(c)
        return L_lin, L_ang, caches

    def _unroll_backward(self, caches, dL_lin, dL_ang):
        h = self.hidden_size
        d = self.d_u_
        g_ca = [np.zeros_like(p) for p in self.cell_ang_.params]
        g_cl = [np.zeros_like(p) for p in self.cell_lin_.params]
        g_ha = [np.zeros_like(p) for p in self.head_ang_.params]
        g_hl = [np.zeros_like(p) for p in self.head_lin_.params]
        B = dL_lin.shape[0]
        dha_next = np.zeros((B, h))
        dhl_next = np.zeros((B, h))
        for t in reversed(range(len(caches))):
            ca, cl, cha, chl = caches[t]
            g, dha = self.head_ang_.backward(cha, dL_ang[:, t])
            _acc(g_ha, g)
            g, dhl = self.head_lin_.backward(chl, dL_lin[:, t])
            _acc(g_hl, g)
            g, dxa, dha_prev = self.cell_ang_.step_backward(ca, dha + dha_next)
            _acc(g_ca, g)
            g, dxl, dhl_prev = self.cell_lin_.step_backward(cl, dhl + dhl_next)
            _acc(g_cl, g)
            dx = dxa + dxl
            dha_next = dha_prev + dx[:, d:d + h]
            dhl_next = dhl_prev + dx[:, d + h:]
        return g_ca + g_cl + g_ha + g_hl

    # losses

    def _fm_terms(self, U, P_lin, P_ang, A_lin, A_ang):
        """Forward-consistency terms; returns loss and grads w.r.t. fm params and policy probabilities."""
        B, T = A_lin.shape
        d = self.d_u_
        u_t = U[:, :T].reshape(B * T, d)
        u_next = U[:, 1:].reshape(B * T, d)
        x_bar = np.hstack([u_t, _onehot(A_lin, N_LINEAR).reshape(B * T, -1),
                           _onehot(A_ang, N_ANGULAR).reshape(B * T, -1)])
        x_hat = np.hstack([u_t, P_lin.reshape(B * T, -1), P_ang.reshape(B * T, -1)])
        bar, c_bar = self.fm_.forward(x_bar)
        hat, c_hat = self.fm_.forward(x_hat)
        l_bar, g_bar, _ = nn.l2(bar, u_next)
        l_hat, g_hat, _ = nn.l2(hat, u_next)
        loss = (l_bar + self.lam * l_hat) / B
        g1, _ = self.fm_.backward(c_bar, g_bar / B)
        g2, dx_hat = self.fm_.backward(c_hat, self.lam * g_hat / B)
        grads = [a + b for a, b in zip(g1, g2)]
        dP = dx_hat[:, d:]
        dP_lin = dP[:, :N_LINEAR].reshape(B, T, N_LINEAR)
        dP_ang = dP[:, N_LINEAR:].reshape(B, T, N_ANGULAR)
        return loss, grads, dP_lin, dP_ang

    def pretrain_loss(self, U, A_lin, A_ang):
        """Forward-model loss with the policy frozen; returns ``(loss, fm_grads)``."""
        L_lin, L_ang, _ = self._unroll(U)
        loss, grads, _, _ = self._fm_terms(U, nn.softmax(L_lin), nn.softmax(L_ang), A_lin, A_ang)
        return loss, grads

    def joint_loss(self, U, A_lin, A_ang):
        """Joint objective; returns ``(loss, policy_grads, fm_grads)``.

        Cross-entropy terms are summed over time and averaged over sequences,
        like the consistency terms. The policy-action term reaches the policy
        through the softmax mixture of action one-hots fed to the forward model.
        """
        B, T = A_lin.shape
        L_lin, L_ang, caches = self._unroll(U)
        P_lin, P_ang = nn.softmax(L_lin), nn.softmax(L_ang)
        ce_lin, d_lin = nn.cross_entropy_smoothed(L_lin.reshape(B * T, -1), A_lin.ravel(), reduction="sum")
        ce_ang, d_ang = nn.cross_entropy_smoothed(L_ang.reshape(B * T, -1), A_ang.ravel(), reduction="sum")
        fm_loss, fm_grads, dP_lin, dP_ang = self._fm_terms(U, P_lin, P_ang, A_lin, A_ang)
        loss = self.alpha * (ce_lin + ce_ang) / B + fm_loss
        dL_lin = self.alpha * d_lin.reshape(B, T, -1) / B + _softmax_backward(P_lin, dP_lin)
        dL_ang = self.alpha * d_ang.reshape(B, T, -1) / B + _softmax_backward(P_ang, dP_ang)
        return loss, self._unroll_backward(caches, dL_lin, dL_ang), fm_grads

    # training

    def _check_fit_args(self, U, A_lin, A_ang):
        U = self._check_u(U) if hasattr(self, "d_u_") else np.asarray(U, dtype=float)
        A_lin = np.asarray(A_lin, dtype=int)
        A_ang = np.asarray(A_ang, dtype=int)
        if U.ndim != 3 or A_lin.shape != (U.shape[0], U.shape[1] - 1) or A_ang.shape != A_lin.shape:
            raise ValueError("expected U (n, T+1, d) and action arrays (n, T)")
        if len(U) == 0:
            raise ValueError("empty dataset")
        if A_lin.min() < 0 or A_lin.max() >= N_LINEAR or A_ang.min() < 0 or A_ang.max() >= N_ANGULAR:
            raise ValueError("action class out of range")
        return U, A_lin, A_ang

    def pretrain(self, U, A_lin, A_ang, epochs=None):
        if not hasattr(self, "d_u_"):
            self.init(np.asarray(U).shape[-1])
        U, A_lin, A_ang = self._check_fit_args(U, A_lin, A_ang)
        epochs = self.pretrain_epochs if epochs is None else epochs
        opt = nn.AdamState(lr=self.lr)
        rng = np.random.default_rng(self.random_state + 11)
        for _ in range(epochs):
            total = 0.0
            for batch in nn.iter_minibatches(len(U), self.batch_size, rng):
                loss, grads = self.pretrain_loss(U[batch], A_lin[batch], A_ang[batch])
                nn.check_finite_loss(loss, "forward-model loss")
                nn.adam_step(opt, self.fm_params, grads)
                total += loss * len(batch)
            self.pretrain_curve_.append(total / len(U))
        return self

    def joint_fit(self, U, A_lin, A_ang, epochs=None, callback=None):
        U, A_lin, A_ang = self._check_fit_args(U, A_lin, A_ang)
        epochs = self.joint_epochs if epochs is None else epochs
        if not hasattr(self, "joint_opt_"):
            self.joint_opt_ = nn.AdamState(lr=self.lr)
        params = self.policy_params + self.fm_params
        rng = np.random.default_rng(self.random_state + 13 + len(self.loss_curve_))
        for epoch in range(epochs):
            total = 0.0
            for batch in nn.iter_minibatches(len(U), self.batch_size, rng):
                loss, pg, fg = self.joint_loss(U[batch], A_lin[batch], A_ang[batch])
                nn.check_finite_loss(loss, "joint loss")
                nn.adam_step(self.joint_opt_, params, pg + fg)
                total += loss * len(batch)
            self.loss_curve_.append(total / len(U))
            if callback is not None:
                callback(self, epoch)
        return self

    def fit(self, U, A_lin, A_ang):
        """Pretrain the forward model with the policy frozen, then train both jointly."""
        self.init(np.asarray(U).shape[-1])
        self.pretrain(U, A_lin, A_ang)
        return self.joint_fit(U, A_lin, A_ang)

    # inference

    def predict_classes(self, U):
        """Teacher-forced class predictions ``(lin, ang)`` for sequences ``U`` of shape (n, T+1, d)."""
        check_is_fitted(self, "cell_ang_")
        U = self._check_u(U)
        L_lin, L_ang, _ = self._unroll(U)
        return L_lin.argmax(-1), L_ang.argmax(-1)

    def predict(self, U):
        return self.predict_classes(U)[1]

    def score(self, U, A_lin, A_ang=None):
        """Mean per-sequence accuracy of the angular head (or both heads' mean if ``A_ang`` given)."""
        if A_ang is None:
            return sequence_metrics(self, U, None, A_lin)["angular_accuracy"]
        m = sequence_metrics(self, U, A_lin, A_ang)
        return 0.5 * (m["angular_accuracy"] + m["linear_accuracy"])

    # persistence

    def to_json(self) -> dict:
        check_is_fitted(self, "cell_ang_")
        arch = {"kind": "LocalPolicy", "d_u": self.d_u_, **self.get_params()}
        return nn.params_to_json(arch, self.policy_params + self.fm_params)

    @classmethod
    def from_json(cls, d: dict) -> "LocalPolicy":
        arch, params, _ = nn.params_from_json(d)
        arch = dict(arch)
        arch.pop("kind")
        d_u = arch.pop("d_u")
        pol = cls(**arch).init(d_u)
        it = iter(params)
        for p in pol.policy_params + pol.fm_params:
            p[...] = next(it)
        return pol

    def digest(self) -> str:
        return nn.params_digest(self.policy_params + self.fm_params)


def _acc(total, grads):
    for a, g in zip(total, grads):
        a += g


def sequence_metrics(policy: LocalPolicy, U, A_lin, A_ang) -> dict:
    """Accuracy and macro F1 per head, computed per sequence then averaged."""
    p_lin, p_ang = policy.predict_classes(U)
    out = {}
    for name, pred, true, n in (("linear", p_lin, A_lin, N_LINEAR), ("angular", p_ang, A_ang, N_ANGULAR)):
        if true is None:
            continue
        true = np.asarray(true)
        acc = [(p == t).mean() for p, t in zip(pred, true)]
        f1 = [f1_score(t, p, labels=np.arange(n), average="macro", zero_division=0) for p, t in zip(pred, true)]
        out[f"{name}_accuracy"] = float(np.mean(acc))
        out[f"{name}_f1"] = float(np.mean(f1))
    return out


def train_local_policy(dataset: BcDataset, policy: LocalPolicy | None = None, **params):
    """Fit a policy on ``dataset.train`` and report held-out sequence metrics."""
    policy = LocalPolicy(**params) if policy is None else policy
    U, A_lin, A_ang = BcDataset.stack(dataset.train)
    policy.fit(U, A_lin, A_ang)
    metrics = {}
    if dataset.test:
        metrics = sequence_metrics(policy, *BcDataset.stack(dataset.test))
    return policy, metrics


# inference in the loop


def policy_step(policy: LocalPolicy, u, h_ang, h_lin):
    """One control decision: ``(command, (logits_lin, logits_ang), (h_ang', h_lin'))``."""
    check_is_fitted(policy, "cell_ang_")
    u = np.asarray(u, dtype=float)
    h_ang = np.asarray(h_ang, dtype=float)
    h_lin = np.asarray(h_lin, dtype=float)
    if u.shape != (policy.d_u_,) or h_ang.shape != (policy.hidden_size,) or h_lin.shape != h_ang.shape:
        raise ValueError(f"expected u ({policy.d_u_},) and hiddens ({policy.hidden_size},)")
    ll, la, ha, hl, _ = policy.step(u, h_ang, h_lin)
    cmd = decode(int(np.argmax(ll)), int(np.argmax(la)))
    return cmd, (ll, la), (ha, hl)


@dataclass
class SegmentResult:
    poses: list
    commands: list
    contacts: list

    @property
    def contact(self) -> bool:
        return any(self.contacts)

    @property
    def final_pose(self) -> Pose:
        return self.poses[-1]


def run_local_segment(scene: Scene, pose: Pose, policy: LocalPolicy, fx_loc, fx_pass,
                      duration: float = 5.0, domain: DomainParams = SIM, rng=None) -> SegmentResult:
    """Run the policy in closed loop for ``duration`` seconds from fresh hidden states."""
    rng = np.random.default_rng() if rng is None else rng
    n = int(round(duration / DT))
    h_ang, h_lin = policy.zero_state()
    poses, commands, contacts = [pose], [], []
    for _ in range(n):
        obs = observe(scene, pose, domain, rng)
        u = embed_observations(obs, fx_loc, fx_pass)[0]
        cmd, _, (h_ang, h_lin) = policy_step(policy, u, h_ang, h_lin)
        pose, contact = step(scene, pose, cmd)
        poses.append(pose)
        commands.append(cmd)
        contacts.append(contact)
    return SegmentResult(poses, commands, contacts)
