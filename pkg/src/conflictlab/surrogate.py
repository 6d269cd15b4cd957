"""Behavioral-cloning policy ensembles, dynamics ensembles, and their
disagreement-based epistemic uncertainties, trained purely from the
marginal datasets.

Every ensemble member differs only by initialization seed and data
shuffling; the ensemble mean is the arithmetic member mean and the
uncertainty is the mean squared member deviation from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .datafiles import MarginalDataset
from .encoding import TrajectoryLayout, encode_state_features, encode_trajectory
from .netsim import NetworkState, SimConfig
from .scenarios import action_kinds

POLICY_HIDDEN = (64, 64)
DYNAMICS_HIDDEN = (128, 128)
N_MEMBERS = 5
STD_FLOOR = 1e-3


class QueryCounter:
    """Forward-equivalent surrogate query accounting (one unit = one model
    query at one trajectory timestep; a backward pass costs two units)."""

    def __init__(self):
        self.units = 0.0

    def add_forward(self, rows: int):
        self.units += rows

    def add_backward(self, rows: int):
        self.units += 2.0 * rows

    def reset(self):
        self.units = 0.0


QUERIES = QueryCounter()


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(x: np.ndarray) -> "Normalizer":
        std = x.std(axis=0)
        # (Near-)constant features carry no signal; unit scale keeps them
        # from exploding off-manifold queries instead of amplifying them.
        std = np.where(std < STD_FLOOR, 1.0, std)
        return Normalizer(x.mean(axis=0), std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def _episode_split(n_episodes: int, per_episode: int, val_every: int = 10):
    """Train/val row indices split on episode boundaries (no leakage);
    every `val_every`-th episode goes to validation, so pooled datasets
    contribute evenly."""
    tr_idx, va_idx = [], []
    for ep in range(n_episodes):
        rows = range(ep * per_episode, (ep + 1) * per_episode)
        (va_idx if ep % val_every == 0 else tr_idx).extend(rows)
    return np.asarray(tr_idx, dtype=int), np.asarray(va_idx, dtype=int)


def dataset_arrays(data: MarginalDataset, layout: TrajectoryLayout):
    """Transition table (s_t, e_t, a_A, a_B, s_{t+1}) in encoded features.

    Row features come from the trajectory encoding; the next-state feature
    vector is encoded directly from the stored state (including s_T, which
    the row encoding drops).
    """
    cfg = data.cfg
    sl = layout.slices
    st_idx = layout.state_indices()
    rows_all, next_all = [], []
    for traj in data.trajectories:
        rows = encode_trajectory(traj, cfg, layout)
        rows_all.append(rows)
        nxt = np.stack(
            [encode_state_features(traj.states[t + 1], cfg) for t in range(traj.horizon)]
        )
        next_all.append(nxt)
    rows = np.concatenate(rows_all)
    return {
        "state": rows[:, st_idx],
        "exo": rows[:, sl["heading"]],
        "act_a": rows[:, sl["act_a"]],
        "act_b": rows[:, sl["act_b"]],
        "next_state": np.concatenate(next_all),
        "per_episode": data.trajectories[0].horizon,
        "n_episodes": data.n_episodes,
    }


def _action_targets(data: MarginalDataset, role: str) -> np.ndarray:
    """Per-head category indices of the named role's recorded actions."""
    cfg = data.cfg
    kind = action_kinds(data.scenario)[0 if role == "A" else 1]
    cats = []
    for traj in data.trajectories:
        for a in traj.actions:
            vec = np.asarray(a.a_A if role == "A" else a.a_B, dtype=int)
            if kind == "assoc":
                cats.append(np.where(vec == -1, cfg.n_bs, vec))
            else:
                cats.append(vec)
    return np.stack(cats)


def _train_member(net: diffnet.Mlp, loss_fn, n: int, rng,
                  max_epochs: int, patience: int, batch: int, lr: float):
    """Generic minibatch loop with plateau early stopping on the val loss."""
    opt = diffnet.Adam(net.params(), lr=lr)
    best, stall = np.inf, 0
    for _ in range(max_epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i : i + batch]
            _, grads = loss_fn(net, idx, backward=True)
            opt.step(grads)
        val, _ = loss_fn(net, None, backward=False)
        if val < best - 1e-4:
            best, stall = val, 0
        else:
            stall += 1
            if stall >= patience:
                break
    return best


# ---------------------------------------------------------------------------
# Policy ensembles
# ---------------------------------------------------------------------------

@dataclass
class PolicyEnsemble:
    members: list
    norm: Normalizer
    n_heads: int
    n_cats: int
    role: str
    scenario: str
    action_kind: str
    cfg: SimConfig
    val_accuracy: float = float("nan")
    val_loss: float = float("nan")

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _check(self):
        if not self.members:
            raise ValueError("ensemble has no trained members")

    def member_probs(self, feats: np.ndarray) -> np.ndarray:
        """(M, B, heads, cats) softmax action distributions."""
        self._check()
        x = self.norm.apply(np.atleast_2d(feats))
        QUERIES.add_forward(x.shape[0])
        out = []
        for m in self.members:
            logits = m.forward(x).reshape(x.shape[0], self.n_heads, self.n_cats)
            out.append(diffnet.softmax(logits))
        return np.stack(out)

    def mean_probs(self, feats: np.ndarray) -> np.ndarray:
        return self.member_probs(feats).mean(axis=0)

    def mean_action_probs(self, s: NetworkState) -> np.ndarray:
        """(heads, cats) mean distribution at a hard simulator state."""
        return self.mean_probs(encode_state_features(s, self.cfg)[None, :])[0]

    def uncertainty(self, feats: np.ndarray) -> np.ndarray:
        """U_pi: mean squared member deviation from the ensemble mean,
        summed over all action blocks. Zero iff members agree exactly."""
        probs = self.member_probs(feats)
        dev = probs - probs.mean(axis=0, keepdims=True)
        return (dev**2).sum(axis=(2, 3)).mean(axis=0)

    # -- gradient interface (used by the guidance energies) ------------------

    def probs_cached(self, feats: np.ndarray, temp: float = 1.0):
        """Per-member distributions with an optional softening temperature
        (guidance queries use temp > 1 so gradients survive away from the
        cloned policies' hard decision boundaries)."""
        self._check()
        x = self.norm.apply(np.atleast_2d(feats))
        QUERIES.add_forward(x.shape[0])
        probs, caches = [], []
        for m in self.members:
            logits, cache = m.forward_cached(x)
            probs.append(diffnet.softmax(
                logits.reshape(x.shape[0], self.n_heads, self.n_cats) / temp))
            caches.append(cache)
        return np.stack(probs), caches

    def backward_input(self, probs: np.ndarray, caches, grad_probs: np.ndarray,
                       temp: float = 1.0) -> np.ndarray:
        """VJP from per-member prob gradients (M, B, heads, cats) back to the
        unnormalized input features; `temp` must match the forward call."""
        b = probs.shape[1]
        QUERIES.add_backward(b)
        g_x = 0.0
        for i, m in enumerate(self.members):
            p, gp = probs[i], grad_probs[i]
            g_logits = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / temp
            _, gx = m.backward(caches[i], g_logits.reshape(b, -1))
            g_x = g_x + gx
        return g_x / self.norm.std

    def checkpoint_arrays(self):
        arrays = {"norm_mean": self.norm.mean, "norm_std": self.norm.std}
        for i, m in enumerate(self.members):
            for j, p in enumerate(m.params()):
                arrays[f"member{i}_p{j}"] = p
        meta = {
            "sizes": self.members[0].sizes,
            "n_members": self.n_members,
            "n_heads": self.n_heads,
            "n_cats": self.n_cats,
            "role": self.role,
            "scenario": self.scenario,
            "action_kind": self.action_kind,
            "val_accuracy": self.val_accuracy,
            "val_loss": self.val_loss,
        }
        return arrays, meta

    @staticmethod
    def from_checkpoint(arrays, meta, cfg: SimConfig) -> "PolicyEnsemble":
        members = []
        for i in range(meta["n_members"]):
            net = diffnet.Mlp(meta["sizes"])
            for j, p in enumerate(net.params()):
                p[...] = arrays[f"member{i}_p{j}"]
            members.append(net)
        return PolicyEnsemble(
            members,
            Normalizer(arrays["norm_mean"], arrays["norm_std"]),
            meta["n_heads"],
            meta["n_cats"],
            meta["role"],
            meta["scenario"],
            meta["action_kind"],
            cfg,
            meta["val_accuracy"],
            meta["val_loss"],
        )


def policy_uncertainty(ens: PolicyEnsemble, feats: np.ndarray) -> np.ndarray:
    return ens.uncertainty(feats)


def train_policy_ensemble(data: MarginalDataset, role: str, layout: TrajectoryLayout,
                          n_members: int = N_MEMBERS, seed: int = 0,
                          max_epochs: int = 200, patience: int = 10,
                          batch: int = 256, lr: float = 1e-3) -> PolicyEnsemble:
    """Behavioral cloning of the named role from its marginal dataset."""
    if data.n_episodes == 0:
        raise ValueError("empty dataset")
    if role != data.active_role:
        raise ValueError(
            f"role {role!r} does not match dataset provenance {data.tag}"
        )
    cfg = data.cfg
    kind = action_kinds(data.scenario)[0 if role == "A" else 1]
    n_heads = cfg.n_ue if kind == "assoc" else cfg.n_bs
    n_cats = cfg.n_bs + 1 if kind == "assoc" else 3

    arrays = dataset_arrays(data, layout)
    x = arrays["state"]
    y = _action_targets(data, role)
    tr, va = _episode_split(arrays["n_episodes"], arrays["per_episode"])
    if len(va) == 0 or len(tr) == 0:   # degenerate single-episode input
        tr = va = np.arange(x.shape[0])
    norm = Normalizer.fit(x[tr])
    xn_tr, y_tr = norm.apply(x[tr]), y[tr]
    xn_va, y_va = norm.apply(x[va]), y[va]

    def loss_fn(net, idx, backward):
        xi = xn_tr[idx] if idx is not None else xn_va
        yi = (y_tr[idx] if idx is not None else y_va).reshape(-1)
        if backward:
            logits, cache = net.forward_cached(xi)
            loss, g = diffnet.softmax_cross_entropy(
                logits.reshape(-1, n_cats), yi
            )
            grads, _ = net.backward(cache, g.reshape(xi.shape[0], -1))
            return loss, grads
        logits = net.forward(xi)
        loss, _ = diffnet.softmax_cross_entropy(logits.reshape(-1, n_cats), yi)
        return loss, None

    members, val_losses = [], []
    for i in range(n_members):
        rng = np.random.default_rng((seed, role == "B", i))
        net = diffnet.Mlp([x.shape[1], *POLICY_HIDDEN, n_heads * n_cats],
                          activation="tanh", rng=rng)
        val_losses.append(
            _train_member(net, loss_fn, xn_tr.shape[0], rng, max_epochs, patience, batch, lr)
        )
        members.append(net)

    ens = PolicyEnsemble(members, norm, n_heads, n_cats, role, data.scenario, kind, cfg)
    pred = ens.mean_probs(x[va]).argmax(axis=-1)
    ens.val_accuracy = float((pred == y_va).mean())
    ens.val_loss = float(np.mean(val_losses))
    return ens


# ---------------------------------------------------------------------------
# Dynamics ensembles
# ---------------------------------------------------------------------------

@dataclass
class DynamicsEnsemble:
    members: list
    norm: Normalizer
    layout_meta: dict            # feature geometry: widths and block offsets
    scenario: str
    cfg: SimConfig
    val_metrics: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _check(self):
        if not self.members:
            raise ValueError("ensemble has no trained members")

    # Output layout matches the state feature block: [pos | assoc logits |
    # power logits | kpi]; discrete logits are squashed to +-1 probabilities
    # when assembling the predicted feature vector.

    def _assemble(self, raw: np.ndarray) -> np.ndarray:
        g = self.layout_meta
        n, m = g["n_ue"], g["n_bs"]
        c = m + 1
        pos = raw[:, : 2 * n]
        a_logits = raw[:, 2 * n : 2 * n + c * n].reshape(-1, n, c)
        p_logits = raw[:, 2 * n + c * n : 2 * n + c * n + 3 * m].reshape(-1, m, 3)
        kpi = raw[:, 2 * n + c * n + 3 * m :]
        return np.concatenate(
            [
                pos,
                (2.0 * diffnet.softmax(a_logits) - 1.0).reshape(raw.shape[0], -1),
                (2.0 * diffnet.softmax(p_logits) - 1.0).reshape(raw.shape[0], -1),
                kpi,
            ],
            axis=1,
        )

    def member_predictions(self, inputs: np.ndarray) -> np.ndarray:
        """(M, B, state_width) predicted next-state feature vectors."""
        self._check()
        x = self.norm.apply(np.atleast_2d(inputs))
        QUERIES.add_forward(x.shape[0])
        return np.stack([self._assemble(m.forward(x)) for m in self.members])

    def mean_prediction(self, inputs: np.ndarray) -> np.ndarray:
        return self.member_predictions(inputs).mean(axis=0)

    def uncertainty(self, inputs: np.ndarray) -> np.ndarray:
        preds = self.member_predictions(inputs)
        dev = preds - preds.mean(axis=0, keepdims=True)
        return (dev**2).sum(axis=2).mean(axis=0)

    # -- gradient interface ---------------------------------------------------

    def predictions_cached(self, inputs: np.ndarray):
        self._check()
        x = self.norm.apply(np.atleast_2d(inputs))
        QUERIES.add_forward(x.shape[0])
        preds, raws, caches = [], [], []
        for m in self.members:
            raw, cache = m.forward_cached(x)
            preds.append(self._assemble(raw))
            raws.append(raw)
            caches.append(cache)
        return np.stack(preds), raws, caches

    def backward_input(self, raws, caches, grad_preds: np.ndarray) -> np.ndarray:
        """VJP from per-member prediction-space gradients (M, B, width) back
        to the unnormalized inputs."""
        g = self.layout_meta
        n, m_bs = g["n_ue"], g["n_bs"]
        c = m_bs + 1
        b = grad_preds.shape[1]
        QUERIES.add_backward(b)
        g_x = 0.0
        for i, mem in enumerate(self.members):
            gp = grad_preds[i]
            raw = raws[i]
            g_raw = np.empty_like(raw)
            g_raw[:, : 2 * n] = gp[:, : 2 * n]
            for lo, items, cats in (
                (2 * n, n, c),
                (2 * n + c * n, m_bs, 3),
            ):
                span = items * cats
                probs = diffnet.softmax(raw[:, lo : lo + span].reshape(b, items, cats))
                gpp = 2.0 * gp[:, lo : lo + span].reshape(b, items, cats)
                g_logits = probs * (gpp - (gpp * probs).sum(axis=-1, keepdims=True))
                g_raw[:, lo : lo + span] = g_logits.reshape(b, span)
            tail = 2 * n + c * n + 3 * m_bs
            g_raw[:, tail:] = gp[:, tail:]
            _, gx = mem.backward(caches[i], g_raw)
            g_x = g_x + gx
        return g_x / self.norm.std

    def checkpoint_arrays(self):
        arrays = {"norm_mean": self.norm.mean, "norm_std": self.norm.std}
        for i, m in enumerate(self.members):
            for j, p in enumerate(m.params()):
                arrays[f"member{i}_p{j}"] = p
        meta = {
            "sizes": self.members[0].sizes,
            "n_members": self.n_members,
            "layout_meta": self.layout_meta,
            "scenario": self.scenario,
            "val_metrics": self.val_metrics,
        }
        return arrays, meta

    @staticmethod
    def from_checkpoint(arrays, meta, cfg: SimConfig) -> "DynamicsEnsemble":
        members = []
        for i in range(meta["n_members"]):
            net = diffnet.Mlp(meta["sizes"])
            for j, p in enumerate(net.params()):
                p[...] = arrays[f"member{i}_p{j}"]
            members.append(net)
        return DynamicsEnsemble(
            members,
            Normalizer(arrays["norm_mean"], arrays["norm_std"]),
            meta["layout_meta"],
            meta["scenario"],
            cfg,
            meta["val_metrics"],
        )


def dynamics_uncertainty(ens: DynamicsEnsemble, inputs: np.ndarray) -> np.ndarray:
    return ens.uncertainty(inputs)


def train_dynamics_ensemble(datasets: list[MarginalDataset], layout: TrajectoryLayout,
                            n_members: int = N_MEMBERS, seed: int = 0,
                            max_epochs: int = 200, patience: int = 10,
                            batch: int = 256, lr: float = 1e-3) -> DynamicsEnsemble:
    """Joint-dynamics ensemble trained on the pooled marginal transitions:
    MSE on continuous features, cross-entropy on the discrete blocks."""
    if not datasets or all(d.n_episodes == 0 for d in datasets):
        raise ValueError("empty dataset pool")
    cfg = datasets[0].cfg
    n, m = cfg.n_ue, cfg.n_bs
    c = m + 1

    parts = [dataset_arrays(d, layout) for d in datasets]
    x = np.concatenate(
        [np.concatenate([p["state"], p["exo"], p["act_a"], p["act_b"]], axis=1) for p in parts]
    )
    y = np.concatenate([p["next_state"] for p in parts])
    n_eps = sum(p["n_episodes"] for p in parts)
    per_ep = parts[0]["per_episode"]
    tr, va = _episode_split(n_eps, per_ep)

    # Discrete targets from the +-1 one-hot blocks of the next state.
    a_t = y[:, 2 * n : 2 * n + c * n].reshape(-1, n, c).argmax(axis=2)
    p_t = y[:, 2 * n + c * n : 2 * n + c * n + 3 * m].reshape(-1, m, 3).argmax(axis=2)
    cont_idx = np.r_[np.arange(2 * n), np.arange(2 * n + c * n + 3 * m, y.shape[1])]

    norm = Normalizer.fit(x[tr])
    xn_tr, xn_va = norm.apply(x[tr]), norm.apply(x[va])

    def loss_fn(net, idx, backward):
        sel = tr[idx] if idx is not None else va
        xi = xn_tr[idx] if idx is not None else xn_va
        raw = None
        if backward:
            raw, cache = net.forward_cached(xi)
        else:
            raw = net.forward(xi)
        g_raw = np.zeros_like(raw)
        loss_c, g_c = diffnet.mse(raw[:, cont_idx], y[sel][:, cont_idx])
        g_raw[:, cont_idx] = g_c
        loss = loss_c
        for lo, items, cats, tgt in (
            (2 * n, n, c, a_t[sel]),
            (2 * n + c * n, m, 3, p_t[sel]),
        ):
            span = items * cats
            l_d, g_d = diffnet.softmax_cross_entropy(
                raw[:, lo : lo + span].reshape(-1, cats), tgt.reshape(-1)
            )
            loss += l_d
            g_raw[:, lo : lo + span] = g_d.reshape(xi.shape[0], span)
        if backward:
            grads, _ = net.backward(cache, g_raw)
            return loss, grads
        return loss, None

    members = []
    for i in range(n_members):
        rng = np.random.default_rng((seed, 99, i))
        net = diffnet.Mlp([x.shape[1], *DYNAMICS_HIDDEN, y.shape[1]],
                          activation="tanh", rng=rng)
        _train_member(net, loss_fn, xn_tr.shape[0], rng, max_epochs, patience, batch, lr)
        members.append(net)

    meta = {"n_ue": n, "n_bs": m, "in_width": x.shape[1], "out_width": y.shape[1]}
    ens = DynamicsEnsemble(members, norm, meta, datasets[0].scenario, cfg)

    pred = ens.mean_prediction(x[va])
    pos_rmse = float(np.sqrt(np.mean((pred[:, : 2 * n] - y[va][:, : 2 * n]) ** 2)))
    vec_mse = float(np.mean(np.sum((pred - y[va]) ** 2, axis=1)))
    a_acc = float(
        (pred[:, 2 * n : 2 * n + c * n].reshape(-1, n, c).argmax(axis=2) == a_t[va]).mean()
    )
    p_acc = float(
        (pred[:, 2 * n + c * n : 2 * n + c * n + 3 * m].reshape(-1, m, 3).argmax(axis=2)
         == p_t[va]).mean()
    )
    ens.val_metrics = {
        "pos_rmse": pos_rmse,
        "vec_mse": vec_mse,
        "assoc_acc": a_acc,
        "power_acc": p_acc,
    }
    return ens


# ---------------------------------------------------------------------------
# Calibration constants for the theory bounds (assumption A4 estimator)
# ---------------------------------------------------------------------------

def calibration_betas(pol_a: PolicyEnsemble, pol_b: PolicyEnsemble,
                      dyn: DynamicsEnsemble, datasets: list[MarginalDataset],
                      layout: TrajectoryLayout, quantile: float = 0.95) -> dict:
    """beta = q-th percentile of ||mean-prediction error|| / sqrt(U) over the
    held-out split, pooled over both policies (resp. the dynamics)."""
    ratios_pi, ratios_t = [], []
    for data in datasets:
        arrays = dataset_arrays(data, layout)
        _, va = _episode_split(arrays["n_episodes"], arrays["per_episode"])
        ens = pol_a if data.active_role == "A" else pol_b
        feats = arrays["state"][va]
        tgt = _action_targets(data, data.active_role)[va]
        onehot = np.zeros((tgt.shape[0], ens.n_heads, ens.n_cats))
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=2)
        err = np.linalg.norm(
            (ens.mean_probs(feats) - onehot).reshape(tgt.shape[0], -1), axis=1
        )
        u = np.sqrt(np.maximum(ens.uncertainty(feats), 1e-12))
        ratios_pi.extend(err / u)

        x = np.concatenate(
            [arrays["state"], arrays["exo"], arrays["act_a"], arrays["act_b"]], axis=1
        )[va]
        err_t = np.linalg.norm(dyn.mean_prediction(x) - arrays["next_state"][va], axis=1)
        u_t = np.sqrt(np.maximum(dyn.uncertainty(x), 1e-12))
        ratios_t.extend(err_t / u_t)
    return {
        "beta_pi": float(np.quantile(ratios_pi, quantile)),
        "beta_T": float(np.quantile(ratios_t, quantile)),
    }
