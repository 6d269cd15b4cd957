"""Fixed-shape continuous encoding of trajectories and states.

A trajectory maps to a (T, D) tensor of [-1, 1] features with the layout
[positions | heading sin-cos | association one-hot | power one-hot |
action-A | action-B | KPIs]; one-hot {0,1} entries are affinely mapped to
{-1, +1}. The mapping is exactly invertible for hard trajectories, which
keeps projection and verification exact. The same feature blocks (minus
headings and actions) form the surrogate models' state inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netsim import (
    DISCONNECT,
    Condition,
    Exogenous,
    NetworkState,
    SimConfig,
    Trajectory,
    pathloss,
)
from .scenarios import action_kinds

SNR_CLIP = (-20.0, 60.0)   # dB; the lower edge doubles as the disconnect sentinel
UTIL_CLIP = (0.0, 20.0)    # bits/s/Hz

# Scale for mapping +-1 one-hot block scores to probabilities; saturated
# enough that hard blocks recover hard metrics within the relaxed-metric
# tolerance.
BLOCK_SOFTMAX_SCALE = 6.0

ENCODING_VERSION = 1


def _norm_snr(snr):
    lo, hi = SNR_CLIP
    return 2.0 * (np.clip(snr, lo, hi) - lo) / (hi - lo) - 1.0


def _denorm_snr(x):
    lo, hi = SNR_CLIP
    return lo + (np.asarray(x) + 1.0) * (hi - lo) / 2.0


def _norm_util(util):
    lo, hi = UTIL_CLIP
    return 2.0 * (np.clip(util, lo, hi) - lo) / (hi - lo) - 1.0


@dataclass(frozen=True)
class TrajectoryLayout:
    """Slice map of one encoded trajectory row for a given scenario."""

    scenario: str
    n_ue: int
    n_bs: int
    horizon: int

    def _blocks(self):
        n, m = self.n_ue, self.n_bs
        c = m + 1  # association categories: stations then disconnect
        kind_a, kind_b = action_kinds(self.scenario)
        sizes = [
            ("pos", 2 * n),
            ("heading", 2 * n),
            ("assoc", c * n),
            ("power", 3 * m),
            ("act_a", c * n if kind_a == "assoc" else 3 * m),
            ("act_b", c * n if kind_b == "assoc" else 3 * m),
            ("kpi_load", m),
            ("kpi_snr", n),
            ("kpi_util", n),
        ]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        return out, start

    @property
    def slices(self) -> dict:
        return self._blocks()[0]

    @property
    def width(self) -> int:
        return self._blocks()[1]

    @property
    def n_assoc_cats(self) -> int:
        return self.n_bs + 1

    def state_indices(self) -> np.ndarray:
        """Row indices of the state feature block (everything except the
        heading and action blocks), in order pos|assoc|power|kpis."""
        s = self.slices
        idx = []
        for name in ("pos", "assoc", "power", "kpi_load", "kpi_snr", "kpi_util"):
            idx.extend(range(s[name].start, s[name].stop))
        return np.asarray(idx, dtype=int)

    @property
    def state_width(self) -> int:
        return self.state_indices().size

    def manifest(self) -> dict:
        blocks, width = self._blocks()
        return {
            "version": ENCODING_VERSION,
            "scenario": self.scenario,
            "n_ue": self.n_ue,
            "n_bs": self.n_bs,
            "horizon": self.horizon,
            "width": width,
            "blocks": {k: [v.start, v.stop] for k, v in blocks.items()},
        }


def layout_for(cfg: SimConfig, scenario: str) -> TrajectoryLayout:
    return TrajectoryLayout(scenario, cfg.n_ue, cfg.n_bs, cfg.horizon)


# ---------------------------------------------------------------------------
# Hard encode / decode
# ---------------------------------------------------------------------------

def _onehot_pm1(indices: np.ndarray, n_cats: int) -> np.ndarray:
    out = -np.ones(indices.shape + (n_cats,))
    np.put_along_axis(out, np.asarray(indices)[..., None], 1.0, axis=-1)
    return out


def _assoc_to_cats(assoc: np.ndarray, n_bs: int) -> np.ndarray:
    a = np.asarray(assoc, dtype=int)
    return np.where(a == DISCONNECT, n_bs, a)


def _cats_to_assoc(cats: np.ndarray, n_bs: int) -> np.ndarray:
    c = np.asarray(cats, dtype=int)
    return np.where(c == n_bs, DISCONNECT, c)


def norm_pos(pos_m: np.ndarray, cfg: SimConfig) -> np.ndarray:
    wh = np.asarray(cfg.arena)
    return 2.0 * np.asarray(pos_m) / wh - 1.0


def denorm_pos(pos_n: np.ndarray, cfg: SimConfig) -> np.ndarray:
    wh = np.asarray(cfg.arena)
    return (np.clip(pos_n, -1.0, 1.0) + 1.0) * wh / 2.0


def encode_state_features(s: NetworkState, cfg: SimConfig) -> np.ndarray:
    """State feature block: [pos | assoc one-hot | power one-hot | KPIs]."""
    parts = [
        norm_pos(s.ue_pos, cfg).ravel(),
        _onehot_pm1(_assoc_to_cats(s.assoc, cfg.n_bs), cfg.n_bs + 1).ravel(),
        _onehot_pm1(s.power, 3).ravel(),
        2.0 * s.kpi_load / cfg.n_ue - 1.0,
        _norm_snr(s.kpi_snr),
        _norm_util(s.kpi_util),
    ]
    return np.concatenate(parts)


def _encode_action(action: np.ndarray, kind: str, cfg: SimConfig) -> np.ndarray:
    if kind == "assoc":
        return _onehot_pm1(_assoc_to_cats(action, cfg.n_bs), cfg.n_bs + 1).ravel()
    return _onehot_pm1(np.asarray(action, dtype=int), 3).ravel()


def encode_trajectory(traj: Trajectory, cfg: SimConfig, layout: TrajectoryLayout) -> np.ndarray:
    """Rows t = 0..T-1; the terminal state s_T is not encoded."""
    kind_a, kind_b = action_kinds(layout.scenario)
    sl = layout.slices
    rows = np.zeros((traj.horizon, layout.width))
    for t in range(traj.horizon):
        s = traj.states[t]
        h = traj.exo[t].headings
        rows[t, sl["pos"]] = norm_pos(s.ue_pos, cfg).ravel()
        rows[t, sl["heading"]] = np.stack([np.cos(h), np.sin(h)], axis=1).ravel()
        rows[t, sl["assoc"]] = _onehot_pm1(_assoc_to_cats(s.assoc, cfg.n_bs), cfg.n_bs + 1).ravel()
        rows[t, sl["power"]] = _onehot_pm1(s.power, 3).ravel()
        rows[t, sl["act_a"]] = _encode_action(traj.actions[t].a_A, kind_a, cfg)
        rows[t, sl["act_b"]] = _encode_action(traj.actions[t].a_B, kind_b, cfg)
        rows[t, sl["kpi_load"]] = 2.0 * s.kpi_load / cfg.n_ue - 1.0
        rows[t, sl["kpi_snr"]] = _norm_snr(s.kpi_snr)
        rows[t, sl["kpi_util"]] = _norm_util(s.kpi_util)
    return rows


def _decode_block_argmax(block: np.ndarray, n_items: int, n_cats: int) -> np.ndarray:
    return np.argmax(block.reshape(n_items, n_cats), axis=1)


def _decode_action(row: np.ndarray, sl: slice, kind: str, cfg: SimConfig) -> np.ndarray:
    if kind == "assoc":
        cats = _decode_block_argmax(row[sl], cfg.n_ue, cfg.n_bs + 1)
        return _cats_to_assoc(cats, cfg.n_bs)
    return _decode_block_argmax(row[sl], cfg.n_bs, 3)


def decode_state(row: np.ndarray, cfg: SimConfig, layout: TrajectoryLayout) -> NetworkState:
    sl = layout.slices
    pos = denorm_pos(row[sl["pos"]].reshape(cfg.n_ue, 2), cfg)
    assoc = _cats_to_assoc(
        _decode_block_argmax(row[sl["assoc"]], cfg.n_ue, cfg.n_bs + 1), cfg.n_bs
    )
    power = _decode_block_argmax(row[sl["power"]], cfg.n_bs, 3)
    return NetworkState.make(pos, assoc, power, cfg)


def decode_headings(rows: np.ndarray, layout: TrajectoryLayout) -> np.ndarray:
    sl = layout.slices
    hs = rows[:, sl["heading"]].reshape(rows.shape[0], layout.n_ue, 2)
    return np.mod(np.arctan2(hs[..., 1], hs[..., 0]), 2.0 * math.pi)


def decode_condition(rows: np.ndarray, cfg: SimConfig, layout: TrajectoryLayout) -> Condition:
    """u = (s0, e_{0:T-1}) from an encoded (projected) trajectory."""
    s0 = decode_state(rows[0], cfg, layout)
    headings = decode_headings(rows, layout)
    return Condition.make(s0, [Exogenous.make(h) for h in headings])


def decode_steps(rows: np.ndarray, cfg: SimConfig, layout: TrajectoryLayout):
    """Hard (state, a_A, a_B) per generated row, for conflict scoring."""
    kind_a, kind_b = action_kinds(layout.scenario)
    sl = layout.slices
    out = []
    for t in range(rows.shape[0]):
        out.append(
            (
                decode_state(rows[t], cfg, layout),
                _decode_action(rows[t], sl["act_a"], kind_a, cfg),
                _decode_action(rows[t], sl["act_b"], kind_b, cfg),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Projection onto the hard encoding
# ---------------------------------------------------------------------------

def _snap_blocks(x: np.ndarray, n_items: int, n_cats: int) -> np.ndarray:
    b = x.reshape(x.shape[:-1] + (n_items, n_cats))
    out = -np.ones_like(b)
    idx = np.argmax(b, axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out.reshape(x.shape)


def project(rows: np.ndarray, layout: TrajectoryLayout) -> np.ndarray:
    """Snap one-hot blocks to their argmax, clamp positions and KPI features
    to the encoding range, renormalize heading pairs. Idempotent."""
    sl = layout.slices
    n, m, c = layout.n_ue, layout.n_bs, layout.n_assoc_cats
    kind_a, kind_b = action_kinds(layout.scenario)
    out = np.array(rows, dtype=float, copy=True)
    out[..., sl["pos"]] = np.clip(out[..., sl["pos"]], -1.0, 1.0)
    hs = out[..., sl["heading"]]
    pairs = hs.reshape(hs.shape[:-1] + (n, 2))
    norms = np.linalg.norm(pairs, axis=-1, keepdims=True)
    unit = np.zeros_like(pairs)
    unit[..., 0] = 1.0                      # zero-length pair falls back to heading 0
    pairs = np.where(norms > 1e-9, pairs / np.maximum(norms, 1e-9), unit)
    out[..., sl["heading"]] = pairs.reshape(hs.shape)
    out[..., sl["assoc"]] = _snap_blocks(out[..., sl["assoc"]], n, c)
    out[..., sl["power"]] = _snap_blocks(out[..., sl["power"]], m, 3)
    for name, kind in (("act_a", kind_a), ("act_b", kind_b)):
        items, cats = (n, c) if kind == "assoc" else (m, 3)
        out[..., sl[name]] = _snap_blocks(out[..., sl[name]], items, cats)
    for name in ("kpi_load", "kpi_snr", "kpi_util"):
        out[..., sl[name]] = np.clip(out[..., sl[name]], -1.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Block scores -> probabilities (relaxed decode used by the guidance energies)
# ---------------------------------------------------------------------------

def block_probs(scores: np.ndarray, n_items: int, n_cats: int) -> np.ndarray:
    """Map +-1 block scores to per-item categorical probabilities."""
    z = BLOCK_SOFTMAX_SCALE * scores.reshape(scores.shape[:-1] + (n_items, n_cats))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def block_probs_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """VJP of block_probs back to the raw scores."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    g = BLOCK_SOFTMAX_SCALE * probs * (grad_probs - inner)
    return g.reshape(g.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# Differentiable state features from relaxed (s0) blocks
# ---------------------------------------------------------------------------

def _util_of_snr(snr_db):
    return np.log2(1.0 + np.power(10.0, np.asarray(snr_db) / 10.0))


def soft_state_features(pos_n: np.ndarray, assoc_probs: np.ndarray,
                        power_probs: np.ndarray, cfg: SimConfig,
                        with_grads: bool = False):
    """State feature block from relaxed association/power distributions.

    pos_n: (B, n_ue, 2) normalized positions; assoc_probs: (B, n_ue, n_bs+1)
    with the disconnect category last; power_probs: (B, n_bs, 3). KPI
    features are computed in expectation, matching the hard encoding exactly
    at one-hot inputs. With `with_grads`, also returns the nonzero partial
    derivatives of the snr/util features (positions and probabilities enter
    the other blocks linearly).
    """
    b, n, m = pos_n.shape[0], cfg.n_ue, cfg.n_bs
    wh = np.asarray(cfg.arena)
    raw = (pos_n + 1.0) * wh / 2.0                       # (B, n, 2)
    diff = raw[:, :, None, :] - cfg.bs_xy[None, None, :, :]
    dist = np.linalg.norm(diff, axis=-1)                 # (B, n, m)
    clamped = np.maximum(dist, 1.0)
    pl = pathloss(clamped, cfg)
    p_dbm = np.asarray(cfg.power_levels)
    snr_ubl = p_dbm[None, None, None, :] - pl[..., None] - cfg.noise_floor  # (B,n,m,3)

    lo, hi = SNR_CLIP
    snr_c = np.clip(snr_ubl, lo, hi)
    util_c = np.clip(_util_of_snr(snr_ubl), *UTIL_CLIP)

    pa_st = assoc_probs[..., :m]                         # station categories
    pa_disc = assoc_probs[..., m]
    pp = power_probs                                     # (B, m, 3)

    snr_ub = np.einsum("bml,bnml->bnm", pp, snr_c)       # E over levels
    util_ub = np.einsum("bml,bnml->bnm", pp, util_c)
    e_snr = np.einsum("bnm,bnm->bn", pa_st, snr_ub) + pa_disc * lo
    e_util = np.einsum("bnm,bnm->bn", pa_st, util_ub)    # disconnect utility is 0

    load = pa_st.sum(axis=1)                             # (B, m)
    feats = np.concatenate(
        [
            pos_n.reshape(b, -1),
            (2.0 * assoc_probs - 1.0).reshape(b, -1),
            (2.0 * power_probs - 1.0).reshape(b, -1),
            2.0 * load / n - 1.0,
            2.0 * (e_snr - lo) / (hi - lo) - 1.0,
            2.0 * (e_util - UTIL_CLIP[0]) / (UTIL_CLIP[1] - UTIL_CLIP[0]) - 1.0,
        ],
        axis=1,
    )
    if not with_grads:
        return feats

    # Partials of the raw expected snr/util per terminal.
    decade = 44.9 - 6.55 * math.log10(cfg.bs_height)
    inside = (dist >= 1.0)[..., None] & (snr_ubl > lo) & (snr_ubl < hi)  # clip masks per level
    d_pl_d_dist = decade / (clamped * math.log(10.0))          # (B,n,m)
    # d snr_c / d raw position (through every level, weighted by pp and pa)
    d_snr_d_dist = -(inside * d_pl_d_dist[..., None])          # (B,n,m,3)
    util_inside = (_util_of_snr(snr_ubl) > UTIL_CLIP[0]) & (_util_of_snr(snr_ubl) < UTIL_CLIP[1])
    ten = np.power(10.0, snr_ubl / 10.0)
    d_util_d_snr = util_inside * (math.log(10.0) / 10.0) * ten / ((1.0 + ten) * math.log(2.0))
    unit = diff / np.maximum(dist, 1e-12)[..., None]           # (B,n,m,2)
    w_snr = np.einsum("bml,bnml->bnm", pp, d_snr_d_dist)
    w_util = np.einsum("bml,bnml->bnm", pp, d_snr_d_dist * d_util_d_snr)
    scale_raw = wh / 2.0                                       # d raw / d pos_n
    d_esnr_d_posn = np.einsum("bnm,bnm,bnmk->bnk", pa_st, w_snr, unit) * scale_raw
    d_eutil_d_posn = np.einsum("bnm,bnm,bnmk->bnk", pa_st, w_util, unit) * scale_raw

    grads = {
        "d_esnr_d_pos": d_esnr_d_posn,            # (B, n, 2)
        "d_eutil_d_pos": d_eutil_d_posn,
        "d_esnr_d_pa_st": snr_ub,                 # (B, n, m)
        "d_eutil_d_pa_st": util_ub,
        "d_esnr_d_pa_disc": np.full((b, n), lo),
        "d_esnr_d_pp": np.einsum("bnm,bnml->bnml", pa_st, snr_c),   # (B,n,m,3)
        "d_eutil_d_pp": np.einsum("bnm,bnml->bnml", pa_st, util_c),
    }
    return feats, grads


def soft_features_backward(grad_feats: np.ndarray, pos_n, assoc_probs, power_probs,
                           grads: dict, cfg: SimConfig):
    """VJP of soft_state_features: upstream (B, state_width) gradients back
    to (pos_n, assoc_probs, power_probs)."""
    b, n, m = pos_n.shape[0], cfg.n_ue, cfg.n_bs
    c = m + 1
    lo, hi = SNR_CLIP
    i = 0
    g_pos = grad_feats[:, i : i + 2 * n].reshape(b, n, 2).copy(); i += 2 * n
    g_assoc = 2.0 * grad_feats[:, i : i + c * n].reshape(b, n, c); i += c * n
    g_power = 2.0 * grad_feats[:, i : i + 3 * m].reshape(b, m, 3); i += 3 * m
    g_load = grad_feats[:, i : i + m]; i += m
    g_snr = grad_feats[:, i : i + n] * (2.0 / (hi - lo)); i += n
    g_util = grad_feats[:, i : i + n] * (2.0 / (UTIL_CLIP[1] - UTIL_CLIP[0])); i += n

    g_pa = g_assoc.copy()
    g_pa[..., :m] += (2.0 / n) * g_load[:, None, :]
    g_pa[..., :m] += g_snr[..., None] * grads["d_esnr_d_pa_st"]
    g_pa[..., m] += g_snr * grads["d_esnr_d_pa_disc"]
    g_pa[..., :m] += g_util[..., None] * grads["d_eutil_d_pa_st"]

    g_pp = g_power.copy()
    g_pp += np.einsum("bn,bnml->bml", g_snr, grads["d_esnr_d_pp"])
    g_pp += np.einsum("bn,bnml->bml", g_util, grads["d_eutil_d_pp"])

    g_pos += g_snr[..., None] * grads["d_esnr_d_pos"]
    g_pos += g_util[..., None] * grads["d_eutil_d_pos"]
    return g_pos, g_pa, g_pp
