"""The granularity-selective loss, its exact gradients, and the
finite-difference verification oracle.

Gradient layout mirrors the parameter containers: a dict of arrays per
transform parameter plus one array of per-prefix log-temperatures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraspError
from .transforms import (
    NEGATIVE_TYPES,
    STYLE_VIEW,
    VIEW_LEVELS,
    InterfaceContract,
    TransformSpec,
    VariantModel,
    make_model,
)

TERM_NAMES = ("align", "ret", "rank", "inv", "pres", "ortho")


# ---------------------------------------------------------------------------
# Config


def default_retention_weights(contract: InterfaceContract) -> dict[int, dict[str, float]]:
    """alpha_{k,l} = 0.25 * 2^-(gap-1) for each view l coarser than k's view."""
    weights: dict[int, dict[str, float]] = {}
    for k in contract.prefixes:
        g = VIEW_LEVELS.index(contract.view_of[k])
        per = {}
        for li in range(g):
            gap = g - li
            per[VIEW_LEVELS[li]] = 0.25 * 2.0 ** (-(gap - 1))
        if per:
            weights[k] = per
    return weights


@dataclass
class LossConfig:
    lambda_ret: float = 0.5
    lambda_rank: float = 1.0
    lambda_inv: float = 0.5
    lambda_pres: float = 10.0
    lambda_ortho: float = 1.0
    align_weight: float = 1.0
    margins: dict[str, float] = field(default_factory=lambda: {r: 0.1 for r in NEGATIVE_TYPES})
    tolerances: dict[str, float] = field(default_factory=lambda: {r: 0.05 for r in NEGATIVE_TYPES})
    retention_weights: dict[int, dict[str, float]] = field(default_factory=dict)
    align_view_mode: str = "assigned"  # "assigned" aligns each prefix to its view; "g3" aligns all to G3

    def __post_init__(self):
        for name in ("lambda_ret", "lambda_rank", "lambda_inv", "lambda_pres", "lambda_ortho", "align_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise GraspError("CONFIG", f"{name} must be finite and >= 0, got {v}")
        if self.align_view_mode not in ("assigned", "g3"):
            raise GraspError("CONFIG", f"unknown align_view_mode {self.align_view_mode!r}")

    @classmethod
    def default(cls, contract: InterfaceContract, **overrides) -> "LossConfig":
        cfg = cls(retention_weights=default_retention_weights(contract))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def to_json_dict(self) -> dict:
        return {
            "loss_weights": {
                "ret": self.lambda_ret,
                "rank": self.lambda_rank,
                "inv": self.lambda_inv,
                "pres": self.lambda_pres,
                "ortho": self.lambda_ortho,
                "align": self.align_weight,
            },
            "margins": dict(self.margins),
            "tolerances": dict(self.tolerances),
            "retention_weights": {str(k): dict(v) for k, v in self.retention_weights.items()},
            "align_view_mode": self.align_view_mode,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LossConfig":
        lw = d.get("loss_weights", {})
        return cls(
            lambda_ret=float(lw.get("ret", 0.5)),
            lambda_rank=float(lw.get("rank", 1.0)),
            lambda_inv=float(lw.get("inv", 0.5)),
            lambda_pres=float(lw.get("pres", 10.0)),
            lambda_ortho=float(lw.get("ortho", 1.0)),
            align_weight=float(lw.get("align", 1.0)),
            margins={r: float(v) for r, v in d.get("margins", {}).items()} or {r: 0.1 for r in NEGATIVE_TYPES},
            tolerances={r: float(v) for r, v in d.get("tolerances", {}).items()}
            or {r: 0.05 for r in NEGATIVE_TYPES},
            retention_weights={
                int(k): {g: float(w) for g, w in v.items()} for k, v in d.get("retention_weights", {}).items()
            },
            align_view_mode=d.get("align_view_mode", "assigned"),
        )


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    """Aligned row sets for one step; raw (e-space) or transformed (z-space)."""

    images: np.ndarray
    views: dict[str, np.ndarray]
    negatives: dict[str, np.ndarray]

    def __post_init__(self):
        n, d = self.images.shape
        for name, rows in (*self.views.items(), *self.negatives.items()):
            if rows.shape != (n, d):
                raise GraspError("DIM_MISMATCH", f"batch rows for {name!r} have shape {rows.shape}, want {(n, d)}")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    @classmethod
    def from_cache(cls, cache, indices) -> "Batch":
        idx = np.asarray(indices, dtype=np.intp)
        return cls(
            images=cache.images[idx].astype(np.float64),
            views={g: cache.views[g][idx].astype(np.float64) for g in VIEW_LEVELS},
            negatives={r: cache.negatives[r][idx].astype(np.float64) for r in NEGATIVE_TYPES},
        )

    def transformed(self, transform) -> "Batch":
        return Batch(
            images=transform.apply(self.images),
            views={g: transform.apply(v) for g, v in self.views.items()},
            negatives={r: transform.apply(v) for r, v in self.negatives.items()},
        )


# ---------------------------------------------------------------------------
# Differentiable primitives

_NORM_FLOOR = 1e-12


def _unit_prefix(rows: np.ndarray, k: int):
    sl = rows[:, :k]
    norms = np.maximum(np.linalg.norm(sl, axis=1, keepdims=True), _NORM_FLOOR)
    return sl / norms, norms


def _unit_prefix_backprop(d_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray, d_rows: np.ndarray, k: int):
    inner = (d_unit * unit).sum(axis=1, keepdims=True)
    d_rows[:, :k] += (d_unit - inner * unit) / norms


def _logsumexp(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _infonce_value(zi: np.ndarray, zt: np.ndarray, k: int, tau: float) -> float:
    ui, _ = _unit_prefix(zi, k)
    ut, _ = _unit_prefix(zt, k)
    s = (ui @ ut.T) / tau
    n = s.shape[0]
    diag = np.arange(n)
    l_i2t = float(np.mean(_logsumexp(s, 1) - s[diag, diag]))
    l_t2i = float(np.mean(_logsumexp(s, 0) - s[diag, diag]))
    return 0.5 * (l_i2t + l_t2i)


def _infonce_grad(zi: np.ndarray, zt: np.ndarray, k: int, tau: float):
    """Returns (value, d_zi, d_zt, d_log_tau) for the symmetric InfoNCE term."""
    ui, ni = _unit_prefix(zi, k)
    ut, nt = _unit_prefix(zt, k)
    s = (ui @ ut.T) / tau
    n = s.shape[0]
    diag = np.arange(n)
    value = 0.5 * float(np.mean(_logsumexp(s, 1) - s[diag, diag]) + np.mean(_logsumexp(s, 0) - s[diag, diag]))
    p_row = _softmax(s, 1)
    p_col = _softmax(s, 0)
    ds = (p_row + p_col) / (2.0 * n)
    ds[diag, diag] -= 1.0 / n
    d_log_tau = -float((ds * s).sum())  # s = c * exp(-log tau)
    dc = ds / tau
    d_zi = np.zeros_like(zi)
    d_zt = np.zeros_like(zt)
    _unit_prefix_backprop(dc @ ut, ui, ni, d_zi, k)
    _unit_prefix_backprop(dc.T @ ui, ut, nt, d_zt, k)
    return value, d_zi, d_zt, d_log_tau


def _paired_cosine(zi: np.ndarray, zt: np.ndarray, k: int):
    ui, ni = _unit_prefix(zi, k)
    ut, nt = _unit_prefix(zt, k)
    c = np.einsum("ij,ij->i", ui, ut)
    return c, (ui, ni, ut, nt)

def _paired_cosine_backprop(dc: np.ndarray, ctx, d_zi: np.ndarray, d_zt: np.ndarray, k: int):
    ui, ni, ut, nt = ctx
    _unit_prefix_backprop(dc[:, None] * ut, ui, ni, d_zi, k)
    _unit_prefix_backprop(dc[:, None] * ui, ut, nt, d_zt, k)


# ---------------------------------------------------------------------------
# Public per-term losses (values on a transformed batch)


def _temps(contract: InterfaceContract, log_temps: np.ndarray) -> dict[int, float]:
    lt = np.asarray(log_temps, dtype=np.float64)
    if lt.shape != (len(contract.prefixes),):
        raise GraspError("DIM_MISMATCH", f"need {len(contract.prefixes)} log-temperatures, got {lt.shape}")
    return {k: float(np.exp(t)) for k, t in zip(contract.prefixes, lt)}


def loss_align(zbatch: Batch, contract: InterfaceContract, log_temps, align_view_mode: str = "assigned") -> float:
    taus = _temps(contract, log_temps)
    total = 0.0
    for k in contract.prefixes:
        level = "G3" if align_view_mode == "g3" else contract.view_of[k]
        total += _infonce_value(zbatch.images, zbatch.views[level], k, taus[k])
    return total


def loss_retention(zbatch: Batch, contract: InterfaceContract, retention_weights, log_temps) -> float:
    taus = _temps(contract, log_temps)
    total = 0.0
    for k, per in retention_weights.items():
        for level, alpha in per.items():
            if alpha == 0.0:
                continue
            total += alpha * _infonce_value(zbatch.images, zbatch.views[level], k, taus[k])
    return total


def loss_rank(zbatch: Batch, contract: InterfaceContract, margins, enabled_types=None) -> float:
    types = NEGATIVE_TYPES if enabled_types is None else tuple(enabled_types)
    total = 0.0
    for r in types:
        m = margins[r]
        for k in contract.rank_prefixes(r):
            cp, _ = _paired_cosine(zbatch.images, zbatch.views[STYLE_VIEW[r]], k)
            cn, _ = _paired_cosine(zbatch.images, zbatch.negatives[r], k)
            total += float(np.maximum(0.0, m - (cp - cn)).mean())
    return total


def loss_invariance(zbatch: Batch, contract: InterfaceContract, tolerances, enabled_types=None) -> float:
    types = NEGATIVE_TYPES if enabled_types is None else tuple(enabled_types)
    total = 0.0
    for r in types:
        eps = tolerances[r]
        for k in contract.invariance_prefixes(r):
            cp, _ = _paired_cosine(zbatch.images, zbatch.views[STYLE_VIEW[r]], k)
            cn, _ = _paired_cosine(zbatch.images, zbatch.negatives[r], k)
            total += float(np.maximum(0.0, np.abs(cp - cn) - eps).mean())
    return total


def loss_preservation(e_rows: np.ndarray, z_rows: np.ndarray) -> float:
    """Mean squared drift of full-dimensional pairwise cosines."""
    if e_rows.shape != z_rows.shape:
        raise GraspError("DIM_MISMATCH", "raw and transformed row sets must match")
    d = e_rows.shape[1]
    ue, _ = _unit_prefix(np.asarray(e_rows, dtype=np.float64), d)
    uz, _ = _unit_prefix(np.asarray(z_rows, dtype=np.float64), d)
    delta = uz @ uz.T - ue @ ue.T
    return float((delta * delta).mean())


def ortho_penalty(w: np.ndarray) -> float:
    """|| W^T W - I ||_F^2 / D^2 for an unconstrained linear matrix."""
    d = w.shape[0]
    o = w.T @ w - np.eye(d)
    return float((o * o).sum() / (d * d))


# ---------------------------------------------------------------------------
# Full objective with gradients


@dataclass
class Grads:
    """Mirrors the parameter containers: per-name arrays plus log-temperatures."""

    params: dict[str, np.ndarray]
    log_temps: np.ndarray


class _RowSets:
    """Lazily transformed row sets with per-set gradient accumulators."""

    def __init__(self, state, batch: Batch):
        self._state = state
        self._batch = batch
        self._z: dict[str, np.ndarray] = {}
        self._ctx: dict[str, object] = {}
        self._dz: dict[str, np.ndarray] = {}

    def raw(self, name: str) -> np.ndarray:
        if name == "image":
            return self._batch.images
        kind, _, key = name.partition(":")
        return self._batch.views[key] if kind == "view" else self._batch.negatives[key]

    def z(self, name: str) -> np.ndarray:
        if name not in self._z:
            z, ctx = self._state.apply(self.raw(name))
            self._z[name] = z
            self._ctx[name] = ctx
            self._dz[name] = np.zeros_like(z)
        return self._z[name]

    def add_grad(self, name: str, g: np.ndarray) -> None:
        self._dz[name] += g

    def backprop(self) -> None:
        for name, dz in self._dz.items():
            if np.any(dz):
                self._state.vjp(self._ctx[name], dz)


def total_loss_and_gradient(
    model: VariantModel,
    params: dict[str, np.ndarray],
    log_temps: np.ndarray,
    batch: Batch,
    config: LossConfig,
    contract: InterfaceContract,
    enabled_types=None,
    terms=None,
):
    """Weighted objective value plus exact gradients.

    ``enabled_types`` gates which negative types feed rank/invariance
    (curriculum); ``terms`` restricts to a subset of TERM_NAMES.  Returns
    (total, Grads, per-term values).
    """
    active = set(TERM_NAMES if terms is None else terms)
    types = tuple(NEGATIVE_TYPES if enabled_types is None else enabled_types)
    taus = _temps(contract, log_temps)
    n = batch.n
    state = model.begin_step(params)
    sets = _RowSets(state, batch)
    d_log_temps = np.zeros(len(contract.prefixes))
    tau_slot = {k: i for i, k in enumerate(contract.prefixes)}
    values = {t: 0.0 for t in TERM_NAMES}

    def infonce_into(k: int, level: str, weight: float) -> float:
        zi = sets.z("image")
        zt = sets.z(f"view:{level}")
        value, d_zi, d_zt, d_lt = _infonce_grad(zi, zt, k, taus[k])
        sets.add_grad("image", weight * d_zi)
        sets.add_grad(f"view:{level}", weight * d_zt)
        d_log_temps[tau_slot[k]] += weight * d_lt
        return value

    if "align" in active and config.align_weight > 0.0:
        for k in contract.prefixes:
            level = "G3" if config.align_view_mode == "g3" else contract.view_of[k]
            values["align"] += infonce_into(k, level, config.align_weight)

    if "ret" in active and config.lambda_ret > 0.0:
        for k, per in config.retention_weights.items():
            for level, alpha in per.items():
                if alpha > 0.0:
                    values["ret"] += alpha * infonce_into(k, level, config.lambda_ret * alpha)

    def hinge_pair(r: str, k: int, threshold: float, weight: float, invariance: bool) -> float:
        zi = sets.z("image")
        zp = sets.z(f"view:{STYLE_VIEW[r]}")
        zn = sets.z(f"neg:{r}")
        cp, ctx_p = _paired_cosine(zi, zp, k)
        cn, ctx_n = _paired_cosine(zi, zn, k)
        gap = cp - cn
        if invariance:
            h = np.abs(gap) - threshold
            act = h > 0
            value = float(np.maximum(0.0, h).mean())
            d_gap = np.where(act, np.sign(gap), 0.0) / n
        else:
            h = threshold - gap
            act = h > 0
            value = float(np.maximum(0.0, h).mean())
            d_gap = np.where(act, -1.0, 0.0) / n
        d_zi = np.zeros_like(zi)
        d_zp = np.zeros_like(zp)
        d_zn = np.zeros_like(zn)
        _paired_cosine_backprop(weight * d_gap, ctx_p, d_zi, d_zp, k)
        _paired_cosine_backprop(-weight * d_gap, ctx_n, d_zi, d_zn, k)
        sets.add_grad("image", d_zi)
        sets.add_grad(f"view:{STYLE_VIEW[r]}", d_zp)
        sets.add_grad(f"neg:{r}", d_zn)
        return value

    if "rank" in active and config.lambda_rank > 0.0:
        for r in types:
            for k in contract.rank_prefixes(r):
                values["rank"] += hinge_pair(r, k, config.margins[r], config.lambda_rank, invariance=False)

    if "inv" in active and config.lambda_inv > 0.0:
        for r in types:
            for k in contract.invariance_prefixes(r):
                values["inv"] += hinge_pair(r, k, config.tolerances[r], config.lambda_inv, invariance=True)

    if "pres" in active and config.lambda_pres > 0.0 and not state.orthogonal:
        d = batch.dim
        e_rows = np.concatenate([sets.raw("image"), sets.raw("view:G3")], axis=0)
        z_img = sets.z("image")
        z_txt = sets.z("view:G3")
        z_rows = np.concatenate([z_img, z_txt], axis=0)
        ue, _ = _unit_prefix(e_rows, d)
        uz, nz = _unit_prefix(z_rows, d)
        delta = uz @ uz.T - ue @ ue.T
        m = delta.shape[0]
        values["pres"] = float((delta * delta).mean())
        d_uz = (4.0 / (m * m)) * delta @ uz
        d_z = np.zeros_like(z_rows)
        _unit_prefix_backprop(config.lambda_pres * d_uz, uz, nz, d_z, d)
        sets.add_grad("image", d_z[: batch.n])
        sets.add_grad("view:G3", d_z[batch.n :])

    if "ortho" in active and config.lambda_ortho > 0.0 and not state.orthogonal and state.matrix is not None:
        w = state.matrix
        d = w.shape[0]
        o = w.T @ w - np.eye(d)
        values["ortho"] = float((o * o).sum() / (d * d))
        state.add_matrix_grad(config.lambda_ortho * (4.0 / (d * d)) * (w @ o))

    total = (
        config.align_weight * values["align"]
        + config.lambda_ret * values["ret"]
        + config.lambda_rank * values["rank"]
        + config.lambda_inv * values["inv"]
        + config.lambda_pres * values["pres"]
        + config.lambda_ortho * values["ortho"]
    )
    if not np.isfinite(total):
        raise GraspError("NONFINITE_LOSS", f"objective evaluated to {total}")

    sets.backprop()
    return total, Grads(params=state.finish(), log_temps=d_log_temps), values


# ---------------------------------------------------------------------------
# Finite-difference verification oracle


def flatten_grads(model: VariantModel, grads: Grads) -> np.ndarray:
    parts = [grads.params[name].ravel() for name in model.param_names]
    parts.append(np.asarray(grads.log_temps, dtype=np.float64).ravel())
    return np.concatenate(parts)


def flatten_state(model: VariantModel, params: dict[str, np.ndarray], log_temps: np.ndarray) -> np.ndarray:
    parts = [np.asarray(params[name], dtype=np.float64).ravel() for name in model.param_names]
    parts.append(np.asarray(log_temps, dtype=np.float64).ravel())
    return np.concatenate(parts)


def unflatten_state(model: VariantModel, template: dict[str, np.ndarray], n_temps: int, vec: np.ndarray):
    params = {}
    pos = 0
    for name in model.param_names:
        shape = template[name].shape
        size = int(np.prod(shape)) if shape else 1
        params[name] = vec[pos : pos + size].reshape(shape).copy()
        pos += size
    log_temps = vec[pos : pos + n_temps].copy()
    return params, log_temps


def central_difference_max_error(fn, x0: np.ndarray, analytic: np.ndarray, step: float, coords=None) -> float:
    """Max relative error between central differences of fn and analytic.

    Denominator is max(|numeric|, |analytic|, 1e-8) per coordinate.
    """
    if step <= 0:
        raise GraspError("CONFIG", "finite-difference step must be positive")
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        num = (fn(xp) - fn(xm)) / (2.0 * step)
        err = abs(num - analytic[i]) / max(abs(num), abs(analytic[i]), 1e-8)
        worst = max(worst, err)
    return worst


def finite_difference_check(
    model: VariantModel,
    params: dict[str, np.ndarray],
    log_temps: np.ndarray,
    batch: Batch,
    config: LossConfig,
    contract: InterfaceContract,
    step: float = 1e-5,
    enabled_types=None,
    terms=None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    Every coordinate is checked when the problem is small (dim <= 16 and no
    explicit cap); otherwise a seeded random subset of at least 50
    coordinates is used.
    """
    _, grads, _ = total_loss_and_gradient(model, params, log_temps, batch, config, contract, enabled_types, terms)
    analytic = flatten_grads(model, grads)
    x0 = flatten_state(model, params, log_temps)
    n_temps = len(contract.prefixes)

    def fn(vec):
        p, lt = unflatten_state(model, params, n_temps, vec)
        value, _, _ = total_loss_and_gradient(model, p, lt, batch, config, contract, enabled_types, terms)
        return value

    coords = None
    if max_coords is None and batch.dim > 16:
        max_coords = max(50, 64)
    if max_coords is not None and x0.size > max_coords:
        rng = np.random.default_rng(seed)
        coords = rng.choice(x0.size, size=max_coords, replace=False)
    return central_difference_max_error(fn, x0, analytic, step, coords)
