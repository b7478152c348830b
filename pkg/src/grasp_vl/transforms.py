"""Transform families, prefix scoring, and the prefix interface contract.

All transforms act on row matrices: ``Z = X @ R.T`` for a linear map with
matrix ``R``, so row ``i`` of ``Z`` is ``R @ X[i]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import GraspError

VIEW_LEVELS = ("G0", "G1", "G2", "G3")
NEGATIVE_TYPES = ("object", "attribute", "relation", "action", "order", "full")

# Style-matched positive view for each negative type: the view that renders
# the same granularity as the perturbation the negative applies.
STYLE_VIEW = {
    "object": "G0",
    "attribute": "G1",
    "relation": "G2",
    "action": "G2",
    "order": "G2",
    "full": "G3",
}

ORTHOGONAL_PROVENANCES = (
    "cayley",
    "butterfly",
    "permutation",
    "signed_permutation",
    "random",
    "identity",
    "pca",
)


# ---------------------------------------------------------------------------
# Interface contract


@dataclass(frozen=True)
class InterfaceContract:
    """Prefix ladder, per-prefix view assignment, and type boundary map."""

    prefixes: tuple[int, ...]
    view_of: dict[int, str]  # prefix -> view level assigned to it
    kappa: dict[str, int]  # negative type -> earliest prefix where it applies

    def __post_init__(self):
        ks = self.prefixes
        if not ks or any(b <= a for a, b in zip(ks, ks[1:])):
            raise GraspError("INVALID_CONTRACT", "prefix set must be strictly increasing")
        if any(k <= 0 for k in ks):
            raise GraspError("INVALID_CONTRACT", "prefixes must be positive")
        if set(self.view_of) != set(ks):
            raise GraspError("INVALID_CONTRACT", "view assignment must cover exactly the prefix set")
        if any(v not in VIEW_LEVELS for v in self.view_of.values()):
            raise GraspError("INVALID_CONTRACT", f"unknown view level in {self.view_of}")
        if set(self.kappa) != set(NEGATIVE_TYPES):
            raise GraspError("INVALID_CONTRACT", "boundary map must cover all negative types")
        for r, k in self.kappa.items():
            if k not in ks:
                raise GraspError("INVALID_CONTRACT", f"kappa({r})={k} is not a prefix")

    @property
    def dim(self) -> int:
        return self.prefixes[-1]

    @classmethod
    def default_ladder(cls, dim: int) -> "InterfaceContract":
        """The ratio ladder D/16, D/8, D/4, D/2, D; requires 16 | D."""
        if dim % 16 != 0:
            raise GraspError("INVALID_CONTRACT", f"default ladder needs dim divisible by 16, got {dim}")
        ks = (dim // 16, dim // 8, dim // 4, dim // 2, dim)
        view_of = {ks[0]: "G0", ks[1]: "G1", ks[2]: "G2", ks[3]: "G3", ks[4]: "G3"}
        kappa = {
            "object": ks[0],
            "attribute": ks[1],
            "relation": ks[2],
            "action": ks[2],
            "order": ks[2],
            "full": ks[3],
        }
        return cls(prefixes=ks, view_of=view_of, kappa=kappa)

    def assigned_view(self, k: int) -> str:
        return self.view_of[k]

    def coarser_levels(self, k: int) -> tuple[str, ...]:
        """View levels strictly coarser than the one assigned to prefix k."""
        g = VIEW_LEVELS.index(self.view_of[k])
        return VIEW_LEVELS[:g]

    def rank_prefixes(self, neg_type: str) -> tuple[int, ...]:
        b = self.kappa[neg_type]
        return tuple(k for k in self.prefixes if k >= b)

    def invariance_prefixes(self, neg_type: str) -> tuple[int, ...]:
        b = self.kappa[neg_type]
        return tuple(k for k in self.prefixes if k < b)

    def to_json_dict(self) -> dict:
        return {
            "prefix_set": list(self.prefixes),
            "view_assignment": {str(k): v for k, v in self.view_of.items()},
            "boundary_map": dict(self.kappa),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "InterfaceContract":
        return cls(
            prefixes=tuple(int(k) for k in d["prefix_set"]),
            view_of={int(k): v for k, v in d["view_assignment"].items()},
            kappa={r: int(k) for r, k in d["boundary_map"].items()},
        )


# ---------------------------------------------------------------------------
# Built transforms


@dataclass
class LinearTransform:
    """A dense linear map with provenance and (claimed) orthogonality."""

    matrix: np.ndarray
    provenance: str
    orthogonal: bool

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GraspError("DIM_MISMATCH", f"transform matrix must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        if self.orthogonal and self.orthogonality_error() > 1e-8:
            raise GraspError(
                "ORTHOGONALITY_VIOLATION",
                f"{self.provenance} map deviates from orthogonality by {self.orthogonality_error():.2e}",
            )

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def orthogonality_error(self) -> float:
        rtr = self.matrix.T @ self.matrix
        return float(np.abs(rtr - np.eye(self.dim)).max())

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.dim:
            raise GraspError("DIM_MISMATCH", f"rows have width {rows.shape[-1]}, transform expects {self.dim}")
        return rows @ self.matrix.T


@dataclass
class MlpTransform:
    """Nonlinear adapter: D -> 2D tanh hidden with per-feature scale/shift -> D."""

    params: dict[str, np.ndarray]
    provenance: str = "mlp"
    orthogonal: bool = False

    @property
    def dim(self) -> int:
        return self.params["w2"].shape[0]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.dim:
            raise GraspError("DIM_MISMATCH", f"rows have width {rows.shape[-1]}, transform expects {self.dim}")
        p = self.params
        h = np.tanh(rows @ p["w1"].T + p["b1"])
        return (p["scale"] * h + p["shift"]) @ p["w2"].T + p["b2"]


def identity_transform(dim: int) -> LinearTransform:
    return LinearTransform(np.eye(dim), "identity", orthogonal=True)


def cayley_build(b: np.ndarray) -> LinearTransform:
    """Map an unconstrained square parameter to an orthogonal matrix.

    Skew-symmetrize A = B - B^T, then solve (I + A) R = (I - A).  The solve
    cannot be singular for finite A (eigenvalues of I + A are 1 + i*mu).
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise GraspError("DIM_MISMATCH", f"skew parameter must be square, got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise GraspError("NONFINITE_PARAMS", "skew parameter contains non-finite entries")
    d = b.shape[0]
    a = b - b.T
    eye = np.eye(d)
    try:
        r = np.linalg.solve(eye + a, eye - a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - analytically impossible
        raise GraspError("SINGULAR_SOLVE", str(exc)) from exc
    return LinearTransform(r, "cayley", orthogonal=True)


def cayley_build_with_vjp(b: np.ndarray):
    """Like cayley_build, returning (R, vjp) with vjp(dL/dR) -> dL/dB.

    The backward pass is the adjoint of the forward linear solve: with
    M = I + A and R = M^{-1}(I - A), a perturbation dA gives
    dR = -M^{-1} dA (R + I), so dL/dA = -M^{-T} G (R + I)^T and
    dL/dB = dL/dA - (dL/dA)^T.
    """
    b = np.asarray(b, dtype=np.float64)
    d = b.shape[0]
    a = b - b.T
    m = np.eye(d) + a
    r = np.linalg.solve(m, np.eye(d) - a)
    r_plus = r + np.eye(d)

    def vjp(d_r: np.ndarray) -> np.ndarray:
        d_a = -np.linalg.solve(m.T, d_r) @ r_plus.T
        return d_a - d_a.T

    return LinearTransform(r, "cayley", orthogonal=True), vjp


def random_orthogonal(dim: int, seed: int | np.random.Generator) -> LinearTransform:
    """Haar-style orthogonal matrix from QR of a seeded Gaussian draw."""
    if dim < 1:
        raise GraspError("DIM_MISMATCH", "dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return LinearTransform(q, "random", orthogonal=True)


def fit_pca(rows: np.ndarray) -> LinearTransform:
    """Rotation onto principal axes of the row covariance, by descending variance.

    The returned map is a pure rotation (no centering is applied at transform
    time), so full-space cosines are preserved.  Component signs are fixed by
    making each component's largest-magnitude coordinate positive.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise GraspError("DIM_MISMATCH", "expected an N x D training matrix")
    centered = rows - rows.mean(axis=0, keepdims=True)
    if np.abs(centered).max() == 0.0:
        raise GraspError("DEGENERATE_COVARIANCE", "training rows are all identical")
    cov = centered.T @ centered / max(rows.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    components = evecs[:, order].T  # row i = i-th principal direction
    anchor = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), anchor])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    t = LinearTransform(components, "pca", orthogonal=True)
    return t


def captured_variance(rows: np.ndarray, pca: LinearTransform, k: int) -> float:
    """Variance of the training rows captured by the top-k principal prefix."""
    centered = rows - rows.mean(axis=0, keepdims=True)
    proj = centered @ pca.matrix.T
    return float(proj[:, :k].var(axis=0, ddof=1).sum())


def permutation_transform(perm: np.ndarray, signs: np.ndarray | None = None) -> LinearTransform:
    """Orthogonal map sending coordinate perm[j] to slot j (optionally signed)."""
    perm = np.asarray(perm, dtype=np.intp)
    d = perm.shape[0]
    m = np.zeros((d, d))
    m[np.arange(d), perm] = 1.0 if signs is None else np.asarray(signs, dtype=np.float64)
    prov = "permutation" if signs is None else "signed_permutation"
    return LinearTransform(m, prov, orthogonal=True)


# ---------------------------------------------------------------------------
# Butterfly-Givens stacks

_STAGE_AXIS = 1  # angles layout: (stacks, stages, dim // 2)


def _require_power_of_two(dim: int) -> int:
    stages = int(round(math.log2(dim)))
    if dim < 2 or 2**stages != dim:
        raise GraspError("NOT_POWER_OF_TWO", f"butterfly transforms need a power-of-two dim, got {dim}")
    return stages


def butterfly_angle_shape(dim: int, stacks: int) -> tuple[int, int, int]:
    return (stacks, _require_power_of_two(dim), dim // 2)


def _stage_pairs(x: np.ndarray, stride: int) -> np.ndarray:
    """View (N, D) as (N, D/(2*stride), 2, stride): paired lanes at this stage."""
    n, d = x.shape
    return x.reshape(n, d // (2 * stride), 2, stride)


def butterfly_apply(angles: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Apply the stack of Givens stages to each row; stride doubles per stage."""
    z, _ = _butterfly_forward(angles, rows, keep_ctx=False)
    return z


def _butterfly_forward(angles: np.ndarray, rows: np.ndarray, keep_ctx: bool):
    angles = np.asarray(angles, dtype=np.float64)
    x = np.asarray(rows, dtype=np.float64)
    stacks, stages, half = angles.shape
    d = 2 * half
    if x.shape[-1] != d:
        raise GraspError("DIM_MISMATCH", f"rows have width {x.shape[-1]}, angles imply {d}")
    _require_power_of_two(d)
    x = x.copy()
    ctx = [] if keep_ctx else None
    for s in range(stacks):
        for t in range(stages):
            stride = 1 << t
            theta = angles[s, t].reshape(d // (2 * stride), stride)
            c = np.cos(theta)
            sn = np.sin(theta)
            p = _stage_pairs(x, stride)
            u = p[:, :, 0, :]
            v = p[:, :, 1, :]
            if keep_ctx:
                ctx.append((u.copy(), v.copy()))
            new_u = c * u - sn * v
            new_v = sn * u + c * v
            p[:, :, 0, :] = new_u
            p[:, :, 1, :] = new_v
    return x, ctx


def butterfly_apply_with_ctx(angles: np.ndarray, rows: np.ndarray):
    return _butterfly_forward(angles, rows, keep_ctx=True)


def butterfly_vjp(angles: np.ndarray, ctx: list, d_out: np.ndarray) -> np.ndarray:
    """Backward through the stages; returns dL/dangles (dL/drows is discarded)."""
    angles = np.asarray(angles, dtype=np.float64)
    stacks, stages, half = angles.shape
    d = 2 * half
    g = np.asarray(d_out, dtype=np.float64).copy()
    d_angles = np.zeros_like(angles)
    idx = len(ctx)
    for s in reversed(range(stacks)):
        for t in reversed(range(stages)):
            idx -= 1
            stride = 1 << t
            theta = angles[s, t].reshape(d // (2 * stride), stride)
            c = np.cos(theta)
            sn = np.sin(theta)
            u, v = ctx[idx]
            gp = _stage_pairs(g, stride)
            gu = gp[:, :, 0, :]
            gv = gp[:, :, 1, :]
            # d/dtheta of (c u - s v, s u + c v) = (-s u - c v, c u - s v)
            dth = (gu * (-sn * u - c * v) + gv * (c * u - sn * v)).sum(axis=0)
            d_angles[s, t] = dth.reshape(-1)
            # transpose rotation carries the gradient back to stage inputs
            new_gu = c * gu + sn * gv
            new_gv = -sn * gu + c * gv
            gp[:, :, 0, :] = new_gu
            gp[:, :, 1, :] = new_gv
    return d_angles


def butterfly_build(angles: np.ndarray) -> LinearTransform:
    """Materialize the stack product as a dense orthogonal matrix."""
    angles = np.asarray(angles, dtype=np.float64)
    d = 2 * angles.shape[2]
    basis = np.eye(d)
    # rows of butterfly_apply(I) are the images of the basis vectors, i.e. R^T
    rt = butterfly_apply(angles, basis)
    return LinearTransform(rt.T, "butterfly", orthogonal=True)


# ---------------------------------------------------------------------------
# Prefix projection and scoring


def prefix_normalize(rows: np.ndarray, k: int) -> np.ndarray:
    """First k coordinates of each row, renormalized to unit length."""
    rows = np.asarray(rows, dtype=np.float64)
    if k < 1 or k > rows.shape[-1]:
        raise GraspError("DIM_MISMATCH", f"prefix {k} invalid for width {rows.shape[-1]}")
    sl = rows[..., :k]
    norms = np.linalg.norm(sl, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise GraspError("ZERO_PREFIX", f"prefix of length {k} has near-zero norm")
    return sl / norms


def prefix_score(z_img: np.ndarray, z_txt: np.ndarray, k: int, tau: float) -> float:
    """Temperature-scaled cosine of the independently renormalized k-prefixes."""
    u = prefix_normalize(np.atleast_2d(z_img), k)[0]
    v = prefix_normalize(np.atleast_2d(z_txt), k)[0]
    return float(u @ v / tau)


def prefix_cosine_matrix(za: np.ndarray, zb: np.ndarray, k: int) -> np.ndarray:
    """All pairwise prefix cosines between two row sets."""
    return prefix_normalize(za, k) @ prefix_normalize(zb, k).T


def prefix_cosine_rows(za: np.ndarray, zb: np.ndarray, k: int) -> np.ndarray:
    """Row-aligned prefix cosines between two equally sized row sets."""
    return np.einsum("ij,ij->i", prefix_normalize(za, k), prefix_normalize(zb, k))


# ---------------------------------------------------------------------------
# Transform specs, parameter counting, trainable variant models


@dataclass(frozen=True)
class TransformSpec:
    """Which trainable family to use and its structural hyperparameters."""

    variant: str  # dense_cayley | butterfly | permutation | signed_permutation | low_rank | mlp
    dim: int
    stacks: int = 8  # butterfly only
    rank: int = 32  # low_rank only

    def to_json_dict(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "stacks": self.stacks, "rank": self.rank}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TransformSpec":
        return cls(
            variant=d["variant"],
            dim=int(d["dim"]),
            stacks=int(d.get("stacks", 8)),
            rank=int(d.get("rank", 32)),
        )


def param_count(spec: TransformSpec, n_prefixes: int) -> int:
    """Exact trainable-scalar count for a variant, temperatures included."""
    d = spec.dim
    if spec.variant == "dense_cayley":
        core = d * d
    elif spec.variant == "butterfly":
        core = spec.stacks * (d // 2) * _require_power_of_two(d)
    elif spec.variant == "permutation":
        core = d * d
    elif spec.variant == "signed_permutation":
        core = d * d + d
    elif spec.variant == "low_rank":
        core = d * d + 2 * d * spec.rank + 1
    elif spec.variant == "mlp":
        h = 2 * d
        core = 2 * d * h + h + d + 2 * h
    else:
        raise GraspError("UNKNOWN_VARIANT", f"no such transform variant: {spec.variant}")
    return core + n_prefixes


_SINKHORN_ITERS = 8


def _sinkhorn(logits: np.ndarray):
    """Doubly-stochastic relaxation with saved intermediates for the backward pass."""
    m = np.exp(np.clip(logits, -30.0, 30.0))
    trace = [m]
    for _ in range(_SINKHORN_ITERS):
        m = m / m.sum(axis=1, keepdims=True)
        trace.append(m)
        m = m / m.sum(axis=0, keepdims=True)
        trace.append(m)
    return m, trace


def _sinkhorn_vjp(logits: np.ndarray, trace: list, d_out: np.ndarray) -> np.ndarray:
    g = d_out
    pos = len(trace) - 1
    for _ in range(_SINKHORN_ITERS):
        # undo column normalization: out = m / colsum(m)
        m_in = trace[pos - 1]
        out = trace[pos]
        s = m_in.sum(axis=0, keepdims=True)
        g = (g - (g * out).sum(axis=0, keepdims=True)) / s
        pos -= 1
        # undo row normalization
        m_in = trace[pos - 1]
        out = trace[pos]
        s = m_in.sum(axis=1, keepdims=True)
        g = (g - (g * out).sum(axis=1, keepdims=True)) / s
        pos -= 1
    return g * trace[0]  # chain through exp


def harden_doubly_stochastic(p: np.ndarray) -> np.ndarray:
    """Optimal-assignment rounding of a doubly-stochastic matrix to a permutation."""
    rows, cols = linear_sum_assignment(-p)
    perm = np.zeros_like(p)
    perm[rows, cols] = 1.0
    return perm


class _StepState:
    """Per-step differentiable view of one trainable transform.

    ``apply`` maps raw rows to transformed rows and returns a context for
    ``vjp``, which accumulates parameter gradients.  ``matrix`` is the
    effective linear matrix of the train-time map when one exists.
    """

    def __init__(self, orthogonal: bool, matrix: np.ndarray | None):
        self.orthogonal = orthogonal
        self.matrix = matrix

    def apply(self, rows):  # pragma: no cover - overridden
        raise NotImplementedError

    def vjp(self, ctx, d_rows):  # pragma: no cover - overridden
        raise NotImplementedError

    def add_matrix_grad(self, d_matrix):  # pragma: no cover - overridden
        raise GraspError("UNKNOWN_VARIANT", "this variant has no effective matrix")

    def finish(self) -> dict[str, np.ndarray]:  # pragma: no cover - overridden
        raise NotImplementedError


class _LinearStepState(_StepState):
    def __init__(self, matrix: np.ndarray, matrix_vjp, orthogonal: bool):
        super().__init__(orthogonal, matrix)
        self._matrix_vjp = matrix_vjp
        self._d_matrix = np.zeros_like(matrix)

    def apply(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        return rows @ self.matrix.T, rows

    def vjp(self, ctx, d_rows):
        self._d_matrix += d_rows.T @ ctx

    def add_matrix_grad(self, d_matrix):
        self._d_matrix += d_matrix

    def finish(self):
        return self._matrix_vjp(self._d_matrix)


class VariantModel:
    """Base for trainable transform families."""

    def __init__(self, spec: TransformSpec):
        self.spec = spec
        self.dim = spec.dim

    @property
    def param_names(self) -> tuple[str, ...]:  # pragma: no cover - overridden
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:  # pragma: no cover
        raise NotImplementedError

    def n_params(self) -> int:
        probe = self.init_params(np.random.default_rng(0))
        return int(sum(v.size for v in probe.values()))

    def begin_step(self, params: dict[str, np.ndarray]) -> _StepState:  # pragma: no cover
        raise NotImplementedError

    def eval_transform(self, params: dict[str, np.ndarray]):  # pragma: no cover
        raise NotImplementedError


class DenseCayleyModel(VariantModel):
    param_names = ("b",)

    def init_params(self, rng):
        return {"b": 1e-3 * rng.standard_normal((self.dim, self.dim))}

    def begin_step(self, params):
        r, vjp = cayley_build_with_vjp(params["b"])
        return _LinearStepState(r.matrix, lambda dm: {"b": vjp(dm)}, orthogonal=True)

    def eval_transform(self, params):
        return cayley_build(params["b"])


class ButterflyModel(VariantModel):
    param_names = ("angles",)

    def init_params(self, rng):
        shape = butterfly_angle_shape(self.dim, self.spec.stacks)
        return {"angles": 1e-3 * rng.standard_normal(shape)}

    def begin_step(self, params):
        model_angles = params["angles"]

        class _State(_StepState):
            def __init__(self):
                super().__init__(orthogonal=True, matrix=None)
                self._d_angles = np.zeros_like(model_angles)

            def apply(self, rows):
                z, ctx = butterfly_apply_with_ctx(model_angles, rows)
                return z, ctx

            def vjp(self, ctx, d_rows):
                self._d_angles += butterfly_vjp(model_angles, ctx, d_rows)

            def finish(self):
                return {"angles": self._d_angles}

        return _State()

    def eval_transform(self, params):
        return butterfly_build(params["angles"])


class PermutationModel(VariantModel):
    """Doubly-stochastic relaxation while training; hardened at evaluation."""

    param_names = ("logits",)

    def init_params(self, rng):
        return {"logits": 1e-2 * rng.standard_normal((self.dim, self.dim))}

    def begin_step(self, params):
        p, trace = _sinkhorn(params["logits"])
        return _LinearStepState(
            p,
            lambda dm: {"logits": _sinkhorn_vjp(params["logits"], trace, dm)},
            orthogonal=False,
        )

    def eval_transform(self, params):
        p, _ = _sinkhorn(params["logits"])
        m = harden_doubly_stochastic(p)
        return LinearTransform(m, "permutation", orthogonal=True)


class SignedPermutationModel(VariantModel):
    param_names = ("logits", "sign_logits")

    def init_params(self, rng):
        return {
            "logits": 1e-2 * rng.standard_normal((self.dim, self.dim)),
            "sign_logits": 1.0 + 0.1 * rng.standard_normal(self.dim),
        }

    def begin_step(self, params):
        p, trace = _sinkhorn(params["logits"])
        t = np.tanh(params["sign_logits"])
        w = p * t[None, :]

        def matrix_vjp(dm):
            dp = dm * t[None, :]
            dt = (dm * p).sum(axis=0)
            return {
                "logits": _sinkhorn_vjp(params["logits"], trace, dp),
                "sign_logits": dt * (1.0 - t * t),
            }

        return _LinearStepState(w, matrix_vjp, orthogonal=False)

    def eval_transform(self, params):
        p, _ = _sinkhorn(params["logits"])
        perm = harden_doubly_stochastic(p)
        signs = np.where(params["sign_logits"] >= 0.0, 1.0, -1.0)
        return LinearTransform(perm * signs[None, :], "signed_permutation", orthogonal=True)


class LowRankModel(VariantModel):
    """Shared Cayley rotation plus a gated rank-r residual; not orthogonal."""

    param_names = ("b", "u", "v", "gate")

    def init_params(self, rng):
        d, r = self.dim, self.spec.rank
        return {
            "b": 1e-3 * rng.standard_normal((d, d)),
            "u": 1e-2 * rng.standard_normal((d, r)),
            "v": 1e-2 * rng.standard_normal((d, r)),
            "gate": np.array(1.0),
        }

    def _matrix(self, params):
        r, vjp = cayley_build_with_vjp(params["b"])
        w = r.matrix + float(params["gate"]) * params["u"] @ params["v"].T
        return w, vjp

    def begin_step(self, params):
        w, cayley_vjp = self._matrix(params)
        u, v, gate = params["u"], params["v"], float(params["gate"])

        def matrix_vjp(dm):
            return {
                "b": cayley_vjp(dm),
                "u": gate * dm @ v,
                "v": gate * dm.T @ u,
                "gate": np.array(np.sum(dm * (u @ v.T))),
            }

        return _LinearStepState(w, matrix_vjp, orthogonal=False)

    def eval_transform(self, params):
        w, _ = self._matrix(params)
        return LinearTransform(w, "linear", orthogonal=False)


class MlpModel(VariantModel):
    param_names = ("w1", "b1", "scale", "shift", "w2", "b2")

    def init_params(self, rng):
        d = self.dim
        h = 2 * d
        return {
            "w1": rng.standard_normal((h, d)) * math.sqrt(2.0 / (d + h)),
            "b1": np.zeros(h),
            "scale": np.ones(h),
            "shift": np.zeros(h),
            "w2": rng.standard_normal((d, h)) * math.sqrt(2.0 / (d + h)),
            "b2": np.zeros(d),
        }

    def begin_step(self, params):
        p = params

        class _State(_StepState):
            def __init__(self):
                super().__init__(orthogonal=False, matrix=None)
                self._g = {k: np.zeros_like(v) for k, v in p.items()}

            def apply(self, rows):
                rows = np.asarray(rows, dtype=np.float64)
                h = np.tanh(rows @ p["w1"].T + p["b1"])
                mod = p["scale"] * h + p["shift"]
                z = mod @ p["w2"].T + p["b2"]
                return z, (rows, h)

            def vjp(self, ctx, d_rows):
                rows, h = ctx
                g = self._g
                g["w2"] += d_rows.T @ (p["scale"] * h + p["shift"])
                g["b2"] += d_rows.sum(axis=0)
                d_mod = d_rows @ p["w2"]
                g["scale"] += (d_mod * h).sum(axis=0)
                g["shift"] += d_mod.sum(axis=0)
                d_h = d_mod * p["scale"] * (1.0 - h * h)
                g["w1"] += d_h.T @ rows
                g["b1"] += d_h.sum(axis=0)

            def finish(self):
                return self._g

        return _State()

    def eval_transform(self, params):
        return MlpTransform({k: v.copy() for k, v in params.items()})


_VARIANT_MODELS = {
    "dense_cayley": DenseCayleyModel,
    "butterfly": ButterflyModel,
    "permutation": PermutationModel,
    "signed_permutation": SignedPermutationModel,
    "low_rank": LowRankModel,
    "mlp": MlpModel,
}


def make_model(spec: TransformSpec) -> VariantModel:
    try:
        cls = _VARIANT_MODELS[spec.variant]
    except KeyError:
        raise GraspError("UNKNOWN_VARIANT", f"no such transform variant: {spec.variant}") from None
    return cls(spec)


# ---------------------------------------------------------------------------
# Permutation-energy analysis


def permutation_energy(r: np.ndarray | LinearTransform) -> float:
    """Percentage of squared mass explained by the best single permutation.

    100 * max_sigma sum_j R[sigma(j), j]^2 / ||R||_F^2, solved as a linear
    assignment over squared entries.
    """
    m = r.matrix if isinstance(r, LinearTransform) else np.asarray(r, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GraspError("DIM_MISMATCH", "permutation energy needs a square matrix")
    sq = m * m
    rows, cols = linear_sum_assignment(-sq)
    best = sq[rows, cols].sum()
    total = sq.sum()
    return float(100.0 * best / total)


# ---------------------------------------------------------------------------
# Fixed-transform file format: one JSON header line, then the float64 LE matrix.

_MATRIX_FORMAT = "grasp-transform-v1"


def save_matrix_transform(path: str | Path, transform: LinearTransform) -> None:
    header = {
        "format": _MATRIX_FORMAT,
        "dim": transform.dim,
        "provenance": transform.provenance,
        "orthogonal": transform.orthogonal,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(transform.matrix, dtype="<f8").tobytes())


def load_matrix_transform(path: str | Path) -> LinearTransform:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GraspError("MALFORMED", f"unreadable transform header: {exc}") from exc
        if header.get("format") != _MATRIX_FORMAT:
            raise GraspError("MALFORMED", f"unknown transform format {header.get('format')!r}")
        d = int(header["dim"])
        blob = fh.read(8 * d * d)
        if len(blob) != 8 * d * d or fh.read(1):
            raise GraspError("SHAPE_MISMATCH", "transform blob does not match declared dim")
    matrix = np.frombuffer(blob, dtype="<f8").reshape(d, d).copy()
    return LinearTransform(matrix, header.get("provenance", "identity"), bool(header.get("orthogonal", False)))


# ---------------------------------------------------------------------------
# Checkpoint file format: one JSON header line, then float64 LE parameter blobs
# in the header's declared order.

_CHECKPOINT_FORMAT = "grasp-checkpoint-v1"


def save_checkpoint(
    path: str | Path,
    spec: TransformSpec,
    contract: InterfaceContract,
    log_temps: np.ndarray,
    params: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    names = sorted(params)
    header = {
        "format": _CHECKPOINT_FORMAT,
        "spec": spec.to_json_dict(),
        "contract": contract.to_json_dict(),
        "log_temperatures": [float(x) for x in np.asarray(log_temps)],
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


@dataclass
class CheckpointFile:
    spec: TransformSpec
    contract: InterfaceContract
    log_temps: np.ndarray
    params: dict[str, np.ndarray]
    meta: dict

    def temperatures(self) -> dict[int, float]:
        return {k: float(np.exp(t)) for k, t in zip(self.contract.prefixes, self.log_temps)}

    def eval_transform(self):
        return make_model(self.spec).eval_transform(self.params)


def load_checkpoint(path: str | Path) -> CheckpointFile:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GraspError("MALFORMED", f"unreadable checkpoint header: {exc}") from exc
        if header.get("format") != _CHECKPOINT_FORMAT:
            raise GraspError("MALFORMED", f"unknown checkpoint format {header.get('format')!r}")
        params = {}
        for entry in header["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(8 * count)
            if len(blob) != 8 * count:
                raise GraspError("SHAPE_MISMATCH", f"checkpoint blob truncated at {entry['name']}")
            params[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise GraspError("SHAPE_MISMATCH", "trailing bytes after declared parameter blobs")
    return CheckpointFile(
        spec=TransformSpec.from_json_dict(header["spec"]),
        contract=InterfaceContract.from_json_dict(header["contract"]),
        log_temps=np.asarray(header["log_temperatures"], dtype=np.float64),
        params=params,
        meta=header.get("meta", {}),
    )
