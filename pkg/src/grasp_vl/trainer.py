"""Minibatch training of the shared transform and prefix temperatures with a
warmup/negative curriculum and drift-gated checkpoint selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import EmbeddingCache, build_pool
from .errors import GraspError
from .metrics import full_drift, hard_average, recall_at_1, retrieval_average, sel_table, stair_score
from .objective import Batch, LossConfig, TERM_NAMES, total_loss_and_gradient
from .transforms import (
    InterfaceContract,
    NEGATIVE_TYPES,
    TransformSpec,
    make_model,
    save_checkpoint,
)

log = logging.getLogger(__name__)

CURRICULA = ("default", "all_after_warmup", "slow", "none")

# Stage order for the hard-negative curriculum; one stage is added per epoch
# ("default"), or per two epochs ("slow").
_STAGES = (("object",), ("attribute",), ("relation", "action", "order"), ("full",))


def enabled_types_for_epoch(curriculum: str, warmup_epochs: int, epoch: int) -> tuple[str, ...]:
    """Negative types active in a given 1-based epoch."""
    if curriculum not in CURRICULA:
        raise GraspError("CONFIG", f"unknown curriculum {curriculum!r}")
    if curriculum == "none":
        return NEGATIVE_TYPES
    if epoch <= warmup_epochs:
        return ()
    since = epoch - warmup_epochs
    if curriculum == "all_after_warmup":
        return NEGATIVE_TYPES
    per_stage = 2 if curriculum == "slow" else 1
    n_stages = min(len(_STAGES), (since + per_stage - 1) // per_stage)
    types: list[str] = []
    for stage in _STAGES[:n_stages]:
        types.extend(stage)
    return tuple(types)


@dataclass
class TrainConfig:
    spec: TransformSpec
    contract: InterfaceContract
    loss: LossConfig
    epochs: int = 12
    batch_size: int = 256
    seed: int = 0
    lr_transform: float = 1e-3
    lr_temps: float = 1e-3
    curriculum: str = "default"
    warmup_epochs: int = 3
    drift_gate: float = 1e-5
    temperature_init: float = 0.07

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise GraspError("CONFIG", "warmup_epochs must be >= 0")
        if not self.drift_gate > 0:
            raise GraspError("CONFIG", "drift_gate must be positive")
        if self.curriculum not in CURRICULA:
            raise GraspError("CONFIG", f"unknown curriculum {self.curriculum!r}")

    def to_json_dict(self) -> dict:
        return {
            "spec": self.spec.to_json_dict(),
            "contract": self.contract.to_json_dict(),
            "loss": self.loss.to_json_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lr_transform": self.lr_transform,
            "lr_temps": self.lr_temps,
            "curriculum": self.curriculum,
            "warmup_epochs": self.warmup_epochs,
            "drift_gate": self.drift_gate,
            "temperature_init": self.temperature_init,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            spec=TransformSpec.from_json_dict(d["spec"]),
            contract=InterfaceContract.from_json_dict(d["contract"]),
            loss=LossConfig.from_json_dict(d.get("loss", {})),
            epochs=int(d.get("epochs", 12)),
            batch_size=int(d.get("batch_size", 256)),
            seed=int(d.get("seed", 0)),
            lr_transform=float(d.get("lr_transform", 1e-3)),
            lr_temps=float(d.get("lr_temps", 1e-3)),
            curriculum=d.get("curriculum", "default"),
            warmup_epochs=int(d.get("warmup_epochs", 3)),
            drift_gate=float(d.get("drift_gate", 1e-5)),
            temperature_init=float(d.get("temperature_init", 0.07)),
        )


@dataclass
class EpochStats:
    epoch: int
    term_means: dict[str, float]
    enabled_types: tuple[str, ...]
    val_ret_avg: float
    val_hard_avg: float
    val_stair: float
    val_drift: float

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "term_means": dict(self.term_means),
            "enabled_types": list(self.enabled_types),
            "val_ret_avg": self.val_ret_avg,
            "val_hard_avg": self.val_hard_avg,
            "val_stair": self.val_stair,
            "val_drift": self.val_drift,
        }


@dataclass
class Checkpoint:
    spec: TransformSpec
    contract: InterfaceContract
    params: dict[str, np.ndarray]
    log_temps: np.ndarray
    epoch: int
    val_stair: float
    val_drift: float
    loss_trace: list[EpochStats] = field(default_factory=list)

    def eval_transform(self):
        return make_model(self.spec).eval_transform(self.params)

    def save(self, path: str | Path) -> None:
        meta = {
            "epoch": self.epoch,
            "val_stair": self.val_stair,
            "val_drift": self.val_drift,
            "loss_trace": [s.to_json_dict() for s in self.loss_trace],
        }
        save_checkpoint(path, self.spec, self.contract, self.log_temps, self.params, meta)


class _Adam:
    """Per-coordinate adaptive first-order updates with bias correction."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _flatten(model, params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in model.param_names])


def _unflatten(model, template: dict[str, np.ndarray], vec: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for n in model.param_names:
        shape = template[n].shape
        size = int(np.prod(shape)) if shape else 1
        out[n] = vec[pos : pos + size].reshape(shape).copy()
        pos += size
    return out


def validation_scores(cache: EmbeddingCache, transform, contract: InterfaceContract, drift_rows: int = 512):
    """(ret_avg, hard_avg, stair, drift) against the validation split."""
    val_ids = cache.split_ids("val")
    if not val_ids:
        raise GraspError("MISSING_SPLIT", "cache has no validation split")
    pool_ids = tuple(sorted(val_ids))
    ret_cells = {}
    for k in contract.prefixes:
        if k == contract.dim:
            continue
        level = contract.view_of[k]
        pool = build_pool(cache, "custom", level, custom_ids=pool_ids)
        ret_cells[k] = recall_at_1(cache, transform, pool, k, val_ids)
    sel = sel_table(cache, transform, contract, val_ids)
    ret_avg = retrieval_average(ret_cells, contract)
    hard_avg = hard_average(sel, contract)
    idx = cache.indices_of(val_ids)
    rows = np.concatenate([cache.images[idx], cache.views["G3"][idx]], axis=0).astype(np.float64)
    if rows.shape[0] > drift_rows:
        rows = rows[:drift_rows]
    drift = full_drift(rows, transform, renormalize=True)
    return ret_avg, hard_avg, stair_score(ret_avg, hard_avg), drift


@dataclass
class CheckpointCandidate:
    epoch: int
    stair: float
    drift: float
    params: dict[str, np.ndarray]
    log_temps: np.ndarray


def select_checkpoint(candidates: list[CheckpointCandidate], drift_gate: float) -> CheckpointCandidate:
    """Best validation staircase among drift-compliant candidates; earliest epoch wins ties."""
    if not candidates:
        raise GraspError("NO_VALID_CHECKPOINT", "no checkpoint candidates")
    eligible = [c for c in candidates if c.drift <= drift_gate]
    if not eligible:
        raise GraspError("NO_VALID_CHECKPOINT", f"no candidate has drift <= {drift_gate:g}")
    best = eligible[0]
    for c in eligible[1:]:
        if c.stair > best.stair:
            best = c
    return best


def train(config: TrainConfig, cache: EmbeddingCache):
    """Run the training loop; returns (checkpoint, history).

    Each step rebuilds the transform from its parameters, transforms the
    batch rows, assembles the curriculum-gated objective, and updates the
    transform parameters and log-temperatures.  After each epoch the hardened
    transform is scored on the validation split; the returned checkpoint is
    the drift-gated best by validation staircase.
    """
    if cache.dim != config.spec.dim or cache.dim != config.contract.dim:
        raise GraspError("DIM_MISMATCH", "cache, spec and contract disagree on dim")
    train_ids = cache.split_ids("train")
    if not train_ids:
        raise GraspError("MISSING_SPLIT", "cache has no train split")
    model = make_model(config.spec)
    rng = np.random.default_rng(config.seed)
    params = model.init_params(rng)
    n_prefixes = len(config.contract.prefixes)
    log_temps = np.full(n_prefixes, math.log(config.temperature_init))

    flat = _flatten(model, params)
    opt_params = _Adam(flat.size, config.lr_transform)
    opt_temps = _Adam(n_prefixes, config.lr_temps)

    train_idx = cache.indices_of(train_ids)
    history: list[EpochStats] = []
    candidates: list[CheckpointCandidate] = []

    for epoch in range(1, config.epochs + 1):
        enabled = enabled_types_for_epoch(config.curriculum, config.warmup_epochs, epoch)
        order = rng.permutation(len(train_idx))
        term_sums = {t: 0.0 for t in TERM_NAMES}
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch_idx = train_idx[order[start : start + config.batch_size]]
            if len(batch_idx) < 2:
                continue  # a single pair makes the in-batch objective degenerate
            batch = Batch.from_cache(cache, batch_idx)
            total, grads, values = total_loss_and_gradient(
                model, params, log_temps, batch, config.loss, config.contract, enabled_types=enabled
            )
            if not np.isfinite(total):
                raise GraspError("DIVERGED", f"non-finite loss at epoch {epoch}")
            flat = opt_params.step(_flatten(model, params), _flatten(model, grads.params))
            params = _unflatten(model, params, flat)
            log_temps = opt_temps.step(log_temps, grads.log_temps)
            for t in TERM_NAMES:
                term_sums[t] += values[t]
            n_steps += 1
        term_means = {t: (term_sums[t] / n_steps if n_steps else 0.0) for t in TERM_NAMES}

        transform = model.eval_transform(params)
        ret_avg, hard_avg, stair, drift = validation_scores(cache, transform, config.contract)
        stats = EpochStats(
            epoch=epoch,
            term_means=term_means,
            enabled_types=enabled,
            val_ret_avg=ret_avg,
            val_hard_avg=hard_avg,
            val_stair=stair,
            val_drift=drift,
        )
        history.append(stats)
        candidates.append(
            CheckpointCandidate(
                epoch=epoch,
                stair=stair,
                drift=drift,
                params={k: v.copy() for k, v in params.items()},
                log_temps=log_temps.copy(),
            )
        )
        log.info(
            "epoch %d/%d types=%s %s val_stair=%.2f val_drift=%.2e",
            epoch,
            config.epochs,
            ",".join(enabled) or "-",
            " ".join(f"{t}={term_means[t]:.4f}" for t in TERM_NAMES),
            stair,
            drift,
        )

    best = select_checkpoint(candidates, config.drift_gate)
    checkpoint = Checkpoint(
        spec=config.spec,
        contract=config.contract,
        params=best.params,
        log_temps=best.log_temps,
        epoch=best.epoch,
        val_stair=best.stair,
        val_drift=best.drift,
        loss_trace=history,
    )
    return checkpoint, history
