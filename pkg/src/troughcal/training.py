"""SGD calibration over homogenization sequences.

Era bookkeeping: one valve-state vector per (subfield, era); one pipe-glass
coefficient block per period (= sequence). The mini-batch unit is one
sequence; per-sequence gradients are averaged over the batch before a step.
Batch members can be evaluated by parallel workers; the per-sequence results
are always combined in list order, so the reduction is deterministic.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import adjoint
from .errors import (CheckpointMismatch, DivergedLoss, EraMismatch,
                     NoSequences, OverlappingEras)
from .metrics import FitReport, r_squared, rank_heat_loss, rmse
from .params import ParamSet, softplus


@dataclass
class TrainConfig:
    """Optimizer settings. Rates are per parameter group; defaults were
    tuned on the synthetic scenarios shipped with the test suite."""

    lr: dict = field(default_factory=lambda: {
        "a": 1e-9, "b": 1e-5, "alpha": 2e-4, "omega": 2e-3, "hpg": 1.0})
    epochs: int = 300
    batch_size: int = 0          # 0 = full batch
    optimizer: str = "momentum"  # "sgd" or "momentum"
    momentum: float = 0.9
    seed: int = 0
    patience: int = 0            # 0 = no early stop
    clip_norm: float = 10.0      # 0 = no clipping
    threads: int = 1
    checkpoint_interval: int = 64
    hpg_init: float = 1.0

    def __post_init__(self):
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("all learning rates must be > 0")
        if self.batch_size < 0:
            raise ValueError("batch size must be >= 1 (or 0 for full batch)")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EraRegistry:
    """Compacted era index space: (subfield, raw era id) -> contiguous id."""

    mapping: dict                # (subfield, raw_era) -> compact era
    sequence_era: dict           # sequence id -> compact era

    @property
    def n_eras(self):
        return len(self.mapping)


def era_registry(sequences) -> EraRegistry:
    """Compact era ids per subfield and verify eras do not overlap in time."""
    spans = {}
    for seq in sequences:
        key = (seq.subfield_id, seq.era_id)
        t0, t1 = seq.t_start, seq.t_start + seq.dt * seq.n_steps
        if key in spans:
            spans[key] = (min(spans[key][0], t0), max(spans[key][1], t1))
        else:
            spans[key] = (t0, t1)
    by_subfield = {}
    for sf, era in spans:
        by_subfield.setdefault(sf, []).append(era)
    mapping = {}
    for sf, eras in by_subfield.items():
        ordered = sorted(eras, key=lambda e: spans[(sf, e)][0])
        for prev, cur in zip(ordered, ordered[1:]):
            if spans[(sf, prev)][1] > spans[(sf, cur)][0]:
                raise OverlappingEras(
                    f"subfield {sf}: eras {prev} and {cur} overlap in time")
        for idx, era in enumerate(ordered):
            mapping[(sf, era)] = idx
    sequence_era = {seq.id: mapping[(seq.subfield_id, seq.era_id)]
                    for seq in sequences}
    return EraRegistry(mapping=mapping, sequence_era=sequence_era)


def _lr_vector(params: ParamSet, lr: dict) -> np.ndarray:
    vec = np.empty(params.n_params)
    for name, sl in params.block_slices().items():
        vec[sl] = lr[params.block_group(name)]
    return vec


def _trainable_mask(params: ParamSet, trainable) -> np.ndarray:
    if trainable is None:
        return np.ones(params.n_params)
    mask = np.zeros(params.n_params)
    for name, sl in params.block_slices().items():
        if params.block_group(name) in trainable:
            mask[sl] = 1.0
    return mask


def _batch_gradient(params, batch, topology, props, options, executor):
    """Mean loss and gradient over a batch; combined in batch order so the
    reduction is deterministic regardless of worker count."""
    def one(seq):
        return adjoint.sequence_loss_grad(params, seq, topology, props,
                                          options)
    if executor is None:
        results = [one(seq) for seq in batch]
    else:
        results = list(executor.map(one, batch))
    vec = np.zeros(params.n_params)
    total = 0.0
    for loss_val, grads in results:
        vec += adjoint._grads_to_vector(params, grads)
        total += loss_val
    n = len(batch)
    return total / n, vec / n


def fit(sequences, topology, props, config: TrainConfig,
        init_params: ParamSet | None = None, trainable=None,
        optimizer_state=None):
    """SGD over sequences; returns (ParamSet, FitReport).

    ``trainable`` optionally restricts updates to parameter groups (e.g.
    {"omega"}). Reproducible for a fixed (sequences, config, seed).
    Parameters are keyed by the sequences' raw era ids; era_registry() is
    used only to verify that eras do not overlap.
    """
    sequences = list(sequences)
    if not sequences:
        raise NoSequences("fit() needs at least one sequence")
    registry = era_registry(sequences)

    if init_params is not None:
        params = init_params.replace_from_vector(init_params.flatten())
        params.ensure_blocks(topology, sequences, hpg_init=config.hpg_init)
    else:
        params = ParamSet.initialize(topology, sequences,
                                     hpg_init=config.hpg_init)
    options = adjoint.ForwardOptions(
        checkpoint_interval=config.checkpoint_interval)
    lr_vec = _lr_vector(params, config.lr)
    mask = _trainable_mask(params, trainable)
    x = params.flatten()
    velocity = np.zeros_like(x) if optimizer_state is None \
        else np.asarray(optimizer_state, dtype=float).copy()
    rng = np.random.default_rng(config.seed)
    executor = ThreadPoolExecutor(max_workers=config.threads) \
        if config.threads > 1 else None

    n_seq = len(sequences)
    batch_size = config.batch_size or n_seq
    loss_curve = []
    clip_events = 0
    best = np.inf
    since_best = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n_seq) if batch_size < n_seq \
                else np.arange(n_seq)
            epoch_loss = 0.0
            for start in range(0, n_seq, batch_size):
                batch = [sequences[i] for i in order[start:start + batch_size]]
                cur = params.replace_from_vector(x)
                loss_val, g = _batch_gradient(cur, batch, topology, props,
                                              options, executor)
                epoch_loss += loss_val * len(batch)
                g *= mask
                if config.clip_norm > 0:
                    norm = float(np.linalg.norm(g))
                    if norm > config.clip_norm:
                        g *= config.clip_norm / norm
                        clip_events += 1
                if config.optimizer == "momentum":
                    velocity = config.momentum * velocity - lr_vec * g
                    x = x + velocity
                else:
                    x = x - lr_vec * g
            epoch_loss /= n_seq
            if not np.isfinite(epoch_loss):
                raise DivergedLoss(f"loss became {epoch_loss} at epoch {epoch}")
            loss_curve.append(epoch_loss)
            if config.patience > 0:
                if epoch_loss < best - 1e-15:
                    best, since_best = epoch_loss, 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        break
    finally:
        if executor is not None:
            executor.shutdown()

    params = params.replace_from_vector(x)
    report = build_report(params, sequences, topology, props)
    if not loss_curve:
        report.loss_curve = [adjoint.loss(params, sequences, topology, props)]
    else:
        report.loss_curve = loss_curve
    report.clip_events = clip_events
    report.meta = {
        "epochs_run": len(loss_curve) if config.epochs else 0,
        "seed": config.seed,
        "era_mapping": {f"{sf}/{era}": idx
                        for (sf, era), idx in registry.mapping.items()},
        "optimizer_state": velocity,
    }
    return params, report


def build_report(params: ParamSet, sequences, topology, props) -> FitReport:
    """Evaluate final parameters on the sequences and assemble a FitReport."""
    report = FitReport()
    beta_acc = {}
    sq_sum = {}
    counts = {}
    for seq in sequences:
        pred, beta, _ = adjoint.predict(params, seq, topology, props)
        sf = topology.subfield(seq.subfield_id)
        for i, loop_id in enumerate(sf.loop_ids):
            sq = np.sum((pred[i] - seq.sensors[i]) ** 2, axis=1)
            sq_sum[loop_id] = sq_sum.get(loop_id, 0.0) + sq
            counts[loop_id] = counts.get(loop_id, 0) + seq.n_steps
        key = (seq.subfield_id, seq.era_id)
        beta_acc.setdefault(key, []).append(beta.mean(axis=1))
        report.beta_loop_ids[seq.subfield_id] = list(sf.loop_ids)
        hpg = params.hpg(seq.id)
        report.hpg[seq.id] = {loop_id: hpg[i]
                              for i, loop_id in enumerate(sf.loop_ids)}
    report.rmse_per_sensor = {loop_id: np.sqrt(sq / counts[loop_id])
                              for loop_id, sq in sq_sum.items()}
    report.beta = {key: np.mean(np.stack(vals), axis=0)
                   for key, vals in beta_acc.items()}
    report.ranking = rank_heat_loss(report.hpg)
    report.flags = [(e.loop_id, e.span) for e in report.ranking if e.flagged]
    return report


def self_consistency(sequences_a, sequences_b, topology, props,
                     config: TrainConfig, base_params: ParamSet | None = None):
    """Identifiability check: refit the valve-state vectors independently on
    two disjoint sequence sets sharing valve eras, all other parameters
    frozen from a prior joint fit, and compare the resulting mass-flow
    ratios.

    Returns (r2_per_era, mean_r2, beta_a, beta_b).
    """
    eras_a = {(s.subfield_id, s.era_id) for s in sequences_a}
    eras_b = {(s.subfield_id, s.era_id) for s in sequences_b}
    common = eras_a & eras_b
    if not common:
        raise EraMismatch("sequence sets share no (subfield, era)")
    if base_params is None:
        base_params, _ = fit(list(sequences_a) + list(sequences_b),
                             topology, props, config)
    _, ra = fit(sequences_a, topology, props, config,
                init_params=base_params, trainable={"omega"})
    _, rb = fit(sequences_b, topology, props, config,
                init_params=base_params, trainable={"omega"})
    r2_per_era = {}
    for key in sorted(common):
        r2_per_era[key] = r_squared(ra.beta[key], rb.beta[key])
    mean_r2 = float(np.mean(list(r2_per_era.values())))
    return r2_per_era, mean_r2, ra.beta, rb.beta


# -- checkpoint files --------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, velocity, registry_meta,
                    config: TrainConfig, epoch: int):
    """Text (JSON) checkpoint; floats round-trip exactly via repr."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "params": params.to_dict(),
        "velocity": list(map(float, np.asarray(velocity))),
        "era_mapping": registry_meta,
        "config": config.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(
            f"unsupported checkpoint version {payload.get('version')}")
    params = ParamSet.from_dict(payload["params"])
    velocity = np.asarray(payload["velocity"], dtype=float)
    config = TrainConfig.from_dict(payload["config"])
    return params, velocity, payload["era_mapping"], config, payload["epoch"]
