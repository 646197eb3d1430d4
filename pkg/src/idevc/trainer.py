"""Alternating optimization of the disentangling objective.

Each training step draws a batch of K groups x m samples, runs k_theta
ascent steps on the approximator's log-likelihood (encoders frozen),
then one descent step on ``cross_bound - style_bound - content_bound``
for the encoders and decoder (approximator frozen).  ``beta`` scales the
approximator's effective step; with ``beta = 0`` the approximator never
moves, which supports the ablation harness.

The style embedding fed to the decoder for sample i is the mean of the
other m-1 style embeddings of its batch group, with the gradient stopped,
so the decoder sees a group-level style that never trains the style
encoder through the reconstruction path.

Plain fixed-step gradient descent everywhere keeps runs bit-reproducible
for a given (dataset, config, seed).
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import mibounds as mb, models, numcore as nc, synthdata
from .errors import NumericError, PreconditionError, ValidationError

logger = logging.getLogger(__name__)

ABLATIONS = ("none", "i1", "i3")


@dataclass
class ModelConfig:
    style_dim: int = 8
    content_dim: int = 16
    hidden_width: int = 64
    approx_hidden: int = 64
    variance_floor: float = 1e-4

    def validate(self):
        problems = []
        for name in ("style_dim", "content_dim", "hidden_width", "approx_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.variance_floor <= 0:
            problems.append(f"variance_floor must be > 0, got {self.variance_floor}")
        if problems:
            raise ValidationError("invalid model config: " + "; ".join(problems))


@dataclass
class TrainConfig:
    beta: float = 5.0
    main_lr: float = 1e-3
    approx_lr: float = 3e-3
    batch_groups: int = 8  # K
    batch_per_group: int = 8  # m
    approx_steps: int = 5  # ascent steps per main step
    total_steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 1000
    holdout_fraction: float = 0.2
    ablate: str = "none"
    normalize_style: bool = False
    gate_check: bool = True
    # Reconstruction-score temperature: scores are -||x - D||^2 / tau.
    i2_temperature: float = 1.0
    # Weight of the decoder likelihood anchor mean||x - D||^2 added to the
    # descended objective.  The grouped contrastive term alone has an
    # identically-zero gradient in the style subspace (same-group samples
    # share their style component, so it cancels from the softmax-weighted
    # mean), which leaves reconstructions style-blind; the anchor is the
    # plain conditional log-likelihood of the reconstruction model.
    recon_weight: float = 1.0

    def validate(self):
        problems = []
        if self.beta < 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if self.main_lr <= 0:
            problems.append(f"main_lr must be > 0, got {self.main_lr}")
        if self.approx_lr <= 0:
            problems.append(f"approx_lr must be > 0, got {self.approx_lr}")
        if self.batch_groups < 2:
            problems.append(f"batch_groups must be >= 2, got {self.batch_groups}")
        if self.batch_per_group < 2:
            problems.append(f"batch_per_group must be >= 2, got {self.batch_per_group}")
        if self.approx_steps < 0:
            problems.append(f"approx_steps must be >= 0, got {self.approx_steps}")
        if self.total_steps < 0:
            problems.append(f"total_steps must be >= 0, got {self.total_steps}")
        if self.checkpoint_every < 1:
            problems.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            problems.append(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")
        if self.ablate not in ABLATIONS:
            problems.append(f"ablate must be one of {ABLATIONS}, got {self.ablate!r}")
        if self.i2_temperature <= 0:
            problems.append(f"i2_temperature must be > 0, got {self.i2_temperature}")
        if problems:
            raise ValidationError("invalid trainer config: " + "; ".join(problems))
        if self.beta == 0:
            logger.warning("beta = 0: approximator stays at initialization (flagged run)")


@dataclass
class Batch:
    x: np.ndarray  # (K*m, F)
    labels: np.ndarray  # (K*m,)
    group_ids: np.ndarray  # (K,)
    sample_indices: np.ndarray  # (K*m,)


@dataclass
class TrainState:
    bundle: models.ModelBundle
    step: int = 0
    rng: np.random.Generator = None  # type: ignore[assignment]
    history: list[dict] = field(default_factory=list)
    last_checkpoint: str | None = None
    last_metrics: dict = field(default_factory=dict)


def split_groups(group_ids, holdout_fraction: float, seed: int):
    """Deterministic zero-shot split: (training groups, held-out groups)."""
    group_ids = np.asarray(group_ids)
    if holdout_fraction <= 0:
        return group_ids.copy(), group_ids[:0]
    n_hold = max(1, int(np.floor(holdout_fraction * group_ids.size)))
    if n_hold >= group_ids.size:
        raise ValidationError("holdout_fraction leaves no training groups")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 11))))
    held = np.sort(rng.choice(group_ids, size=n_hold, replace=False))
    train = np.array([g for g in group_ids if g not in set(held.tolist())])
    return train, held


def sample_batch(
    dataset: synthdata.GroupedDataset,
    groups,
    k: int,
    m: int,
    rng: np.random.Generator,
) -> Batch:
    """K groups / m samples per group, both without replacement."""
    groups = np.asarray(groups)
    if groups.size < k:
        raise PreconditionError(f"need at least {k} groups, dataset split has {groups.size}")
    chosen = rng.choice(groups, size=k, replace=False)
    xs, labels, indices = [], [], []
    for group in chosen:
        members = dataset.indices_of(group)
        if members.size < m:
            raise PreconditionError(
                f"group {group!r} has {members.size} samples; batch needs {m}"
            )
        picked = rng.choice(members, size=m, replace=False)
        for i in picked:
            xs.append(dataset.samples[int(i)].reshape(1, -1))
            labels.append(int(group))
            indices.append(int(i))
    return Batch(np.vstack(xs), np.array(labels), chosen, np.array(indices))


def _normalize_rows_node(s: nc.Node) -> nc.Node:
    # 1/sqrt(sum s^2) composed from existing primitives; zero rows are invalid.
    sq = nc.row_sum(nc.mul(s, s))
    inv = nc.exp(nc.scale(nc.log(sq), -0.5))
    return nc.mul(s, nc.matmul(inv, nc.constant(np.ones((1, s.value.shape[1])), "ones")))


def _loo_style_means(s_values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample mean of the other same-group style embeddings (no gradient)."""
    out = np.empty_like(s_values)
    for group in np.unique(labels):
        idx = np.flatnonzero(labels == group)
        total = s_values[idx].sum(axis=0)
        out[idx] = (total - s_values[idx]) / (idx.size - 1)
    return out


def main_step(state: TrainState, batch: Batch, config: TrainConfig) -> dict:
    """One descent step on the encoder/decoder objective; approximator frozen."""
    bundle = state.bundle
    es_nodes = models.mlp_leaves(bundle.style_encoder, "style_encoder")
    ec_nodes = models.mlp_leaves(bundle.content_encoder, "content_encoder")
    dec_nodes = models.mlp_leaves(bundle.decoder, "decoder")
    q_nodes = models.approx_leaves(bundle.approximator, trainable=False)

    x = nc.constant(batch.x, "batch_x")
    s = models.mlp_forward(es_nodes, x)
    if config.normalize_style:
        s = _normalize_rows_node(s)
    c = models.mlp_forward(ec_nodes, x)

    i1 = mb.style_group_bound_node(s, batch.labels)
    style_loo = nc.constant(_loo_style_means(s.value, batch.labels), "style_loo")
    decoded = models.mlp_forward(dec_nodes, nc.hconcat(style_loo, c))
    i2 = mb.content_cond_node(x, decoded, batch.labels, temperature=config.i2_temperature)
    mu, var = models.approx_forward(q_nodes, c)
    i3 = mb.club_cross_node(s, mu, var)

    loss = nc.scale(i1, 0.0)  # zero node keeps the graph rooted when ablating
    if config.ablate != "i3":
        loss = nc.add(loss, i3)
    if config.ablate != "i1":
        loss = nc.sub(loss, i1)
    loss = nc.sub(loss, i2)

    nc.backward(loss)
    models.sgd_update(es_nodes, bundle.style_encoder, config.main_lr)
    models.sgd_update(ec_nodes, bundle.content_encoder, config.main_lr)
    models.sgd_update(dec_nodes, bundle.decoder, config.main_lr)
    return {
        "I1": float(i1.value[0, 0]),
        "I2": float(i2.value[0, 0]),
        "I3": float(i3.value[0, 0]),
        "main_loss": float(loss.value[0, 0]),
    }


def approx_step(state: TrainState, batch: Batch, config: TrainConfig) -> dict:
    """k_theta ascent steps on the approximator likelihood; encoders frozen."""
    bundle = state.bundle
    s_const = models.encode_style(bundle, batch.x)
    if config.normalize_style:
        norms = np.linalg.norm(s_const, axis=1, keepdims=True)
        s_const = s_const / norms
    c_const = models.encode_content(bundle, batch.x)
    value = mb.approximator_loglik(s_const, c_const, bundle.approximator)
    steps = config.approx_steps if config.beta > 0 else 0
    n = batch.x.shape[0]
    for _ in range(steps):
        q_nodes = models.approx_leaves(bundle.approximator, trainable=True)
        mu, var = models.approx_forward(q_nodes, nc.constant(c_const, "c"))
        objective = mb.loglik_node(nc.constant(s_const, "s"), mu, var)
        value = float(objective.value[0, 0])
        # Ascend the per-sample mean so the configured rate is batch-size
        # independent; the logged F stays the likelihood sum.
        nc.backward(nc.scale(objective, 1.0 / n))
        ascent_lr = -config.approx_lr * config.beta
        models.sgd_update(q_nodes["mean"], bundle.approximator.mean_net, ascent_lr)
        models.sgd_update(q_nodes["var"], bundle.approximator.var_net, ascent_lr)
    return {"F": float(value)}


def train(
    dataset: synthdata.GroupedDataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    out_dir: str | None = None,
) -> TrainState:
    """Run the alternating loop; returns the final state with metric history.

    When ``out_dir`` is given, writes ``metrics.csv`` incrementally (header
    ``step,I1,I2,I3,F,loss``), periodic checkpoints, the final
    ``checkpoint.txt`` and the zero-shot ``split.txt``.
    """
    config.validate()
    model_config = model_config or ModelConfig()
    model_config.validate()
    if not dataset.is_vector():
        raise PreconditionError("training requires a vector-regime dataset (T = 1 samples)")
    if config.gate_check:
        ok, accuracy = synthdata.quality_gate(dataset)
        if not ok:
            raise PreconditionError(
                f"dataset fails the generation-quality gate (accuracy {accuracy:.4f})"
            )

    train_groups, held_groups = split_groups(
        dataset.group_ids, config.holdout_fraction, config.seed
    )
    dims = models.Dims(dataset.obs_dim, model_config.style_dim, model_config.content_dim)
    bundle = models.init_bundle(
        dims,
        config.seed,
        hidden_width=model_config.hidden_width,
        approx_hidden=model_config.approx_hidden,
        variance_floor=model_config.variance_floor,
    )
    state = TrainState(
        bundle=bundle,
        rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 13)))),
    )

    log_fh = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_split(os.path.join(out_dir, "split.txt"), train_groups, held_groups)
        log_fh = open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["step", "I1", "I2", "I3", "F", "loss"])

    def checkpoint(tag: str) -> str | None:
        if out_dir is None:
            return None
        path = os.path.join(out_dir, tag)
        models.save_bundle(path, state.bundle)
        state.last_checkpoint = path
        return path

    try:
        for step in range(1, config.total_steps + 1):
            batch = sample_batch(
                dataset, train_groups, config.batch_groups, config.batch_per_group, state.rng
            )
            metrics = approx_step(state, batch, config)
            metrics.update(main_step(state, batch, config))
            loss = metrics["main_loss"] - config.beta * metrics["F"]
            row = {
                "step": step,
                "I1": metrics["I1"],
                "I2": metrics["I2"],
                "I3": metrics["I3"],
                "F": metrics["F"],
                "loss": loss,
            }
            if not all(np.isfinite(v) for v in row.values()):
                raise NumericError(
                    f"non-finite loss at step {step}", last_checkpoint=state.last_checkpoint
                )
            state.step = step
            state.history.append(row)
            state.last_metrics = row
            if writer is not None:
                writer.writerow(
                    [step] + [f"{row[k]:.17g}" for k in ("I1", "I2", "I3", "F", "loss")]
                )
                log_fh.flush()
            if step % config.checkpoint_every == 0 and step < config.total_steps:
                checkpoint(f"checkpoint_step{step:06d}.txt")
            if step % 500 == 0:
                logger.info(
                    "step %d: I1=%.4f I2=%.4f I3=%.4f F=%.2f", step,
                    row["I1"], row["I2"], row["I3"], row["F"],
                )
        checkpoint("checkpoint.txt")
    except NumericError as err:
        if err.last_checkpoint is None:
            err.last_checkpoint = state.last_checkpoint
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


def transfer(bundle: models.ModelBundle, x_source: np.ndarray, x_target: np.ndarray) -> np.ndarray:
    """Zero-shot transfer: decode the source content with the target style.

    No group identity is consulted, so this works for groups never seen in
    training.
    """
    x_source = np.atleast_2d(np.asarray(x_source, dtype=np.float64))
    x_target = np.atleast_2d(np.asarray(x_target, dtype=np.float64))
    style = models.encode_style(bundle, x_target)
    content = models.encode_content(bundle, x_source)
    return models.decode(bundle, style, content)


def _write_split(path, train_groups, held_groups) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("[split]\n")
        fh.write("train = " + " ".join(str(int(g)) for g in train_groups) + "\n")
        fh.write("held = " + " ".join(str(int(g)) for g in held_groups) + "\n")


def read_split(path) -> tuple[np.ndarray, np.ndarray]:
    import configparser

    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    if "split" not in parser:
        raise ValidationError(f"{path}: missing [split] section")
    train = np.array([int(v) for v in parser["split"].get("train", "").split()])
    held = np.array([int(v) for v in parser["split"].get("held", "").split()])
    return train, held
