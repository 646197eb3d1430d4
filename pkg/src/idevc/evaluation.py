"""Objective evaluation: DTW alignment, DTW-MCD, verification, probes.

``dtw`` is exact dynamic programming over the padded cost table with a
fixed tie-break (diagonal move first, then the first-sequence advance),
so alignments are deterministic.  ``dtw_mcd`` applies the conventional
cepstral-distance constant ``10*sqrt(2)/ln 10`` to per-frame Euclidean
gaps and normalizes by path length.

Verification accuracy follows the profile/dot-product protocol: a
transfer counts as a success only when the dot product between its style
embedding and the target group's profile is the strict maximum over all
profiles (ties fail).

The probes are deliberately small and fixed (two-layer tanh classifier,
80/20 split, full-batch gradient descent) so paired ablation comparisons
stay paired.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import models, numcore as nc, synthdata
from .errors import DimensionError, PreconditionError, ValidationError

MCD_COEFF = 10.0 * math.sqrt(2.0) / math.log(10.0)


# ---------------------------------------------------------------------------
# Dynamic time warping
# ---------------------------------------------------------------------------


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(((a - b) ** 2).sum()))


def _local_costs(x: np.ndarray, y: np.ndarray, dist) -> np.ndarray:
    if dist is euclidean or dist is None:
        diff = x[:, None, :] - y[None, :, :]
        return np.sqrt(np.einsum("tsf,tsf->ts", diff, diff))
    t_len, s_len = x.shape[0], y.shape[0]
    local = np.empty((t_len, s_len))
    for t in range(t_len):
        for s in range(s_len):
            local[t, s] = dist(x[t], y[s])
    return local


def dtw(x: np.ndarray, y: np.ndarray, dist=None) -> tuple[float, list[tuple[int, int]]]:
    """Minimum accumulated ground distance over monotone alignment paths.

    Returns ``(cost, path)`` with 0-based index pairs from ``(0, 0)`` to
    ``(T-1, S-1)``; each step advances at least one index by exactly one.
    Ties prefer the diagonal predecessor, then the x-advance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0 or x.shape[0] < 1 or y.shape[0] < 1:
        raise PreconditionError("dtw: empty sequence")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"dtw: feature dims {x.shape[1]} vs {y.shape[1]}")
    t_len, s_len = x.shape[0], y.shape[0]
    local = _local_costs(x, y, dist)

    table = np.full((t_len + 1, s_len + 1), np.inf)
    table[0, 0] = 0.0
    for t in range(1, t_len + 1):
        for s in range(1, s_len + 1):
            best = min(table[t - 1, s - 1], table[t - 1, s], table[t, s - 1])
            table[t, s] = local[t - 1, s - 1] + best

    path = [(t_len - 1, s_len - 1)]
    t, s = t_len, s_len
    while (t, s) != (1, 1):
        candidates = (
            (table[t - 1, s - 1], (t - 1, s - 1)),
            (table[t - 1, s], (t - 1, s)),
            (table[t, s - 1], (t, s - 1)),
        )
        best = min(c[0] for c in candidates)
        for value, (pt, ps) in candidates:
            if value == best:
                t, s = pt, ps
                break
        path.append((t - 1, s - 1))
    path.reverse()
    return float(table[t_len, s_len]), path


def dtw_mcd(x: np.ndarray, y: np.ndarray) -> float:
    """Path-length-normalized DTW with the cepstral-distance frame metric."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"dtw_mcd: feature dims {x.shape[1]} vs {y.shape[1]}")
    cost, path = dtw(x, y, dist=None)
    return MCD_COEFF * cost / len(path)


# ---------------------------------------------------------------------------
# Verification accuracy
# ---------------------------------------------------------------------------


def group_profiles(
    bundle: models.ModelBundle, references: dict, normalize: bool = False
) -> dict:
    """Per-group profile: mean style embedding of the group's reference samples."""
    profiles = {}
    for group, samples in references.items():
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if samples.shape[0] < 1:
            raise PreconditionError(f"verification: empty reference group {group!r}")
        profile = models.encode_style(bundle, samples).mean(axis=0)
        if normalize:
            norm = np.linalg.norm(profile)
            if norm > 0:
                profile = profile / norm
        profiles[group] = profile
    return profiles


def verification_accuracy(
    bundle: models.ModelBundle,
    transfers: list[tuple[object, np.ndarray]],
    references: dict,
    normalize_profiles: bool = False,
) -> float:
    """Fraction of transfers whose style embedding ranks the target profile
    strictly first by dot product; ties count as failures."""
    profiles = group_profiles(bundle, references, normalize_profiles)
    groups = list(profiles)
    matrix = np.vstack([profiles[g] for g in groups])
    successes = 0
    for target, x_hat in transfers:
        if target not in profiles:
            raise PreconditionError(f"verification: no reference group {target!r}")
        s = models.encode_style(bundle, np.atleast_2d(x_hat)).reshape(-1)
        scores = matrix @ s
        target_pos = groups.index(target)
        target_score = scores[target_pos]
        others = np.delete(scores, target_pos)
        if others.size == 0 or target_score > others.max():
            successes += 1
    return successes / len(transfers) if transfers else 0.0


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    train_frac: float = 0.8
    epochs: int = 200
    width: int = 32
    lr: float = 0.5
    seed: int = 0

    def validate(self):
        problems = []
        if not 0.0 < self.train_frac < 1.0:
            problems.append(f"train_frac must be in (0, 1), got {self.train_frac}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.width < 1:
            problems.append(f"width must be >= 1, got {self.width}")
        if self.lr <= 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if problems:
            raise ValidationError("invalid probe config: " + "; ".join(problems))


def _stratified_split(labels: np.ndarray, frac: float, rng: np.random.Generator):
    train_idx, test_idx = [], []
    for group in np.unique(labels):
        members = np.flatnonzero(labels == group)
        members = members[rng.permutation(members.size)]
        cut = max(1, int(round(frac * members.size)))
        cut = min(cut, members.size - 1)
        train_idx.extend(members[:cut])
        test_idx.extend(members[cut:])
    return np.array(sorted(train_idx)), np.array(sorted(test_idx))


def probe_accuracy(features: np.ndarray, labels, config: ProbeConfig | None = None) -> float:
    """Two-layer classifier accuracy on a held-out split of the embeddings.

    Features are standardized with train-split statistics; training is
    full-batch gradient descent on the softmax cross-entropy.
    """
    config = config or ProbeConfig()
    config.validate()
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    groups, inverse = np.unique(labels, return_inverse=True)
    if groups.size < 2:
        raise PreconditionError("probe needs at least 2 groups")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 101))))
    train_idx, test_idx = _stratified_split(inverse, config.train_frac, rng)
    if train_idx.size == 0 or test_idx.size == 0:
        raise PreconditionError("probe split is degenerate")

    mean = features[train_idx].mean(axis=0)
    std = features[train_idx].std(axis=0)
    std[std < 1e-12] = 1.0
    feats = (features - mean) / std

    net = models.init_mlp(
        [features.shape[1], config.width, groups.size], ["tanh", "identity"], rng
    )
    x_train = feats[train_idx]
    onehot = np.zeros((train_idx.size, groups.size))
    onehot[np.arange(train_idx.size), inverse[train_idx]] = 1.0
    for _ in range(config.epochs):
        layer_nodes = models.mlp_leaves(net, "probe", trainable=True)
        logits = models.mlp_forward(layer_nodes, nc.constant(x_train))
        lse = nc.row_logsumexp(logits)
        picked = nc.row_sum(nc.mul(logits, nc.constant(onehot)))
        loss = nc.mean_all(nc.sub(lse, picked))
        nc.backward(loss)
        models.sgd_update(layer_nodes, net, config.lr)

    logits = models.mlp_apply(net, feats[test_idx])
    predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == inverse[test_idx]))


def leakage_probe(content_embeddings, labels, config: ProbeConfig | None = None) -> float:
    """Group identity recoverable from content embeddings; lower is better."""
    return probe_accuracy(content_embeddings, labels, config)


def style_probe(style_embeddings, labels, config: ProbeConfig | None = None) -> float:
    """Group identity recoverable from style embeddings; higher is better."""
    return probe_accuracy(style_embeddings, labels, config)


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------


def _ordered_indices(dataset: synthdata.GroupedDataset) -> list[int]:
    order = []
    for group in dataset.group_ids:
        order.extend(int(i) for i in dataset.indices_of(group))
    return order


def export_embeddings(bundle: models.ModelBundle, dataset: synthdata.GroupedDataset, path) -> None:
    """CSV of (group_id, index, kind, v0...); one style and one content row
    per sample, ordered by (group, index).

    Samples are encoded one group batch at a time, matching how
    verification builds its reference profiles, so re-imported embeddings
    reproduce profile means bit-exactly.
    """
    width = max(bundle.dims.style_dim, bundle.dims.content_dim)
    header = ["group_id", "index", "kind"] + [f"v{i}" for i in range(width)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for group in dataset.group_ids:
            indices = [int(i) for i in dataset.indices_of(group)]
            feats = np.vstack(
                [
                    s if s.shape[0] == 1 else s.mean(axis=0, keepdims=True)
                    for s in (dataset.samples[i] for i in indices)
                ]
            )
            style = models.encode_style(bundle, feats)
            content = models.encode_content(bundle, feats)
            for row_pos, sample_index in enumerate(indices):
                for kind, mat in (("style", style), ("content", content)):
                    vec = mat[row_pos]
                    row = [str(dataset.labels[sample_index]), str(sample_index), kind]
                    row += [f"{v:.17g}" for v in vec]
                    row += [""] * (width - vec.size)
                    writer.writerow(row)


def read_embeddings(path, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Re-import one kind of embedding from an exported CSV."""
    rows, labels = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["group_id", "index", "kind"]:
            raise ValidationError(f"{path}: unexpected embedding CSV header")
        for row in reader:
            if row[2] != kind:
                continue
            values = [float(v) for v in row[3:] if v != ""]
            rows.append(values)
            labels.append(int(row[0]))
    if not rows:
        return np.zeros((0, 0)), np.array([], dtype=int)
    return np.array(rows), np.array(labels)


# ---------------------------------------------------------------------------
# Evaluation runs and reports
# ---------------------------------------------------------------------------


@dataclass
class TransferRecord:
    source_group: int
    source_index: int
    target_group: int
    verified: bool
    mcd_to_oracle: float  # nan when no oracle is available


@dataclass
class EvalReport:
    transfers: list[TransferRecord] = field(default_factory=list)
    verification: float = float("nan")
    style_probe: float = float("nan")
    leakage_probe: float = float("nan")
    probe_chance: float = float("nan")
    transfer_error_ratio: float = float("nan")
    eval_groups: list = field(default_factory=list)
    zero_shot: bool = False

    @property
    def mcd_values(self) -> np.ndarray:
        vals = [t.mcd_to_oracle for t in self.transfers if not math.isnan(t.mcd_to_oracle)]
        return np.array(vals)

    def summary_lines(self) -> list[str]:
        mcd = self.mcd_values
        lines = [
            f"evaluation groups: {' '.join(str(g) for g in self.eval_groups)}"
            + (" (zero-shot holdout)" if self.zero_shot else ""),
            f"transfers evaluated: {len(self.transfers)}",
            f"verification accuracy: {self.verification:.4f}",
            f"style-probe accuracy: {self.style_probe:.4f}",
            f"leakage-probe accuracy: {self.leakage_probe:.4f} (chance {self.probe_chance:.4f})",
        ]
        if mcd.size:
            lines.append(
                f"dtw-mcd to oracle: mean {mcd.mean():.6f}  std {mcd.std():.6f}  n {mcd.size}"
            )
            lines.append(f"transfer error ratio: {self.transfer_error_ratio:.6f}")
        else:
            lines.append("dtw-mcd to oracle: unavailable (no linear-mixing ground truth)")
        return lines


def build_transfers(
    dataset: synthdata.GroupedDataset,
    eval_groups,
    max_transfers: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, int, int]]:
    """Deterministic (source_group, source_index, target_group, target_index)
    tuples over ordered group pairs of ``eval_groups``."""
    eval_groups = [g for g in eval_groups]
    pairs = []
    for u in eval_groups:
        for v in eval_groups:
            if u == v:
                continue
            src = dataset.indices_of(u)
            tgt = dataset.indices_of(v)
            for k, i in enumerate(src):
                pairs.append((int(u), int(i), int(v), int(tgt[k % tgt.size])))
    if len(pairs) > max_transfers:
        keep = rng.choice(len(pairs), size=max_transfers, replace=False)
        pairs = [pairs[int(k)] for k in sorted(keep)]
    return pairs


def run_evaluation(
    bundle: models.ModelBundle,
    dataset: synthdata.GroupedDataset,
    truth: synthdata.GroundTruth | None,
    eval_groups,
    probe_config: ProbeConfig | None = None,
    max_transfers: int = 200,
    normalize_profiles: bool = False,
    seed: int = 0,
) -> EvalReport:
    """Full objective evaluation over the given evaluation groups.

    Probes run over the whole dataset (embeddings depend only on the
    encoders); transfers and verification are restricted to
    ``eval_groups``.
    """
    from . import trainer  # local import; trainer does not import evaluation

    if not dataset.is_vector():
        raise ValidationError("run_evaluation requires a vector-regime dataset")
    probe_config = probe_config or ProbeConfig()
    x = dataset.as_matrix()
    style = models.encode_style(bundle, x)
    content = models.encode_content(bundle, x)
    chance = 1.0 / dataset.group_ids.size

    report = EvalReport(
        eval_groups=[int(g) for g in eval_groups],
        probe_chance=chance,
        style_probe=style_probe(style, dataset.labels, probe_config),
        leakage_probe=leakage_probe(content, dataset.labels, probe_config),
    )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 7))))
    pairs = build_transfers(dataset, eval_groups, max_transfers, rng)
    references = {int(g): np.vstack([dataset.samples[i] for i in dataset.indices_of(g)])
                  for g in eval_groups}
    transfers_for_verification = []
    num = den = 0.0
    for source_group, source_index, target_group, target_index in pairs:
        x_hat = trainer.transfer(
            bundle, dataset.samples[source_index], dataset.samples[target_index]
        )
        transfers_for_verification.append((target_group, x_hat))
        mcd = float("nan")
        if truth is not None and truth.spec.mixing == "linear":
            oracle = synthdata.oracle_transfer_target(truth, source_index, target_group)
            mcd = dtw_mcd(x_hat, oracle)
            num += float(((x_hat - oracle) ** 2).sum())
            den += float(((oracle - dataset.samples[source_index]) ** 2).sum())
        report.transfers.append(
            TransferRecord(source_group, source_index, target_group, False, mcd)
        )
    if transfers_for_verification:
        profiles_ok = verification_accuracy(
            bundle, transfers_for_verification, references, normalize_profiles
        )
        report.verification = profiles_ok
        # Mark per-record verification for the report table.
        profiles = group_profiles(bundle, references, normalize_profiles)
        groups = list(profiles)
        matrix = np.vstack([profiles[g] for g in groups])
        for record, (target, x_hat) in zip(report.transfers, transfers_for_verification):
            s = models.encode_style(bundle, np.atleast_2d(x_hat)).reshape(-1)
            scores = matrix @ s
            pos = groups.index(target)
            others = np.delete(scores, pos)
            record.verified = bool(others.size == 0 or scores[pos] > others.max())
    else:
        report.verification = 0.0
    report.transfer_error_ratio = num / den if den > 0 else float("nan")
    return report


def write_report(report: EvalReport, out_dir, render_figures: bool = True) -> None:
    """Write report.csv + summary.txt, rendering figures alongside them."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["source_group", "source_index", "target_group", "verified", "mcd_to_oracle"]
        )
        for t in report.transfers:
            writer.writerow(
                [
                    t.source_group,
                    t.source_index,
                    t.target_group,
                    int(t.verified),
                    "" if math.isnan(t.mcd_to_oracle) else f"{t.mcd_to_oracle:.17g}",
                ]
            )
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(report.summary_lines()) + "\n")
    if render_figures:
        from . import figures

        fig_dir = os.path.join(out_dir, "figures")
        os.makedirs(fig_dir, exist_ok=True)
        mcd = report.mcd_values
        if mcd.size:
            figures.distance_histogram(mcd, os.path.join(fig_dir, "dtw_mcd.png"))
        figures.accuracy_bars(
            {
                "verification": report.verification,
                "style probe": report.style_probe,
                "leakage probe": report.leakage_probe,
                "chance": report.probe_chance,
            },
            os.path.join(fig_dir, "accuracies.png"),
        )
