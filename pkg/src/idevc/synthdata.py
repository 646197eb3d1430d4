"""Synthetic grouped datasets with known ground-truth style/content factors.

A dataset has M groups (the "speaker" variable) with N_u samples each.
In the vector regime each sample is ``x = A s*_u + B z + eps`` with a
per-group style vector ``s*_u``, a per-sample content factor ``z`` and
Gaussian noise; in the sequence regime the content factor is a smoothed
random walk over T frames, optionally re-timed by a random monotone warp.

The linear mixing columns ``[A B]`` are orthonormal, so the true factors
are exact linear functions of the observation; that makes the noiseless
regime exactly reconstructible and gives closed-form oracle transfer
targets.

On disk a dataset is a directory with ``manifest.tsv`` (lines
``group_id<TAB>relative_path``) and one matrix text file per sample
(T x F, with T = 1 in the vector regime).  Ground truth lives in a
sibling ``truth/`` directory in the same formats and is never read by
the trainer.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from . import models, numcore as nc
from .errors import PreconditionError, UnsupportedRegimeError, ValidationError

REGIMES = ("vector", "sequence")
MIXINGS = ("linear", "random-mlp")


@dataclass
class SyntheticSpec:
    groups: int = 10
    samples_per_group: int = 50
    style_dim: int = 4
    content_dim: int = 8
    obs_dim: int = 24
    regime: str = "vector"
    frames: int = 16
    warp: bool = False
    mixing: str = "linear"
    noise_sigma: float = 0.05
    style_separation: float = 2.0
    content_scale: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.groups < 2:
            problems.append(f"groups must be >= 2, got {self.groups}")
        if self.samples_per_group < 2:
            problems.append(f"samples_per_group must be >= 2, got {self.samples_per_group}")
        if self.style_dim < 1:
            problems.append(f"style_dim must be >= 1, got {self.style_dim}")
        if self.content_dim < 1:
            problems.append(f"content_dim must be >= 1, got {self.content_dim}")
        if self.obs_dim < self.style_dim + self.content_dim:
            problems.append(
                f"obs_dim must be >= style_dim + content_dim, got "
                f"{self.obs_dim} < {self.style_dim} + {self.content_dim}"
            )
        if self.regime not in REGIMES:
            problems.append(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime == "sequence" and self.frames < 2:
            problems.append(f"frames must be >= 2 in the sequence regime, got {self.frames}")
        if self.mixing not in MIXINGS:
            problems.append(f"mixing must be one of {MIXINGS}, got {self.mixing!r}")
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.style_separation <= 0:
            problems.append(f"style_separation must be > 0, got {self.style_separation}")
        if self.content_scale <= 0:
            problems.append(f"content_scale must be > 0, got {self.content_scale}")
        if problems:
            raise ValidationError("invalid synthetic spec: " + "; ".join(problems))


@dataclass
class GroupedDataset:
    """Samples organized by group id; each sample is a (T, F) frame matrix."""

    samples: list[np.ndarray]
    labels: np.ndarray  # group id per sample

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if len(self.samples) != self.labels.shape[0]:
            raise ValidationError("dataset: one label per sample required")

    @property
    def group_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def obs_dim(self) -> int:
        return self.samples[0].shape[1]

    def indices_of(self, group) -> np.ndarray:
        return np.flatnonzero(self.labels == group)

    def is_vector(self) -> bool:
        return all(s.shape[0] == 1 for s in self.samples)

    def as_matrix(self) -> np.ndarray:
        """(N, F) stack; vector regime only."""
        if not self.is_vector():
            raise UnsupportedRegimeError("as_matrix requires a vector-regime dataset")
        return np.vstack(self.samples)

    def subset(self, groups) -> "GroupedDataset":
        keep = np.isin(self.labels, np.asarray(groups))
        return GroupedDataset(
            [s for s, k in zip(self.samples, keep) if k], self.labels[keep]
        )


@dataclass
class GroundTruth:
    spec: SyntheticSpec
    group_ids: np.ndarray
    styles: np.ndarray  # (M, style_dim), row order matches group_ids
    contents: list[np.ndarray]  # per sample, pre-warp trajectory (T, content_dim)
    mix_style: np.ndarray | None  # A (F, style_dim) in the linear regime
    mix_content: np.ndarray | None  # B (F, content_dim) in the linear regime
    mix_mlp: models.MLPParams | None = None
    warp_paths: dict = field(default_factory=dict)  # sample index -> frame indices

    def style_of(self, group) -> np.ndarray:
        idx = int(np.flatnonzero(self.group_ids == group)[0])
        return self.styles[idx]


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _spread_styles(spec: SyntheticSpec) -> np.ndarray:
    """Group styles scaled so the minimum pairwise distance equals the target."""
    rng = _rng(spec.seed, 0)
    styles = rng.normal(size=(spec.groups, spec.style_dim))
    dists = np.sqrt(
        ((styles[:, None, :] - styles[None, :, :]) ** 2).sum(-1)
    )
    min_dist = dists[np.triu_indices(spec.groups, k=1)].min()
    if min_dist <= 0:
        raise ValidationError("degenerate style draw; choose another seed")
    return styles * (spec.style_separation / min_dist)


def _mixing(spec: SyntheticSpec):
    rng = _rng(spec.seed, 1)
    if spec.mixing == "linear":
        raw = rng.normal(size=(spec.obs_dim, spec.style_dim + spec.content_dim))
        q, _ = np.linalg.qr(raw)
        return q[:, : spec.style_dim].copy(), q[:, spec.style_dim :].copy(), None
    mlp = models.init_mlp(
        [spec.style_dim + spec.content_dim, 32, spec.obs_dim], ["tanh", "identity"], rng
    )
    return None, None, mlp


def _content_walk(rng: np.random.Generator, frames: int, dim: int, scale: float) -> np.ndarray:
    """Gaussian random walk smoothed by a 3-frame moving average."""
    steps = rng.normal(scale=0.5 * scale, size=(frames, dim))
    steps[0] = rng.normal(scale=scale, size=dim)
    walk = np.cumsum(steps, axis=0)
    padded = np.vstack([walk[:1], walk, walk[-1:]])
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def _mix(spec, mix_style, mix_content, mix_mlp, style: np.ndarray, content: np.ndarray):
    """content is (T, content_dim); returns noiseless frames (T, F)."""
    if spec.mixing == "linear":
        return style @ mix_style.T + content @ mix_content.T
    stacked = np.hstack([np.repeat(style.reshape(1, -1), content.shape[0], axis=0), content])
    return models.mlp_apply(mix_mlp, stacked)


def generate(spec: SyntheticSpec) -> tuple[GroupedDataset, GroundTruth]:
    """Generate a dataset plus its ground truth; bit-reproducible per seed."""
    spec.validate()
    styles = _spread_styles(spec)
    mix_style, mix_content, mix_mlp = _mixing(spec)
    group_ids = np.arange(1, spec.groups + 1)

    samples: list[np.ndarray] = []
    labels: list[int] = []
    contents: list[np.ndarray] = []
    warp_paths: dict[int, np.ndarray] = {}
    for gi, group in enumerate(group_ids):
        for i in range(spec.samples_per_group):
            rng = _rng(spec.seed, 2, int(group), i)
            frames = spec.frames if spec.regime == "sequence" else 1
            if spec.regime == "sequence":
                content = _content_walk(rng, frames, spec.content_dim, spec.content_scale)
            else:
                content = rng.normal(scale=spec.content_scale, size=(1, spec.content_dim))
            x = _mix(spec, mix_style, mix_content, mix_mlp, styles[gi], content)
            if spec.noise_sigma > 0:
                x = x + rng.normal(scale=spec.noise_sigma, size=x.shape)
            if spec.regime == "sequence" and spec.warp:
                path = sample_warp_path(frames, _rng(spec.seed, 3, int(group), i))
                warp_paths[len(samples)] = path
                x = apply_warp(x, path)
            samples.append(np.ascontiguousarray(x))
            labels.append(int(group))
            contents.append(content)

    dataset = GroupedDataset(samples, np.array(labels))
    truth = GroundTruth(
        spec, group_ids, styles, contents, mix_style, mix_content, mix_mlp, warp_paths
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# Oracle transfer targets
# ---------------------------------------------------------------------------


def oracle_transfer_target(truth: GroundTruth, sample_index: int, target_group) -> np.ndarray:
    """Ground-truth transfer: target group's style mixed with the source content.

    Linear mixing only; the random-MLP regime has no closed-form target.
    """
    if truth.spec.mixing != "linear":
        raise UnsupportedRegimeError("oracle_transfer_target requires linear mixing")
    content = truth.contents[sample_index]
    style = truth.style_of(target_group)
    return style @ truth.mix_style.T + content @ truth.mix_content.T


# ---------------------------------------------------------------------------
# Random monotone warps
# ---------------------------------------------------------------------------


def sample_warp_path(frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random surjective monotone frame map: every input frame appears at
    least once and some are duplicated, so the warp is invisible to DTW.
    Output length lies in [frames + 1, 2 * frames]."""
    if frames < 2:
        raise PreconditionError(f"warp needs at least 2 frames, got {frames}")
    extra = int(rng.integers(1, frames + 1))
    duplicated = rng.integers(0, frames, size=extra)
    counts = np.ones(frames, dtype=int)
    counts += np.bincount(duplicated, minlength=frames)
    return np.repeat(np.arange(frames), counts)


def apply_warp(frames: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Re-time a frame sequence along a monotone index path."""
    frames = np.asarray(frames, dtype=np.float64)
    path = np.asarray(path, dtype=int)
    if frames.shape[0] < 1 or path.size < 1:
        raise PreconditionError("apply_warp: empty input")
    if np.any(np.diff(path) < 0) or path[0] != 0 or path[-1] != frames.shape[0] - 1:
        raise ValidationError("apply_warp: path must be monotone and span the sequence")
    return frames[path].copy()


def random_warp(frames: np.ndarray, seed: int) -> np.ndarray:
    """Duplicate frames along a random monotone path; endpoints preserved."""
    frames = np.asarray(frames, dtype=np.float64)
    path = sample_warp_path(frames.shape[0], _rng(seed, 4))
    return apply_warp(frames, path)


# ---------------------------------------------------------------------------
# Generation-quality gate
# ---------------------------------------------------------------------------


def nearest_mean_accuracy(dataset: GroupedDataset) -> float:
    """Group recovery by nearest group-mean classification on raw samples.

    Sequence samples are time-averaged first.  Used as the generation gate
    before any training run.
    """
    feats = np.vstack([s.mean(axis=0) for s in dataset.samples])
    groups = dataset.group_ids
    means = np.vstack([feats[dataset.labels == g].mean(axis=0) for g in groups])
    d2 = ((feats[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    predicted = groups[np.argmin(d2, axis=1)]
    return float(np.mean(predicted == dataset.labels))


def quality_gate(dataset: GroupedDataset, threshold: float = 0.99) -> tuple[bool, float]:
    accuracy = nearest_mean_accuracy(dataset)
    return accuracy > threshold, accuracy


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


def _sample_name(group: int, index: int) -> str:
    return f"samples/g{group:04d}_i{index:04d}.txt"


def save_dataset(root, dataset: GroupedDataset, truth: GroundTruth | None = None) -> None:
    os.makedirs(os.path.join(root, "samples"), exist_ok=True)
    manifest_lines = []
    per_group_counter: dict[int, int] = {}
    for sample, label in zip(dataset.samples, dataset.labels):
        idx = per_group_counter.get(int(label), 0)
        per_group_counter[int(label)] = idx + 1
        rel = _sample_name(int(label), idx)
        nc.write_matrix(os.path.join(root, rel), sample)
        manifest_lines.append(f"{int(label)}\t{rel}")
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    if truth is not None:
        save_truth(os.path.join(root, "truth"), truth, dataset)


def load_dataset(root) -> GroupedDataset:
    manifest = os.path.join(root, "manifest.tsv")
    samples: list[np.ndarray] = []
    labels: list[int] = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{manifest}:{line_no}: expected 'group<TAB>path'")
            labels.append(int(parts[0]))
            samples.append(nc.read_matrix(os.path.join(root, parts[1])))
    if not samples:
        raise ValidationError(f"{manifest}: no samples listed")
    return GroupedDataset(samples, np.array(labels))


def _write_spec(path, spec: SyntheticSpec) -> None:
    parser = configparser.ConfigParser()
    parser["data"] = {
        "groups": str(spec.groups),
        "samples_per_group": str(spec.samples_per_group),
        "style_dim": str(spec.style_dim),
        "content_dim": str(spec.content_dim),
        "obs_dim": str(spec.obs_dim),
        "regime": spec.regime,
        "frames": str(spec.frames),
        "warp": "on" if spec.warp else "off",
        "mixing": spec.mixing,
        "noise_sigma": f"{spec.noise_sigma:.17g}",
        "style_separation": f"{spec.style_separation:.17g}",
        "content_scale": f"{spec.content_scale:.17g}",
        "seed": str(spec.seed),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)


def read_spec(path) -> SyntheticSpec:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    if "data" not in parser:
        raise ValidationError(f"{path}: missing [data] section")
    return spec_from_mapping(dict(parser["data"]), source=str(path))


def spec_from_mapping(values: dict, source: str = "config") -> SyntheticSpec:
    spec = SyntheticSpec()
    problems = []
    casts = {
        "groups": int,
        "samples_per_group": int,
        "style_dim": int,
        "content_dim": int,
        "obs_dim": int,
        "regime": str,
        "frames": int,
        "mixing": str,
        "noise_sigma": float,
        "style_separation": float,
        "content_scale": float,
        "seed": int,
    }
    for key, raw in values.items():
        if key == "warp":
            if raw not in ("on", "off", "true", "false"):
                problems.append(f"warp must be on/off, got {raw!r}")
            else:
                spec.warp = raw in ("on", "true")
            continue
        if key not in casts:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            setattr(spec, key, casts[key](raw))
        except ValueError:
            problems.append(f"bad value for {key}: {raw!r}")
    if problems:
        raise ValidationError(f"{source}: " + "; ".join(problems))
    spec.validate()
    return spec


def save_truth(root, truth: GroundTruth, dataset: GroupedDataset) -> None:
    os.makedirs(os.path.join(root, "content"), exist_ok=True)
    _write_spec(os.path.join(root, "spec.txt"), truth.spec)
    nc.write_matrix(os.path.join(root, "styles.txt"), truth.styles)
    nc.write_matrix(
        os.path.join(root, "group_ids.txt"), truth.group_ids.astype(float).reshape(-1, 1)
    )
    if truth.spec.mixing == "linear":
        nc.write_matrix(os.path.join(root, "mixing_style.txt"), truth.mix_style)
        nc.write_matrix(os.path.join(root, "mixing_content.txt"), truth.mix_content)
    else:
        for i, layer in enumerate(truth.mix_mlp.layers):
            nc.write_matrix(os.path.join(root, f"mlp_{i}_{layer.activation}_w.txt"), layer.weight)
            nc.write_matrix(os.path.join(root, f"mlp_{i}_{layer.activation}_b.txt"), layer.bias)
    per_group_counter: dict[int, int] = {}
    if truth.warp_paths:
        os.makedirs(os.path.join(root, "warp"), exist_ok=True)
    for sample_index, label in enumerate(dataset.labels):
        idx = per_group_counter.get(int(label), 0)
        per_group_counter[int(label)] = idx + 1
        name = f"g{int(label):04d}_i{idx:04d}.txt"
        nc.write_matrix(os.path.join(root, "content", name), truth.contents[sample_index])
        if sample_index in truth.warp_paths:
            nc.write_matrix(
                os.path.join(root, "warp", name),
                truth.warp_paths[sample_index].astype(float).reshape(-1, 1),
            )


def load_truth(root, dataset: GroupedDataset) -> GroundTruth:
    spec = read_spec(os.path.join(root, "spec.txt"))
    styles = nc.read_matrix(os.path.join(root, "styles.txt"))
    group_ids = nc.read_matrix(os.path.join(root, "group_ids.txt")).reshape(-1).astype(int)
    mix_style = mix_content = mix_mlp = None
    if spec.mixing == "linear":
        mix_style = nc.read_matrix(os.path.join(root, "mixing_style.txt"))
        mix_content = nc.read_matrix(os.path.join(root, "mixing_content.txt"))
    else:
        layers = []
        for i in range(64):
            found = [
                f
                for f in os.listdir(root)
                if f.startswith(f"mlp_{i}_") and f.endswith("_w.txt")
            ]
            if not found:
                break
            act = found[0].split("_")[2]
            w = nc.read_matrix(os.path.join(root, f"mlp_{i}_{act}_w.txt"))
            b = nc.read_matrix(os.path.join(root, f"mlp_{i}_{act}_b.txt"))
            layers.append(models.Layer(w, b, act))
        mix_mlp = models.MLPParams(layers)
    contents = []
    warp_paths: dict[int, np.ndarray] = {}
    per_group_counter: dict[int, int] = {}
    for sample_index, label in enumerate(dataset.labels):
        idx = per_group_counter.get(int(label), 0)
        per_group_counter[int(label)] = idx + 1
        name = f"g{int(label):04d}_i{idx:04d}.txt"
        contents.append(nc.read_matrix(os.path.join(root, "content", name)))
        warp_file = os.path.join(root, "warp", name)
        if os.path.exists(warp_file):
            warp_paths[sample_index] = nc.read_matrix(warp_file).reshape(-1).astype(int)
    return GroundTruth(
        spec, group_ids, styles, contents, mix_style, mix_content, mix_mlp, warp_paths
    )
