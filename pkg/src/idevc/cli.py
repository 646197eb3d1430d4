"""Command-line front end.

Commands: ``gen``, ``train``, ``estimate-mi``, ``transfer``, ``eval``,
``probe``.  All experiment settings live in one INI-style config file
with sections ``[data] [model] [trainer] [eval]``; command-line flags
override file values (flags win).  Every command validates its full
configuration before producing any output.

Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 numeric
abort (the last good checkpoint path is printed).

``IDEVC_THREADS`` caps BLAS/OpenMP parallelism and defaults to 1 so
repeated runs with the same config and seed are bit-identical.
"""

from __future__ import annotations

import configparser
import functools
import os
import sys
from dataclasses import dataclass, field

import click
import numpy as np

from . import evaluation, gaussbench, models, synthdata, trainer
from . import numcore as nc
from .errors import IdevcError, NumericError, ValidationError


@dataclass
class EvalSettings:
    probe_train_frac: float = 0.8
    probe_epochs: int = 200
    probe_width: int = 32
    probe_lr: float = 0.5
    probe_seed: int = 0
    max_transfers: int = 200
    normalize_profiles: bool = False
    seed: int = 0

    def probe_config(self) -> evaluation.ProbeConfig:
        cfg = evaluation.ProbeConfig(
            train_frac=self.probe_train_frac,
            epochs=self.probe_epochs,
            width=self.probe_width,
            lr=self.probe_lr,
            seed=self.probe_seed,
        )
        cfg.validate()
        return cfg

    def validate(self):
        self.probe_config()
        if self.max_transfers < 0:
            raise ValidationError(f"max_transfers must be >= 0, got {self.max_transfers}")


@dataclass
class RunConfig:
    data: synthdata.SyntheticSpec = field(default_factory=synthdata.SyntheticSpec)
    model: trainer.ModelConfig = field(default_factory=trainer.ModelConfig)
    trainer: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.trainer.validate()
        self.eval.validate()


_BOOLS = {"on": True, "off": False, "true": True, "false": False}


def _assign(obj, key: str, raw: str, source: str) -> None:
    if not hasattr(obj, key):
        raise ValidationError(f"{source}: unknown key {key!r}")
    current = getattr(obj, key)
    try:
        if isinstance(current, bool):
            if raw not in _BOOLS:
                raise ValueError
            value = _BOOLS[raw]
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ValidationError(f"{source}: bad value for {key}: {raw!r}") from exc
    setattr(obj, key, value)


def load_config(path: str | None) -> RunConfig:
    config = RunConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    sections = {
        "data": config.data,
        "model": config.model,
        "trainer": config.trainer,
        "eval": config.eval,
    }
    for name in parser.sections():
        if name == "split":
            continue
        if name not in sections:
            raise ValidationError(f"{path}: unknown section [{name}]")
        if name == "data":
            config.data = synthdata.spec_from_mapping(dict(parser["data"]), source=f"{path} [data]")
            continue
        for key, raw in parser[name].items():
            _assign(sections[name], key, raw, source=f"{path} [{name}]")
    return config


def apply_overrides(config: RunConfig, overrides: tuple[str, ...]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        section = section.strip()
        key, raw = key.strip(), raw.strip()
        if section == "data":
            updated = synthdata.spec_from_mapping({key: raw}, source="--set")
            setattr(config.data, key, getattr(updated, key))
        elif section in ("model", "trainer", "eval"):
            _assign(getattr(config, section), key, raw, source="--set")
        else:
            raise ValidationError(f"--set: unknown section {section!r}")


def cli_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except NumericError as err:
            click.echo(f"numeric abort: {err}", err=True)
            if err.last_checkpoint:
                click.echo(f"last checkpoint: {err.last_checkpoint}", err=True)
            sys.exit(4)
        except ValidationError as err:
            click.echo(f"validation error: {err}", err=True)
            sys.exit(2)
        except IdevcError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(2)
        except OSError as err:
            click.echo(f"i/o error: {err}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
def cli():
    """Disentangled style/content embeddings with MI-bound training."""


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


@cli.command("gen")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Config file with a [data] section (defaults used when omitted).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Override the generation seed.")
@cli_errors
def cmd_gen(spec_path, out_dir, seed):
    """Generate a grouped dataset plus ground truth."""
    spec = synthdata.read_spec(spec_path) if spec_path else synthdata.SyntheticSpec()
    if seed is not None:
        spec.seed = seed
    spec.validate()
    dataset, truth = synthdata.generate(spec)
    synthdata.save_dataset(out_dir, dataset, truth)
    ok, accuracy = synthdata.quality_gate(dataset)
    click.echo(
        f"generated {len(dataset.samples)} samples in {dataset.group_ids.size} groups -> {out_dir}"
    )
    click.echo(f"quality gate (nearest group-mean accuracy): {accuracy:.4f} "
               + ("PASS" if ok else "FAIL"))
    if not ok:
        click.echo("gate failed: group structure is not recoverable from raw samples", err=True)
        sys.exit(2)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--ablate", type=click.Choice(["i1", "i3"]), default=None,
              help="Drop one objective term (ablation harness).")
@click.option("--beta", default=None, help="Objective weight; a comma list runs a sweep.")
@click.option("--steps", type=int, default=None, help="Override total training steps.")
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Generic config override (flags win over the file).")
@cli_errors
def cmd_train(config_path, data_dir, out_dir, ablate, beta, steps, seed, overrides):
    """Train the encoder/decoder/approximator bundle on a dataset."""
    config = load_config(config_path)
    apply_overrides(config, overrides)
    if ablate is not None:
        config.trainer.ablate = ablate
    if steps is not None:
        config.trainer.total_steps = steps
    if seed is not None:
        config.trainer.seed = seed
    betas = [config.trainer.beta]
    if beta is not None:
        try:
            betas = [float(v) for v in str(beta).split(",") if v.strip() != ""]
        except ValueError as exc:
            raise ValidationError(f"--beta expects a number or comma list, got {beta!r}") from exc
        if not betas:
            raise ValidationError("--beta: empty sweep")
    for value in betas:
        probe = trainer.TrainConfig(**{**config.trainer.__dict__, "beta": value})
        probe.validate()
    config.model.validate()
    config.eval.validate()

    dataset = synthdata.load_dataset(data_dir)
    sweep = len(betas) > 1
    for value in betas:
        run_cfg = trainer.TrainConfig(**{**config.trainer.__dict__, "beta": value})
        run_dir = os.path.join(out_dir, f"beta_{value:g}") if sweep else out_dir
        state = trainer.train(dataset, run_cfg, config.model, out_dir=run_dir)
        if state.history:
            from . import figures

            fig_dir = os.path.join(run_dir, "figures")
            os.makedirs(fig_dir, exist_ok=True)
            figures.training_curves(state.history, os.path.join(fig_dir, "training_curves.png"))
            last = state.history[-1]
            click.echo(
                f"beta={value:g}: {state.step} steps, final "
                f"I1={last['I1']:.4f} I2={last['I2']:.4f} I3={last['I3']:.4f} "
                f"F={last['F']:.2f} loss={last['loss']:.4f}"
            )
        click.echo(f"checkpoint: {os.path.join(run_dir, 'checkpoint.txt')}")
        click.echo(f"metrics log: {os.path.join(run_dir, 'metrics.csv')}")


# ---------------------------------------------------------------------------
# estimate-mi
# ---------------------------------------------------------------------------


@cli.command("estimate-mi")
@click.option("--estimator", type=click.Choice(list(gaussbench.ESTIMATORS)), required=True)
@click.option("--rho", type=float, required=True)
@click.option("--n", "n_samples", type=int, default=10_000, show_default=True)
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--seed", "base_seed", type=int, default=0, show_default=True)
@click.option("--fit-steps", type=int, default=None)
@click.option("--lower-tol", type=float, default=0.02, show_default=True)
@click.option("--upper-tol", type=float, default=0.05, show_default=True)
@cli_errors
def cmd_estimate_mi(estimator, rho, n_samples, seeds, base_seed, fit_steps, lower_tol, upper_tol):
    """Benchmark one estimator on correlated Gaussians with known MI."""
    truth = gaussbench.analytic_mi(rho)
    runs = gaussbench.run_benchmark(
        estimator, rho, n_samples, seeds, base_seed=base_seed, fit_steps=fit_steps
    )
    click.echo(f"estimator={estimator} rho={rho:g} n={n_samples} analytic_mi={truth:.6f} nats")
    click.echo("seed  estimate      direction")
    violations = 0
    for run in runs:
        violations += int(run.violates(truth, lower_tol, upper_tol))
        click.echo(f"{run.seed:4d}  {run.value:+.6f}  {run.direction}")
    mean = float(np.mean([r.value for r in runs]))
    click.echo(f"mean  {mean:+.6f}")
    click.echo(f"bound violations (tol lower +{lower_tol:g} / upper -{upper_tol:g}): "
               f"{violations} of {len(runs)}")


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


@cli.command("transfer")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--source", "source_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target", "target_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@cli_errors
def cmd_transfer(ckpt_path, source_path, target_path, out_path):
    """Write the decoded (target style, source content) sample."""
    bundle = models.load_bundle(ckpt_path)
    source = nc.read_matrix(source_path)
    target = nc.read_matrix(target_path)
    result = trainer.transfer(bundle, source, target)
    nc.write_matrix(out_path, result)
    click.echo(f"wrote transfer -> {out_path}")


# ---------------------------------------------------------------------------
# eval / probe
# ---------------------------------------------------------------------------


def _load_eval_inputs(ckpt_path, data_dir):
    bundle = models.load_bundle(ckpt_path)
    dataset = synthdata.load_dataset(data_dir)
    truth = None
    truth_dir = os.path.join(data_dir, "truth")
    if os.path.isdir(truth_dir):
        truth = synthdata.load_truth(truth_dir, dataset)
    return bundle, dataset, truth


def _resolve_split(ckpt_path, split_path, dataset, zero_shot):
    if split_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "split.txt")
        split_path = candidate if os.path.exists(candidate) else None
    if split_path is not None:
        train_groups, held_groups = trainer.read_split(split_path)
    else:
        train_groups, held_groups = dataset.group_ids, np.array([], dtype=int)
    if zero_shot and held_groups.size == 0:
        raise ValidationError("--zero-shot requires a held-out split (split.txt next to the "
                              "checkpoint or --split)")
    return train_groups, held_groups


@cli.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--report", "report_dir", type=click.Path(file_okay=False), required=True)
@click.option("--zero-shot", is_flag=True, help="Evaluate transfers on held-out groups only.")
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
@cli_errors
def cmd_eval(ckpt_path, data_dir, report_dir, zero_shot, split_path, config_path, seed, overrides):
    """Objective evaluation: transfers, verification, probes, embeddings."""
    config = load_config(config_path)
    apply_overrides(config, overrides)
    if seed is not None:
        config.eval.seed = seed
    config.eval.validate()
    bundle, dataset, truth = _load_eval_inputs(ckpt_path, data_dir)
    train_groups, held_groups = _resolve_split(ckpt_path, split_path, dataset, zero_shot)
    eval_groups = held_groups if zero_shot else train_groups

    report = evaluation.run_evaluation(
        bundle,
        dataset,
        truth,
        eval_groups=eval_groups,
        probe_config=config.eval.probe_config(),
        max_transfers=config.eval.max_transfers,
        normalize_profiles=config.eval.normalize_profiles,
        seed=config.eval.seed,
    )
    report.zero_shot = zero_shot
    evaluation.write_report(report, report_dir)
    evaluation.export_embeddings(bundle, dataset, os.path.join(report_dir, "embeddings.csv"))

    from . import figures

    fig_dir = os.path.join(report_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    x = dataset.as_matrix()
    figures.embedding_scatter(
        models.encode_style(bundle, x), dataset.labels,
        os.path.join(fig_dir, "style_embeddings.png"), "style embeddings (2-D projection)",
    )
    figures.embedding_scatter(
        models.encode_content(bundle, x), dataset.labels,
        os.path.join(fig_dir, "content_embeddings.png"), "content embeddings (2-D projection)",
    )
    for line in report.summary_lines():
        click.echo(line)
    click.echo(f"report -> {report_dir}")


@cli.command("probe")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
@cli_errors
def cmd_probe(ckpt_path, data_dir, config_path, seed, overrides):
    """Classifier probes only (eval restricted to the probes)."""
    config = load_config(config_path)
    apply_overrides(config, overrides)
    if seed is not None:
        config.eval.probe_seed = seed
    probe_cfg = config.eval.probe_config()
    bundle, dataset, _ = _load_eval_inputs(ckpt_path, data_dir)
    x = dataset.as_matrix()
    style_acc = evaluation.style_probe(models.encode_style(bundle, x), dataset.labels, probe_cfg)
    leak_acc = evaluation.leakage_probe(models.encode_content(bundle, x), dataset.labels, probe_cfg)
    chance = 1.0 / dataset.group_ids.size
    click.echo(f"style-probe accuracy: {style_acc:.4f} (higher is better)")
    click.echo(f"leakage-probe accuracy: {leak_acc:.4f} (lower is better; chance {chance:.4f})")


if __name__ == "__main__":
    cli()
