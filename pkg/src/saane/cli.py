# -*- coding: utf-8 -*-

"""Command line interface for :mod:`saane`.

Exit codes are 0 on success, 1 for usage errors, 2 for unreadable or
inconsistent data, and 3 when a numerical check fails.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np
from pydantic import ValidationError

from . import benchmark, ops
from .config import RunConfig, SyntheticConfig, get_data_directory, get_seed, load_config
from .constants import EXIT_CHECK, EXIT_DATA, EXIT_USAGE, GRADCHECK_TOLERANCE
from .evaluation import evaluate, write_pr_csv, write_query_csv
from .formats import (
    FeatureRecord,
    FormatError,
    RunManifest,
    load_model,
    manifest_path,
    read_embeddings,
    read_features,
    save_model,
    write_embeddings,
    write_epoch_log,
    write_features,
    write_manifest,
)
from .gradcheck import NondeterminismError, grad_check
from .head import DegenerateEmbeddingError, embed_records
from .network import SAANE, ArchitectureMismatchError
from .synthetic import write_synthetic
from .tensor import ShapeError, as_tensor
from .trainer import BatchCompositionError, OptimizerError, train

__all__ = [
    "main",
]

logger = logging.getLogger(__name__)

#: Exceptions reported as data errors
DATA_ERRORS = (
    FormatError,
    ArchitectureMismatchError,
    BatchCompositionError,
    DegenerateEmbeddingError,
    OptimizerError,
    NondeterminismError,
    ShapeError,
    ValidationError,
)


class SaaneGroup(click.Group):
    """A command group that maps failures onto the documented exit codes."""

    def main(self, *args, **kwargs):  # noqa:D102
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.secho("Aborted!", fg="red", err=True)
            sys.exit(EXIT_USAGE)
        except FileNotFoundError as e:
            click.secho(f"Error: {e}", fg="red", err=True)
            sys.exit(EXIT_USAGE)
        except DATA_ERRORS as e:
            click.secho(f"Error: {e}", fg="red", err=True)
            sys.exit(EXIT_DATA)
        # click returns the code of a ``ctx.exit`` when not in standalone mode
        sys.exit(rv if isinstance(rv, int) else 0)


def _verbose_callback(_ctx, _param, value: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if value else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
config_option = click.option(
    "--config",
    "config_path",
    type=existing_file,
    help="A JSON run configuration (see ``saane config``)",
)
seed_option = click.option(
    "--seed", type=click.IntRange(min=0), help="Defaults to the SAANE_SEED setting, then 0"
)


@click.group(cls=SaaneGroup)
@click.version_option()
@click.option(
    "-v",
    "--verbose",
    is_flag=True,
    expose_value=False,
    is_eager=True,
    callback=_verbose_callback,
    help="Log progress",
)
def main():
    """Train and evaluate semantic-aware attentive embeddings for visual localization."""


def _load_config(path: Optional[Path], default: RunConfig) -> RunConfig:
    return default if path is None else load_config(path)


def _check_maps(records: Sequence[FeatureRecord], config: RunConfig, path: Path) -> None:
    for record in records:
        found = (record.appearance.shape[0], record.semantic.shape[0])
        expected = (config.appearance_dim, config.semantic_dim if config.use_semantic else found[1])
        if found != expected:
            raise ShapeError(
                f"{path}: frame {record.frame_id} has {found[0]} appearance and {found[1]} semantic "
                f"channels, the configuration expects {expected[0]} and {expected[1]}"
            )


@main.command()
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="The output directory; defaults to a pystow directory",
)
@click.option("--places", type=click.IntRange(min=4), default=64, show_default=True)
@click.option("--conditions", type=click.IntRange(min=2), default=3, show_default=True)
@click.option(
    "--test-places",
    type=click.IntRange(min=2),
    help="Places held out for the database and query; defaults to half",
)
@click.option(
    "--synthetic-config",
    type=existing_file,
    help="A JSON file of generator magnitudes",
)
@config_option
@seed_option
def synth(
    out: Optional[Path],
    places: int,
    conditions: int,
    test_places: Optional[int],
    synthetic_config: Optional[Path],
    config_path: Optional[Path],
    seed: Optional[int],
):
    """Generate a synthetic benchmark as train, db, and query feature files.

    Channel depths and pyramid levels follow the run configuration, if given.
    """
    seed = get_seed(seed)
    if out is None:
        out = get_data_directory()
    synthetic = (
        SyntheticConfig()
        if synthetic_config is None
        else SyntheticConfig.model_validate_json(synthetic_config.read_text())
    )
    levels: List[int] = []
    classes_per_batch = 2
    if config_path is not None:
        config = load_config(config_path)
        synthetic = SyntheticConfig(
            **{
                **synthetic.model_dump(),
                "appearance_dim": config.appearance_dim,
                "semantic_dim": config.semantic_dim,
            }
        )
        levels = config.spp_levels
        classes_per_batch = config.classes_per_batch
    if test_places is None:
        test_places = places // 2
    if not test_places < places:
        raise click.BadParameter(f"must be fewer than --places={places}", param_hint="--test-places")
    try:
        paths = write_synthetic(
            out,
            places,
            conditions,
            synthetic,
            seed,
            n_test_places=test_places,
            spp_levels=levels,
            classes_per_batch=classes_per_batch,
        )
    except ValueError as e:
        raise click.UsageError(str(e)) from e
    write_manifest(
        RunManifest(
            command="synth",
            seed=seed,
            outputs={name: str(path) for name, path in paths.items()},
            parameters=dict(
                places=places,
                conditions=conditions,
                test_places=test_places,
                synthetic=synthetic.model_dump(),
            ),
        ),
        manifest_path(out),
    )
    click.secho(f"wrote synthetic benchmark to {out}", fg="green")


@main.command(name="train")
@config_option
@click.option(
    "--data",
    type=click.Path(file_okay=False, path_type=Path),
    help="A directory with train.safm; defaults to the synth output directory",
)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--variant", help="Apply an ablation variant's switches to the configuration")
@seed_option
def train_command(
    config_path: Optional[Path],
    data: Optional[Path],
    out: Path,
    variant: Optional[str],
    seed: Optional[int],
):
    """Train a model on labeled feature maps and write a checkpoint."""
    config = _load_config(config_path, RunConfig())
    if variant is not None:
        try:
            config = config.with_variant(variant)
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint="--variant") from e
    if seed is not None:
        config = config.model_copy(update=dict(seed=seed))
    train_path = (get_data_directory() if data is None else data).joinpath("train.safm")
    if not train_path.is_file():
        raise click.UsageError(f"no training file at {train_path}")
    records = read_features(train_path)
    _check_maps(records, config, train_path)

    model = SAANE(config)
    state, history = train(records, model, config)
    save_model(model, out, step=state.step)
    log_path = out.with_name(out.name + ".epochs.csv")
    write_epoch_log(history, log_path)
    write_manifest(
        RunManifest(
            command="train",
            seed=config.seed,
            config=config,
            config_digest=config.digest(),
            inputs={"train": str(train_path)},
            outputs={"checkpoint": str(out), "epochs": str(log_path)},
            parameters=dict(steps=state.step),
        ),
        manifest_path(out),
    )
    click.secho(f"wrote checkpoint after {state.step} steps to {out}", fg="green")


@main.command()
@click.option("--ckpt", type=existing_file, required=True)
@click.option("--features", type=existing_file, required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@config_option
def embed(ckpt: Path, features: Path, out: Path, config_path: Optional[Path]):
    """Embed every frame of a feature file."""
    config = None if config_path is None else load_config(config_path)
    model, checkpoint = load_model(ckpt, config)
    records = read_features(features)
    _check_maps(records, model.config, features)
    embeddings = embed_records(records, model)
    write_embeddings(
        embeddings,
        out,
        class_ids=[record.class_id for record in records],
        condition_ids=[record.condition_id for record in records],
    )
    write_manifest(
        RunManifest(
            command="embed",
            seed=model.config.seed,
            config=model.config,
            config_digest=model.config.digest(),
            inputs={"checkpoint": str(ckpt), "features": str(features)},
            outputs={"embeddings": str(out)},
            parameters=dict(step=checkpoint.step),
        ),
        manifest_path(out),
    )
    click.secho(f"wrote {len(embeddings)} embeddings to {out}", fg="green")


@main.command(name="eval")
@click.option("--db", type=existing_file, required=True, help="Database embeddings")
@click.option(
    "--query",
    "queries",
    type=existing_file,
    required=True,
    multiple=True,
    help="Query embeddings; repeat to evaluate several query traversals",
)
@click.option("--tolerance", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--thresholds", type=click.IntRange(min=1), default=100, show_default=True)
@click.option(
    "--direction",
    type=click.Choice(["below", "above"]),
    default="below",
    show_default=True,
    help="Accept a match when its distance ratio is below (or above) the threshold",
)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def eval_command(
    db: Path,
    queries: Sequence[Path],
    tolerance: int,
    thresholds: int,
    direction: str,
    out: Path,
):
    """Localize query embeddings against a database and report the area under the PR curve."""
    db_embeddings = read_embeddings(db)
    if len(db_embeddings) < 2:
        raise FormatError(f"{db} holds {len(db_embeddings)} embeddings; need at least 2", 0)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    scores = []
    for i, query in enumerate(queries):
        query_embeddings = read_embeddings(query)
        if not query_embeddings:
            raise FormatError(f"{query} holds no embeddings", 0)
        evaluation = evaluate(db_embeddings, query_embeddings, tolerance, thresholds, direction)
        prefix = "" if len(queries) == 1 else f"{i}-{query.stem}."
        pr_path = out.joinpath(f"{prefix}pr.csv")
        query_path = out.joinpath(f"{prefix}queries.csv")
        write_pr_csv(evaluation.curve, pr_path)
        write_query_csv(evaluation.results, tolerance, query_path)
        outputs[f"{prefix}pr"] = str(pr_path)
        outputs[f"{prefix}queries"] = str(query_path)
        scores.append(evaluation.curve.auc)
        click.echo(f"AUC {query.name}: {evaluation.curve.auc:.3f}")
    if len(scores) > 1:
        click.echo(f"AUC average: {np.mean(scores):.3f}")
        click.echo(f"AUC worst: {min(scores):.3f}")
    write_manifest(
        RunManifest(
            command="eval",
            inputs={"db": str(db), **{f"query{i}": str(q) for i, q in enumerate(queries)}},
            outputs=outputs,
            parameters=dict(tolerance=tolerance, thresholds=thresholds, direction=direction),
        ),
        manifest_path(out),
    )


@main.command()
@click.option("--ckpt", type=existing_file, required=True)
@click.option("--features", type=existing_file, required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def attn(ckpt: Path, features: Path, out: Path):
    """Export the attention maps of every frame.

    Writes three feature files keyed by frame, each with an appearance and a
    semantic block: ``channel.safm`` (C x 1 x 1 channel attention),
    ``spatial_factor.safm`` (1 x H x W sigmoid maps), and ``spatial.safm``
    (the full C x H x W spatial attention).
    """
    model, _ = load_model(ckpt)
    if model.attention is None:
        raise click.UsageError(f"the model in {ckpt} has no attention module")
    records = read_features(features)
    _check_maps(records, model.config, features)

    exports: Dict[str, List[FeatureRecord]] = {"channel": [], "spatial_factor": [], "spatial": []}
    for record in records:
        _, maps = model.forward_with_maps(
            as_tensor(record.appearance, dtype=model.dtype),
            as_tensor(record.semantic, dtype=model.dtype),
        )
        h, w = record.appearance.shape[1:]
        empty = np.zeros((0, h, w))
        blocks = {
            "channel": (
                maps.channel_a.numpy().reshape(-1, 1, 1),
                np.zeros((0, 1, 1))
                if maps.channel_s is None
                else maps.channel_s.numpy().reshape(-1, 1, 1),
            ),
            "spatial_factor": (
                maps.spatial_a.factor.numpy(),
                empty if maps.spatial_s is None else maps.spatial_s.factor.numpy(),
            ),
            "spatial": (
                maps.spatial_a.attention.numpy(),
                empty if maps.spatial_s is None else maps.spatial_s.attention.numpy(),
            ),
        }
        for name, (appearance, semantic) in blocks.items():
            exports[name].append(
                FeatureRecord(
                    frame_id=record.frame_id,
                    class_id=record.class_id,
                    condition_id=record.condition_id,
                    appearance=appearance,
                    semantic=semantic,
                )
            )

    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for name, exported in exports.items():
        path = out.joinpath(f"{name}.safm")
        write_features(exported, path)
        outputs[name] = str(path)
    write_manifest(
        RunManifest(
            command="attn",
            seed=model.config.seed,
            config=model.config,
            config_digest=model.config.digest(),
            inputs={"checkpoint": str(ckpt), "features": str(features)},
            outputs=outputs,
        ),
        manifest_path(out),
    )
    click.secho(f"wrote attention maps of {len(records)} frames to {out}", fg="green")


@main.command()
@config_option
@seed_option
@click.option("--size", type=click.IntRange(min=1), default=8, show_default=True, help="H = W of the inputs")
@click.option("--eps", type=float, default=1e-4, show_default=True, help="Finite difference step")
@click.pass_context
def gradcheck(
    ctx: click.Context, config_path: Optional[Path], seed: Optional[int], size: int, eps: float
):
    """Compare analytic and finite-difference gradients of the whole network in 64-bit."""
    config = _load_config(config_path, RunConfig.toy())
    if not 1e-6 <= eps <= 1e-3:
        raise click.BadParameter(f"must lie in [1e-6, 1e-3], got {eps}", param_hint="--eps")
    if size < max(config.spp_levels):
        raise click.BadParameter(
            f"must be at least the largest pyramid level {max(config.spp_levels)}", param_hint="--size"
        )
    seed = get_seed(seed)
    rng = np.random.default_rng(seed)
    model = SAANE(config, rng=rng, dtype=np.float64)
    f_a = as_tensor(rng.uniform(-1, 1, (config.appearance_dim, size, size)), dtype=np.float64)
    f_s = as_tensor(rng.uniform(-1, 1, (config.semantic_dim, size, size)), dtype=np.float64)
    readout = as_tensor(rng.uniform(-1, 1, config.embedding_dim), dtype=np.float64)

    def forward():
        return ops.sum_all(ops.mul_broadcast(model.forward(f_a, f_s), readout))

    error = grad_check(forward, model.parameters(), eps=eps)
    message = f"max relative gradient error: {error:.3e} over {len(model.parameters())} parameters"
    if error >= GRADCHECK_TOLERANCE:
        click.secho(message, fg="red")
        ctx.exit(EXIT_CHECK)
    click.secho(message, fg="green")


@main.command()
@click.option("--schema", is_flag=True, help="Print the JSON schema instead of the defaults")
@click.option("--toy", is_flag=True, help="Print the small configuration used by gradcheck")
def config(schema: bool, toy: bool):
    """Print the default run configuration as JSON."""
    if schema:
        click.echo(json.dumps(RunConfig.model_json_schema(), indent=2))
    elif toy:
        click.echo(RunConfig.toy().model_dump_json(indent=2))
    else:
        click.echo(RunConfig().model_dump_json(indent=2))


main.add_command(benchmark.main)


if __name__ == "__main__":
    main()
