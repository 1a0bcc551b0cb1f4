"""Compare ablation variants on the synthetic benchmark over several seeds.

Run with ``saane benchmark``.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from statistics import median
from typing import Dict, List, Optional, Sequence

import click
import numpy as np
from pydantic import BaseModel, Field

from .config import RunConfig, SyntheticConfig
from .constants import PathHint
from .evaluation import evaluate
from .formats import RunManifest, atomic_write, write_manifest
from .head import embed_records
from .network import SAANE, VARIANTS
from .synthetic import generate_synthetic, split_synthetic
from .trainer import train

__all__ = [
    "MIN_GAP",
    "BenchmarkRow",
    "BenchmarkResult",
    "benchmark_config",
    "run_benchmark",
    "write_benchmark_csv",
    "main",
]

logger = logging.getLogger(__name__)

#: Variants compared by default, from weakest to strongest
DEFAULT_VARIANTS = ("app", "app_sem", "saane")

#: The smallest median improvement each listed variant must make over the previous one
MIN_GAP = 0.02


class BenchmarkRow(BaseModel):
    """The localization score of one variant trained with one seed."""

    variant: str
    seed: int
    auc: float = Field(..., ge=0, le=1)
    final_loss: Optional[float] = None


class BenchmarkResult(BaseModel):
    """Every row of a benchmark run."""

    rows: List[BenchmarkRow] = Field(default_factory=list)

    def medians(self) -> Dict[str, float]:
        """Get the median area under the curve of each variant, in first-seen order."""
        scores: Dict[str, List[float]] = {}
        for row in self.rows:
            scores.setdefault(row.variant, []).append(row.auc)
        return {variant: float(median(values)) for variant, values in scores.items()}


def benchmark_config(**kwargs) -> RunConfig:
    """Get a configuration sized for the default synthetic maps.

    Every batch holds all three viewing conditions of eight training places.
    """
    synthetic = SyntheticConfig()
    defaults = dict(
        common_dim=16,
        appearance_dim=synthetic.appearance_dim,
        semantic_dim=synthetic.semantic_dim,
        reduction_ratio=4,
        spp_levels=[4, 2, 1],
        classes_per_batch=8,
        examples_per_class=3,
        epochs=12,
        learning_rate=2e-3,
        tolerance=0,
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)


def run_benchmark(
    config: RunConfig,
    *,
    variants: Sequence[str] = DEFAULT_VARIANTS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    n_places: int = 64,
    n_conditions: int = 3,
    n_test_places: Optional[int] = None,
    synthetic: Optional[SyntheticConfig] = None,
) -> BenchmarkResult:
    """Train and evaluate every variant once per seed.

    Each seed generates its own dataset, shared by all variants, and is also the
    seed of each variant's weights and batches.

    :param config: The base configuration; each variant overrides its switches
    :param variants: Names of entries of :data:`saane.network.VARIANTS`
    :param seeds: One run per seed
    :param n_places: Places in the synthetic traversal
    :param n_conditions: Viewing conditions; the database is the first and the query the last
    :param n_test_places: Places held out for localization; defaults to half
    :param synthetic: Generator magnitudes; map depths are taken from ``config``
    """
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    synthetic = (synthetic or SyntheticConfig()).model_copy(
        update=dict(appearance_dim=config.appearance_dim, semantic_dim=config.semantic_dim)
    )
    if n_test_places is None:
        n_test_places = n_places // 2

    result = BenchmarkResult()
    for seed in seeds:
        records = generate_synthetic(
            n_places,
            n_conditions,
            synthetic,
            seed,
            spp_levels=config.spp_levels,
            classes_per_batch=config.classes_per_batch,
        )
        split = split_synthetic(records, n_test_places)
        for variant in variants:
            variant_config = config.with_variant(variant).model_copy(update=dict(seed=seed))
            model = SAANE(variant_config)
            _, history = train(split.train, model, variant_config)
            evaluation = evaluate(
                embed_records(split.db, model),
                embed_records(split.query, model),
                tolerance=variant_config.tolerance,
                n_thresholds=variant_config.n_thresholds,
                direction=variant_config.ratio_direction,
            )
            row = BenchmarkRow(
                variant=variant,
                seed=seed,
                auc=evaluation.curve.auc,
                final_loss=history[-1].mean_loss if history else None,
            )
            logger.info("seed %d, %s: auc=%.4f", seed, variant, row.auc)
            result.rows.append(row)
    return result


def write_benchmark_csv(result: BenchmarkResult, path: PathHint) -> None:
    """Write ``variant,seed,auc,final_loss`` rows."""
    with atomic_write(path, "w") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["variant", "seed", "auc", "final_loss"])
        for row in result.rows:
            loss = "" if row.final_loss is None else f"{row.final_loss:.6f}"
            writer.writerow([row.variant, row.seed, f"{row.auc:.6f}", loss])


@click.command(name="benchmark")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="A JSON run configuration; defaults to one sized for the synthetic maps",
)
@click.option(
    "--variant",
    "variants",
    multiple=True,
    type=click.Choice(sorted(VARIANTS)),
    help="A variant to compare; repeat for several",
)
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--places", type=click.IntRange(min=4), default=64, show_default=True)
@click.option("--conditions", type=click.IntRange(min=2), default=3, show_default=True)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="A directory for benchmark.csv and the run manifest",
)
def main(
    config_path: Optional[Path],
    variants: Sequence[str],
    seeds: int,
    places: int,
    conditions: int,
    out: Path,
):
    """Compare ablation variants on the synthetic benchmark."""
    config = (
        benchmark_config()
        if config_path is None
        else RunConfig.model_validate_json(config_path.read_text())
    )
    variants = list(variants) or list(DEFAULT_VARIANTS)
    result = run_benchmark(
        config,
        variants=variants,
        seeds=list(range(seeds)),
        n_places=places,
        n_conditions=conditions,
    )
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out.joinpath("benchmark.csv")
    write_benchmark_csv(result, csv_path)
    write_manifest(
        RunManifest(
            command="benchmark",
            config=config,
            config_digest=config.digest(),
            outputs={"benchmark": str(csv_path)},
            parameters=dict(variants=variants, seeds=seeds, places=places, conditions=conditions),
        ),
        out.joinpath("manifest.json"),
    )
    medians = result.medians()
    width = max(len(variant) for variant in medians)
    for variant, value in medians.items():
        click.echo(f"{variant:<{width}}  median AUC {value:.3f}")
    gaps = np.diff([medians[variant] for variant in variants])
    if np.all(gaps >= MIN_GAP):
        click.secho(f"each variant improves on the previous by at least {MIN_GAP}", fg="green")
    else:
        click.secho(
            f"variants are not ordered as listed with gaps of at least {MIN_GAP}: "
            + ", ".join(f"{gap:+.3f}" for gap in gaps),
            fg="yellow",
        )
