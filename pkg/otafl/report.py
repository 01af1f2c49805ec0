"""Contains the writers of the experiment outputs: CSV curves for
external plotting, the participation table, the bound table and the
JSON summaries. Column layouts are documented in README.md.
"""

import csv
import json
import logging
import pathlib
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np

import params
from otafl.design import PolicyKind
from otafl.harness import BoundReport, ComparisonReport, ExperimentSetup, elapsed_ms
from otafl.ota import PreScalerSet, error_variance

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("policy", "round", "elapsed_ms", "loss_mean", "loss_stderr")
ACCURACY_COLUMNS = (
    "policy",
    "round",
    "elapsed_ms",
    "accuracy_mean",
    "accuracy_stderr",
)
PARTICIPATION_COLUMNS = (
    "policy",
    "rank",
    "device",
    "distance_m",
    "path_loss_db",
    "transmit_frequency",
    "participation",
)
DESIGN_COLUMNS = (
    "policy",
    "device",
    "path_loss_db",
    "gamma",
    "alpha_m",
    "P_m",
    "p_m",
)
BOUND_COLUMNS = (
    "round",
    "elapsed_ms",
    "initialization",
    "model_bias",
    "transmission_variance",
    "noise_variance",
    "total",
    "surrogate",
    "empirical",
)


def _write_rows(
    path: pathlib.Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as ofile:
        writer = csv.writer(ofile)
        writer.writerow(columns)
        writer.writerows(rows)
    logger.info("Wrote %s", path)


def _write_json(path: pathlib.Path, data: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as ofile:
        json.dump(data, ofile, indent=2)
    logger.info("Wrote %s", path)


def path_loss_db(path_loss: float) -> float:
    """Average path loss as a positive dB figure."""
    return float(-10.0 * np.log10(path_loss))


def write_curves(report: ComparisonReport, out_dir: pathlib.Path) -> None:
    """Write loss.csv and accuracy.csv, one row per policy and logged
    round.
    """
    loss_rows = []  # type: List[Sequence[Any]]
    accuracy_rows = []  # type: List[Sequence[Any]]
    for kind, summary in report.summaries.items():
        for index, round_index in enumerate(summary.rounds):
            time = float(summary.times[index])
            loss_rows.append(
                (
                    kind.value,
                    int(round_index),
                    time,
                    float(summary.loss_mean[index]),
                    float(summary.loss_stderr[index]),
                )
            )
            accuracy_rows.append(
                (
                    kind.value,
                    int(round_index),
                    time,
                    float(summary.accuracy_mean[index]),
                    float(summary.accuracy_stderr[index]),
                )
            )
    _write_rows(
        out_dir.joinpath(params.OUTPUT_FILE_NAMES.LOSS), LOSS_COLUMNS, loss_rows
    )
    _write_rows(
        out_dir.joinpath(params.OUTPUT_FILE_NAMES.ACCURACY),
        ACCURACY_COLUMNS,
        accuracy_rows,
    )


def participation_rows(
    report: ComparisonReport, distances: Sequence[float]
) -> List[Sequence[Any]]:
    """Per-policy device rows ordered by decreasing path loss (rank 0
    is the weakest average channel).
    """
    rows = []  # type: List[Sequence[Any]]
    for kind, summary in report.summaries.items():
        for rank, device in enumerate(report.order):
            rows.append(
                (
                    kind.value,
                    rank,
                    int(device),
                    float(distances[device]),
                    path_loss_db(float(summary.path_losses[device])),
                    float(summary.transmit_frequency[device]),
                    float(summary.participation[device]),
                )
            )
    return rows


def write_participation(
    report: ComparisonReport, distances: Sequence[float], out_dir: pathlib.Path
) -> None:
    """Write participation.csv."""
    _write_rows(
        out_dir.joinpath(params.OUTPUT_FILE_NAMES.PARTICIPATION),
        PARTICIPATION_COLUMNS,
        participation_rows(report, distances),
    )


def _optional(value: Optional[float]) -> Optional[float]:
    return None if value is None else float(value)


def comparison_summary(report: ComparisonReport) -> Dict[str, Any]:
    """JSON-ready summary of a comparison."""
    return {
        "constants": report.constants,
        "reference": None if report.reference is None else report.reference.value,
        "policies": {
            kind.value: {
                "stepsize": summary.stepsize,
                "replicates": summary.replicates,
                "final_loss_mean": summary.final_loss,
                "final_loss_stderr": float(summary.loss_stderr[-1]),
                "final_accuracy_mean": summary.final_accuracy,
                "final_accuracy_stderr": float(summary.accuracy_stderr[-1]),
                "skipped_rounds": summary.skipped_rounds,
                "loss_time_ratio": _optional(report.loss_ratios.get(kind)),
                "accuracy_time_ratio": _optional(report.accuracy_ratios.get(kind)),
            }
            for kind, summary in report.summaries.items()
        },
    }


def write_comparison(
    report: ComparisonReport, setup: ExperimentSetup, out_dir: pathlib.Path
) -> None:
    """Write every output of the compare command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    write_curves(report, out_dir)
    write_participation(report, setup.deployment.distances, out_dir)
    _write_json(
        out_dir.joinpath(params.OUTPUT_FILE_NAMES.SUMMARY), comparison_summary(report)
    )
    setup.deployment.save(out_dir.joinpath(params.OUTPUT_FILE_NAMES.DEPLOYMENT))


def write_bound(
    report: BoundReport, setup: ExperimentSetup, out_dir: pathlib.Path
) -> None:
    """Write bound.csv (empirical left blank without replicates) and
    summary.json of the bound command.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []  # type: List[Sequence[Any]]
    for index, breakdown in enumerate(report.breakdowns):
        empirical = "" if report.empirical is None else float(report.empirical[index])
        rows.append(
            (
                breakdown.round_index,
                elapsed_ms(
                    breakdown.round_index,
                    setup.dimension,
                    setup.config.radio.bandwidth_hz,
                ),
                breakdown.initialization,
                breakdown.model_bias,
                breakdown.transmission_variance,
                breakdown.noise_variance,
                breakdown.total,
                report.surrogate[index],
                empirical,
            )
        )
    _write_rows(out_dir.joinpath(params.OUTPUT_FILE_NAMES.BOUND), BOUND_COLUMNS, rows)
    _write_json(
        out_dir.joinpath(params.OUTPUT_FILE_NAMES.SUMMARY),
        {
            "policy": report.kind.value,
            "constants": report.constants.to_dict(),
            "model_bias_bound": report.model_bias_bound,
            "true_model_bias": report.true_model_bias,
            "participation": report.prescalers.participation.tolist(),
        },
    )


def design_table(
    designs: Dict[PolicyKind, PreScalerSet], noise_psd: float
) -> Dict[str, Any]:
    """Per-design pre-scaler tables with the G_max-bounded variance."""
    table = {}  # type: Dict[str, Any]
    for kind, prescalers in designs.items():
        entry = prescalers.to_dict()
        bounded = error_variance(prescalers, noise_psd).bounded
        entry["transmission_variance"] = bounded.transmission
        entry["noise_variance"] = bounded.noise
        table[kind.value] = entry
    return table


def write_design(setup: ExperimentSetup, out_dir: pathlib.Path) -> Dict[str, Any]:
    """Write design.json and deployment.json for the pre-scaled
    policies; return the design table.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    table = design_table(
        {
            kind: setup.prescalers(kind)
            for kind in (PolicyKind.MIN_VARIANCE, PolicyKind.ZERO_BIAS)
        },
        setup.noise_psd,
    )
    _write_json(out_dir.joinpath(params.OUTPUT_FILE_NAMES.DESIGN), table)
    setup.deployment.save(out_dir.joinpath(params.OUTPUT_FILE_NAMES.DEPLOYMENT))
    return table


def print_design(table: Dict[str, Any], ofile: TextIO) -> None:
    """Print a design table as aligned text, one row per policy and
    device.
    """
    print(
        f"{DESIGN_COLUMNS[0]:<14}{DESIGN_COLUMNS[1]:>7}"
        + "".join(f"{column:>14}" for column in DESIGN_COLUMNS[2:]),
        file=ofile,
    )
    for policy, entry in table.items():
        for device in entry["devices"]:
            values = (
                path_loss_db(device["path_loss"]),
                device["gamma"],
                device["alpha_m"],
                device["transmit_probability"],
                device["participation"],
            )
            print(
                f"{policy:<14}{device['device']:>7}"
                + "".join(f"{value:>14.6g}" for value in values),
                file=ofile,
            )


def write_trace(entries: Sequence[Dict[str, Any]], path: pathlib.Path) -> None:
    """Write round trace entries as JSON lines."""
    with open(path, "w", encoding="utf-8") as ofile:
        for entry in entries:
            ofile.write(json.dumps(entry) + "\n")
    logger.info("Wrote %d trace entries to %s", len(entries), path)
