"""
Demonstration dataset on disk, normalization statistics, training pairs and splits.

Layout of a dataset directory::

    manifest.json              DatasetManifest (schema version, task, norm stats, episodes)
    episode_00000.csv          header "tick,o0..o17,a0..a5", one row per 1 ms tick
    episode_00001.csv
    ...
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import ValidationError

from app.utils.exceptions import (
    ChecksumMismatchError,
    DatasetError,
    DatasetRowError,
    DegenerateSplitError,
    EmptyDatasetError,
    ManifestMissingError,
    SchemaVersionError,
)

from .models import (
    ACTION_DIM,
    OBS_DIM,
    ROW_DIM,
    SCHEMA_VERSION,
    STD_FLOOR,
    Dataset,
    DatasetManifest,
    EpisodeEntry,
    EpisodeOutcome,
    EpisodeRecord,
    NormStats,
    TrainingPairs,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
COLUMNS = ["tick", *[f"o{i}" for i in range(OBS_DIM)], *[f"a{i}" for i in range(ACTION_DIM)]]


def file_checksum(path: Path) -> str:
    """SHA-256 of the file contents, read in 1 MiB chunks."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1024 * 1024), b""):
            digest.update(chunk)
    return digest.hexdigest()


def compute_norm_stats(records: Sequence[EpisodeRecord]) -> NormStats:
    """Per-dimension mean and standard deviation over every row, std floored at 1e-6."""
    if not records:
        raise EmptyDatasetError(reason="cannot compute normalization statistics without records")
    observations = np.concatenate([record.observations for record in records], axis=0)
    actions = np.concatenate([record.actions for record in records], axis=0)
    return NormStats(
        obs_mean=observations.mean(axis=0),
        obs_std=np.maximum(observations.std(axis=0), STD_FLOOR),
        action_mean=actions.mean(axis=0),
        action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
    )


def build_training_pairs(
    records: Iterable[EpisodeRecord],
    stats: NormStats,
    history_ticks: int = 1,
) -> TrainingPairs:
    """
    Assemble ([o_t, o_{t-h}], a_t) pairs per episode, all normalized.

    Ticks earlier than ``history_ticks`` use o_0 as the previous observation, so an
    episode of length L yields exactly L pairs and tick 0 pairs o_0 with itself.
    """
    if history_ticks < 1:
        raise DatasetError(reason=f"history_ticks must be >= 1, got {history_ticks}")
    conditions: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for record in records:
        obs = stats.normalize_obs(record.observations)
        prev = np.maximum(np.arange(record.tick_count) - history_ticks, 0)
        conditions.append(np.hstack([obs, obs[prev]]))
        targets.append(stats.normalize_action(record.actions))
    if not conditions:
        return TrainingPairs(obs=np.zeros((0, 2 * OBS_DIM)), actions=np.zeros((0, ACTION_DIM)))
    return TrainingPairs(obs=np.concatenate(conditions), actions=np.concatenate(targets))


def split(
    records: Sequence[EpisodeRecord],
    fraction: float,
    seed: int,
) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """
    Episode-level train/validation split.

    :param fraction: Share of episodes used for training, in (0, 1).
    :raises DegenerateSplitError: either side would be empty.
    """
    if not 0.0 < fraction < 1.0:
        raise DatasetError(reason=f"split fraction must lie in (0, 1), got {fraction}")
    count = len(records)
    n_train = int(round(fraction * count))
    if n_train == 0 or n_train == count:
        raise DegenerateSplitError(count=count, fraction=fraction)
    order = np.random.default_rng(seed).permutation(count)
    train_idx = sorted(int(i) for i in order[:n_train])
    val_idx = sorted(int(i) for i in order[n_train:])
    return [records[i] for i in train_idx], [records[i] for i in val_idx]


def _episode_filename(index: int) -> str:
    return f"episode_{index:05d}.csv"


def write_episode_csv(record: EpisodeRecord, path: Path) -> None:
    rows = record.rows
    if rows.ndim != 2 or rows.shape[1] != ROW_DIM:
        raise DatasetError(reason=f"episode rows must have {ROW_DIM} columns, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        bad = int(np.argwhere(~np.isfinite(rows))[0][0])
        raise DatasetRowError(row=bad, path=path, reason="non-finite value")
    table = np.hstack([np.arange(rows.shape[0], dtype=np.float64)[:, None], rows])
    np.savetxt(path, table, fmt=["%d"] + ["%.17g"] * ROW_DIM, delimiter=",", header=",".join(COLUMNS), comments="")


def write_dataset(
    records: Sequence[EpisodeRecord],
    directory: str | Path,
    metadata: dict[str, str | int | float | bool] | None = None,
) -> DatasetManifest:
    """
    Write one CSV per episode plus ``manifest.json`` with checksums and normalization stats.

    :return: The manifest that was written.
    """
    if not records:
        raise EmptyDatasetError(reason="nothing to write")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries: list[EpisodeEntry] = []
    for index, record in enumerate(records):
        path = directory / _episode_filename(index)
        write_episode_csv(record, path)
        entries.append(
            EpisodeEntry(
                file=path.name,
                seed=record.seed,
                tick_count=record.tick_count,
                sha256=file_checksum(path),
                success=record.outcome.success,
                duration=record.outcome.duration,
                termination_reason=record.outcome.termination_reason,
            )
        )

    task_names = sorted({record.task_name for record in records})
    manifest = DatasetManifest(
        schema_version=SCHEMA_VERSION,
        task_name=",".join(task_names),
        total_rows=sum(entry.tick_count for entry in entries),
        episodes=entries,
        norm_stats=compute_norm_stats(records).to_model(),
        metadata=metadata or {},
    )
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote dataset dir=%s episodes=%s rows=%s", directory, len(entries), manifest.total_rows)
    return manifest


def _locate_bad_row(path: Path) -> tuple[int, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for index, row in enumerate(reader):
            if len(row) != ROW_DIM + 1:
                return index, f"expected {ROW_DIM + 1} fields, got {len(row)}"
            for column, cell in zip(COLUMNS, row):
                try:
                    value = float(cell)
                except ValueError:
                    return index, f"column {column} is not numeric: {cell!r}"
                if not math.isfinite(value):
                    return index, f"column {column} is not finite"
    return -1, "unparseable file"


def read_episode_csv(path: Path) -> np.ndarray:
    """
    Parse one episode file into an (L, 24) array, validating every row.

    :raises DatasetRowError: a row has the wrong width, a non-numeric or non-finite cell,
        or an out-of-sequence tick.
    """
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        row, reason = _locate_bad_row(path)
        raise DatasetRowError(row=row, path=path, reason=reason) from exc

    if table.shape[1] != ROW_DIM + 1:
        raise DatasetRowError(row=0, path=path, reason=f"expected {ROW_DIM + 1} fields, got {table.shape[1]}")
    finite = np.isfinite(table)
    if not finite.all():
        row = int(np.argwhere(~finite)[0][0])
        column = COLUMNS[int(np.argwhere(~finite[row])[0][0])]
        raise DatasetRowError(row=row, path=path, reason=f"column {column} is not finite")
    ticks = table[:, 0]
    expected = np.arange(table.shape[0], dtype=np.float64)
    if not np.array_equal(ticks, expected):
        row = int(np.argwhere(ticks != expected)[0][0])
        raise DatasetRowError(row=row, path=path, reason=f"tick {ticks[row]:g} out of sequence")
    return table[:, 1:]


def read_manifest(directory: str | Path) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ManifestMissingError(path=directory)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaVersionError(path=path, expected=SCHEMA_VERSION, reason=f"invalid JSON: {exc}") from exc
    if isinstance(raw, dict) and raw.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            path=path, expected=SCHEMA_VERSION, reason=f"found schema_version={raw.get('schema_version')!r}"
        )
    try:
        return DatasetManifest.model_validate(raw)
    except ValidationError as exc:
        raise SchemaVersionError(path=path, expected=SCHEMA_VERSION, reason=str(exc)) from exc


def read_dataset(directory: str | Path, verify_checksums: bool = True) -> Dataset:
    """
    Load every episode listed in the manifest.

    Rows are validated before checksums so a corrupted value is reported with its row.

    :raises ManifestMissingError: no manifest in ``directory``.
    :raises SchemaVersionError: manifest unreadable or of another schema version.
    :raises DatasetRowError: an invalid row.
    :raises ChecksumMismatchError: a file differs from its manifest checksum.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    records: list[EpisodeRecord] = []
    for entry in manifest.episodes:
        path = directory / entry.file
        if not path.is_file():
            raise DatasetError(reason=f"episode file {path} listed in the manifest is missing")
        rows = read_episode_csv(path)
        if rows.shape[0] != entry.tick_count:
            raise DatasetError(reason=f"{path} has {rows.shape[0]} rows, manifest says {entry.tick_count}")
        if verify_checksums:
            actual = file_checksum(path)
            if actual != entry.sha256:
                raise ChecksumMismatchError(path=path, expected=entry.sha256, actual=actual)
        records.append(
            EpisodeRecord(
                task_name=manifest.task_name,
                seed=entry.seed,
                observations=rows[:, :OBS_DIM].copy(),
                actions=rows[:, OBS_DIM:].copy(),
                outcome=EpisodeOutcome(
                    success=entry.success, duration=entry.duration, termination_reason=entry.termination_reason
                ),
            )
        )
    logger.info("Read dataset dir=%s episodes=%s rows=%s", directory, len(records), manifest.total_rows)
    return Dataset(records=records, manifest=manifest)


def dataset_fingerprint(directory: str | Path) -> str:
    """Hash of the manifest's episode checksums, identical for byte-identical datasets."""
    manifest = read_manifest(directory)
    digest = hashlib.sha256()
    for entry in manifest.episodes:
        digest.update(entry.sha256.encode("ascii"))
    return digest.hexdigest()
