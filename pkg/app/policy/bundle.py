"""
Model bundle persistence.

A bundle is a NumPy ``.npz`` archive written without pickling:

- ``header``: UTF-8 JSON (stored as a uint8 array) validated by :class:`BundleHeader`
- ``norm.obs_mean``, ``norm.obs_std``, ``norm.action_mean``, ``norm.action_std``
- ``param.<layer name>`` for every array in :class:`NetParams`
- ``history.train``, ``history.val_epoch``, ``history.val_loss``
"""
from __future__ import annotations

import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from app.data.models import OBS_DIM, NormStats
from app.utils.exceptions import (
    BundleVersionError,
    CorruptBundleError,
    DimensionMismatchError,
    IncompatibleBundleError,
)

from .ddpm import ScheduleConfig, VarianceSchedule
from .noise_net import LossHistory, NetConfig, NetParams

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = "TACDIFF"
BUNDLE_VERSION = 1


class ScheduleHeader(BaseModel):
    T: int
    beta_start: float
    beta_end: float
    final_step_noise: bool = False


class BundleHeader(BaseModel):
    magic: str
    version: int
    net: dict[str, int]
    schedule: ScheduleHeader
    history_ticks: int = 1
    task_name: str = "cuboid"
    fingerprint: str = ""


@dataclass
class ModelBundle:
    """Everything inference needs: weights, schedule, normalization and history offset."""

    params: NetParams
    schedule: VarianceSchedule
    norm_stats: NormStats
    history_ticks: int = 1
    task_name: str = "cuboid"
    fingerprint: str = ""
    history: LossHistory = field(default_factory=LossHistory)


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    """
    Write ``bundle`` to ``path`` atomically.

    :param bundle: Model to persist.
    :param path: Target file; written through a temporary sibling and renamed.
    :return: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = BundleHeader(
        magic=BUNDLE_MAGIC,
        version=BUNDLE_VERSION,
        net=asdict(bundle.params.config),
        schedule=ScheduleHeader(**asdict(bundle.schedule.config)),
        history_ticks=bundle.history_ticks,
        task_name=bundle.task_name,
        fingerprint=bundle.fingerprint,
    )
    entries: dict[str, np.ndarray] = {
        "header": np.frombuffer(header.model_dump_json().encode("utf-8"), dtype=np.uint8),
        "norm.obs_mean": bundle.norm_stats.obs_mean,
        "norm.obs_std": bundle.norm_stats.obs_std,
        "norm.action_mean": bundle.norm_stats.action_mean,
        "norm.action_std": bundle.norm_stats.action_std,
        "history.train": np.asarray(bundle.history.train, dtype=np.float64),
        "history.val_epoch": np.asarray([e for e, _ in bundle.history.validation], dtype=np.int64),
        "history.val_loss": np.asarray([v for _, v in bundle.history.validation], dtype=np.float64),
    }
    for name, array in bundle.params.arrays.items():
        entries[f"param.{name}"] = array

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **entries)
    os.replace(tmp, path)
    logger.info("Saved model bundle path=%s width=%s params=%s", path, bundle.params.config.width, bundle.params.size)
    return path


def load_bundle(path: str | Path, expected_obs_dim: int = 2 * OBS_DIM) -> ModelBundle:
    """
    Read a bundle written by :func:`save_bundle`.

    :param path: Bundle file.
    :param expected_obs_dim: Conditioning size the caller will feed the network.
    :raises CorruptBundleError: unreadable archive, missing entries or malformed header.
    :raises BundleVersionError: header written by another format version.
    :raises IncompatibleBundleError: observation layout differs from ``expected_obs_dim``.
    """
    path = Path(path)
    if not path.is_file():
        raise CorruptBundleError(path=path, reason="file does not exist")
    try:
        with np.load(path, allow_pickle=False) as archive:
            entries = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, EOFError, KeyError, zipfile.BadZipFile) as exc:
        raise CorruptBundleError(path=path, reason=f"{type(exc).__name__}: {exc}") from exc

    try:
        header = BundleHeader.model_validate(json.loads(bytes(entries["header"]).decode("utf-8")))
    except KeyError as exc:
        raise CorruptBundleError(path=path, reason="missing header entry") from exc
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as exc:
        raise CorruptBundleError(path=path, reason=f"malformed header: {exc}") from exc

    if header.magic != BUNDLE_MAGIC:
        raise CorruptBundleError(path=path, reason=f"bad magic {header.magic!r}")
    if header.version != BUNDLE_VERSION:
        raise BundleVersionError(path=path, found=header.version, expected=BUNDLE_VERSION)

    net_config = NetConfig(**header.net)
    if net_config.obs_dim != expected_obs_dim:
        raise IncompatibleBundleError(
            path=path, reason=f"network expects obs_dim={net_config.obs_dim}, observation layout gives {expected_obs_dim}"
        )

    try:
        arrays = {
            name[len("param."):]: np.array(array, dtype=np.float64)
            for name, array in entries.items()
            if name.startswith("param.")
        }
        # npz keeps insertion order, NetParams validates names and shapes
        params = NetParams(config=net_config, arrays=arrays)
        norm_stats = NormStats(
            obs_mean=entries["norm.obs_mean"],
            obs_std=entries["norm.obs_std"],
            action_mean=entries["norm.action_mean"],
            action_std=entries["norm.action_std"],
        )
        history = LossHistory(
            train=[float(v) for v in entries.get("history.train", [])],
            validation=[
                (int(e), float(v))
                for e, v in zip(entries.get("history.val_epoch", []), entries.get("history.val_loss", []))
            ],
        )
    except KeyError as exc:
        raise CorruptBundleError(path=path, reason=f"missing entry {exc}") from exc
    except DimensionMismatchError as exc:
        raise CorruptBundleError(path=path, reason=str(exc)) from exc

    if norm_stats.obs_mean.shape[0] * 2 != expected_obs_dim:
        raise IncompatibleBundleError(
            path=path, reason=f"normalization covers {norm_stats.obs_mean.shape[0]} observation channels"
        )
    if not params.is_finite():
        raise CorruptBundleError(path=path, reason="non-finite parameters")

    schedule = ScheduleConfig(**header.schedule.model_dump()).build()
    return ModelBundle(
        params=params,
        schedule=schedule,
        norm_stats=norm_stats,
        history_ticks=header.history_ticks,
        task_name=header.task_name,
        fingerprint=header.fingerprint,
        history=history,
    )
