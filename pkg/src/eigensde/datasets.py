"""
eigensde Datasets
=================

Trajectories and their JSON Lines container. Line 0 of a dataset file is
the header (generator name, generator config, ground-truth dynamics);
every following line is one trajectory.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ScheduleError
from .esde import ControlSegment, check_schedule
from .filtering import Observation
from .log import get_logger
from .spectral import as_tensor

logger = get_logger(__name__)

DATASET_VERSION = 1
SPLIT_FRACTIONS = (0.6, 0.1, 0.3)


@dataclass(frozen=True)
class Trajectory:
    """
    One sequence: context vector, time-sorted observations, control schedule
    and (for synthetic data) dense ground-truth samples of the observable.
    """

    context: torch.Tensor
    observations: tuple
    controls: tuple = ()
    truth: tuple = field(default=None)
    traj_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "context", as_tensor(self.context).reshape(-1))
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "traj_id", str(self.traj_id))
        times = [obs.t for obs in self.observations]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"trajectory {self.traj_id!r}: observation times must be strictly increasing")
        try:
            check_schedule(list(self.controls))
        except ScheduleError as exc:
            raise ScheduleError(f"trajectory {self.traj_id!r}: {exc}") from exc

    @property
    def end_time(self):
        ends = [obs.t for obs in self.observations] + [seg.t1 for seg in self.controls]
        return max(ends, default=0.0)

    def with_observations(self, observations):
        return Trajectory(self.context, observations, self.controls, self.truth, self.traj_id)

    def to_json(self):
        payload = {
            "id": self.traj_id,
            "context": self.context.tolist(),
            "obs": [obs.to_json() for obs in self.observations],
            "controls": [seg.to_json() for seg in self.controls],
        }
        if self.truth is not None:
            payload["truth"] = [{"t": float(t), "y": [float(v) for v in y]} for t, y in self.truth]
        return payload

    @classmethod
    def from_json(cls, payload, default_id=""):
        try:
            truth = payload.get("truth")
            return cls(
                context=payload["context"],
                observations=[Observation.from_json(o) for o in payload["obs"]],
                controls=[ControlSegment(c["t0"], c["t1"], c["u"]) for c in payload.get("controls", [])],
                truth=None if truth is None else tuple((r["t"], tuple(r["y"])) for r in truth),
                traj_id=payload.get("id", default_id),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed trajectory record: {exc}") from exc


@dataclass
class Dataset:
    header: dict
    trajectories: list

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, index):
        return self.trajectories[index]

    def subset(self, indices, split=None):
        header = dict(self.header)
        if split is not None:
            header["split"] = split
        return Dataset(header, [self.trajectories[i] for i in indices])

    def mean_observations(self):
        if not self.trajectories:
            return 0.0
        return float(np.mean([len(traj.observations) for traj in self.trajectories]))


def write_dataset(path, dataset):
    """Write header + one trajectory per line; output is byte-stable for equal input."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": DATASET_VERSION, **dataset.header}
    with path.open("w") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for traj in dataset.trajectories:
            handle.write(json.dumps(traj.to_json(), sort_keys=True) + "\n")
    logger.info("wrote %d trajectories to %s", len(dataset), path)
    return path


def read_dataset(path):
    path = Path(path)
    with path.open() as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise DataError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON line ({exc})") from exc
    if header.get("format_version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset format_version {header.get('format_version')}")
    trajectories = [Trajectory.from_json(rec, default_id=str(i)) for i, rec in enumerate(records)]
    return Dataset(header, trajectories)


def read_trajectory(path):
    """Load a single trajectory: a bare JSON object or the first record of a dataset."""
    text = Path(path).read_text().strip()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError:
        return read_dataset(path).trajectories[0]
    if "format_version" in payload:
        return read_dataset(path).trajectories[0]
    return Trajectory.from_json(payload)


def split_dataset(dataset, seed, fractions=SPLIT_FRACTIONS):
    """Seeded shuffle into train/validation/test (floor for train and validation)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(np.floor(fractions[0] * len(dataset) + 1e-9))
    n_val = int(np.floor(fractions[1] * len(dataset) + 1e-9))
    return (
        dataset.subset(order[:n_train].tolist(), "train"),
        dataset.subset(order[n_train:n_train + n_val].tolist(), "validation"),
        dataset.subset(order[n_train + n_val:].tolist(), "test"),
    )
