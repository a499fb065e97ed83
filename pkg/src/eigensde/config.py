"""
eigensde Run Configuration
==========================

A run config is a JSON file with four sections:

    {"seed": 7,
     "generator": {... GeneratorConfig fields ...},
     "train": {... TrainConfig fields ...},
     "paths": {"data": ..., "checkpoint": ..., "out": ...}}

Explicit command-line flags override file values. Every command records
the resolved configuration in a ``run.json`` beside its output.
"""

import json
import subprocess
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError
from .log import get_logger

logger = get_logger(__name__)

SECTIONS = ("generator", "train", "paths")


@dataclass
class RunConfig:
    seed: int = None
    generator: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        unknown = set(payload) - {"seed", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        for name in SECTIONS:
            if not isinstance(payload.get(name, {}), dict):
                raise ConfigError(f"run config section {name!r} must be an object")
        return cls(
            seed=payload.get("seed"),
            generator=dict(payload.get("generator", {})),
            train=dict(payload.get("train", {})),
            paths=dict(payload.get("paths", {})),
        )

    def merged(self, section, overrides):
        """File values of ``section`` patched by every override that is not None."""
        values = dict(getattr(self, section))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return values

    def resolve_seed(self, flag):
        seed = flag if flag is not None else self.seed
        if seed is None:
            raise ConfigError("this command is randomized: pass --seed (or set 'seed' in --config)")
        return int(seed)

    def path(self, name, flag, required=True):
        value = flag if flag is not None else self.paths.get(name)
        if value is None and required:
            raise ConfigError(f"missing path {name!r}: pass it on the command line or under 'paths'")
        return None if value is None else Path(value)


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


class RunRecord:
    """Collects what a command resolved and writes it as ``run.json``."""

    def __init__(self, command, argv=None):
        self.command = command
        self.argv = list(sys.argv[1:] if argv is None else argv)
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._clock = time.perf_counter()
        self.payload = {}

    def update(self, **values):
        self.payload.update(values)
        return self

    def write(self, target):
        """Write beside ``target`` (a file gets ``<stem>.run.json``, a directory ``run.json``)."""
        target = Path(target)
        path = target / "run.json" if target.is_dir() or not target.suffix else target.with_suffix(".run.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "command": self.command,
            "argv": self.argv,
            "git": git_describe(),
            "started": self.started,
            "wall_time_s": round(time.perf_counter() - self._clock, 3),
            **self.payload,
        }
        path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
        logger.debug("run record written to %s", path)
        return path
