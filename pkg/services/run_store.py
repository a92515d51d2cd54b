"""Per-command output directories, JSON-lines step logs and metrics records."""

import json
from datetime import datetime
from pathlib import Path

import structlog

from utils.errors import MissingCheckpointError
from utils.helpers import output_root

log = structlog.get_logger(__name__)


class JsonlWriter:
    """Append-only JSON-lines log, one record per training step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")
        self.records = 0

    def write(self, record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        self.records += 1

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class NullWriter:
    """Stand-in when a stage runs without a run directory (tests, ablation inner loops)."""

    records = 0

    def write(self, record):
        self.records += 1

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def read_jsonl(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class RunArtifacts:
    """
    Output directory of one command run.

    Defaults to `<root>/<command>-<config hash[:12]>/` under $LRQ_OUTPUT_ROOT.
    Metrics records always carry the config hash; wall-clock timestamps go to
    run_info.json so metrics files stay reproducible.
    """

    def __init__(self, command, cfg_hash, out=None, root=None):
        self.command = command
        self.config_hash = cfg_hash
        root = Path(root) if root is not None else output_root()
        self.dir = Path(out) if out else root / f"{command}-{cfg_hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.dir / name

    def checkpoint(self, name):
        return self.dir / f"{name}.ckpt"

    def log_writer(self, name):
        return JsonlWriter(self.dir / f"{name}.jsonl")

    def write_json(self, name, payload):
        path = self.dir / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_metrics(self, record):
        record = {**record, "config_hash": self.config_hash}
        path = self.write_json("metrics.json", record)
        log.info("metrics_written", path=str(path))
        return record

    def write_run_info(self, **extra):
        return self.write_json("run_info.json", {
            "command": self.command,
            "config_hash": self.config_hash,
            "finished_at": datetime.now().isoformat(timespec="seconds"),
            **extra,
        })


def require_checkpoint(path, producer):
    """Path of an existing checkpoint, or a MissingCheckpointError naming the command that makes it."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(path, producer)
    return path
