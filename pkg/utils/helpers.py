import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import structlog

OUTPUT_ROOT_ENV = "LRQ_OUTPUT_ROOT"
LOG_LEVEL_ENV = "LRQ_LOG_LEVEL"


def configure_logging(level=None, json_output=False):
    """
    Configure structlog for the whole process.

    Args:
        level: Log level name; falls back to $LRQ_LOG_LEVEL, then INFO.
        json_output: Emit one JSON object per event instead of the console format.
    """
    level_name = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    renderer = structlog.processors.JSONRenderer() if json_output else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(getattr(logging, level_name, logging.INFO)),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def output_root(default="runs"):
    """Return the output root directory, honouring $LRQ_OUTPUT_ROOT."""
    return Path(os.getenv(OUTPUT_ROOT_ENV, default))


def rng_stream(seed, name, *keys):
    """
    Derive an independent numpy Generator from the run seed.

    The same (seed, name, keys) always yields the same stream, regardless of how
    many other streams were created before it.
    """
    name_key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")
    entropy = [int(seed), name_key, *[int(k) for k in keys]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def canonical_json(payload):
    """Serialize with sorted keys and compact separators so hashes are stable."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_hex(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def params_digest(arrays):
    """Digest of a name -> ndarray mapping, used to prove a model was left untouched."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def scaled_count(value, factor):
    """Scale a step/epoch count by the desk-scale factor, never below 1."""
    return max(1, int(round(value * factor)))
