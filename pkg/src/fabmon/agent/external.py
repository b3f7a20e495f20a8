"""External command sensors.

The child process prints wire record lines on stdout; each decodable line
becomes a sample re-stamped with the agent's own host path. Garbage lines
are skipped and counted, a non-zero exit or timeout fails the whole read.
"""

from __future__ import annotations

import dataclasses
import logging
import subprocess

from fabmon.core import MetricSample, ResourcePath
from fabmon.agent.sensors import ReadFailure
from fabmon.wire.codec import MalformedRecord, SchemaViolation, decode_sample

log = logging.getLogger(__name__)


def run_external(
    command: list[str], timeout: float, host_path: ResourcePath
) -> tuple[list[MetricSample], int]:
    """Run one external sensor; returns (samples, bad line count)."""
    try:
        proc = subprocess.run(
            command, capture_output=True, timeout=timeout, check=False
        )
    except subprocess.TimeoutExpired as exc:
        raise ReadFailure(f"{command[0]} timed out after {timeout}s") from exc
    except OSError as exc:
        raise ReadFailure(f"cannot run {command[0]}: {exc}") from exc
    if proc.returncode != 0:
        raise ReadFailure(
            f"{command[0]} exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:200]}"
        )
    samples: list[MetricSample] = []
    bad = 0
    for raw in proc.stdout.splitlines():
        line = raw.strip()
        if not line:
            continue
        try:
            sample = decode_sample(line + b"\n")
        except (MalformedRecord, SchemaViolation) as exc:
            bad += 1
            log.debug("skipping bad sensor line from %s: %s", command[0], exc)
            continue
        samples.append(dataclasses.replace(sample, path=host_path))
    return samples, bad
