"""Snapshot assembly and atomic publication.

One snapshot summarizes one probe cycle: per-site rollups, per-host steps
and the dynamic display values. snapshot.json is written via temp file +
rename so an HTTP server never sees a torn file; the previous snapshot is
kept as snapshot.prev.json; transcripts go to transcripts/<host>/<cycle>.txt.

The JSON serialization is canonical (sorted keys, fixed indentation), so a
snapshot built from the same inputs is byte-identical every time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from fabmon.core import Status, combine_status

if TYPE_CHECKING:  # pragma: no cover
    from fabmon.probe.runner import HostReport

SCHEMA_VERSION = 1


class IoFailure(RuntimeError):
    pass


@dataclass
class SiteReport:
    site: str
    hosts: list["HostReport"]
    combined: Status
    cycle_started_at: int


@dataclass
class Snapshot:
    cycle: int
    started_at: int
    completed_at: int
    sites: list[SiteReport]
    schema: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "cycle": self.cycle,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
            "sites": [
                {
                    "site": sr.site,
                    "status": sr.combined.label,
                    "cycle_started_at": sr.cycle_started_at,
                    "hosts": [
                        {
                            "host": str(hr.host),
                            "status": hr.combined.label,
                            "values": hr.values,
                            "steps": [
                                {
                                    "name": st.name,
                                    "status": st.status.label,
                                    "duration_ms": st.duration_ms,
                                    "transcript_ref": transcript_ref(str(hr.host), self.cycle),
                                }
                                for st in hr.steps
                            ],
                        }
                        for hr in sr.hosts
                    ],
                }
                for sr in self.sites
            ],
        }

    def host_statuses(self) -> dict[str, Status]:
        return {str(h.host): h.combined for sr in self.sites for h in sr.hosts}


def transcript_ref(host_text: str, cycle: int) -> str:
    return f"transcripts/{host_text}/{cycle}.txt"


def snapshot_bytes(snapshot_dict: dict) -> bytes:
    return (json.dumps(snapshot_dict, sort_keys=True, indent=2) + "\n").encode("utf-8")


def verify_rollups(snapshot_dict: dict) -> list[str]:
    """Structural check: every combined status equals the worst of its children."""
    problems = []
    for sr in snapshot_dict["sites"]:
        host_statuses = [Status.parse(h["status"]) for h in sr["hosts"]]
        if Status.parse(sr["status"]) != combine_status(host_statuses):
            problems.append(f"site {sr['site']} rollup mismatch")
        for h in sr["hosts"]:
            step_statuses = [Status.parse(s["status"]) for s in h["steps"]]
            if Status.parse(h["status"]) != combine_status(step_statuses):
                problems.append(f"host {h['host']} rollup mismatch")
    return problems


def publish_snapshot(snapshot: Snapshot, out_dir: str | Path) -> list[Path]:
    """Write snapshot.json atomically plus per-host transcripts; rotate prev."""
    out = Path(out_dir)
    current = out / "snapshot.json"
    previous = out / "snapshot.prev.json"
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / "snapshot.json.tmp"
        tmp.write_bytes(snapshot_bytes(snapshot.to_dict()))
        if current.exists():
            os.replace(current, previous)
            written.append(previous)
        os.replace(tmp, current)
        written.append(current)
        for sr in snapshot.sites:
            for hr in sr.hosts:
                ref = out / transcript_ref(str(hr.host), snapshot.cycle)
                ref.parent.mkdir(parents=True, exist_ok=True)
                lines = []
                for st in hr.steps:
                    lines.append(f"== {st.name} [{st.status.label}] {st.duration_ms}ms")
                    lines.extend(st.transcript)
                ref.write_text("\n".join(lines) + "\n", encoding="utf-8")
                written.append(ref)
    except OSError as exc:
        raise IoFailure(f"cannot publish snapshot to {out}: {exc}") from exc
    return written
