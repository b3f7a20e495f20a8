"""Flat-file telemetry backend.

Layout under the store root, one directory per series and one append-only
segment file per UTC day:

    <root>/<path with '/' replaced by '~'>/<metric>/<YYYYMMDD>.seg

Segment files hold wire record lines, bit-identical to what travels on the
wire, so the archive can be grepped, shipped or replayed with nothing but a
text tool. Samples the retention sweep derives are kept apart in
<YYYYMMDD>.dseg files in the same directory.

Appends go through an in-memory mirror (for dedup, latest and range answers)
and are flushed line-by-line, so a crash costs at most the trailing partial
line, which reopening discards.
"""

from __future__ import annotations

import logging
import os
from collections import OrderedDict
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable

from fabmon.core import MetricSample, ResourcePath
from fabmon.wire.codec import MalformedRecord, SchemaViolation, decode_sample, encode_sample
from fabmon.archive.store import AppendResult, Key, MemoryStore, TelemetryStore, sample_key

log = logging.getLogger(__name__)

_MAX_OPEN_FILES = 128


def day_bucket(ts_ms: int) -> str:
    return datetime.fromtimestamp(ts_ms // 1000, tz=timezone.utc).strftime("%Y%m%d")


def _series_dir(root: Path, key: Key) -> Path:
    path_text, metric = key
    return root / path_text.replace("/", "~") / metric


class FileSegmentStore(TelemetryStore):
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._mirror = MemoryStore()
        self._handles: OrderedDict[Path, IO[bytes]] = OrderedDict()
        self._load()

    # -- startup scan ------------------------------------------------------

    def _load(self) -> None:
        seg_files = sorted(
            p for p in self.root.rglob("*") if p.suffix in (".seg", ".dseg") and p.is_file()
        )
        for seg in seg_files:
            self._load_segment(seg, derived=seg.suffix == ".dseg")

    def _load_segment(self, seg: Path, derived: bool) -> None:
        data = seg.read_bytes()
        if not data:
            return
        lines = data.split(b"\n")
        trailing = lines.pop()  # complete files end with a newline -> empty tail
        if trailing:
            log.warning("dropping partial trailing record in %s", seg)
        for i, line in enumerate(lines):
            try:
                sample = decode_sample(line + b"\n")
            except (MalformedRecord, SchemaViolation) as exc:
                if i == len(lines) - 1 and not trailing:
                    # torn final write that still got its newline out
                    log.warning("dropping undecodable final record in %s", seg)
                    continue
                raise MalformedRecord(f"{seg}: corrupt record at line {i + 1}: {exc}") from exc
            if derived:
                self._mirror.append_derived(sample)
            else:
                self._mirror.append(sample)

    # -- file plumbing -----------------------------------------------------

    def _segment_path(self, sample: MetricSample, derived: bool) -> Path:
        suffix = ".dseg" if derived else ".seg"
        return _series_dir(self.root, sample_key(sample)) / (day_bucket(sample.timestamp) + suffix)

    def _handle(self, path: Path) -> IO[bytes]:
        fh = self._handles.get(path)
        if fh is not None:
            self._handles.move_to_end(path)
            return fh
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "ab")
        self._handles[path] = fh
        if len(self._handles) > _MAX_OPEN_FILES:
            _, old = self._handles.popitem(last=False)
            old.close()
        return fh

    def _drop_handle(self, path: Path) -> None:
        fh = self._handles.pop(path, None)
        if fh is not None:
            fh.close()

    def _write(self, sample: MetricSample, derived: bool) -> None:
        fh = self._handle(self._segment_path(sample, derived))
        fh.write(encode_sample(sample))
        fh.flush()

    # -- TelemetryStore ----------------------------------------------------

    def append(self, sample: MetricSample) -> AppendResult:
        result = self._mirror.append(sample)
        if result is AppendResult.OK:
            self._write(sample, derived=False)
        return result

    def append_derived(self, sample: MetricSample) -> AppendResult:
        result = self._mirror.append_derived(sample)
        if result is AppendResult.OK:
            self._write(sample, derived=True)
        return result

    def latest(self, path, metric):
        return self._mirror.latest(path, metric)

    def range(self, path, metric, t0, t1):
        return self._mirror.range(path, metric, t0, t1)

    def keys(self):
        return self._mirror.keys()

    def is_derived(self, path, metric, timestamp):
        return self._mirror.is_derived(path, metric, timestamp)

    def remove(self, path: ResourcePath, metric: str, timestamps: Iterable[int]) -> int:
        doomed = set(timestamps)
        removed = self._mirror.remove(path, metric, doomed)
        if removed:
            self._rewrite_series((str(path), metric))
        return removed

    def _rewrite_series(self, key: Key) -> None:
        """Regenerate every segment of one series from the mirror."""
        series_dir = _series_dir(self.root, key)
        if not series_dir.exists():
            return
        path = ResourcePath.parse(key[0])
        survivors = self._mirror.range(path, key[1], 1, 1 << 62)
        by_file: dict[Path, list[MetricSample]] = {}
        for s in survivors:
            derived = self._mirror.is_derived(path, key[1], s.timestamp)
            by_file.setdefault(self._segment_path(s, derived), []).append(s)
        for seg in list(series_dir.iterdir()):
            if seg.suffix not in (".seg", ".dseg"):
                continue
            self._drop_handle(seg)
            keep = by_file.pop(seg, None)
            if keep is None:
                seg.unlink()
                continue
            tmp = seg.with_suffix(seg.suffix + ".tmp")
            with open(tmp, "wb") as fh:
                for s in keep:
                    fh.write(encode_sample(s))
            os.replace(tmp, seg)
        for seg, keep in by_file.items():  # pragma: no cover - defensive
            with open(seg, "wb") as fh:
                for s in keep:
                    fh.write(encode_sample(s))

    def flush(self) -> None:
        for fh in self._handles.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()
