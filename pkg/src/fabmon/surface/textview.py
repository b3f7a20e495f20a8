"""Plain-text status table.

One row per host with the columns HOST, STATUS, LOAD, UPTIME, IDLE, AGE,
grouped by site. The worst site sorts first (then by name), likewise hosts
inside a site, so whatever is broken is at the top of the terminal. A pure
function of the snapshot: same input, same bytes.
"""

from __future__ import annotations

from fabmon.core import Status

COLUMNS = ("HOST", "STATUS", "LOAD", "UPTIME", "IDLE", "AGE")


def _fmt_load(value) -> str:
    return f"{value:.2f}" if isinstance(value, (int, float)) else "-"


def _fmt_secs(value) -> str:
    return f"{int(value)}s" if isinstance(value, (int, float)) else "-"


def _row(host: dict, overrides: dict | None) -> tuple[str, ...]:
    values = dict(host.get("values") or {})
    if overrides:
        values.update(overrides.get(host["host"], {}))
    return (
        host["host"],
        host["status"],
        _fmt_load(values.get("cpu_load1")),
        _fmt_secs(values.get("uptime_s")),
        _fmt_secs(values.get("idle_s")),
        _fmt_secs(values.get("age_s")),
    )


def render_text_status(snapshot: dict, latest: dict | None = None) -> str:
    """Render the status table from a published snapshot dict.

    latest optionally overrides display values per host path text.
    """
    sites = sorted(
        snapshot.get("sites", []),
        key=lambda s: (-Status.parse(s["status"]).value, s["site"]),
    )
    blocks: list[tuple[str, str, list[tuple[str, ...]]]] = []
    all_rows: list[tuple[str, ...]] = []
    for site in sites:
        hosts = sorted(
            site.get("hosts", []),
            key=lambda h: (-Status.parse(h["status"]).value, h["host"]),
        )
        rows = [_row(h, latest) for h in hosts]
        blocks.append((site["site"], site["status"], rows))
        all_rows.extend(rows)

    widths = [len(c) for c in COLUMNS]
    for row in all_rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def line(cells) -> str:
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = [f"cycle {snapshot.get('cycle', '?')} at {snapshot.get('started_at', '?')}"]
    for site_name, site_status, rows in blocks:
        out.append("")
        out.append(f"SITE {site_name} [{site_status}]")
        out.append(line(COLUMNS))
        out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"
