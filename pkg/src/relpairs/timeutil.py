"""Timestamps are float POSIX seconds (UTC) internally and RFC 3339 on the wire."""
from __future__ import annotations

from datetime import datetime, timezone


def parse_time(value) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"malformed timestamp: {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"malformed timestamp: {value!r}") from exc
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks a UTC offset: {value!r}")
    return dt.timestamp()


def format_time(t: float) -> str:
    dt = datetime.fromtimestamp(round(float(t), 3), tz=timezone.utc)
    if dt.microsecond:
        return dt.isoformat(timespec="milliseconds").replace("+00:00", "Z")
    return dt.isoformat(timespec="seconds").replace("+00:00", "Z")


def month_of(t: float) -> str:
    dt = datetime.fromtimestamp(float(t), tz=timezone.utc)
    return f"{dt.year:04d}-{dt.month:02d}"
