"""Collects one verdict per acceptance criterion for the end-of-run summary."""
from __future__ import annotations

RESULTS: dict[int | str, tuple[bool, str]] = {}


def record(label: int | str, passed: bool, detail: str) -> bool:
    RESULTS[label] = (bool(passed), detail)
    print(f"criterion {label}: {'PASS' if passed else 'FAIL'} - {detail}")
    return bool(passed)


def _order(label):
    return (0, label, "") if isinstance(label, int) else (1, 0, label)


def summary_lines() -> list[str]:
    return [f"criterion {str(k):>2}: {'PASS' if ok else 'FAIL'}  {detail}"
            for k, (ok, detail) in sorted(RESULTS.items(), key=lambda kv: _order(kv[0]))]
