"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    RESULTS.append((criterion, bool(ok), detail))
    return bool(ok)
