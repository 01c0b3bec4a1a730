import os


def num_threads() -> int:
    """Worker cap from ``FAMDA_THREADS``; defaults to the available cores."""
    raw = os.environ.get("FAMDA_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"FAMDA_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
