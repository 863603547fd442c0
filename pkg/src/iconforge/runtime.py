"""Process-level runtime knobs."""

from __future__ import annotations

import os


def worker_count() -> int:
    """Worker-thread cap from ICONFORGE_THREADS (default 1, minimum 1)."""
    try:
        n = int(os.environ.get("ICONFORGE_THREADS", "1"))
    except ValueError:
        return 1
    return max(1, n)
