"""Console entry point; the command implementations live in ``harness``."""

from __future__ import annotations

import sys
from typing import Optional, Sequence

from .harness import cli


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(cli(argv))


if __name__ == "__main__":
    main()
