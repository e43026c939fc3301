# src/sparsetile/__main__.py
from __future__ import annotations


def main() -> int:
    """Module entrypoint: ``python -m sparsetile <command>`` runs the CLI."""
    from sparsetile.cli import main as cli_main

    return int(cli_main())


if __name__ == "__main__":
    raise SystemExit(main())
