"""Rewrite the golden --help snapshots after an intentional CLI change.

    python3 tests/golden/regenerate.py
"""
from __future__ import annotations

from pathlib import Path

from motionanim.cli import build_parser

SUBCOMMANDS = ("gen-data", "train", "edit", "eval", "report")


def help_texts() -> dict[str, str]:
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    texts = {"motionanim": parser.format_help()}
    for name in SUBCOMMANDS:
        texts[name] = sub.choices[name].format_help()
    return texts


if __name__ == "__main__":
    here = Path(__file__).parent
    for name, text in help_texts().items():
        (here / f"help_{name}.txt").write_text(text)
        print(f"wrote help_{name}.txt")
