#!/usr/bin/env python3
"""Rebuild the bundled game/scenario/problem JSON files from worlds.py."""

import json
from pathlib import Path

from contingames import worlds

ROOT = Path(__file__).resolve().parent.parent / "src" / "contingames" / "data"


def dump(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {path}")


def main() -> None:
    for name, build in worlds.GAMES.items():
        dump(ROOT / "games" / f"{name}.json", build())
    for name, build in worlds.SCENARIOS.items():
        dump(ROOT / "scenarios" / f"{name}.json", build())
    for name, build in worlds.PROBLEMS.items():
        dump(ROOT / "problems" / f"{name}.json", build().to_json_dict())


if __name__ == "__main__":
    main()
