"""Human-normalized scores and their aggregation over a game suite."""

from __future__ import annotations

import csv
import io
from importlib import resources
from statistics import mean, median
from typing import Mapping


def human_normalized(score: float, random_ref: float, human_ref: float) -> float:
    """``(score - random) / (human - random)``, signed."""
    if human_ref == random_ref:
        raise ValueError("human and random reference scores must differ")
    return (score - random_ref) / (human_ref - random_ref)


def _key(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


def load_reference(path: str | None = None) -> dict[str, tuple[float, float]]:
    """Game name -> ``(random, human)``; defaults to the bundled Atari table."""
    if path is None:
        text = resources.files("glam").joinpath("data/atari_reference.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return {row["game"]: (float(row["random"]), float(row["human"])) for row in csv.DictReader(io.StringIO(text))}


def aggregate_scores(scores: Mapping[str, float],
                     reference: Mapping[str, tuple[float, float]] | None = None) -> tuple[float, float, dict]:
    """Return ``(mean, median, per-game)`` of human-normalized scores.

    Game names match case-insensitively and ignoring spaces and punctuation.
    """
    reference = load_reference() if reference is None else reference
    if not scores:
        raise ValueError("no scores given")
    lookup = {_key(k): v for k, v in reference.items()}
    per_game = {}
    for game, s in scores.items():
        ref = lookup.get(_key(game))
        if ref is None:
            raise KeyError(f"unknown game {game!r}")
        per_game[game] = human_normalized(s, *ref)
    vals = list(per_game.values())
    return mean(vals), median(vals), per_game
