"""Closed toy vocabulary shared by the prompt grammar and the text embedder."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
COLORS = tuple(PALETTE)
SHAPES = ("square", "circle", "triangle")
STYLES = ("plain", "grayscale", "sepia")
# image rows grow downward, so "up" is negative y
DIRECTIONS: dict[str, tuple[int, int]] = {
    "right": (1, 0),
    "left": (-1, 0),
    "up": (0, -1),
    "down": (0, 1),
    "still": (0, 0),
}
FILLER = ("a", "moving", "on", "background", "in", "style")

VOCAB: tuple[str, ...] = FILLER + COLORS + SHAPES + tuple(DIRECTIONS) + STYLES
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}


class VocabularyError(ValueError):
    pass


def tokenize(prompt: str) -> list[str]:
    return [tok for tok in re.split(r"[\s,]+", prompt.lower()) if tok]


def token_ids(prompt: str) -> list[int]:
    ids = []
    for tok in tokenize(prompt):
        if tok not in TOKEN_IDS:
            raise VocabularyError(f"out-of-vocabulary token {tok!r} in prompt {prompt!r}")
        ids.append(TOKEN_IDS[tok])
    return ids


@dataclass(frozen=True)
class PromptParts:
    shape_color: str
    shape: str
    direction: str
    background: str
    style: str = "plain"


def format_prompt(parts: PromptParts) -> str:
    text = f"a {parts.shape_color} {parts.shape} moving {parts.direction} on a {parts.background} background"
    if parts.style != "plain":
        text += f", {parts.style}"
    return text


_PROMPT_RE = re.compile(
    r"^a (?P<color>\w+) (?P<shape>\w+) moving (?P<direction>\w+) on a (?P<bg>\w+) background(?:, (?P<style>\w+))?$")


def parse_prompt(prompt: str) -> PromptParts:
    m = _PROMPT_RE.match(prompt.strip().lower())
    if m is None:
        raise VocabularyError(f"prompt does not follow the scene grammar: {prompt!r}")
    parts = PromptParts(m["color"], m["shape"], m["direction"], m["bg"], m["style"] or "plain")
    for value, allowed, what in ((parts.shape_color, COLORS, "color"), (parts.background, COLORS, "color"),
                                 (parts.shape, SHAPES, "shape"), (parts.direction, DIRECTIONS, "direction"),
                                 (parts.style, STYLES, "style")):
        if value not in allowed:
            raise VocabularyError(f"unknown {what} {value!r} in prompt {prompt!r}")
    return parts


_SEPIA = np.array([[0.393, 0.769, 0.189],
                   [0.349, 0.686, 0.168],
                   [0.272, 0.534, 0.131]])
_LUMA = np.array([0.299, 0.587, 0.114])


def apply_style(rgb: np.ndarray, style: str, axis: int = -1) -> np.ndarray:
    """Apply a global color map; ``axis`` is the length-3 channel axis."""
    rgb = np.asarray(rgb, dtype=np.float64)
    moved = np.moveaxis(rgb, axis, -1)
    if style == "plain":
        out = moved
    elif style == "grayscale":
        out = np.repeat((moved @ _LUMA)[..., None], 3, axis=-1)
    elif style == "sepia":
        out = np.clip(moved @ _SEPIA.T, 0.0, 1.0)
    else:
        raise VocabularyError(f"unknown style {style!r}")
    return np.moveaxis(out, -1, axis)


def styled_palette(style: str) -> dict[str, np.ndarray]:
    return {name: apply_style(np.array(rgb), style) for name, rgb in PALETTE.items()}
