"""Edit-quality metrics, human-label aggregation and metric/human alignment."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .benchmark import Attributes, extract_attributes
from .scenes import NoForegroundError
from .vocab import COLORS, DIRECTIONS, SHAPES, STYLES, parse_prompt

REASONS = ("text-alignment", "source-consistency")
MOVING = ("right", "left", "up", "down")


class UndefinedCorrelation(ValueError):
    pass


class LabelError(ValueError):
    pass


# -- embedding backends ----------------------------------------------------------------

class EmbeddingBackend(Protocol):
    dim: int

    def embed_video(self, video) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _frames(video) -> np.ndarray:
    frames = getattr(video, "frames", video)
    if hasattr(frames, "numpy"):
        frames = frames.detach().numpy()
    return np.asarray(frames, dtype=np.float64)


def _one_hot(options: Sequence[str], value: str) -> np.ndarray:
    v = np.zeros(len(options))
    v[list(options).index(value)] = 1.0
    return v


def _direction_block(velocity: Sequence[float]) -> np.ndarray:
    vx, vy = velocity
    block = np.array([max(vx, 0.0), max(-vx, 0.0), max(-vy, 0.0), max(vy, 0.0)])
    return _unit(block)


class OracleEmbedder:
    """Concatenated one-hot blocks (shape color, background, style, direction, shape kind).

    Videos go through the attribute extractor, prompts through the scene
    grammar, so a correct edit moves both embeddings by the same vector.
    """

    blocks = (("shape_color", COLORS), ("background", COLORS), ("style", STYLES), ("direction", MOVING),
              ("shape", SHAPES))
    dim = 2 * len(COLORS) + len(STYLES) + len(MOVING) + len(SHAPES)

    def _encode(self, shape_color, background, style, direction_block, shape) -> np.ndarray:
        return _unit(np.concatenate([_one_hot(COLORS, shape_color), _one_hot(COLORS, background),
                                     _one_hot(STYLES, style), direction_block, _one_hot(SHAPES, shape)]))

    def embed_attributes(self, a: Attributes) -> np.ndarray:
        return self._encode(a.shape_color, a.background, a.style, _direction_block(a.velocity), a.shape)

    def embed_video(self, video) -> np.ndarray:
        frames = _frames(video)
        try:
            return self.embed_attributes(extract_attributes(frames))
        except NoForegroundError:
            return _unit(np.ones(self.dim))

    def embed_text(self, text: str) -> np.ndarray:
        p = parse_prompt(text)
        return self._encode(p.shape_color, p.background, p.style, _direction_block(DIRECTIONS[p.direction]),
                            p.shape)


class FrameAverageEmbedder(OracleEmbedder):
    """Image-style backend: each frame is embedded on its own (no motion block).

    ``mode="score"`` makes M_sim the mean of per-frame similarity scores;
    ``mode="embedding"`` averages frame embeddings first. Directional deltas
    always use the averaged embedding.
    """

    dim = 2 * len(COLORS) + len(STYLES) + len(SHAPES)

    def __init__(self, mode: Literal["score", "embedding"] = "score"):
        if mode not in ("score", "embedding"):
            raise ValueError(f"unknown frame-averaging mode {mode!r}")
        self.mode = mode

    def _encode(self, shape_color, background, style, direction_block, shape) -> np.ndarray:
        return _unit(np.concatenate([_one_hot(COLORS, shape_color), _one_hot(COLORS, background),
                                     _one_hot(STYLES, style), _one_hot(SHAPES, shape)]))

    def embed_frames(self, video) -> np.ndarray:
        out = []
        for frame in _frames(video):
            try:
                out.append(self.embed_attributes(extract_attributes(frame[None])))
            except NoForegroundError:
                out.append(_unit(np.ones(self.dim)))
        return np.stack(out)

    def embed_video(self, video) -> np.ndarray:
        return _unit(self.embed_frames(video).mean(axis=0))


# -- edit metrics ----------------------------------------------------------------------

def _check_dims(*vectors: np.ndarray) -> None:
    if len({v.shape for v in vectors}) != 1:
        raise ValueError(f"embedding dimension mismatch: {[v.shape for v in vectors]}")


def m_sim(source, edit, backend: EmbeddingBackend) -> float:
    if isinstance(backend, FrameAverageEmbedder) and backend.mode == "score":
        a, b = backend.embed_frames(source), backend.embed_frames(edit)
        _check_dims(a, b)
        return float(np.mean(np.sum(a * b, axis=1)))
    a, b = backend.embed_video(source), backend.embed_video(edit)
    _check_dims(a, b)
    return float(a @ b)


def directional_cosine(delta_v: np.ndarray, delta_t: np.ndarray, eps: float = 1e-9) -> float:
    """Cosine of the two deltas; 0 when either is (numerically) zero."""
    _check_dims(delta_v, delta_t)
    nv, nt = np.linalg.norm(delta_v), np.linalg.norm(delta_t)
    if nv < eps or nt < eps:
        return 0.0
    return float(np.clip(delta_v @ delta_t / (nv * nt), -1.0, 1.0))


def m_dir(source_video, edit_video, source_prompt: str, edit_prompt: str, backend: EmbeddingBackend) -> float:
    dv = backend.embed_video(edit_video) - backend.embed_video(source_video)
    dt = backend.embed_text(edit_prompt) - backend.embed_text(source_prompt)
    return directional_cosine(dv, dt)


def m_geo(sim: float, direction: float) -> float:
    """sqrt(sim * dir), with negative products clamped to zero."""
    return float(np.sqrt(max(0.0, sim * direction)))


# -- human labels ----------------------------------------------------------------------

@dataclass(frozen=True)
class Vote:
    choice: str
    reasons: frozenset[str]

    def __post_init__(self):
        if self.choice not in ("A", "B"):
            raise LabelError(f"vote choice must be 'A' or 'B', got {self.choice!r}")
        if not self.reasons:
            raise LabelError("each vote needs at least one reason")
        bad = set(self.reasons) - set(REASONS)
        if bad:
            raise LabelError(f"unknown reason(s) {sorted(bad)}")

    @property
    def reason_class(self) -> str:
        return "both" if len(self.reasons) == 2 else next(iter(self.reasons))


@dataclass
class VoteOutcome:
    winner: str
    votes_for: int
    total: int
    reasons: dict[str, float]  # text-alignment / source-consistency / both, over the winner's votes


def majority_vote(votes: Sequence[Vote]) -> VoteOutcome:
    if len(votes) == 0 or len(votes) % 2 == 0:
        raise LabelError(f"majority vote needs an odd number of votes, got {len(votes)}")
    counts = Counter(v.choice for v in votes)
    winner = "A" if counts["A"] > counts["B"] else "B"
    won = [v for v in votes if v.choice == winner]
    classes = Counter(v.reason_class for v in won)
    reasons = {k: classes[k] / len(won) for k in ("text-alignment", "source-consistency", "both")}
    return VoteOutcome(winner, len(won), len(votes), reasons)


@dataclass
class PairedComparison:
    task_id: str
    method_a: str
    method_b: str
    scores_a: dict[str, float]
    scores_b: dict[str, float]
    votes: list[Vote]

    def __post_init__(self):
        if len(self.votes) % 2 == 0:
            raise LabelError(f"{self.task_id}: vote count must be odd, got {len(self.votes)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PairedComparison":
        try:
            votes = [Vote(v["choice"], frozenset(v["reasons"])) for v in d["votes"]]
            return cls(str(d["task_id"]), str(d["method_a"]), str(d["method_b"]),
                       {k: float(x) for k, x in d.get("scores_a", {}).items()},
                       {k: float(x) for k, x in d.get("scores_b", {}).items()}, votes)
        except (KeyError, TypeError) as exc:
            raise LabelError(f"malformed comparison: missing or invalid {exc}") from None

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "method_a": self.method_a, "method_b": self.method_b,
                "scores_a": self.scores_a, "scores_b": self.scores_b,
                "votes": [{"choice": v.choice, "reasons": sorted(v.reasons)} for v in self.votes]}


def load_labels(path: str | Path) -> list[PairedComparison]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(PairedComparison.from_dict(json.loads(line)))
            except (json.JSONDecodeError, LabelError) as exc:
                raise LabelError(f"labels line {lineno}: {exc}") from None
    return out


# -- alignment -------------------------------------------------------------------------

def metric_classification_accuracy(comparisons: Sequence[PairedComparison], metric: str,
                                   edit_types: Mapping[str, str] | None = None) -> dict[str, float]:
    """Fraction of comparisons where the higher-scoring side is the human winner.

    Exact score ties count as half right. Keys are edit types plus "total".
    """
    hits: dict[str, list[float]] = {}
    for c in comparisons:
        if metric not in c.scores_a or metric not in c.scores_b:
            raise LabelError(f"{c.task_id}: missing {metric!r} score")
        a, b = c.scores_a[metric], c.scores_b[metric]
        winner = majority_vote(c.votes).winner
        hit = 0.5 if a == b else float(("A" if a > b else "B") == winner)
        hits.setdefault("total", []).append(hit)
        if edit_types is not None and c.task_id in edit_types:
            hits.setdefault(edit_types[c.task_id], []).append(hit)
    return {k: float(np.mean(v)) for k, v in hits.items()}


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    rx, ry = rankdata(x, method="average"), rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        raise UndefinedCorrelation("rank correlation undefined for a constant input")
    return float(rx @ ry / denom)


def human_margin(c: PairedComparison) -> float:
    """(votes for A - votes for B) / total votes."""
    a = sum(v.choice == "A" for v in c.votes)
    return (2 * a - len(c.votes)) / len(c.votes)


def metric_human_spearman(comparisons: Sequence[PairedComparison], metric: str,
                          edit_types: Mapping[str, str] | None = None) -> dict[str, float | None]:
    """Spearman rho between score differences (A - B) and human vote margins; None where undefined."""
    groups: dict[str, list[PairedComparison]] = {"total": list(comparisons)}
    if edit_types is not None:
        for c in comparisons:
            if c.task_id in edit_types:
                groups.setdefault(edit_types[c.task_id], []).append(c)
    out: dict[str, float | None] = {}
    for k, cs in groups.items():
        try:
            out[k] = spearman([c.scores_a[metric] - c.scores_b[metric] for c in cs], [human_margin(c) for c in cs])
        except (UndefinedCorrelation, ValueError):
            out[k] = None
    return out


def reason_breakdown(comparisons: Sequence[PairedComparison], method: str) -> dict[str, float]:
    """Reason shares over comparisons ``method`` won, pooled over the winner's votes."""
    counts: Counter = Counter()
    for c in comparisons:
        side = "A" if c.method_a == method else "B" if c.method_b == method else None
        if side is None:
            continue
        outcome = majority_vote(c.votes)
        if outcome.winner == side:
            counts.update(v.reason_class for v in c.votes if v.choice == side)
    total = sum(counts.values())
    return {k: (counts[k] / total if total else 0.0) for k in ("text-alignment", "source-consistency", "both")}
