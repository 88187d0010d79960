"""Edit-task manifests, dataset statistics and the synthetic moving-shapes benchmark."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .io import save_tensor, write_frames
from .scenes import (NoForegroundError, SceneSpec, background_color, centroids, foreground_masks, render)
from .vocab import COLORS, DIRECTIONS, SHAPES, STYLES, styled_palette


class EditType(str, Enum):
    STYLE = "style"
    BACKGROUND = "background"
    OBJECT = "object"
    MOTION = "motion"
    MULTI_SPATIAL = "multi-spatial"
    MULTI_MOTION = "multi-motion"

    @property
    def is_motion(self) -> bool:
        return self in (EditType.MOTION, EditType.MULTI_MOTION)


EDIT_TYPES = tuple(EditType)
DATASETS = ("LOVEU-TGVE", "Dreamix", "Custom", "Synthetic")
MANIFEST_FIELDS = ("id", "dataset", "video", "source_prompt", "edit_prompt", "edit_type")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class EditTaskRecord:
    id: str
    dataset: str
    video: str
    source_prompt: str
    edit_prompt: str
    edit_type: EditType

    def to_json(self) -> str:
        d = asdict(self)
        d["edit_type"] = self.edit_type.value
        return json.dumps({k: d[k] for k in MANIFEST_FIELDS})


def _parse_record(obj, lineno: int) -> EditTaskRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = [k for k in MANIFEST_FIELDS if k not in obj]
    extra = [k for k in obj if k not in MANIFEST_FIELDS]
    if missing:
        raise ManifestError(f"line {lineno}: missing field(s) {missing}")
    if extra:
        raise ManifestError(f"line {lineno}: unknown field(s) {extra}")
    for k in MANIFEST_FIELDS:
        if not isinstance(obj[k], str):
            raise ManifestError(f"line {lineno}: field '{k}' must be a string")
    if obj["dataset"] not in DATASETS:
        raise ManifestError(f"line {lineno}: field 'dataset' has invalid value {obj['dataset']!r}")
    try:
        edit_type = EditType(obj["edit_type"])
    except ValueError:
        raise ManifestError(f"line {lineno}: field 'edit_type' has invalid value {obj['edit_type']!r}") from None
    return EditTaskRecord(obj["id"], obj["dataset"], obj["video"], obj["source_prompt"], obj["edit_prompt"],
                          edit_type)


def load_manifest(path: str | Path) -> list[EditTaskRecord]:
    records: list[EditTaskRecord] = []
    seen: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno)
            if rec.id in seen:
                raise ManifestError(f"line {lineno}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
            seen[rec.id] = lineno
            records.append(rec)
    return records


def write_manifest(path: str | Path, records: Iterable[EditTaskRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def paper_manifest_path() -> Path:
    return Path(__file__).parent / "data" / "paper_manifest.jsonl"


@dataclass
class DatasetStats:
    counts: dict[str, dict[str, int]]  # dataset -> edit type -> count
    unique_videos: dict[str, int]
    datasets: list[str] = field(default_factory=list)

    def total(self, dataset: str) -> int:
        return sum(self.counts[dataset].values())

    def type_total(self, edit_type: EditType | str) -> int:
        key = EditType(edit_type).value
        return sum(row[key] for row in self.counts.values())

    def avg_edits_per_video(self, dataset: str) -> float:
        n = self.unique_videos[dataset]
        return self.total(dataset) / n if n else 0.0

    def grand_total(self) -> int:
        return sum(self.total(d) for d in self.counts)

    def table(self) -> str:
        cols = self.datasets
        width = max(13, *(len(c) for c in cols))
        lines = ["".ljust(20) + "".join(c.rjust(width) for c in cols)]
        for et in EDIT_TYPES:
            lines.append(et.value.ljust(20) + "".join(str(self.counts[c][et.value]).rjust(width) for c in cols))
        lines.append("total".ljust(20) + "".join(str(self.total(c)).rjust(width) for c in cols))
        lines.append("unique videos".ljust(20) + "".join(str(self.unique_videos[c]).rjust(width) for c in cols))
        lines.append("avg edits/video".ljust(20)
                     + "".join(f"{self.avg_edits_per_video(c):.2f}".rjust(width) for c in cols))
        return "\n".join(lines)


def compute_stats(records: Iterable[EditTaskRecord]) -> DatasetStats:
    records = list(records)
    datasets = [d for d in DATASETS if any(r.dataset == d for r in records)]
    counts = {d: {et.value: 0 for et in EDIT_TYPES} for d in datasets}
    videos: dict[str, set[str]] = {d: set() for d in datasets}
    for r in records:
        counts[r.dataset][r.edit_type.value] += 1
        videos[r.dataset].add(r.video)
    return DatasetStats(counts, {d: len(v) for d, v in videos.items()}, datasets)


# -- synthetic scenes ------------------------------------------------------------------

SPEED = 2
SIZES = (12, 14, 16)
MOVING = ("right", "left", "up", "down")


def _velocity(direction: str, speed: int = SPEED) -> tuple[float, float]:
    dx, dy = DIRECTIONS[direction]
    return (float(dx * speed), float(dy * speed))


def sample_scene(rng: np.random.Generator, style: str = "plain", any_direction: bool = False,
                 frames: int = 8, height: int = 64, width: int = 64) -> SceneSpec:
    """Random scene. ``any_direction`` keeps the start far enough from the border
    that the shape could move in every direction without leaving the frame."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    fg, bg = rng.choice(len(COLORS), size=2, replace=False)
    size = int(SIZES[rng.integers(len(SIZES))])
    direction = MOVING[rng.integers(len(MOVING))]
    vx, vy = _velocity(direction)
    half = size // 2
    travel = (frames - 1) * SPEED
    lo_x, hi_x = half, width - half
    lo_y, hi_y = half, height - half
    if any_direction:
        lo_x, hi_x, lo_y, hi_y = lo_x + travel, hi_x - travel, lo_y + travel, hi_y - travel
    else:
        lo_x, hi_x = lo_x - min(vx, 0) * (frames - 1), hi_x - max(vx, 0) * (frames - 1)
        lo_y, hi_y = lo_y - min(vy, 0) * (frames - 1), hi_y - max(vy, 0) * (frames - 1)
    cx = float(rng.integers(int(lo_x), int(hi_x) + 1))
    cy = float(rng.integers(int(lo_y), int(hi_y) + 1))
    return SceneSpec(shape=shape, shape_color=COLORS[fg], background=COLORS[bg], size=size, start=(cx, cy),
                     velocity=(vx, vy), style=style, frames=frames, height=height, width=width)


def _other(rng: np.random.Generator, options: Iterable[str], exclude: Iterable[str]) -> str:
    pool = [o for o in options if o not in set(exclude)]
    return pool[rng.integers(len(pool))]


def edit_scene(scene: SceneSpec, edit_type: EditType, rng: np.random.Generator) -> SceneSpec:
    """The ground-truth scene after an edit of the given type."""
    taken = (scene.shape_color, scene.background)
    if edit_type is EditType.STYLE:
        # grayscale leaves black and white untouched, so skip styles that render identically
        same = [st for st in STYLES if np.array_equal(render(scene.with_(style=st))[:1], render(scene)[:1])]
        return scene.with_(style=_other(rng, STYLES, same))
    if edit_type is EditType.BACKGROUND:
        return scene.with_(background=_other(rng, COLORS, taken))
    if edit_type is EditType.OBJECT:
        return scene.with_(shape_color=_other(rng, COLORS, taken))
    if edit_type is EditType.MULTI_SPATIAL:
        color = _other(rng, COLORS, taken)
        return scene.with_(shape_color=color, background=_other(rng, COLORS, taken + (color,)))
    if edit_type is EditType.MOTION:
        return scene.with_(velocity=_velocity(_other(rng, MOVING, [scene.direction])))
    if edit_type is EditType.MULTI_MOTION:
        return scene.with_(shape_color=_other(rng, COLORS, taken),
                           velocity=_velocity(_other(rng, MOVING, [scene.direction])))
    raise ValueError(f"unknown edit type {edit_type!r}")


@dataclass
class SyntheticTask:
    record: EditTaskRecord
    source: SceneSpec
    target: SceneSpec


def synthetic_tasks(n_scenes: int, seed: int) -> list[SyntheticTask]:
    """n_scenes plain-style source scenes, each with one edit of every type."""
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n_scenes):
        scene = sample_scene(rng, any_direction=True)
        video = f"videos/scene_{i:04d}"
        for et in EDIT_TYPES:
            target = edit_scene(scene, et, rng)
            rec = EditTaskRecord(f"syn-{i:04d}-{et.value}", "Synthetic", video, scene.prompt(), target.prompt(), et)
            tasks.append(SyntheticTask(rec, scene, target))
    return tasks


def training_scenes(n_clips: int, seed: int, style_probs=(0.6, 0.2, 0.2),
                    any_direction: bool = False) -> list[SceneSpec]:
    """Training clips. With ``any_direction`` the start position carries no hint of the direction."""
    rng = np.random.default_rng(seed)
    return [sample_scene(rng, style=STYLES[rng.choice(len(STYLES), p=style_probs)], any_direction=any_direction)
            for _ in range(n_clips)]


def generate_synthetic_benchmark(out_dir: str | Path, n_scenes: int, seed: int = 0,
                                 train_clips: int = 0, jobs: int = 1) -> list[EditTaskRecord]:
    """Write source clips, scene sidecars, analytic flows, ground-truth edits and a manifest.

    With ``train_clips`` > 0 a training corpus drawn from an independent
    stream is written to ``train/corpus.bundle`` as well.
    """
    from .flow import synthetic_flow
    from .io import save_bundle

    out = Path(out_dir)
    tasks = synthetic_tasks(n_scenes, seed)
    sources = {t.record.video: t.source for t in tasks}

    def write_source(video: str) -> None:
        scene = sources[video]
        vdir = write_frames(out / video, render(scene))
        (vdir / "scene.json").write_text(scene.to_json() + "\n")
        save_tensor(vdir / "flow.matn", synthetic_flow(scene).vectors)

    def write_target(task: SyntheticTask) -> None:
        gdir = write_frames(out / "ground_truth" / task.record.id, render(task.target))
        (gdir / "scene.json").write_text(task.target.to_json() + "\n")

    # every file depends only on its own scene, so worker order cannot change the output
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(write_source, sorted(sources)))
        list(pool.map(write_target, tasks))
    records = [t.record for t in tasks]
    write_manifest(out / "manifest.jsonl", records)
    (out / "manifest.meta.json").write_text(
        json.dumps({"faces_filtered": True, "seed": seed, "scenes": n_scenes}, sort_keys=True) + "\n")
    if train_clips:
        scenes = training_scenes(train_clips, seed + 1_000_003)
        frames = np.stack([np.rint(render(s) * 255).astype(np.uint8) for s in scenes])
        (out / "train").mkdir(parents=True, exist_ok=True)
        save_bundle(out / "train" / "corpus.bundle", {"frames": frames},
                    {"scenes": [json.loads(s.to_json()) for s in scenes], "prompts": [s.prompt() for s in scenes]})
    return records


def load_training_corpus(path: str | Path) -> tuple[np.ndarray, list[SceneSpec], list[str]]:
    from .io import load_bundle

    path = Path(path)
    if path.is_dir():
        path = path / "train" / "corpus.bundle"
    if not path.exists():
        raise FileNotFoundError(f"training corpus not found: {path}")
    tensors, meta = load_bundle(path)
    scenes = [SceneSpec.from_json(json.dumps(s)) for s in meta["scenes"]]
    return tensors["frames"].astype(np.float32) / 255.0, scenes, list(meta["prompts"])


# -- attribute oracle --------------------------------------------------------------------

@dataclass(frozen=True)
class Attributes:
    shape: str
    shape_color: str
    background: str
    style: str
    velocity: tuple[float, float]


def _nearest(palette: dict[str, np.ndarray], rgb: np.ndarray) -> tuple[str, float]:
    name = min(palette, key=lambda k: float(np.linalg.norm(palette[k] - rgb)))
    return name, float(np.linalg.norm(palette[name] - rgb))


def extract_attributes(video: np.ndarray) -> Attributes:
    """Recover discrete scene fields and mean velocity from a rendered (or generated) clip."""
    frames = np.asarray(getattr(video, "frames", video), dtype=np.float64)
    if hasattr(frames, "numpy"):
        frames = frames.numpy()
    masks = foreground_masks(frames)
    if not masks.any():
        raise NoForegroundError("no foreground found")
    bg = background_color(frames)
    fg = frames.transpose(1, 0, 2, 3)[:, masks].mean(axis=1)
    best = None
    for style in STYLES:
        pal = styled_palette(style)
        bname, bd = _nearest(pal, bg)
        fname, fd = _nearest({k: v for k, v in pal.items() if k != bname}, fg)
        score = bd + fd
        if best is None or score < best[0] - 1e-9:
            best = (score, style, fname, bname)
    _, style, fname, bname = best

    ratios = []
    for m in masks:
        ys, xs = np.nonzero(m)
        if len(xs):
            ratios.append(len(xs) / ((np.ptp(ys) + 1) * (np.ptp(xs) + 1)))
    ratio = float(np.median(ratios))
    shape = "square" if ratio > 0.9 else "circle" if ratio > 0.67 else "triangle"

    cents = centroids(masks)
    steps = np.diff(cents, axis=0)
    steps = steps[~np.isnan(steps).any(axis=1)]
    vel = tuple(float(v) for v in steps.mean(axis=0)) if len(steps) else (0.0, 0.0)
    return Attributes(shape, fname, bname, style, vel)
