"""Command-line entry point: gen-data, train, edit, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import torch

from .config import ConfigError, RunConfig, load_config, save_config

log = logging.getLogger("motionanim")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or missing inputs: exit code 2."""


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=100, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="run config YAML (default: $MOCA_CONFIG, else built-in defaults)")
    common.add_argument("--seed", type=int, help="global seed; identical seeds give identical outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="motionanim", formatter_class=_formatter,
                                     description="Motion-conditioned image animation for video editing.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", parents=[common], formatter_class=_formatter,
                       help="write the synthetic benchmark and training corpus")
    p.add_argument("--out", metavar="DIR", help="output directory (default: paths.data_dir)")
    p.add_argument("--scenes", type=_positive, help="number of source scenes (6 edit tasks each)")
    p.add_argument("--train-clips", type=int, help="training clips to write (0 = none)")
    p.add_argument("--jobs", type=_positive, help="writer threads")

    p = sub.add_parser("train", parents=[common], formatter_class=_formatter,
                       help="train the denoiser on a generated corpus")
    p.add_argument("--data", metavar="DIR", help="gen-data output or corpus bundle (default: paths.data_dir)")
    p.add_argument("--out", metavar="DIR", help="run directory (default: paths.run_dir)")
    p.add_argument("--steps", type=_positive, help="total optimizer steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=_positive, help="clips per step")
    p.add_argument("--checkpoint-every", type=_positive, help="steps between checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")

    p = sub.add_parser("edit", parents=[common], formatter_class=_formatter,
                       help="edit videos with a trained checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", help="denoiser checkpoint (default: <run_dir>/last.ckpt)")
    p.add_argument("--data", metavar="DIR", help="benchmark directory holding manifest.jsonl")
    p.add_argument("--task", action="append", metavar="ID", help="manifest task id (repeatable)")
    p.add_argument("--all", action="store_true", help="edit every manifest task")
    p.add_argument("--source", metavar="DIR", help="source frame directory (instead of --data/--task)")
    p.add_argument("--source-prompt", help="prompt describing the source video")
    p.add_argument("--prompt", help="edit prompt")
    p.add_argument("--type", choices=["style", "background", "object", "motion", "multi-spatial", "multi-motion"],
                   help="edit type of a --source request")
    p.add_argument("--out", metavar="DIR", help="edits directory (default: paths.edits_dir)")
    p.add_argument("--method", default="moca", help="method name used as the output subdirectory")
    p.add_argument("--candidates", type=_positive, help="candidate edits per task (seeds seed..seed+K-1)")
    p.add_argument("--scale-image", type=_nonneg_float, help="image guidance scale s_I")
    p.add_argument("--scale-text", type=_nonneg_float, help="text guidance scale s_T")
    p.add_argument("--scale-motion", type=_nonneg_float, help="motion guidance scale s_M")
    p.add_argument("--steps", type=_positive, help="DDIM sampling steps")
    p.add_argument("--eta", type=float, help="DDIM eta in [0, 1]")
    p.add_argument("--backend", choices=["oracle", "frame-score", "frame-embedding"],
                   help="embedding backend used to rank candidates")
    p.add_argument("--jobs", type=_positive, help="torch threads")

    for name, text in (("eval", "score edits against the manifest and build a report"),
                       ("report", "build a report from a scores file")):
        p = sub.add_parser(name, parents=[common], formatter_class=_formatter, help=text)
        if name == "eval":
            p.add_argument("--data", metavar="DIR", help="benchmark directory holding manifest.jsonl")
            p.add_argument("--edits", metavar="DIR", help="edits directory (default: paths.edits_dir)")
            p.add_argument("--backend", choices=["oracle", "frame-score", "frame-embedding"],
                           help="embedding backend")
            p.add_argument("--allow-missing", action="store_true",
                           help="skip manifest rows without an edit instead of failing")
        else:
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--scores", metavar="PATH", help="scores JSONL (from eval or external)")
            src.add_argument("--paper-scores", action="store_true", help="use the shipped published-score fixture")
        p.add_argument("--labels", metavar="PATH", help="paired human-comparison labels JSONL")
        p.add_argument("--out", metavar="DIR", help="report directory (default: paths.report_dir)")
    return parser


# -- helpers ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.override("", seed=args.seed)
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _backend(name: str):
    from .metrics import FrameAverageEmbedder, OracleEmbedder

    if name == "oracle":
        return OracleEmbedder()
    return FrameAverageEmbedder("score" if name == "frame-score" else "embedding")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


class _StoredFlowEstimator:
    def __init__(self, path: Path):
        self.path = path

    def estimate(self, video):
        from .flow import FlowField
        from .io import load_tensor

        return FlowField(torch.from_numpy(load_tensor(self.path)))


def _flow_estimator(source_dir: Path):
    from .flow import CentroidFlowEstimator, SceneFlowEstimator
    from .scenes import SceneSpec

    if (source_dir / "scene.json").exists():
        return SceneFlowEstimator(SceneSpec.from_json((source_dir / "scene.json").read_text()))
    if (source_dir / "flow.matn").exists():
        return _StoredFlowEstimator(source_dir / "flow.matn")
    return CentroidFlowEstimator()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .benchmark import compute_stats, generate_synthetic_benchmark

    cfg = _resolve_config(args).override("data", scenes=args.scenes, train_clips=args.train_clips, jobs=args.jobs)
    out = Path(args.out or cfg.paths.data_dir)
    records = generate_synthetic_benchmark(out, cfg.data.scenes, seed=cfg.seed, train_clips=cfg.data.train_clips,
                                           jobs=cfg.data.jobs)
    stats = compute_stats(records)
    print(f"wrote {len(records)} edit tasks over {stats.unique_videos['Synthetic']} scenes"
          f" and {cfg.data.train_clips} training clips to {out}")
    return EXIT_OK


def _read_loss_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in rows if r["step"] <= upto]


def cmd_train(args) -> int:
    from .benchmark import load_training_corpus
    from .codec import CodecConfig
    from .pipeline import (TrainingDiverged, encode_clips, evaluate_loss, load_train_state, new_train_state,
                           save_train_state, train_step)
    from .schedule import make_schedule

    cfg = _resolve_config(args)
    cfg = cfg.override("optim", lr=args.lr, batch_size=args.batch_size)
    cfg = cfg.override("train", steps=args.steps, checkpoint_every=args.checkpoint_every)
    data_path = Path(args.data or cfg.paths.data_dir)
    corpus = data_path / "train" / "corpus.bundle" if data_path.is_dir() else data_path
    _require(corpus, "training corpus")
    run = Path(args.out or cfg.paths.run_dir)
    ckpt_dir = run / "checkpoints"
    last = run / "last.ckpt"

    _seed_everything(cfg.seed)
    frames, scenes, prompts = load_training_corpus(corpus)
    data = encode_clips(frames, scenes, CodecConfig(), prompts)
    schedule = make_schedule(cfg.schedule.num_train_steps, cfg.schedule.base)

    if args.resume:
        _require(last, "checkpoint to resume from")
        state, meta = load_train_state(last, cfg.optim)
        initial = meta["initial_loss"]
        log.info("resumed from %s at step %d", last, state.step)
    else:
        state = new_train_state(cfg.model, cfg.optim, cfg.seed)
        initial = evaluate_loss(state.model, data, schedule, cfg.dropout, cfg.train.eval_batch, cfg.seed + 17)
    run.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(exist_ok=True)
    save_config(run / "config.yaml", cfg)
    loss_rows = _read_loss_log(run / "losses.jsonl", state.step)
    sidecar = open(run / "train.log", "a")
    sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} start step={state.step} target={cfg.train.steps}\n")

    def checkpoint() -> None:
        extra = {"initial_loss": initial, "seed": cfg.seed}
        save_train_state(ckpt_dir / f"step_{state.step:06d}.ckpt", state, extra)
        save_train_state(last, state, extra)
        with open(run / "losses.jsonl", "w") as fh:
            for row in loss_rows:
                fh.write(json.dumps(row) + "\n")

    try:
        while state.step < cfg.train.steps:
            loss = train_step(state, data, schedule, cfg.dropout, cfg.optim)
            loss_rows.append({"step": state.step, "loss": loss})
            if cfg.train.log_every and state.step % cfg.train.log_every == 0:
                log.info("step %d loss %.5f", state.step, loss)
                sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} step={state.step} loss={loss:.6f}\n")
            if state.step % cfg.train.checkpoint_every == 0 or state.step == cfg.train.steps:
                checkpoint()
    except TrainingDiverged as exc:
        sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} diverged: {exc}\n")
        sidecar.close()
        print(f"error: {exc}; last good checkpoint kept at {last}", file=sys.stderr)
        return EXIT_FAILURE
    final = evaluate_loss(state.model, data, schedule, cfg.dropout, cfg.train.eval_batch, cfg.seed + 17)
    _dump_json(run / "summary.json", {"initial_loss": initial, "final_loss": final, "steps": state.step,
                                      "last_train_loss": loss_rows[-1]["loss"] if loss_rows else None})
    sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} done step={state.step}\n")
    sidecar.close()
    print(f"trained to step {state.step}: eval loss {initial:.4f} -> {final:.4f}; checkpoint {last}")
    return EXIT_OK


def _edit_requests(args, cfg: RunConfig):
    """Yield (task id, source dir, source frames, source prompt, edit prompt, edit type)."""
    from .benchmark import load_manifest
    from .io import read_frames

    if args.source:
        if not (args.source_prompt and args.prompt and args.type):
            raise UsageError("--source needs --source-prompt, --prompt and --type")
        src = _require(Path(args.source), "source video")
        frames, meta = read_frames(src)
        yield src.name, src, frames, meta, args.source_prompt, args.prompt, args.type
        return
    data = Path(args.data or cfg.paths.data_dir)
    manifest = _require(data / "manifest.jsonl", "manifest")
    records = load_manifest(manifest)
    if args.all:
        chosen = records
    elif args.task:
        by_id = {r.id: r for r in records}
        unknown = [t for t in args.task if t not in by_id]
        if unknown:
            raise UsageError(f"unknown task id(s) {unknown} in {manifest}")
        chosen = [by_id[t] for t in args.task]
    else:
        raise UsageError("choose tasks with --task ID, --all, or give --source")
    for rec in chosen:
        src = _require(data / rec.video, "source video")
        frames, meta = read_frames(src)
        yield rec.id, src, frames, meta, rec.source_prompt, rec.edit_prompt, rec.edit_type.value


def cmd_edit(args) -> int:
    from .codec import VideoTensor
    from .denoiser import load_checkpoint
    from .io import write_frames
    from .metrics import m_dir, m_geo, m_sim
    from .pipeline import EditRequest, IdentityEditor, RecolorOracleEditor, moca_edit_batch
    from .schedule import make_schedule

    cfg = _resolve_config(args)
    cfg = cfg.override("scales", image=args.scale_image, text=args.scale_text, motion=args.scale_motion)
    cfg = cfg.override("sampler", num_inference_steps=args.steps, eta=args.eta)
    cfg = cfg.override("edit", candidates=args.candidates, backend=args.backend, jobs=args.jobs)
    ckpt = _require(Path(args.checkpoint or Path(cfg.paths.run_dir) / "last.ckpt"), "checkpoint")
    out_root = Path(args.out or cfg.paths.edits_dir) / args.method
    torch.set_num_threads(cfg.edit.jobs)
    _seed_everything(cfg.seed)
    model, _, _ = load_checkpoint(ckpt)
    schedule = make_schedule(cfg.schedule.num_train_steps, cfg.schedule.base)
    editor = RecolorOracleEditor() if cfg.edit.editor == "recolor" else IdentityEditor()
    backend = _backend(cfg.edit.backend)
    k = cfg.edit.candidates
    n_done = 0
    for task_id, src_dir, frames, meta, src_prompt, prompt, edit_type in _edit_requests(args, cfg):
        source = VideoTensor(torch.from_numpy(frames), fps=meta.get("fps", 4.0))
        reqs = [EditRequest(source, src_prompt, prompt, edit_type, cfg.scales, cfg.seed + i) for i in range(k)]
        flows = [_flow_estimator(src_dir)] * k
        videos = moca_edit_batch(reqs, model, flows, editor, schedule=schedule, sampler=cfg.sampler)
        task_dir = out_root / task_id
        ranking = []
        for i, (req, video) in enumerate(zip(reqs, videos)):
            clip = video.frames.numpy()
            write_frames(task_dir / "candidates" / f"cand_{i:02d}", clip, fps=video.fps)
            sim = m_sim(frames, clip, backend)
            d = m_dir(frames, clip, src_prompt, prompt, backend)
            ranking.append({"candidate": f"cand_{i:02d}", "seed": req.seed, "m_sim": sim, "m_dir": d,
                            "m_geo": m_geo(sim, d)})
        ranking.sort(key=lambda r: (-r["m_geo"], r["candidate"]))
        best = int(ranking[0]["candidate"].split("_")[1])
        write_frames(task_dir, videos[best].frames.numpy(), fps=videos[best].fps)
        _dump_json(task_dir / "ranking.json", {"task": task_id, "edit_type": edit_type, "edit_prompt": prompt,
                                               "backend": cfg.edit.backend, "scales": cfg.scales.__dict__,
                                               "steps": cfg.sampler.num_inference_steps, "eta": cfg.sampler.eta,
                                               "ranking": ranking})
        n_done += 1
        log.info("%s: %d candidate(s), best %s (M_geo %.4f)", task_id, k, ranking[0]["candidate"],
                 ranking[0]["m_geo"])
    print(f"wrote {n_done} edit(s) x {k} candidate(s) to {out_root}")
    return EXIT_OK


def _labels(path: str | None):
    from .metrics import load_labels

    if not path:
        return None
    return load_labels(_require(Path(path), "labels file"))


def _finish_report(rows, args, cfg: RunConfig, missing=()) -> int:
    from .report import build_report

    comparisons = _labels(args.labels)
    edit_types = {r.task_id: r.edit_type for r in rows if r.task_id is not None}
    out = Path(args.out or cfg.paths.report_dir)
    report = build_report(rows, comparisons, edit_types, out, missing)
    print(f"report written to {out}; ranking by M_geo: {' > '.join(report.ranking)}")
    if comparisons is None:
        print("no labels given: alignment sections marked absent")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .benchmark import load_manifest
    from .report import score_edits, write_scores

    cfg = _resolve_config(args).override("edit", backend=args.backend)
    data = Path(args.data or cfg.paths.data_dir)
    records = load_manifest(_require(data / "manifest.jsonl", "manifest"))
    edits = _require(Path(args.edits or cfg.paths.edits_dir), "edits directory")
    rows, missing = score_edits(records, data, edits, _backend(cfg.edit.backend))
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.jsonl", rows)
    if missing and not args.allow_missing:
        for method, task in missing[:10]:
            print(f"missing edit: {edits / method / task}", file=sys.stderr)
        print(f"error: {len(missing)} manifest row(s) have no edit (use --allow-missing to skip them)",
              file=sys.stderr)
        return EXIT_FAILURE
    return _finish_report(rows, args, cfg, missing)


def cmd_report(args) -> int:
    from .report import load_scores, paper_scores_path

    cfg = _resolve_config(args)
    path = paper_scores_path() if args.paper_scores else _require(Path(args.scores), "scores file")
    return _finish_report(load_scores(path), args, cfg)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"motionanim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("traceback", exc_info=True)
        print(f"motionanim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
