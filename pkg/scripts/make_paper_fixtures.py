"""Regenerate the benchmark-composition and published-score fixtures shipped in motionanim/data.

Per-task prompts and videos of the three real datasets are not redistributed;
rows carry placeholder paths and prompts, and only the counts per dataset,
edit type and source video are meaningful.

The published Dreamix per-type counts (1/1/7/2) sum to 11 while its total,
unique-video count and edits-per-video (14, 9, 1.56) all imply 14 edits. The
three unaccounted edits are typed multi-motion here so that every total
holds; the Dreamix multi-motion cell therefore reads 3 instead of 0.
"""
import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "motionanim" / "data"

# dataset -> (edit type -> count, number of source videos)
COMPOSITION = {
    "LOVEU-TGVE": ({"style": 35, "background": 35, "object": 35, "multi-spatial": 35}, 35),
    "Dreamix": ({"style": 1, "background": 1, "object": 7, "motion": 2, "multi-motion": 3}, 9),
    "Custom": ({"style": 11, "background": 7, "object": 14, "motion": 68, "multi-motion": 17}, 37),
}

OVERALL = {  # method -> (M_dir, M_geo), VideoCLIP features
    "MoCA": (0.145, 0.301),
    "Dreamix": (0.107, 0.252),
    "Gen-1": (0.111, 0.254),
    "MasaCtrl": (0.090, 0.231),
    "Tune-a-Video": (0.116, 0.265),
    "TokenFlow": (0.098, 0.235),
    "VideoComposer": (0.128, 0.278),
}

PER_TYPE_GEO = {  # style, background, object, motion, multi-spatial, multi-motion
    "MoCA": (0.331, 0.375, 0.370, 0.185, 0.349, 0.334),
    "Dreamix": (0.2223, 0.304, 0.356, 0.141, 0.290, 0.321),
    "Gen-1": (0.254, 0.317, 0.295, 0.146, 0.309, 0.209),
    "MasaCtrl": (0.225, 0.253, 0.295, 0.154, 0.270, 0.283),
    "Tune-a-Video": (0.223, 0.261, 0.346, 0.164, 0.303, 0.273),
    "TokenFlow": (0.206, 0.239, 0.314, 0.0963, 0.301, 0.226),
    "VideoComposer": (0.259, 0.328, 0.326, 0.187, 0.301, 0.202),
}
TYPES = ("style", "background", "object", "motion", "multi-spatial", "multi-motion")


def manifest_rows():
    for dataset, (counts, n_videos) in COMPOSITION.items():
        edits = [t for t in TYPES for _ in range(counts.get(t, 0))]
        # spread edits over videos round-robin so every video gets at least one
        for k, edit_type in enumerate(edits):
            video = k % n_videos
            yield {
                "id": f"{dataset.lower()}-{k:03d}",
                "dataset": dataset,
                "video": f"unavailable/{dataset.lower()}/video_{video:02d}",
                "source_prompt": f"unpublished source caption ({dataset} video {video:02d})",
                "edit_prompt": f"unpublished {edit_type} edit prompt",
                "edit_type": edit_type,
            }


def score_rows():
    for method, (mdir, mgeo) in OVERALL.items():
        yield {"method": method, "edit_type": "all", "task_id": None, "m_sim": None, "m_dir": mdir, "m_geo": mgeo}
    for method, values in PER_TYPE_GEO.items():
        for edit_type, v in zip(TYPES, values):
            yield {"method": method, "edit_type": edit_type, "task_id": None, "m_sim": None, "m_dir": None,
                   "m_geo": v}


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    with open(DATA / "paper_manifest.jsonl", "w") as fh:
        for row in manifest_rows():
            fh.write(json.dumps(row) + "\n")
    (DATA / "paper_manifest.meta.json").write_text(json.dumps({"faces_filtered": True}) + "\n")
    with open(DATA / "paper_scores.jsonl", "w") as fh:
        for row in score_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
