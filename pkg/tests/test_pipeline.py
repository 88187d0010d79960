from __future__ import annotations

import logging

import numpy as np
import pytest
import torch

import motionanim.guidance as guidance
from motionanim.benchmark import EditType, training_scenes
from motionanim.codec import CodecConfig, VideoTensor
from motionanim.flow import SceneFlowEstimator
from motionanim.guidance import DropoutPolicy, GuidanceScales
from motionanim.pipeline import (EditRequest, IdentityEditor, OptimConfig, RecolorOracleEditor, TrainingDiverged,
                                 encode_clips, evaluate_loss, load_train_state, moca_edit, moca_edit_batch,
                                 new_train_state, plan_edit, save_train_state, train_step)
from motionanim.scenes import SceneSpec, render
from motionanim.schedule import SamplerConfig, make_schedule

OPTIM = OptimConfig(lr=1e-3, batch_size=4)
SCHEDULE = make_schedule()
SCENE = SceneSpec(shape_color="red", background="blue", start=(24.0, 32.0), velocity=(2.0, 0.0))


@pytest.fixture(scope="module")
def data():
    scenes = training_scenes(8, seed=0)
    return encode_clips(np.stack([render(s) for s in scenes]), scenes, CodecConfig(), [s.prompt() for s in scenes])


def run(cfg, data, steps, seed=0):
    state = new_train_state(cfg, OPTIM, seed)
    for _ in range(steps):
        train_step(state, data, SCHEDULE, DropoutPolicy(), OPTIM)
    return state


def params(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])


class RefusingEstimator:
    def estimate(self, video):
        raise AssertionError("flow estimator must not run for motion edits")


class CountingEditor(IdentityEditor):
    def __init__(self):
        self.calls = 0

    def edit(self, frame, source_prompt, edit_prompt, edit_type):
        self.calls += 1
        return super().edit(frame, source_prompt, edit_prompt, edit_type)


# -- training -----------------------------------------------------------------------------

def test_encoded_data_shapes(data):
    assert data.latents.shape == (8, 8, 48, 16, 16)
    assert data.motion.shape == data.latents.shape
    assert len(data) == 8 and len(data.prompts) == 8
    # every training scene moves at 2 px/frame, so the mean flow magnitude is speed * shape coverage
    assert (data.magnitudes > 0).all() and (data.magnitudes < 2).all()


def test_train_step_deterministic(tiny_cfg, data):
    a, b = run(tiny_cfg, data, 3), run(tiny_cfg, data, 3)
    assert a.losses == b.losses
    assert torch.equal(params(a.model), params(b.model))
    c = run(tiny_cfg, data, 3, seed=1)
    assert c.losses != a.losses


def test_initial_loss_is_mean_square_v(tiny_cfg, data):
    # output layers start at zero, so the loss is E[v^2] = E_t[abar_t + (1 - abar_t) E[x0^2]]
    betas = np.linspace(1e-4, 0.02, 1000)
    roots = np.sqrt(np.cumprod(1 - betas))
    abar = ((roots - roots[-1]) * roots[0] / (roots[0] - roots[-1])) ** 2
    x2 = float((data.latents.double() ** 2).mean())
    expected = float(np.mean(abar + (1 - abar) * x2))
    state = new_train_state(tiny_cfg, OPTIM, 0)
    losses = [evaluate_loss(state.model, data, SCHEDULE, DropoutPolicy(), 64, seed) for seed in range(8)]
    assert np.mean(losses) == pytest.approx(expected, rel=0.05)


def test_resume_matches_uninterrupted(tiny_cfg, data, tmp_path):
    straight = run(tiny_cfg, data, 4)
    half = run(tiny_cfg, data, 2)
    save_train_state(tmp_path / "s.ckpt", half, {"note": "x"})
    resumed, meta = load_train_state(tmp_path / "s.ckpt", OPTIM)
    assert resumed.step == 2 and meta["note"] == "x"
    for _ in range(2):
        train_step(resumed, data, SCHEDULE, DropoutPolicy(), OPTIM)
    np.testing.assert_allclose(resumed.losses, straight.losses[2:], atol=1e-6)
    torch.testing.assert_close(params(resumed.model), params(straight.model), atol=1e-6, rtol=0)


def test_training_never_composes_guidance(tiny_cfg, data, monkeypatch):
    def boom(*args, **kwargs):
        raise AssertionError("guidance composition is sampling-only")

    monkeypatch.setattr(guidance, "compose_guidance", boom)
    run(tiny_cfg, data, 2)


def test_nonfinite_loss_raises(tiny_cfg, data):
    bad = type(data)(data.latents.clone(), data.motion, data.magnitudes, data.prompts)
    bad.latents[:] = float("nan")
    state = new_train_state(tiny_cfg, OPTIM, 0)
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train_step(state, bad, SCHEDULE, DropoutPolicy(), OPTIM)
    assert state.step == 0


def test_warmup_ramps_learning_rate(tiny_cfg, data):
    optim = OptimConfig(lr=1e-3, batch_size=2, warmup_steps=4)
    state = new_train_state(tiny_cfg, optim, 0)
    lrs = []
    for _ in range(5):
        train_step(state, data, SCHEDULE, DropoutPolicy(), optim)
        lrs.append(state.optimizer.param_groups[0]["lr"])
    assert lrs == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3])


# -- edit planning ----------------------------------------------------------------------

def request(edit_type, target=None, scales=GuidanceScales(1.5, 2.0, 2.0)):
    target = target or SCENE
    return EditRequest(VideoTensor(torch.from_numpy(render(SCENE)).float()), SCENE.prompt(), target.prompt(),
                       edit_type, scales)


@pytest.mark.parametrize("edit_type", [EditType.MOTION, EditType.MULTI_MOTION])
def test_motion_edits_skip_flow_and_zero_motion_scale(edit_type):
    editor = CountingEditor()
    plan = plan_edit(request(edit_type), CodecConfig(), RefusingEstimator(), editor)
    assert plan.motion_dropped and plan.bundle.is_null("motion") and plan.bundle.magnitude is None
    assert plan.scales == GuidanceScales(1.5, 2.0, 0.0)
    # a pure motion edit keeps frame 0; a multi-motion edit still edits it
    assert editor.calls == (0 if edit_type is EditType.MOTION else 1)


@pytest.mark.parametrize("edit_type", [EditType.STYLE, EditType.BACKGROUND, EditType.OBJECT,
                                       EditType.MULTI_SPATIAL])
def test_spatial_edits_use_source_flow(edit_type):
    est = SceneFlowEstimator(SCENE)
    plan = plan_edit(request(edit_type), CodecConfig(), est, CountingEditor())
    assert est.calls == 1
    assert not plan.motion_dropped and not plan.bundle.is_null("motion")
    assert plan.scales.motion == 2.0
    assert plan.bundle.magnitude == pytest.approx(2.0 * 256 / 4096)
    assert plan.bundle.text == SCENE.prompt()


def test_editor_must_keep_frame_shape():
    class Cropper:
        def edit(self, frame, *args):
            return frame[:, :32]

    with pytest.raises(ValueError, match="frame shape"):
        plan_edit(request(EditType.STYLE), CodecConfig(), SceneFlowEstimator(SCENE), Cropper())


def test_recolor_editor_examples():
    frame = torch.from_numpy(render(SCENE)[0])
    editor = RecolorOracleEditor()
    tgt = SCENE.with_(background="yellow", style="sepia")
    out = editor.edit(frame, SCENE.prompt(), tgt.prompt(), EditType.MULTI_SPATIAL)
    np.testing.assert_allclose(out.numpy(), render(tgt)[0], atol=1e-12)
    same = editor.edit(frame, SCENE.prompt(), SCENE.with_(velocity=(0.0, 2.0)).prompt(), EditType.MOTION)
    assert torch.equal(same, frame)
    with pytest.raises(ValueError, match="shape kind"):
        editor.edit(frame, SCENE.prompt(), SCENE.with_(shape="circle").prompt(), EditType.OBJECT)
    assert editor.calls == 3


def test_edit_batch_matches_single_edits(tiny_model, caplog):
    sampler = SamplerConfig(num_inference_steps=3)
    reqs = [request(EditType.STYLE, SCENE.with_(style="grayscale")), request(EditType.MOTION,
            SCENE.with_(velocity=(0.0, 2.0)))]
    reqs[1].seed = 5
    ests = [SceneFlowEstimator(SCENE), RefusingEstimator()]
    with caplog.at_level(logging.INFO, logger="motionanim.pipeline"):
        batch = moca_edit_batch(reqs, tiny_model, ests, RecolorOracleEditor(), sampler=sampler)
    assert "motion conditioning dropped (s_M = 0) for 1 of 2" in caplog.text
    for req, est, got in zip(reqs, ests, batch):
        single = moca_edit(req, tiny_model, est, RecolorOracleEditor(), sampler=sampler)
        assert got.shape == (8, 3, 64, 64)
        torch.testing.assert_close(got.frames, single.frames, atol=1e-5, rtol=0)
