from collections import Counter

import numpy as np
import pytest

from posefuse.complete import (
    AuxiliaryInput, FusionState, IterateConfig, TrainConfig, balanced_schedule, finetune_splats,
    iterate_auxiliary_poses,
)
from posefuse.errors import NonFiniteLoss, PreconditionError
from posefuse.fusion import global_register
from posefuse.metrics import holdout_split, psnr
from posefuse.refine import RefineConfig, local_refine
from posefuse.selection import DescriptorSet, select_mixed_set
from posefuse.splatrender import photometric_loss, render_rgb
from posefuse.synth import SynthConfig, make_dataset


# -- schedule --------------------------------------------------------------

def test_equal_sets_cover_every_view_per_epoch():
    fused, aux = [f"f{i}" for i in range(6)], [f"a{i}" for i in range(6)]
    s = balanced_schedule(fused, aux, 36, seed=1)
    assert len(s.epochs) == 3
    for ep in s.epochs:
        assert sorted(ep) == sorted(fused + aux)
    assert not s.with_replacement


def test_single_iteration():
    s = balanced_schedule(["f0"], ["a0"], 1)
    assert s.iterations == 1 and len(s.order) == 1


def test_epochs_are_balanced():
    fused, aux = [f"f{i:03d}" for i in range(150)], [f"a{i:02d}" for i in range(15)]
    s = balanced_schedule(fused, aux, 30 * 7 + 11, seed=2)
    for ep in s.epochs[:-1]:
        assert len(ep) == 30
        assert sum(i.startswith("f") for i in ep) == 15
        assert len(set(ep)) == 30
    assert len(s.epochs[-1]) == 11


def test_fused_frequency_is_one_tenth():
    fused, aux = [f"f{i:03d}" for i in range(150)], [f"a{i:02d}" for i in range(15)]
    epochs = 10_000
    s = balanced_schedule(fused, aux, 30 * epochs, seed=3)
    counts = Counter(s.order)
    assert all(counts[a] == epochs for a in aux)
    p = 15 / 150
    bound = 3 * np.sqrt(epochs * p * (1 - p))
    for f in fused:
        assert abs(counts[f] - epochs * p) <= bound


def test_small_pool_uses_replacement():
    s = balanced_schedule(["f0", "f1"], [f"a{i}" for i in range(5)], 10)
    assert s.with_replacement
    assert len(s.epochs[0]) == 10


def test_schedule_determinism():
    args = ([f"f{i}" for i in range(20)], [f"a{i}" for i in range(5)], 50)
    assert balanced_schedule(*args, seed=4) == balanced_schedule(*args, seed=4)
    assert balanced_schedule(*args, seed=4).order != balanced_schedule(*args, seed=5).order


def test_schedule_preconditions():
    with pytest.raises(PreconditionError):
        balanced_schedule([], ["a"], 5)
    with pytest.raises(PreconditionError):
        balanced_schedule(["f"], ["a"], 0)


# -- fine-tuning -----------------------------------------------------------

def _gt_views(ds, train=None):
    main, aux = ds.poses[0], ds.poses[1]
    gt = ds.gt_pose_set(1)
    views = {i: (main.cameras[i], main.images[i], main.masks[i]) for i in main.cameras.ids}
    views.update({i: (gt[i], aux.images[i], aux.masks[i]) for i in (train or aux.cameras.ids)})
    return views


def test_photoconsistent_model_does_not_drift(tiny_dataset):
    ds = tiny_dataset
    s = balanced_schedule(ds.poses[0].cameras.ids, ds.poses[1].cameras.ids, 100, 0)
    out = finetune_splats(ds.model, _gt_views(ds), s)
    for k in ("positions", "sigmas", "colors", "opacities"):
        assert np.abs(getattr(out, k) - getattr(ds.model, k)).max() < 1e-4


def test_zero_learning_rates_bit_identical(tiny_dataset):
    ds = tiny_dataset
    noisy = ds.model.replace(colors=np.clip(ds.model.colors + 0.2, 0, 1))
    s = balanced_schedule(ds.poses[0].cameras.ids, ds.poses[1].cameras.ids, 20, 0)
    cfg = TrainConfig(lr_position=0, lr_log_sigma=0, lr_color=0, lr_logit_opacity=0)
    assert finetune_splats(noisy, _gt_views(ds), s, cfg).bitwise_equal(noisy)


@pytest.fixture(scope="module")
def patch_dataset():
    return make_dataset(SynthConfig(seed=0, n_splats=400, views_per_pose=30, resolution=64,
                                    underside_patch=True).noiseless())


def test_patch_is_learned(patch_dataset):
    ds = patch_dataset
    aux = ds.poses[1]
    gt = ds.gt_pose_set(1)
    train, test = holdout_split(aux.cameras.ids, seed=0)
    s = balanced_schedule(ds.poses[0].cameras.ids, train, 400, 0)
    out = finetune_splats(ds.model, _gt_views(ds, train), s)
    assert len(out) == len(ds.model)

    def scores(model):
        ps = [psnr(render_rgb(model, gt[i]), aux.images[i]) for i in test]
        ls = [photometric_loss(render_rgb(model, gt[i]), aux.images[i], aux.masks[i])[0] for i in test]
        return np.mean(ps), np.mean(ls)

    p0, l0 = scores(ds.model)
    p1, l1 = scores(out)
    assert p1 > p0 and l1 < l0


def test_finetune_is_seed_deterministic(patch_dataset):
    ds = patch_dataset
    s = balanced_schedule(ds.poses[0].cameras.ids, ds.poses[1].cameras.ids, 60, 7)
    a = finetune_splats(ds.model, _gt_views(ds), s)
    b = finetune_splats(ds.model, _gt_views(ds), s)
    assert a.bitwise_equal(b)


def test_missing_view(tiny_dataset):
    ds = tiny_dataset
    s = balanced_schedule(["nope"], ds.poses[1].cameras.ids, 5, 0)
    with pytest.raises(PreconditionError):
        finetune_splats(ds.model, _gt_views(ds), s)


def test_non_finite_aborts_with_snapshot(tiny_dataset):
    ds = tiny_dataset
    views = _gt_views(ds)
    vid = ds.poses[0].cameras.ids[0]
    cam, img, mask = views[vid]
    bad = type(img)(np.full(img.pixels.shape, np.nan))
    views[vid] = (cam, bad, mask)
    s = balanced_schedule([vid], [ds.poses[1].cameras.ids[0]], 4, 0)
    with pytest.raises(NonFiniteLoss) as info:
        finetune_splats(ds.model, views, s)
    assert info.value.diagnostics["snapshot"].bitwise_equal(ds.model)


def test_train_config_validation():
    with pytest.raises(PreconditionError):
        TrainConfig(lr_color=-1)
    with pytest.raises(PreconditionError):
        TrainConfig(iterations=0)


# -- incremental fusion ----------------------------------------------------

def _state(ds):
    main = ds.poses[0]
    return FusionState(ds.model, main.cameras, dict(main.images), dict(main.masks), dict(main.descriptors))


def _aux_input(ds, k=1, train=None):
    pd = ds.poses[k]
    return AuxiliaryInput(pd.cameras, pd.images, pd.masks, pd.descriptors, ds.oracle,
                          ds.predictor().predict, train)


def test_single_step_equals_direct_calls(tiny_dataset):
    ds = tiny_dataset
    cfg = IterateConfig(m=8, n=8, consensus_res=64, refine=RefineConfig(max_iters=20),
                        train=TrainConfig(iterations=30))
    state = iterate_auxiliary_poses(_state(ds), _aux_input(ds), cfg, pose_index=1)

    main, aux = ds.poses[0], ds.poses[1]
    sel = select_mixed_set(DescriptorSet.from_mapping(main.descriptors, main.cameras.ids),
                           DescriptorSet.from_mapping(aux.descriptors, aux.cameras.ids),
                           main.cameras, aux.cameras, ds.oracle, 8, 8)
    mixed = ds.predictor().predict(list(sel.main_ids) + list(sel.aux_ids))
    reg = global_register(main.cameras, aux.cameras, mixed, ds.model, aux.masks, 64)
    T, _ = local_refine(aux.cameras, ds.model, aux.images, aux.masks, reg.stage2.transform,
                        RefineConfig(max_iters=20))
    np.testing.assert_array_equal(state.transforms[-1].as_matrix(), T.as_matrix())
    assert len(state.fused) == 60
    assert state.model is not ds.model and len(state.model) == len(ds.model)


def test_only_train_views_join_pool(tiny_dataset):
    ds = tiny_dataset
    train = tuple(ds.poses[1].cameras.ids[:20])
    cfg = IterateConfig(m=8, n=8, consensus_res=64, skip_refine=True, skip_complete=True)
    state = iterate_auxiliary_poses(_state(ds), _aux_input(ds, train=train), cfg, pose_index=1)
    assert len(state.fused) == 50 and set(train) <= set(state.fused.ids)
    assert state.model is ds.model


def test_recorder_sees_every_stage(tiny_dataset):
    ds = tiny_dataset
    seen = []
    cfg = IterateConfig(m=6, n=6, consensus_res=64, refine=RefineConfig(max_iters=3),
                        train=TrainConfig(iterations=5))
    iterate_auxiliary_poses(_state(ds), _aux_input(ds), cfg, pose_index=1,
                            recorder=lambda stage, secs, **kw: seen.append(stage))
    assert seen == ["selection", "global", "refine", "complete"]
