"""Optimization protocol: schedules, SGD, the training iteration, inference."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dualseg import autodiff as ad
from dualseg import experiment as E
from dualseg import losses as L
from dualseg.autodiff import Tensor
from dualseg.config import RunConfig, apply_overrides
from dualseg.data import PhantomSpec, generate_phantom, normalize, random_crop
from dualseg.network import NetConfig, build_dual
from dualseg.trainer import (TrainConfig, TrainState, TrainingAborted, learning_rate_at,
                             run_training, sgd_update, sliding_window_predict,
                             softmax_np, train_iteration)

CFG_S = NetConfig(residual=False)
CFG_T = NetConfig(residual=True)


def small_run_config(tmp_path, iters=12, n_volumes=6, extent=16, folds=3):
    cfg = apply_overrides(RunConfig(), [
        f"dataset.n_volumes={n_volumes}", f"dataset.extent={extent}",
        f"train.total_iters={iters}", f"train.decay_every={max(iters // 2, 1)}",
        'train.crop_extent=[8,8,8]', f"folds={folds}",
        'eval.window=[8,8,8]', 'eval.stride=[4,4,4]',
    ])
    manifest = E.generate_dataset(cfg, Path(tmp_path) / "data")
    return cfg, manifest


# ---------------------------------------------------------------------------
# learning rate schedule


def test_learning_rate_paper_boundaries():
    cfg = TrainConfig(decay_every=2500, total_iters=6000)
    assert learning_rate_at(0, cfg) == 0.01
    assert learning_rate_at(2499, cfg) == 0.01
    assert abs(learning_rate_at(2500, cfg) - 0.001) < 1e-15
    assert abs(learning_rate_at(5000, cfg) - 0.0001) < 1e-15


def test_learning_rate_piecewise_constant_nonincreasing():
    cfg = TrainConfig(decay_every=100, total_iters=600)
    rates = [learning_rate_at(t, cfg) for t in range(600)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    breaks = [t for t in range(1, 600) if rates[t] != rates[t - 1]]
    assert breaks == [100, 200, 300, 400, 500]
    with pytest.raises(ValueError):
        learning_rate_at(-1, cfg)


# ---------------------------------------------------------------------------
# SGD


def test_sgd_zero_grad_zero_decay_is_identity():
    cfg = TrainConfig(weight_decay=0.0)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    vel = {}
    sgd_update({"p": p}, vel, rate=0.1, cfg=cfg)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_hand_iterated_trace():
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    p = Tensor(np.array([1.0]), requires_grad=True)
    vel = {}
    p.grad = np.array([1.0])
    sgd_update({"p": p}, vel, rate=0.1, cfg=cfg)
    assert np.allclose(vel["p"], [1.0]) and np.allclose(p.data, [0.9])
    p.grad = np.array([1.0])
    sgd_update({"p": p}, vel, rate=0.1, cfg=cfg)
    assert np.allclose(vel["p"], [1.9]) and np.allclose(p.data, [0.71])


def test_sgd_weight_decay_shrinks_toward_zero():
    cfg = TrainConfig(momentum=0.0, weight_decay=0.1)
    p = Tensor(np.array([2.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    sgd_update({"p": p}, {}, rate=1.0, cfg=cfg)
    assert np.allclose(p.data, [1.8, -1.8])


def test_sgd_rejects_non_finite_gradient():
    cfg = TrainConfig()
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingAborted, match="non-finite"):
        sgd_update({"p": p}, {}, rate=0.1, cfg=cfg)


# ---------------------------------------------------------------------------
# training iteration


def _crops(seed=0, extent=16, crop=(8, 8, 8)):
    v1 = normalize(generate_phantom(PhantomSpec(extent=extent, seed=seed)))
    v2 = normalize(generate_phantom(PhantomSpec(extent=extent, seed=seed + 1)))
    rng = np.random.default_rng(seed)
    return random_crop(v1, crop, rng), random_crop(v2, crop, rng)


def test_report_total_matches_composition():
    lab, unl = _crops(3)
    dual = build_dual(CFG_S, CFG_T, seed=1)
    cfg = TrainConfig(crop_extent=(8, 8, 8))
    r = train_iteration(dual, lab, unl, 5, cfg, TrainState())
    recomposed = (r.sup_student + r.sup_teacher
                  + r.lambda_c * (r.contrastive + r.consistency + r.uncertainty)
                  + r.unsup_student + r.unsup_teacher)
    assert abs(r.total - recomposed) < 1e-9
    assert 0.0 < r.valid_frac_student <= 1.0
    assert r.lambda_c == L.lambda_schedule(5, cfg.total_iters)


def test_iteration_determinism():
    lab, unl = _crops(7)
    cfg = TrainConfig(crop_extent=(8, 8, 8))
    reports = []
    for _ in range(2):
        dual = build_dual(CFG_S, CFG_T, seed=2)
        state = TrainState()
        reports.append([train_iteration(dual, lab, unl, t, cfg, state) for t in range(3)])
    for a, b in zip(*reports):
        assert a == b


def test_supervised_only_skips_semi_terms():
    lab, unl = _crops(9)
    dual = build_dual(CFG_S, CFG_T, seed=3)
    cfg = TrainConfig(crop_extent=(8, 8, 8), supervised_only=True)
    r = train_iteration(dual, lab, unl, 0, cfg, TrainState())
    assert r.unsup_student == r.unsup_teacher == 0.0
    assert r.consistency == r.uncertainty == r.contrastive == 0.0
    assert r.total == pytest.approx(r.sup_student + r.sup_teacher, abs=1e-12)


def test_ablation_flags_zero_terms_and_gradients():
    # a flags-off iteration must produce exactly the updates of a manual
    # composition that never includes the ablated terms
    lab, unl = _crops(11)
    cfg = TrainConfig(crop_extent=(8, 8, 8), use_une=False, use_reg=False)

    dual_a = build_dual(CFG_S, CFG_T, seed=4)
    report = train_iteration(dual_a, lab, unl, 2, cfg, TrainState())
    assert report.uncertainty == 0.0 and report.consistency == 0.0

    dual_b = build_dual(CFG_S, CFG_T, seed=4)
    x_l = Tensor(lab.image[None])
    x_u = Tensor(unl.image[None])
    s_log_l, _ = dual_b.student.forward(x_l)
    t_log_l, _ = dual_b.teacher.forward(x_l)
    s_log_u, _ = dual_b.student.forward(x_u)
    t_log_u, t_feat_u = dual_b.teacher.forward(x_u)
    with ad.no_grad():
        mask_s = L.build_pseudo_mask(ad.softmax(s_log_u, 0).detach(), cfg.keep_quantile)
        mask_t = L.build_pseudo_mask(ad.softmax(t_log_u, 0).detach(), cfg.keep_quantile)
    t_feat_const = t_feat_u.detach()
    protos = L.compute_prototypes(t_feat_const, mask_t)
    _, total = L.total_loss(
        L.supervised_loss(s_log_l, lab.label), L.supervised_loss(t_log_l, lab.label),
        L.pseudo_supervised_loss(s_log_u, mask_t), L.pseudo_supervised_loss(t_log_u, mask_s),
        Tensor(0.0), Tensor(0.0),
        L.contrastive_loss(t_feat_const, mask_t, protos, cfg.contrastive_mode),
        L.lambda_schedule(2, cfg.total_iters))
    ad.backward(total)
    state_b = TrainState()
    sgd_update(dual_b.student.params, state_b.velocity_student, learning_rate_at(2, cfg), cfg)
    sgd_update(dual_b.teacher.params, state_b.velocity_teacher, learning_rate_at(2, cfg), cfg)

    params_a = dual_a.named_parameters()
    for name, p in dual_b.named_parameters().items():
        assert np.array_equal(p.data, params_a[name].data), name


def test_non_finite_loss_aborts_with_component_name():
    lab, unl = _crops(13)
    dual = build_dual(CFG_S, CFG_T, seed=5)
    dual.student.params["enc0.conv.w"].data[0, 0, 0, 0, 0] = np.nan
    cfg = TrainConfig(crop_extent=(8, 8, 8))
    with pytest.raises(L.NonFiniteLossError, match="sup_student"):
        train_iteration(dual, lab, unl, 0, cfg, TrainState())


# ---------------------------------------------------------------------------
# full runs


def test_run_training_artifacts_and_determinism(tmp_path):
    cfg, manifest = small_run_config(tmp_path, iters=10)
    splits = E.dataset_splits(manifest, cfg)

    out_a = tmp_path / "runA"
    out_b = tmp_path / "runB"
    run_training(manifest, splits[0], cfg.train, cfg.student, cfg.teacher, out_a)
    run_training(manifest, splits[0], cfg.train, cfg.student, cfg.teacher, out_b)

    hist_a = (out_a / "history.csv").read_bytes()
    assert hist_a == (out_b / "history.csv").read_bytes()
    assert hist_a.decode().count("\n") == cfg.train.total_iters + 1

    ckpts_a = sorted(p.name for p in (out_a / "checkpoints").iterdir())
    assert ckpts_a == sorted(p.name for p in (out_b / "checkpoints").iterdir())
    assert "iter_000005.bin" in ckpts_a and "iter_000010.bin" in ckpts_a
    for name in ckpts_a:
        assert (out_a / "checkpoints" / name).read_bytes() == \
               (out_b / "checkpoints" / name).read_bytes()


def test_run_training_loss_decreases(tmp_path):
    cfg, manifest = small_run_config(tmp_path, iters=120)
    splits = E.dataset_splits(manifest, cfg)
    _, history = run_training(manifest, splits[0], cfg.train, cfg.student, cfg.teacher,
                              tmp_path / "run")
    first = np.mean([h[2].sup_student + h[2].sup_teacher for h in history[:10]])
    last = np.mean([h[2].sup_student + h[2].sup_teacher for h in history[-10:]])
    assert last < first


def test_run_training_validates_fold(tmp_path):
    cfg, manifest = small_run_config(tmp_path)
    splits = E.dataset_splits(manifest, cfg)
    bad = replace(splits[0], train_labeled=["missing-volume"])
    with pytest.raises(ValueError, match="missing-volume"):
        run_training(manifest, bad, cfg.train, cfg.student, cfg.teacher, tmp_path / "x")


# ---------------------------------------------------------------------------
# sliding-window inference


def _linear_predictor(seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 3))

    def predict(crop):
        feats = np.stack([crop[0], crop[0] ** 2, np.ones_like(crop[0])])
        return np.einsum("cf,fxyz->cxyz", w, feats)

    return predict


def test_sliding_window_single_window_equals_direct():
    rng = np.random.default_rng(1)
    image = rng.standard_normal((8, 8, 8))
    predict = _linear_predictor(2)
    got = sliding_window_predict(predict, image, (8, 8, 8), (8, 8, 8))
    want = softmax_np(predict(image[None]))
    assert np.array_equal(got, want)


def test_sliding_window_tiling_coverage():
    image = np.random.default_rng(3).standard_normal((8, 8, 8))
    const = lambda crop: np.stack([np.full(crop.shape[1:], 0.3),
                                   np.full(crop.shape[1:], -0.1)])
    got = sliding_window_predict(const, image, (4, 4, 4), (4, 4, 4))
    want = softmax_np(np.stack([np.full((8, 8, 8), 0.3), np.full((8, 8, 8), -0.1)]))
    assert np.allclose(got, want, atol=1e-15)


def test_sliding_window_overlap_matches_oracle():
    from dualseg.oracles import sliding_window_average_oracle

    rng = np.random.default_rng(4)
    image = rng.standard_normal((9, 8, 7))
    predict = _linear_predictor(5)
    got = sliding_window_predict(predict, image, (4, 4, 4), (2, 3, 2))
    want = softmax_np(sliding_window_average_oracle(predict, image, (4, 4, 4), (2, 3, 2)))
    assert np.abs(got - want).max() < 1e-9


def test_sliding_window_validation():
    image = np.zeros((6, 6, 6))
    with pytest.raises(ValueError, match="window"):
        sliding_window_predict(_linear_predictor(), image, (8, 8, 8), (2, 2, 2))
    with pytest.raises(ValueError, match="stride"):
        sliding_window_predict(_linear_predictor(), image, (4, 4, 4), (0, 2, 2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(keep_quantile=0.0)
    with pytest.raises(ValueError):
        TrainConfig(contrastive_mode="bogus")
