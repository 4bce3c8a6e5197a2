"""Verification suites behind the gradcheck and oracle commands.

The gradient suite finite-difference-checks every loss term and the full
objective composite (student-side leaves, teacher values held constant,
masks frozen, exactly as during training). The oracle suite compares
production code against the brute-force reimplementations in oracles.py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics as M
from . import oracles
from .autodiff import Tensor
from .trainer import sliding_window_predict, softmax_np

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float  # max relative error (grad) or max abs deviation (oracle)
    passed: bool
    detail: str = ""


def _random_logits(rng, shape):
    return rng.standard_normal(shape)


def _frozen_mask(rng, spatial, keep_quantile=0.8) -> L.PseudoLabelMask:
    probs = softmax_np(_random_logits(rng, (2, *spatial)))
    return L.build_pseudo_mask(Tensor(probs), keep_quantile)


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks of every loss and the objective composite."""
    rng = np.random.default_rng(seed)
    spatial = (4, 4, 4)
    n_feat = 4
    results = []

    def check(name, f, x0):
        err = ad.gradient_check(f, Tensor(x0), h=FD_STEP)
        results.append(CheckResult(name, err, err < GRAD_TOL))

    label = (rng.random(spatial) < 0.4).astype(np.uint8)
    check("supervised_loss/logits",
          lambda x: L.supervised_loss(x, label),
          _random_logits(rng, (2, *spatial)))

    check("voxel_entropy/logits",
          lambda x: L.voxel_entropy(ad.softmax(x, 0)).mean(),
          _random_logits(rng, (2, *spatial)))

    mask = _frozen_mask(rng, spatial)
    check("pseudo_supervised_loss/logits",
          lambda x: L.pseudo_supervised_loss(x, mask),
          _random_logits(rng, (2, *spatial)))

    base_t = _random_logits(rng, (2, *spatial))
    n_flat = int(np.prod((2, *spatial)))

    def cons_s(x):
        ps = ad.softmax(x, 0).reshape((n_flat,))
        pt = ad.softmax(Tensor(base_t), 0).reshape((n_flat,))
        return L.consistency_regularization(ps, pt)

    def cons_t(x):
        ps = ad.softmax(Tensor(base_t), 0).reshape((n_flat,))
        pt = ad.softmax(x, 0).reshape((n_flat,))
        return L.consistency_regularization(ps, pt)

    check("consistency/student_logits", cons_s, _random_logits(rng, (2, *spatial)))
    check("consistency/teacher_logits", cons_t, _random_logits(rng, (2, *spatial)))

    check("kl_divergence/student_logits",
          lambda x: L.kl_divergence(ad.softmax(x, 0), ad.softmax(Tensor(base_t), 0)).mean(),
          _random_logits(rng, (2, *spatial)))
    check("kl_divergence/teacher_logits",
          lambda x: L.kl_divergence(ad.softmax(Tensor(base_t), 0), ad.softmax(x, 0)).mean(),
          _random_logits(rng, (2, *spatial)))

    check("uncertainty_weighted_loss/student_logits",
          lambda x: L.uncertainty_weighted_loss(x, Tensor(base_t), temperature=0.5),
          _random_logits(rng, (2, *spatial)))

    proto_mask = _frozen_mask(rng, spatial)
    for mode in L.CONTRASTIVE_MODES:
        check(f"contrastive_loss[{mode}]/features",
              lambda x, m=mode: L.contrastive_loss(
                  x, proto_mask, L.compute_prototypes(x, proto_mask), m),
              rng.standard_normal((n_feat, *spatial)))

    # objective composite, differentiated at each student-side leaf with the
    # teacher fixed and masks frozen; the contrastive term is driven by the
    # student features here so its differentiable path is exercised inside
    # the full composition
    t_logits_l = Tensor(_random_logits(rng, (2, *spatial)))
    t_logits_u = Tensor(_random_logits(rng, (2, *spatial)))
    t_feats_u = Tensor(rng.standard_normal((n_feat, *spatial)))
    mask_t = _frozen_mask(rng, spatial)
    base_s_l = _random_logits(rng, (2, *spatial))
    base_s_u = _random_logits(rng, (2, *spatial))
    base_f_u = rng.standard_normal((n_feat, *spatial))
    lambda_c = L.lambda_schedule(3, 10)

    def composite(s_logits_l: Tensor, s_logits_u: Tensor, s_feats_u: Tensor) -> Tensor:
        sup_s = L.supervised_loss(s_logits_l, label)
        sup_t = L.supervised_loss(t_logits_l, label)
        mask_s = L.build_pseudo_mask(ad.softmax(s_logits_u, 0).detach())
        unsup_s = L.pseudo_supervised_loss(s_logits_u, mask_t)
        unsup_t = L.pseudo_supervised_loss(t_logits_u, mask_s)
        reg = L.consistency_regularization(ad.softmax(s_logits_u, 0).reshape((n_flat,)),
                                           ad.softmax(t_logits_u, 0).reshape((n_flat,)))
        une = L.uncertainty_weighted_loss(s_logits_u, t_logits_u, temperature=0.5)
        protos = L.compute_prototypes(t_feats_u, mask_t)
        con = L.contrastive_loss(s_feats_u, mask_t, protos, "paper-literal")
        _, total = L.total_loss(sup_s, sup_t, unsup_s, unsup_t, reg, une, con, lambda_c)
        return total

    check("composite/student_labeled_logits",
          lambda x: composite(x, Tensor(base_s_u), Tensor(base_f_u)), base_s_l)
    check("composite/student_unlabeled_logits",
          lambda x: composite(Tensor(base_s_l), x, Tensor(base_f_u)), base_s_u)
    check("composite/student_features",
          lambda x: composite(Tensor(base_s_l), Tensor(base_s_u), x), base_f_u)

    # tensor-engine spot checks
    rng2 = np.random.default_rng(seed + 1)
    inp = Tensor(rng2.standard_normal((2, 4, 4, 4)))
    ker0 = rng2.standard_normal((3, 2, 3, 3, 3))
    check("conv3d/kernels", lambda k: ad.conv3d(inp, k, stride=1, padding=1).sum(), ker0)
    check("conv3d/input",
          lambda i: ad.conv3d(i, Tensor(ker0), stride=2, padding=1).sum(),
          rng2.standard_normal((2, 4, 4, 4)))

    def shared_subexpr(x):
        y = ad.exp(x)
        return (y * y).sum() + y.mean()

    check("backward/shared_subexpression", shared_subexpr, rng2.standard_normal(12) * 0.3)
    return results


# ---------------------------------------------------------------------------
# oracle equivalence suites


def mask_oracle_suite(seed: int = 0, cases: int = 100, extent: int = 8) -> list[CheckResult]:
    """build_pseudo_mask vs sort-threshold-argmax, exact equality."""
    rng = np.random.default_rng(seed)
    results = []
    worst = 0.0
    all_ok = True
    for i in range(cases):
        scale = rng.uniform(0.5, 4.0)
        probs = softmax_np(rng.standard_normal((2, extent, extent, extent)) * scale)
        got = L.build_pseudo_mask(Tensor(probs), 0.8)
        want_labels, want_count, want_tau = oracles.pseudo_mask_oracle(probs, 0.8)
        ok = (np.array_equal(got.labels, want_labels)
              and got.valid_count == want_count and got.tau == want_tau)
        all_ok &= ok
        worst = max(worst, float(np.abs(got.labels - want_labels).max()))
    results.append(CheckResult("pseudo_mask/random_fields", worst, all_ok,
                               f"{cases} random {extent}^3 predictions"))

    one_hot = np.zeros((2, 4, 4, 4))
    one_hot[1] = 1.0
    got = L.build_pseudo_mask(Tensor(one_hot), 0.8)
    ok = got.valid_count == one_hot[0].size and (got.labels == 1).all()
    results.append(CheckResult("pseudo_mask/degenerate_one_hot", 0.0 if ok else 1.0, ok,
                               "constant-entropy field keeps every voxel"))

    fracs = []
    for i in range(20):
        probs = softmax_np(rng.standard_normal((2, extent, extent, extent)))
        fracs.append(L.build_pseudo_mask(Tensor(probs), 0.8).valid_fraction)
    frac = float(np.mean(fracs))
    ok = abs(frac - 0.8) < 0.02
    results.append(CheckResult("pseudo_mask/valid_fraction", abs(frac - 0.8), ok,
                               f"mean valid fraction {frac:.4f} vs 0.8"))
    return results


def metric_oracle_suite(seed: int = 0, cases: int = 50, max_extent: int = 12) -> list[CheckResult]:
    """surface_distances vs the all-pairs brute force, exact equality."""
    rng = np.random.default_rng(seed)
    results = []
    all_ok = True
    worst = 0.0
    tested = 0
    while tested < cases:
        shape = tuple(int(rng.integers(4, max_extent + 1)) for _ in range(3))
        a = rng.random(shape) < rng.uniform(0.05, 0.4)
        b = rng.random(shape) < rng.uniform(0.05, 0.4)
        if not a.any() or not b.any():
            continue
        tested += 1
        hd, asd = M.surface_distances(a, b)
        ohd, oasd = oracles.surface_distance_oracle(M.extract_surface(a), M.extract_surface(b))
        ok = hd == ohd and asd == oasd
        all_ok &= ok
        worst = max(worst, abs(hd - ohd), abs(asd - oasd))
    results.append(CheckResult("surface_distances/all_pairs", worst, all_ok,
                               f"{cases} random pairs up to {max_extent}^3"))

    p = np.zeros((8, 8, 8), dtype=bool)
    r = np.zeros((8, 8, 8), dtype=bool)
    p[0, 0, 0] = True
    r[3, 0, 0] = True
    hd, asd = M.surface_distances(p, r)
    ok = hd == 3.0 and asd == 3.0
    results.append(CheckResult("surface_distances/single_voxel_pair", abs(hd - 3.0), ok,
                               "voxels at distance 3"))

    pred = np.zeros((6, 6, 6), dtype=bool)
    ref = np.zeros((6, 6, 6), dtype=bool)
    pred[1:3, 1, 1] = True  # |P| = 2
    ref[2:4, 1, 1] = True  # |R| = 2, overlap 1
    dice, jac = M.overlap_metrics(pred, ref)
    ok = abs(dice - 50.0) < 1e-12 and abs(jac - 100.0 / 3.0) < 1e-12
    results.append(CheckResult("overlap/closed_form_counts", abs(dice - 50.0), ok,
                               "|P|=2 |R|=2 overlap 1 -> dice 50, jaccard 33.33"))
    return results


def sliding_window_oracle_suite(seed: int = 0) -> list[CheckResult]:
    """sliding_window_predict vs exhaustive per-voxel window averaging."""
    rng = np.random.default_rng(seed)
    results = []

    w = rng.standard_normal((2, 4))

    def predict(crop):
        feats = np.stack([crop[0], crop[0] ** 2, np.abs(crop[0]), np.ones_like(crop[0])])
        return np.einsum("cf,fxyz->cxyz", w, feats)

    image = rng.standard_normal((10, 9, 8))
    window, stride = (6, 5, 4), (3, 2, 3)
    got = sliding_window_predict(predict, image, window, stride)
    want = softmax_np(oracles.sliding_window_average_oracle(predict, image, window, stride))
    dev = float(np.abs(got - want).max())
    results.append(CheckResult("sliding_window/overlap_average", dev, dev < 1e-9,
                               "overlapping strides vs brute-force coverage"))

    image2 = rng.standard_normal((8, 8, 8))
    got2 = sliding_window_predict(predict, image2, (4, 4, 4), (4, 4, 4))
    want2 = softmax_np(oracles.sliding_window_average_oracle(predict, image2, (4, 4, 4), (4, 4, 4)))
    dev2 = float(np.abs(got2 - want2).max())
    results.append(CheckResult("sliding_window/tiling", dev2, dev2 < 1e-12,
                               "stride == window, uniform coverage"))
    return results


def oracle_suites(seed: int = 0) -> list[CheckResult]:
    return (mask_oracle_suite(seed) + metric_oracle_suite(seed)
            + sliding_window_oracle_suite(seed))
