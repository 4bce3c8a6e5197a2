"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 6 (the desk-scale benchmark) trains 3 seeds x 5 folds x 2 methods
at the default configuration and takes the bulk of the suite's runtime.
"""

import time
import numpy as np
import pytest

from dualseg import autodiff as ad
from dualseg import losses as L
from dualseg.autodiff import Tensor
from dualseg.cli import main
from dualseg.config import RunConfig
from dualseg.experiment import run_benchmark
from dualseg.trainer import TrainConfig, learning_rate_at, softmax_np
from dualseg.verification import (gradient_suite, mask_oracle_suite,
                                  metric_oracle_suite)


def _report(criterion: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = gradient_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and elapsed < 60.0
    _report("criterion 1 (gradient suite)", ok,
            f"{len(results)} checks, worst rel err {worst:.2e}, {elapsed:.1f} s")


def test_criterion_2_entropy_filter_oracle():
    results = mask_oracle_suite(seed=0, cases=100, extent=8)
    by_name = {r.name: r for r in results}
    ok = all(r.passed for r in results)
    _report("criterion 2 (entropy-filter oracle)", ok,
            f"100 random 8^3 fields exact, degenerate one-hot kept, "
            f"valid fraction {0.8 - by_name['pseudo_mask/valid_fraction'].value:.4f}")


def test_criterion_3_metric_oracle():
    results = metric_oracle_suite(seed=0, cases=50, max_extent=12)
    ok = all(r.passed for r in results)
    _report("criterion 3 (metric oracle)", ok,
            "50 random pairs exact vs all-pairs brute force; closed-form "
            "overlap counts; single-voxel pair hd95 = asd = 3.0")


def test_criterion_4_schedule_endpoints():
    lam_end = L.lambda_schedule(6000, 6000)
    lam_start = L.lambda_schedule(0, 6000)
    cfg = TrainConfig(decay_every=2500, total_iters=6000)
    lrs = (learning_rate_at(0, cfg), learning_rate_at(2500, cfg), learning_rate_at(5000, cfg))
    ok = (lam_end == 0.1
          and abs(lam_start - 0.1 * np.exp(4.0)) < 1e-9
          and lrs[0] == 0.01 and abs(lrs[1] - 0.001) < 1e-15 and abs(lrs[2] - 0.0001) < 1e-15)
    _report("criterion 4 (schedule endpoints)", ok,
            f"lambda(t_max)={lam_end}, lambda(0)={lam_start:.6f}, lr steps {lrs}")


def test_criterion_5_loss_invariants():
    rng = np.random.default_rng(5)
    n = 1000
    failures = []

    for i in range(n):
        spatial = (3, 3, 3)
        logits_a = rng.standard_normal((2, *spatial)) * rng.uniform(0.5, 3)
        logits_b = rng.standard_normal((2, *spatial)) * rng.uniform(0.5, 3)
        label = (rng.random(spatial) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        pa = softmax_np(logits_a)
        pb = softmax_np(logits_b)
        mask = L.build_pseudo_mask(Tensor(pa), 0.8)

        if L.supervised_loss(Tensor(logits_a), label).item() < -1e-12:
            failures.append((i, "supervised"))
        if L.pseudo_supervised_loss(Tensor(logits_b), mask).item() < -1e-12:
            failures.append((i, "pseudo"))
        cons = L.consistency_regularization(Tensor(pa.reshape(-1)), Tensor(pb.reshape(-1))).item()
        if not -1e-12 <= cons <= 2.0 + 1e-12:
            failures.append((i, "consistency-range"))
        kl = L.kl_divergence(Tensor(pa), Tensor(pb)).data
        if kl.min() < -1e-12:
            failures.append((i, "kl-negative"))
        if L.uncertainty_weighted_loss(Tensor(logits_a), Tensor(logits_b), 0.5).item() < -1e-12:
            failures.append((i, "uncertainty"))
        feats = rng.standard_normal((4, *spatial))
        protos = L.compute_prototypes(Tensor(feats), mask)
        for mode in L.CONTRASTIVE_MODES:
            if L.contrastive_loss(Tensor(feats), mask, protos, mode).item() < -1e-12:
                failures.append((i, f"contrastive-{mode}"))

    # KL equality at identical inputs
    p = softmax_np(rng.standard_normal((2, 4, 4, 4)))
    kl_same = np.abs(L.kl_divergence(Tensor(p), Tensor(p)).data).max()
    if kl_same > 1e-12:
        failures.append(("identical", "kl-nonzero"))

    # pseudo-loss invariance to IGNORE voxels
    logits = rng.standard_normal((2, 4, 4, 4))
    mask = L.build_pseudo_mask(Tensor(softmax_np(rng.standard_normal((2, 4, 4, 4)) * 2)), 0.8)
    ignored = mask.labels == L.IGNORE
    perturbed = logits.copy()
    perturbed[:, ignored] += 100.0
    t1 = Tensor(logits, requires_grad=True)
    ad.backward(L.pseudo_supervised_loss(t1, mask))
    t2 = Tensor(perturbed, requires_grad=True)
    l2 = L.pseudo_supervised_loss(t2, mask)
    v1 = L.pseudo_supervised_loss(Tensor(logits), mask).item()
    ad.backward(l2)
    if v1 != l2.item() or not np.array_equal(t1.grad[:, ~ignored], t2.grad[:, ~ignored]):
        failures.append(("ignore", "not-invariant"))

    _report("criterion 5 (loss invariants)", not failures,
            f"{n}-case nonnegativity sweeps, KL identity, consistency range, "
            f"IGNORE invariance; failures: {failures[:5]}")


@pytest.fixture(scope="module")
def benchmark_result(tmp_path_factory):
    # trains 3 seeds x 5 folds x 2 methods at the default configuration
    cfg = RunConfig()
    work = tmp_path_factory.mktemp("benchmark")
    return run_benchmark(cfg, seeds=[1, 2, 3], workdir=work)


@pytest.mark.benchmark
def test_criterion_6_semi_supervised_gain(benchmark_result):
    res = benchmark_result
    gain = res.gain("ensemble")
    full_dice = res.pooled_dice("full", "ensemble")
    base_dice = res.pooled_dice("supervised", "ensemble")
    ok_gain = gain >= 2.0
    times = [r.total_seconds for r in res.runs if r.method == "full"]
    ok_time = all(t < 600.0 for t in times)
    _report("criterion 6 (desk-scale semi-supervised gain)", ok_gain and ok_time,
            f"full {full_dice:.2f} vs supervised {base_dice:.2f} dice "
            f"(gain {gain:+.2f}, need >= +2); full-run times "
            f"{[f'{t:.0f}s' for t in times]} (< 600 s each)")


def test_criterion_7_ablation_grid(tmp_path):
    small = [
        "--set", "dataset.n_volumes=8", "--set", "dataset.extent=16",
        "--set", "train.total_iters=40", "--set", "train.decay_every=20",
        "--set", "train.crop_extent=[8,8,8]", "--set", "folds=4",
        "--set", "eval.window=[8,8,8]", "--set", "eval.stride=[4,4,4]",
    ]
    assert main(["gen-data", "--out", str(tmp_path / "data"), *small]) == 0
    code = main(["ablate", "--data", str(tmp_path / "data" / "manifest.json"),
                 "--fold", "0", "--out", str(tmp_path / "abl"), *small])
    import csv
    with open(tmp_path / "abl" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    grid = [(r["use_une"], r["use_reg"]) for r in rows]
    ok = (code == 0 and len(rows) == 4
          and grid == [("True", "False"), ("False", "True"), ("True", "True"),
                       ("False", "False")]
          and all(r["dice_mean"] for r in rows))
    _report("criterion 7 (ablation grid)", ok,
            f"4-row (+-une, +-reg) grid completed and reported: {grid}")


def test_criterion_8_training_determinism(tmp_path):
    small = [
        "--set", "dataset.n_volumes=6", "--set", "dataset.extent=16",
        "--set", "train.total_iters=24", "--set", "train.decay_every=12",
        "--set", "train.crop_extent=[8,8,8]", "--set", "folds=3",
    ]
    assert main(["gen-data", "--out", str(tmp_path / "data"), *small]) == 0
    manifest = str(tmp_path / "data" / "manifest.json")
    for name in ("a", "b"):
        assert main(["train", "--data", manifest, "--fold", "0",
                     "--out", str(tmp_path / name), *small]) == 0
    hist_equal = (tmp_path / "a" / "history.csv").read_bytes() == \
                 (tmp_path / "b" / "history.csv").read_bytes()
    ckpt_names = sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir())
    ckpt_equal = all(
        (tmp_path / "a" / "checkpoints" / n).read_bytes() ==
        (tmp_path / "b" / "checkpoints" / n).read_bytes()
        for n in ckpt_names)
    _report("criterion 8 (bitwise determinism)", hist_equal and ckpt_equal,
            f"two identical runs: history.csv equal={hist_equal}, "
            f"{len(ckpt_names)} checkpoint files equal={ckpt_equal}")
