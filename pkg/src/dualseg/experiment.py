"""Experiment orchestration: dataset generation, fold runs, evaluation of
the three prediction models (student, teacher, logit-average ensemble), and
the desk-scale benchmark comparing the full method against a
supervised-only baseline.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from .config import RunConfig, config_to_dict
from .data import FoldSplit, PhantomSpec, Volume
from .ioutil import atomic_write_bytes, atomic_write_text
from .network import DualNet
from .trainer import run_training
from .trainer import ensemble_predict_fn

MODELS = ("student", "teacher", "ensemble")


def write_run_json(out_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None):
    payload = {"command": command, "config": config_to_dict(cfg)}
    if extra:
        payload.update(extra)
    atomic_write_text(Path(out_dir) / "run.json", json.dumps(payload, indent=1))


def generate_dataset(cfg: RunConfig, out_dir: Path | str) -> Path:
    """Write cfg.dataset.n_volumes phantoms plus a manifest; returns its path.

    Each volume draws its own contrast and lobe count from the configured
    ranges, deterministically from the dataset seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    rng = np.random.default_rng(ds.seed)
    volumes = []
    for i in range(ds.n_volumes):
        contrast = float(rng.uniform(*ds.contrast_range))
        n_blobs = int(rng.integers(ds.blob_range[0], ds.blob_range[1] + 1))
        fg = ds.intensity_bg + contrast * (ds.intensity_fg - ds.intensity_bg)
        spec = PhantomSpec(extent=ds.extent, n_blobs=n_blobs, noise_sigma=ds.noise_sigma,
                           noise_smooth=ds.noise_smooth, blob_scale=ds.blob_scale,
                           intensity_fg=fg, intensity_bg=ds.intensity_bg,
                           seed=ds.seed * 1000 + i)
        v = D.generate_phantom(spec)
        D.write_volume(v, out_dir / v.id)
        volumes.append(v)
    return D.write_manifest(out_dir, volumes)


def dataset_splits(manifest_path: Path | str, cfg: RunConfig) -> list[FoldSplit]:
    ids = sorted(e["id"] for e in D.read_manifest(manifest_path))
    return D.kfold_split(ids, cfg.folds, cfg.split_seed, cfg.labeled_fraction)


def predict_fns(dual: DualNet) -> dict[str, callable]:
    return {
        "student": dual.student.predict_logits,
        "teacher": dual.teacher.predict_logits,
        "ensemble": ensemble_predict_fn(dual.student, dual.teacher),
    }


def evaluate_dual(dual: DualNet, volumes: dict[str, Volume], test_ids: list[str],
                  cfg: RunConfig) -> dict[str, tuple[list[M.CaseMetrics], M.FoldSummary]]:
    """Score every test volume with each model; volumes are normalized the
    same way as training inputs."""
    fns = predict_fns(dual)
    out = {}
    for model, fn in fns.items():
        cases = []
        for vid in test_ids:
            v = D.normalize(volumes[vid])
            cases.append(M.evaluate_case(fn, v, cfg.eval.window, cfg.eval.stride,
                                         cfg.eval.threshold))
        out[model] = (cases, M.summarize_fold(cases))
    return out


METRIC_COLUMNS = ["model", "case_id", "dice", "jaccard", "hd95", "asd",
                  "hd95_mm", "asd_mm", "pred_voxels", "ref_voxels", "surface_sentinel"]
SUMMARY_COLUMNS = ["model", "n_cases", "dice_mean", "dice_std", "jaccard_mean", "jaccard_std",
                   "hd95_mean", "hd95_std", "asd_mean", "asd_std",
                   "hd95_mm_mean", "hd95_mm_std", "asd_mm_mean", "asd_mm_std",
                   "surface_excluded"]


def write_metric_csvs(results: dict, out_dir: Path):
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for model in MODELS:
        for c in results[model][0]:
            w.writerow([model, c.case_id, repr(c.dice), repr(c.jaccard), repr(c.hd95),
                        repr(c.asd), repr(c.hd95_mm), repr(c.asd_mm),
                        c.pred_voxels, c.ref_voxels, int(c.surface_sentinel)])
    atomic_write_bytes(out_dir / "metrics.csv", buf.getvalue().encode())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for model in MODELS:
        s = results[model][1]
        w.writerow([model, s.n_cases, repr(s.dice_mean), repr(s.dice_std),
                    repr(s.jaccard_mean), repr(s.jaccard_std),
                    repr(s.hd95_mean), repr(s.hd95_std), repr(s.asd_mean), repr(s.asd_std),
                    repr(s.hd95_mm_mean), repr(s.hd95_mm_std),
                    repr(s.asd_mm_mean), repr(s.asd_mm_std), s.surface_excluded])
    atomic_write_bytes(out_dir / "summary.csv", buf.getvalue().encode())


def latest_checkpoint(run_dir: Path | str) -> Path:
    ckpts = sorted(Path(run_dir, "checkpoints").glob("iter_*.json"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}/checkpoints")
    return ckpts[-1].with_suffix("")


def train_fold(manifest_path: Path | str, cfg: RunConfig, fold: int,
               out_dir: Path | str) -> DualNet:
    splits = dataset_splits(manifest_path, cfg)
    if not 0 <= fold < len(splits):
        raise ValueError(f"fold {fold} outside 0..{len(splits) - 1}")
    dual, _ = run_training(manifest_path, splits[fold], cfg.train,
                           cfg.student, cfg.teacher, out_dir)
    return dual


def eval_fold(manifest_path: Path | str, cfg: RunConfig, fold: int,
              dual: DualNet, out_dir: Path | str) -> dict:
    splits = dataset_splits(manifest_path, cfg)
    volumes = D.load_dataset(manifest_path)
    results = evaluate_dual(dual, volumes, splits[fold].test, cfg)
    write_metric_csvs(results, Path(out_dir))
    return results


@dataclass
class BenchmarkRun:
    method: str  # "full" or "supervised"
    seed: int
    dice_by_model: dict[str, float]  # pooled over folds and cases
    train_seconds: float
    total_seconds: float


@dataclass
class BenchmarkResult:
    runs: list[BenchmarkRun]
    manifest: str

    def pooled_dice(self, method: str, model: str = "ensemble") -> float:
        vals = [r.dice_by_model[model] for r in self.runs if r.method == method]
        return float(np.mean(vals))

    def gain(self, model: str = "ensemble") -> float:
        return self.pooled_dice("full", model) - self.pooled_dice("supervised", model)


def run_benchmark(cfg: RunConfig, seeds: list[int], workdir: Path | str,
                  manifest_path: Path | str | None = None) -> BenchmarkResult:
    """The desk-scale relative-improvement experiment: for each seed, train
    and evaluate the full method and the supervised-only baseline over every
    fold, pooling per-case test Dice."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if manifest_path is None:
        manifest_path = generate_dataset(cfg, workdir / "data")
    splits = dataset_splits(manifest_path, cfg)
    volumes = D.load_dataset(manifest_path)

    runs = []
    for method in ("full", "supervised"):
        for seed in seeds:
            t0 = time.perf_counter()
            train_cfg = replace(cfg.train, seed=seed, supervised_only=(method == "supervised"))
            per_model_cases = {m: [] for m in MODELS}
            train_s = 0.0
            for split in splits:
                fold_dir = workdir / f"{method}_seed{seed}_fold{split.fold}"
                t1 = time.perf_counter()
                dual, _ = run_training(manifest_path, split, train_cfg,
                                       cfg.student, cfg.teacher, fold_dir)
                train_s += time.perf_counter() - t1
                results = evaluate_dual(dual, volumes, split.test, cfg)
                for m in MODELS:
                    per_model_cases[m].extend(results[m][0])
            dice = {m: float(np.mean([c.dice for c in per_model_cases[m]])) for m in MODELS}
            runs.append(BenchmarkRun(method=method, seed=seed, dice_by_model=dice,
                                     train_seconds=train_s,
                                     total_seconds=time.perf_counter() - t0))
    return BenchmarkResult(runs=runs, manifest=str(manifest_path))
