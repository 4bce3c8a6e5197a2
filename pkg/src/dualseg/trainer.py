"""Training protocol: momentum SGD with step decay, the mixed
labeled/unlabeled iteration, and sliding-window inference.

Each iteration forwards both networks on one labeled and one unlabeled crop,
composes the objective, and runs one backward followed by one SGD step per
network. Gradient routing: each network is trained by its supervised and
pseudo-supervised terms; the consistency and uncertainty losses additionally
flow into the student, with every teacher-derived quantity detached as a
constant target. The contrastive term is computed over the teacher's
(detached) features and mask, so it is monitored and reported but moves no
parameters, matching the distillation framing where teacher-side quantities
are targets. A run is strictly single-threaded and bitwise reproducible
from (config, seed).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import FoldSplit, Volume, load_dataset, normalize, random_crop
from .ioutil import atomic_write_bytes
from .network import DualNet, NetConfig, Network, build_dual, save_checkpoint

HISTORY_COLUMNS = ["iter", "lr", "lambda_c", "sup_s", "sup_t", "unsup_s", "unsup_t",
                   "reg", "une", "contrastive", "total", "valid_frac_s", "valid_frac_t"]


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the failing iteration's report."""


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    decay_every: int = 250  # paper-scale: 2500
    decay_factor: float = 10.0
    total_iters: int = 600  # paper-scale: 6000
    temperature: float = 0.5
    keep_quantile: float = 0.8
    contrastive_mode: str = "paper-literal"
    use_une: bool = True
    use_reg: bool = True
    supervised_only: bool = False
    crop_extent: tuple[int, int, int] = (16, 16, 16)
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.total_iters <= 0:
            raise ValueError(f"total_iters must be positive, got {self.total_iters}")
        if self.decay_every < 1 or self.decay_factor <= 0:
            raise ValueError("invalid decay schedule")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.keep_quantile <= 1.0:
            raise ValueError(f"keep_quantile must lie in (0, 1], got {self.keep_quantile}")
        if self.contrastive_mode not in L.CONTRASTIVE_MODES:
            raise ValueError(f"unknown contrastive_mode {self.contrastive_mode!r}")
        self.crop_extent = tuple(int(c) for c in self.crop_extent)


@dataclass
class TrainState:
    iteration: int = 0
    velocity_student: dict = field(default_factory=dict)
    velocity_teacher: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    history: list[L.LossReport] = field(default_factory=list)


def learning_rate_at(t: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 / decay_factor^floor(t / decay_every)."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    return cfg.lr0 / cfg.decay_factor ** (t // cfg.decay_every)


def sgd_update(params: dict[str, Tensor], velocity: dict[str, np.ndarray],
               rate: float, cfg: TrainConfig):
    """Classic momentum SGD with weight decay folded into the gradient:
    g' = grad + wd * param; v <- momentum * v + g'; param <- param - rate * v.
    """
    for name, p in params.items():
        if p.grad is None:
            raise TrainingAborted(f"parameter {name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise TrainingAborted(f"non-finite gradient in parameter {name!r}")
        g = p.grad + cfg.weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g
        velocity[name] = v
        p.data = p.data - rate * v
        p.grad = None


def _zero() -> Tensor:
    return Tensor(0.0)


def train_iteration(dual: DualNet, labeled_crop: Volume, unlabeled_crop: Volume,
                    t: int, cfg: TrainConfig, state: TrainState) -> L.LossReport:
    """One optimization step over a (labeled, unlabeled) crop pair."""
    if labeled_crop.label is None:
        raise ValueError("labeled crop is missing its label mask")
    x_l = Tensor(labeled_crop.image[None])
    x_u = Tensor(unlabeled_crop.image[None])

    s_logits_l, _ = dual.student.forward(x_l)
    t_logits_l, _ = dual.teacher.forward(x_l)
    sup_s = L.supervised_loss(s_logits_l, labeled_crop.label)
    sup_t = L.supervised_loss(t_logits_l, labeled_crop.label)

    unsup_s = unsup_t = reg = une = contrastive = None
    frac_s = frac_t = 0.0
    if not cfg.supervised_only:
        s_logits_u, _ = dual.student.forward(x_u)
        t_logits_u, t_feat_u = dual.teacher.forward(x_u)
        probs_s_u = ad.softmax(s_logits_u, 0)
        with ad.no_grad():
            probs_t_u_const = ad.softmax(t_logits_u, 0).detach()
            mask_s = L.build_pseudo_mask(probs_s_u.detach(), cfg.keep_quantile)
            mask_t = L.build_pseudo_mask(probs_t_u_const, cfg.keep_quantile)
        frac_s, frac_t = mask_s.valid_fraction, mask_t.valid_fraction

        # cross pseudo-supervision: each network learns from the other's mask
        unsup_s = L.pseudo_supervised_loss(s_logits_u, mask_t)
        unsup_t = L.pseudo_supervised_loss(t_logits_u, mask_s)

        n = probs_s_u.size
        if cfg.use_reg:
            # consistency couples both networks: unlike the distillation
            # terms it has no target side, so both prediction fields stay
            # live and the pair is pulled toward agreement symmetrically
            probs_t_u = ad.softmax(t_logits_u, 0)
            reg = L.consistency_regularization(probs_s_u.reshape((n,)),
                                               probs_t_u.reshape((n,)))
        if cfg.use_une:
            une = L.uncertainty_weighted_loss(s_logits_u, t_logits_u.detach(), cfg.temperature)

        # contrastive term over the teacher's features and mask, detached:
        # a monitored constant, like every teacher-derived target
        t_feat_const = t_feat_u.detach()
        protos = L.compute_prototypes(t_feat_const, mask_t)
        contrastive = L.contrastive_loss(t_feat_const, mask_t, protos, cfg.contrastive_mode)

    lambda_c = L.lambda_schedule(t, cfg.total_iters)
    report, total = L.total_loss(
        sup_s, sup_t,
        unsup_s if unsup_s is not None else _zero(),
        unsup_t if unsup_t is not None else _zero(),
        reg if reg is not None else _zero(),
        une if une is not None else _zero(),
        contrastive if contrastive is not None else _zero(),
        lambda_c, valid_frac_student=frac_s, valid_frac_teacher=frac_t,
    )
    ad.backward(total)

    rate = learning_rate_at(t, cfg)
    sgd_update(dual.student.params, state.velocity_student, rate, cfg)
    sgd_update(dual.teacher.params, state.velocity_teacher, rate, cfg)
    state.iteration = t + 1
    state.history.append(report)
    return report


def history_csv_bytes(history: list[tuple[int, float, L.LossReport]]) -> bytes:
    """Serialize (iteration, lr, report) rows with full float fidelity."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for it, lr, r in history:
        writer.writerow([it, repr(lr), repr(r.lambda_c), repr(r.sup_student), repr(r.sup_teacher),
                         repr(r.unsup_student), repr(r.unsup_teacher), repr(r.consistency),
                         repr(r.uncertainty), repr(r.contrastive), repr(r.total),
                         repr(r.valid_frac_student), repr(r.valid_frac_teacher)])
    return buf.getvalue().encode()


def run_training(manifest_path: Path | str, split: FoldSplit, cfg: TrainConfig,
                 cfg_student: NetConfig, cfg_teacher: NetConfig,
                 out_dir: Path | str) -> tuple[DualNet, list[tuple[int, float, L.LossReport]]]:
    """Train one fold; write history.csv and checkpoints at decay boundaries.

    Volumes are normalized once at load; every iteration draws one labeled
    and one unlabeled volume and crops both at cfg.crop_extent.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    volumes = load_dataset(manifest_path)
    missing = [i for i in split.train + split.test if i not in volumes]
    if missing:
        raise ValueError(f"fold references volumes absent from the manifest: {missing}")
    normalized = {vid: normalize(volumes[vid]) for vid in split.train}
    for vid in split.train_labeled:
        if normalized[vid].label is None:
            raise ValueError(f"labeled training volume {vid!r} has no label mask")

    dual = build_dual(cfg_student, cfg_teacher, seed=cfg.seed)
    state = TrainState(rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    rng = state.rng

    history: list[tuple[int, float, L.LossReport]] = []
    for t in range(cfg.total_iters):
        lab_id = split.train_labeled[int(rng.integers(len(split.train_labeled)))]
        unl_id = split.train_unlabeled[int(rng.integers(len(split.train_unlabeled)))]
        lab_crop = random_crop(normalized[lab_id], cfg.crop_extent, rng)
        unl_crop = random_crop(normalized[unl_id], cfg.crop_extent, rng)
        report = train_iteration(dual, lab_crop, unl_crop, t, cfg, state)
        history.append((t, learning_rate_at(t, cfg), report))
        done = t + 1
        if done % cfg.decay_every == 0 or done == cfg.total_iters:
            save_checkpoint(dual, ckpt_dir / f"iter_{done:06d}")

    atomic_write_bytes(out_dir / "history.csv", history_csv_bytes(history))
    return dual, history


# ---------------------------------------------------------------------------
# sliding-window inference


def softmax_np(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sliding_window_predict(predict_fn, image: np.ndarray, window: tuple[int, int, int],
                           stride: tuple[int, int, int]) -> np.ndarray:
    """Tile the volume with overlapping windows (final window end-aligned),
    average overlapping logits, then softmax.

    predict_fn maps a [1, wx, wy, wz] crop to [2, wx, wy, wz] logits.
    """
    ext = image.shape
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if any(w > e for w, e in zip(window, ext)):
        raise ValueError(f"window {window} exceeds volume extents {ext}")
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1, got {stride}")

    positions = []
    for e, w, s in zip(ext, window, stride):
        axis = list(range(0, e - w + 1, s))
        if axis[-1] != e - w:
            axis.append(e - w)
        positions.append(axis)

    logit_sum = np.zeros((2, *ext))
    count = np.zeros(ext)
    for ox in positions[0]:
        for oy in positions[1]:
            for oz in positions[2]:
                sl = (slice(ox, ox + window[0]), slice(oy, oy + window[1]), slice(oz, oz + window[2]))
                logits = predict_fn(image[sl][None])
                logit_sum[(slice(None),) + sl] += logits
                count[sl] += 1.0
    return softmax_np(logit_sum / count[None], axis=0)


def ensemble_predict_fn(student: Network, teacher: Network):
    """Average the two streams' logits (the reported fusion)."""
    def fn(crop: np.ndarray) -> np.ndarray:
        return 0.5 * (student.predict_logits(crop) + teacher.predict_logits(crop))
    return fn
