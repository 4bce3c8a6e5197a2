"""Loss terms of the dual-network objective.

Seven scalar terms are combined into the training objective:
two supervised losses (cross-entropy + soft Dice on the labeled crop),
two cross pseudo-supervision losses (entropy-filtered pseudo-labels of one
network supervising the other), a cosine consistency penalty, an
uncertainty-weighted distillation loss, and a prototype contrastive loss on
uncertain voxels. All terms are nonnegative and differentiable through the
autodiff tape. Class layout is fixed to binary segmentation: channel 0 is
background, channel 1 foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IGNORE = -1
EPS_ENTROPY = 1e-12  # epsilon added inside log2 of the entropy formula
EPS_DICE = 1e-5  # soft Dice denominator smoothing
N_CLASSES = 2


class NonFiniteLossError(ValueError):
    """A loss component evaluated to a non-finite value."""


@dataclass
class PseudoLabelMask:
    """Entropy-filtered pseudo-labels: argmax class or IGNORE per voxel."""

    labels: np.ndarray  # int array, class index or IGNORE
    argmax: np.ndarray  # int array, argmax class at every voxel (no filtering)
    valid_count: int
    tau: float  # entropy threshold in bits

    @property
    def valid(self) -> np.ndarray:
        return self.labels != IGNORE

    @property
    def valid_fraction(self) -> float:
        return self.valid_count / self.labels.size


@dataclass
class PrototypeSet:
    """Mean embeddings of reliably predicted voxels per class."""

    foreground: Tensor | None
    background: Tensor | None
    fg_support: int
    bg_support: int

    @property
    def fg_valid(self) -> bool:
        return self.fg_support > 0

    @property
    def bg_valid(self) -> bool:
        return self.bg_support > 0

    @property
    def both_valid(self) -> bool:
        return self.fg_valid and self.bg_valid


@dataclass
class LossReport:
    """Per-iteration breakdown of every objective term."""

    sup_student: float
    sup_teacher: float
    unsup_student: float
    unsup_teacher: float
    consistency: float
    uncertainty: float
    contrastive: float
    lambda_c: float
    total: float
    valid_frac_student: float = 0.0
    valid_frac_teacher: float = 0.0


def _check_binary_label(label: np.ndarray):
    vals = np.unique(label)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"label mask must be binary, found values {vals[~np.isin(vals, (0, 1))]}")


def _check_prob_field(probs: Tensor, name: str):
    data = probs.data
    if data.ndim < 1 or data.shape[0] != N_CLASSES:
        raise ad.ShapeError(f"{name}: expected leading class axis of {N_CLASSES}, got shape {probs.shape}")
    if (data < 0).any():
        raise ValueError(f"{name}: negative probabilities")
    sums = data.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError(f"{name}: per-voxel class sums deviate from 1 by {np.abs(sums - 1.0).max():.3e}")


def supervised_loss(logits: Tensor, label: np.ndarray) -> Tensor:
    """Mean voxel cross-entropy plus soft Dice loss against a binary mask."""
    if logits.shape[0] != N_CLASSES:
        raise ad.ShapeError(f"supervised_loss expects {N_CLASSES} class channels, got shape {logits.shape}")
    label = np.asarray(label)
    if logits.shape[1:] != label.shape:
        raise ad.ShapeError(f"logits spatial shape {logits.shape[1:]} != label shape {label.shape}")
    _check_binary_label(label)

    y = label.astype(np.float64)
    probs = ad.softmax(logits, 0)
    p_bg = ad.select(probs, 0, 0)
    p_fg = ad.select(probs, 0, 1)
    y_fg = Tensor(y)
    y_bg = Tensor(1.0 - y)
    ce = -(y_fg * ad.ln(p_fg) + y_bg * ad.ln(p_bg)).mean()

    intersection = (p_fg * y_fg).sum()
    denom = p_fg.sum() + float(y.sum()) + EPS_DICE
    dice_loss = 1.0 - (2.0 * intersection) / denom
    return ce + dice_loss


def voxel_entropy(probs: Tensor) -> Tensor:
    """Per-voxel entropy in bits: -sum_c p(c) * log2(p(c) + eps)."""
    _check_prob_field(probs, "voxel_entropy")
    total = None
    for c in range(N_CLASSES):
        p_c = ad.select(probs, 0, c)
        term = p_c * ad.log2(p_c + EPS_ENTROPY)
        total = term if total is None else total + term
    return -total


def build_pseudo_mask(probs: Tensor, keep_quantile: float = 0.8) -> PseudoLabelMask:
    """Pseudo-labels with the highest-entropy tail marked IGNORE.

    The threshold tau is the keep_quantile linear-interpolation quantile of
    all voxel entropies of this prediction; voxels with entropy <= tau keep
    their argmax label (ties at tau are kept, so a constant-entropy field
    yields a full mask).
    """
    if not 0.0 < keep_quantile <= 1.0:
        raise ValueError(f"keep_quantile must lie in (0, 1], got {keep_quantile}")
    if probs.data.size == 0:
        raise ValueError("build_pseudo_mask: empty prediction")
    with ad.no_grad():
        ent = voxel_entropy(probs).data
    tau = float(np.quantile(ent.ravel(), keep_quantile))
    argmax = np.argmax(probs.data, axis=0).astype(np.int64)
    keep = ent <= tau
    labels = np.where(keep, argmax, IGNORE)
    return PseudoLabelMask(labels=labels, argmax=argmax, valid_count=int(keep.sum()), tau=tau)


def pseudo_supervised_loss(logits: Tensor, mask: PseudoLabelMask) -> Tensor:
    """Cross-entropy against pseudo-labels, averaged over non-IGNORE voxels."""
    if logits.shape[0] != N_CLASSES:
        raise ad.ShapeError(f"pseudo_supervised_loss expects {N_CLASSES} channels, got {logits.shape}")
    if logits.shape[1:] != mask.labels.shape:
        raise ad.ShapeError(f"logits spatial shape {logits.shape[1:]} != mask shape {mask.labels.shape}")
    if mask.valid_count == 0:
        return Tensor(0.0)
    probs = ad.softmax(logits, 0)
    ce_sum = None
    for c in range(N_CLASSES):
        sel = (mask.labels == c).astype(np.float64)
        term = Tensor(sel) * ad.ln(ad.select(probs, 0, c))
        ce_sum = term if ce_sum is None else ce_sum + term
    return -(ce_sum.sum()) / float(mask.valid_count)


def consistency_regularization(probs_s: Tensor, probs_t: Tensor) -> Tensor:
    """One minus cosine similarity of two flattened prediction fields."""
    if probs_s.data.ndim != 1 or probs_t.data.ndim != 1:
        raise ad.ShapeError("consistency_regularization expects flattened 1-d inputs, "
                            f"got {probs_s.shape} and {probs_t.shape}")
    if probs_s.shape != probs_t.shape:
        raise ad.ShapeError(f"consistency_regularization: shapes {probs_s.shape} != {probs_t.shape}")
    if np.linalg.norm(probs_s.data) < ad.EPS_NUM or np.linalg.norm(probs_t.data) < ad.EPS_NUM:
        raise ValueError("consistency_regularization: zero-norm input")
    dot = (probs_s * probs_t).sum()
    norm_s = ad.sqrt((probs_s * probs_s).sum())
    norm_t = ad.sqrt((probs_t * probs_t).sum())
    return 1.0 - dot / (norm_s * norm_t)


def kl_divergence(probs_s: Tensor, probs_t: Tensor) -> Tensor:
    """Per-voxel KL(teacher || student) in nats."""
    if probs_s.shape != probs_t.shape:
        raise ad.ShapeError(f"kl_divergence: shapes {probs_s.shape} != {probs_t.shape}")
    _check_prob_field(probs_s, "kl_divergence(student)")
    _check_prob_field(probs_t, "kl_divergence(teacher)")
    total = None
    for c in range(N_CLASSES):
        pt_c = ad.select(probs_t, 0, c)
        ps_c = ad.select(probs_s, 0, c)
        term = pt_c * (ad.ln(pt_c) - ad.ln(ps_c))
        total = term if total is None else total + term
    return total


def uncertainty_weighted_loss(logits_s: Tensor, logits_t: Tensor, temperature: float = 0.5) -> Tensor:
    """Distillation against the temperature-sharpened teacher, weighted per
    voxel by exp(-KL) and augmented with the KL itself.

    The sharpened teacher distribution is a constant target: no gradient
    flows into logits_t.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if logits_s.shape != logits_t.shape:
        raise ad.ShapeError(f"uncertainty_weighted_loss: shapes {logits_s.shape} != {logits_t.shape}")
    probs_s = ad.softmax(logits_s, 0)
    with ad.no_grad():
        target = ad.softmax(ad.mul(logits_t, 1.0 / temperature), 0).detach()
        probs_t = ad.softmax(logits_t, 0).detach()

    ce_map = None
    for c in range(N_CLASSES):
        term = ad.select(target, 0, c) * ad.ln(ad.select(probs_s, 0, c))
        ce_map = term if ce_map is None else ce_map + term
    ce_map = -ce_map

    kl_map = kl_divergence(probs_s, probs_t)
    weighted = ad.exp(-kl_map) * ce_map + kl_map
    return weighted.mean()


def _normalized_embeddings(features: Tensor) -> tuple[Tensor, int]:
    """Flatten [F, *spatial] to [F, N] and L2-normalize each voxel column."""
    n_feat = features.shape[0]
    f = features if features.data.ndim == 2 else features.reshape((n_feat, features.size // n_feat))
    n_vox = f.shape[1]
    sq_norm = (f * f).sum(axes=0).reshape((1, n_vox))
    inv = ad.repeat(ad.sqrt(sq_norm), 0, f.shape[0])
    return f / inv, n_vox


def compute_prototypes(features: Tensor, mask: PseudoLabelMask) -> PrototypeSet:
    """Mean normalized embedding over reliable voxels, per class."""
    spatial = features.shape[1:]
    if int(np.prod(spatial)) != mask.labels.size:
        raise ad.ShapeError(f"features spatial shape {spatial} does not match mask shape {mask.labels.shape}")
    f_hat, _ = _normalized_embeddings(features)
    flat_labels = mask.labels.reshape(-1)

    protos = []
    supports = []
    for cls in (1, 0):  # foreground first
        sel = (flat_labels == cls).astype(np.float64)
        support = int(sel.sum())
        supports.append(support)
        if support == 0:
            protos.append(None)
            continue
        sel_rep = ad.repeat(Tensor(sel.reshape(1, -1)), 0, features.shape[0])
        protos.append((f_hat * sel_rep).sum(axes=1) / float(support))
    return PrototypeSet(foreground=protos[0], background=protos[1],
                        fg_support=supports[0], bg_support=supports[1])


CONTRASTIVE_MODES = ("paper-literal", "prose-consistent")


def contrastive_loss(features: Tensor, mask: PseudoLabelMask, prototypes: PrototypeSet,
                     mode: str = "paper-literal") -> Tensor:
    """Prototype alignment loss over the uncertain (IGNORE) voxels.

    paper-literal: mean over uncertain voxels of
        d(f(v), c_fg) + d(f(v), c_bg) + d(c_fg, c_bg).
    prose-consistent: mean over uncertain voxels of
        max(0, d(f(v), c_assigned) - d(f(v), c_other) - d(c_fg, c_bg)),
    where c_assigned is the prototype of the voxel's argmax class. Distances
    are squared Euclidean on L2-normalized embeddings. Returns zero when
    either prototype is invalid or no voxel is uncertain.
    """
    if mode not in CONTRASTIVE_MODES:
        raise ValueError(f"unknown contrastive mode {mode!r}; expected one of {CONTRASTIVE_MODES}")
    if not prototypes.both_valid:
        return Tensor(0.0)
    uncertain = (mask.labels.reshape(-1) == IGNORE).astype(np.float64)
    n_unc = int(uncertain.sum())
    if n_unc == 0:
        return Tensor(0.0)

    f_hat, n_vox = _normalized_embeddings(features)
    n_feat = f_hat.shape[0]
    if n_vox != uncertain.size:
        raise ad.ShapeError(f"features voxel count {n_vox} != mask size {uncertain.size}")

    def dist_to(proto: Tensor) -> Tensor:
        rep = ad.repeat(proto.reshape((n_feat, 1)), 1, n_vox)
        diff = f_hat - rep
        return (diff * diff).sum(axes=0)

    d_fg = dist_to(prototypes.foreground)
    d_bg = dist_to(prototypes.background)
    gap = prototypes.foreground - prototypes.background
    d_proto = (gap * gap).sum()
    unc = Tensor(uncertain)

    if mode == "paper-literal":
        per_voxel = d_fg + d_bg
        return (per_voxel * unc).sum() / float(n_unc) + d_proto
    is_fg = Tensor((mask.argmax.reshape(-1) == 1).astype(np.float64))
    is_bg = Tensor((mask.argmax.reshape(-1) == 0).astype(np.float64))
    d_assigned = d_fg * is_fg + d_bg * is_bg
    d_other = d_fg * is_bg + d_bg * is_fg
    d_proto_rep = ad.repeat(d_proto.reshape((1,)), 0, n_vox)
    per_voxel = ad.clamp_min(d_assigned - d_other - d_proto_rep, 0.0)
    return (per_voxel * unc).sum() / float(n_unc)


def lambda_schedule(t: int, t_max: int) -> float:
    """Self-group weight 0.1 * exp(4 * (1 - t/t_max)^2)."""
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if not 0 <= t <= t_max:
        raise ValueError(f"iteration {t} outside [0, {t_max}]")
    return 0.1 * float(np.exp(4.0 * (1.0 - t / t_max) ** 2))


def total_loss(sup_student: Tensor, sup_teacher: Tensor,
               unsup_student: Tensor, unsup_teacher: Tensor,
               consistency: Tensor, uncertainty: Tensor, contrastive: Tensor,
               lambda_c: float,
               valid_frac_student: float = 0.0,
               valid_frac_teacher: float = 0.0) -> tuple[LossReport, Tensor]:
    """Compose the objective and record every component.

    total = sup_s + sup_t + lambda_c * (contrastive + consistency +
    uncertainty) + unsup_s + unsup_t. Raises NonFiniteLossError naming the
    first non-finite component.
    """
    components = {
        "sup_student": sup_student,
        "sup_teacher": sup_teacher,
        "unsup_student": unsup_student,
        "unsup_teacher": unsup_teacher,
        "consistency": consistency,
        "uncertainty": uncertainty,
        "contrastive": contrastive,
    }
    values = {}
    for name, tensor in components.items():
        v = tensor.item()
        if not np.isfinite(v):
            raise NonFiniteLossError(f"loss component {name!r} is non-finite ({v}); "
                                     f"components so far: {values}")
        values[name] = v
    if not np.isfinite(lambda_c):
        raise NonFiniteLossError(f"lambda_c is non-finite ({lambda_c})")

    self_group = contrastive + consistency + uncertainty
    total = sup_student + sup_teacher + self_group * lambda_c + unsup_student + unsup_teacher
    report = LossReport(
        sup_student=values["sup_student"],
        sup_teacher=values["sup_teacher"],
        unsup_student=values["unsup_student"],
        unsup_teacher=values["unsup_teacher"],
        consistency=values["consistency"],
        uncertainty=values["uncertainty"],
        contrastive=values["contrastive"],
        lambda_c=lambda_c,
        total=total.item(),
        valid_frac_student=valid_frac_student,
        valid_frac_teacher=valid_frac_teacher,
    )
    return report, total
