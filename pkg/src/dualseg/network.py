"""Two small, architecturally distinct 3D encoder-decoders.

Both networks share the same encoder-decoder skeleton: stride-2
convolutions halve the grid once per level, nearest-neighbor upsampling plus
convolution restores it, and skip connections concatenate same-resolution
encoder features. The teacher additionally wraps an identity-residual
refinement convolution around every block, which is what makes the pair
heterogeneous (and gives the teacher more parameters). There is no
normalization layer, so forward passes are exactly differentiable; the
nonlinearity is a leaky rectifier with slope 0.01.

The final 1x1x1 classifier is zero-initialized: training starts from
maximal-entropy predictions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ioutil import atomic_write_bytes, atomic_write_text

LEAKY_SLOPE = 0.01
KERNEL = 3


@dataclass
class NetConfig:
    base_channels: int = 4
    levels: int = 3
    residual: bool = False
    in_channels: int = 1
    out_classes: int = 2
    feature_dim: int = 8

    def __post_init__(self):
        if self.out_classes != 2:
            raise ValueError(f"only binary segmentation is supported, got out_classes={self.out_classes}")
        if self.levels < 2:
            raise ValueError(f"need at least 2 resolution levels, got {self.levels}")
        if min(self.base_channels, self.in_channels, self.feature_dim) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.levels)]


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """One encoder-decoder stream; parameters live in an ordered name->Tensor map."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        enc = cfg.encoder_channels
        k3 = KERNEL ** 3

        def add_conv(name: str, c_in: int, c_out: int, zero: bool = False):
            if zero:
                w = np.zeros((c_out, c_in, KERNEL, KERNEL, KERNEL))
            else:
                w = _he_uniform(rng, (c_out, c_in, KERNEL, KERNEL, KERNEL), c_in * k3)
            self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

        c_prev = cfg.in_channels
        for l, c_out in enumerate(enc):
            add_conv(f"enc{l}.conv", c_prev, c_out)
            if cfg.residual:
                add_conv(f"enc{l}.res", c_out, c_out)
            c_prev = c_out
        c_up = enc[-1]
        for l in range(cfg.levels - 2, -1, -1):
            add_conv(f"dec{l}.conv", c_up + enc[l], cfg.feature_dim)
            if cfg.residual:
                add_conv(f"dec{l}.res", cfg.feature_dim, cfg.feature_dim)
            c_up = cfg.feature_dim
        w = np.zeros((cfg.out_classes, cfg.feature_dim, 1, 1, 1))
        self.params["cls.w"] = Tensor(w, requires_grad=True)
        self.params["cls.b"] = Tensor(np.zeros(cfg.out_classes), requires_grad=True)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _block(self, x: Tensor, name: str, stride: int) -> Tensor:
        h = ad.conv3d(x, self.params[f"{name}.conv.w"], self.params[f"{name}.conv.b"],
                      stride=stride, padding=1)
        h = ad.leaky_relu(h, LEAKY_SLOPE)
        if self.cfg.residual:
            r = ad.conv3d(h, self.params[f"{name}.res.w"], self.params[f"{name}.res.b"],
                          stride=1, padding=1)
            h = h + ad.leaky_relu(r, LEAKY_SLOPE)
        return h

    def forward(self, crop: Tensor) -> tuple[Tensor, Tensor]:
        """Map [1, X, Y, Z] to per-voxel logits [2, ...] and features [F, ...]."""
        if crop.data.ndim != 4 or crop.shape[0] != self.cfg.in_channels:
            raise ad.ShapeError(f"expected crop of shape [{self.cfg.in_channels}, X, Y, Z], got {crop.shape}")
        div = self.cfg.divisor
        if any(e % div != 0 or e < div for e in crop.shape[1:]):
            raise ad.ShapeError(f"spatial extents {crop.shape[1:]} must be positive multiples of {div}")

        skips = []
        h = crop
        for l in range(self.cfg.levels):
            h = self._block(h, f"enc{l}", stride=1 if l == 0 else 2)
            skips.append(h)
        for l in range(self.cfg.levels - 2, -1, -1):
            h = _upsample_nearest2(h)
            h = ad.concat([h, skips[l]], axis=0)
            h = self._block(h, f"dec{l}", stride=1)
        features = h
        logits = ad.conv3d(features, self.params["cls.w"], self.params["cls.b"], stride=1, padding=0)
        return logits, features

    def predict_logits(self, crop: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits, _ = self.forward(Tensor(crop))
        return logits.data

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def _upsample_nearest2(x: Tensor) -> Tensor:
    c, xx, yy, zz = x.shape
    t = x.reshape((c, xx, 1, yy, 1, zz, 1))
    t = ad.repeat(t, 2, 2)
    t = ad.repeat(t, 4, 2)
    t = ad.repeat(t, 6, 2)
    return t.reshape((c, 2 * xx, 2 * yy, 2 * zz))


@dataclass
class DualNet:
    student: Network
    teacher: Network

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, net in (("student", self.student), ("teacher", self.teacher)):
            for name, p in net.params.items():
                out[f"{prefix}.{name}"] = p
        return out


def build_dual(cfg_s: NetConfig, cfg_t: NetConfig, seed: int) -> DualNet:
    """Deterministically initialize the student/teacher pair from one seed."""
    ss = np.random.SeedSequence(seed)
    seed_s, seed_t = ss.spawn(2)
    return DualNet(student=Network(cfg_s, np.random.default_rng(seed_s)),
                   teacher=Network(cfg_t, np.random.default_rng(seed_t)))


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON manifest + raw little-endian f64 payload


def save_checkpoint(dual: DualNet, path_base: Path | str):
    """Write <base>.json (manifest) and <base>.bin (parameter payload)."""
    path_base = Path(path_base)
    named = dual.named_parameters()
    manifest = {
        "dtype": "f64le",
        "student_config": asdict(dual.student.cfg),
        "teacher_config": asdict(dual.teacher.cfg),
        "tensors": [{"name": name, "shape": list(p.shape)} for name, p in named.items()],
    }
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in named.values())
    atomic_write_text(path_base.with_suffix(".json"), json.dumps(manifest, indent=1))
    atomic_write_bytes(path_base.with_suffix(".bin"), payload)


def load_checkpoint(path_base: Path | str) -> DualNet:
    path_base = Path(path_base)
    manifest = json.loads(path_base.with_suffix(".json").read_text())
    if manifest.get("dtype") != "f64le":
        raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    cfg_s = NetConfig(**manifest["student_config"])
    cfg_t = NetConfig(**manifest["teacher_config"])
    dual = build_dual(cfg_s, cfg_t, seed=0)
    named = dual.named_parameters()
    raw = path_base.with_suffix(".bin").read_bytes()
    expected = sum(int(np.prod(t["shape"])) for t in manifest["tensors"]) * 8
    if len(raw) != expected:
        raise ValueError(f"checkpoint payload is {len(raw)} bytes, manifest implies {expected}")
    offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named:
            raise ValueError(f"checkpoint names unknown parameter {name!r}")
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        if named[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {named[name].shape}, checkpoint has {shape}")
        named[name].data = arr.astype(np.float64)
        offset += n * 8
    return dual
