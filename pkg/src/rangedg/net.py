"""Dual-branch segmentation network, loss assembly, optimiser and training loop."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import gas as G
from . import kernels as K
from . import rdc as R
from .projection import IGNORE_ID

log = logging.getLogger(__name__)


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named purpose, e.g. ``rng_stream(s, "shuffle", epoch)``."""
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn)))


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    widths: tuple[int, int, int] | None = None  # encoder widths, default (C, 2C, 4C)
    num_classes: int = 5
    ignore_id: int = IGNORE_ID
    slope: float = 0.1
    split_stems: bool = True
    use_ref_branch: bool = True
    use_gas: bool = True
    use_rdc: bool = True
    apply_gas_weight_in_training: bool = True
    gas_loss_weight: float = 1.0
    rdc_loss_weight: float = 1.0
    gas: G.GasConfig = field(default_factory=G.GasConfig)
    rdc: R.RdcConfig = field(default_factory=R.RdcConfig)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.split_stems and (self.use_gas or self.use_rdc):
            raise ValueError("GAS and RDC need split stems")
        if not self.use_ref_branch and self.use_rdc:
            raise ValueError("RDC needs the reflectance branch")

    @property
    def encoder_widths(self) -> tuple[int, int, int]:
        c = self.channels
        return tuple(self.widths) if self.widths else (c, 2 * c, 4 * c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths) if self.widths else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["gas"] = G.GasConfig(**d.get("gas", {}))
        d["rdc"] = R.RdcConfig(**d.get("rdc", {}))
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        """Merged single stem over all five planes; no GAS, no RDC."""
        return cls(split_stems=False, use_gas=False, use_rdc=False, **kw)


@dataclass
class Batch:
    geo: np.ndarray  # N x 4 x H x W
    ref: np.ndarray  # N x 1 x H x W
    mask: np.ndarray  # N x H x W
    labels: np.ndarray | None = None  # N x H x W, ignore id on invalid pixels
    ids: tuple = ()

    def astype(self, dtype) -> "Batch":
        return replace(self, geo=self.geo.astype(dtype), ref=self.ref.astype(dtype))


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Model:
    """Parameters plus a hand-written forward/backward for one fixed graph."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, K.ParamTensor] = {}
        rng = rng_stream(seed, "init")
        c = cfg.channels
        if cfg.split_stems:
            self._add_stem("stem_g", 4, rng)
            if cfg.use_ref_branch:
                self._add_stem("stem_r", 1, rng)
            self.params.update(G.init_gas_params(c, cfg.gas, rng, self.dtype))
            if cfg.use_ref_branch:
                self.params["rdc.memory"] = K.ParamTensor(
                    R.init_memory(cfg.rdc.memory_size, c, rng, self.dtype), "memory")
        else:
            self._add_stem("stem_m", 5, rng)
        w0, w1, w2 = cfg.encoder_widths
        for name, cin, cout in [("bb.enc0", c, w0), ("bb.down1", w0, w1), ("bb.enc1", w1, w1),
                                ("bb.down2", w1, w2), ("bb.mid", w2, w2), ("bb.up1", w2, w1),
                                ("bb.up2", w1, w0)]:
            self._add_conv(name, cin, cout, rng)
        self.params["head.w"] = K.ParamTensor(_he(rng, (cfg.num_classes, w0), w0, self.dtype))
        self.params["head.b"] = K.ParamTensor(np.zeros(cfg.num_classes, self.dtype), "bias")

    def _add_conv(self, name, cin, cout, rng):
        self.params[f"{name}.w"] = K.ParamTensor(_he(rng, (cout, cin, 3, 3), 9 * cin, self.dtype))
        self.params[f"{name}.b"] = K.ParamTensor(np.zeros(cout, self.dtype), "bias")

    def _add_stem(self, name, cin, rng):
        self._add_conv(f"{name}.0", cin, self.cfg.channels, rng)
        self._add_conv(f"{name}.1", self.cfg.channels, self.cfg.channels, rng)

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        other = Model.__new__(Model)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.params = {k: K.ParamTensor(p.value.astype(dtype), p.role) for k, p in self.params.items()}
        return other

    # building blocks -------------------------------------------------------

    def _conv(self, name, x, stride=1, act=True):
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        out, cback = K.conv3x3(x, w.value, b.value, stride)
        aback = None
        if act:
            out, aback = K.leaky_relu(out, self.cfg.slope)

        def back(d):
            if aback is not None:
                d = aback(d)
            dx, dw, db = cback(d)
            w.grad += dw
            b.grad += db
            return dx

        return out, back

    def stem(self, name, x):
        h, b0 = self._conv(f"{name}.0", x)
        out, b1 = self._conv(f"{name}.1", h)
        return out, lambda d: b0(b1(d))

    def backbone(self, f):
        """Two stride-2 stages, bottleneck, two upsampling stages with skip sums, 1x1 head."""
        _, _, h, w = f.shape
        if h % 4 or w % 4:
            raise ValueError(f"backbone needs H and W divisible by 4, got {h}x{w}")
        s0, b0 = self._conv("bb.enc0", f)
        x, b1 = self._conv("bb.down1", s0, 2)
        s1, b2 = self._conv("bb.enc1", x)
        x, b3 = self._conv("bb.down2", s1, 2)
        x, b4 = self._conv("bb.mid", x)
        x, bu1 = K.upsample_nearest2(x)
        x, b5 = self._conv("bb.up1", x)
        x = x + s1
        x, bu2 = K.upsample_nearest2(x)
        x, b6 = self._conv("bb.up2", x)
        x = x + s0
        hw, hb = self.params["head.w"], self.params["head.b"]
        logits, bh = K.linear_pixelwise(x, hw.value, hb.value)

        def back(dlogits):
            d, dw, db = bh(dlogits)
            hw.grad += dw
            hb.grad += db
            ds0 = d
            d = bu2(b6(d))
            ds1 = d
            d = b4(bu1(b5(d)))
            d = b2(b3(d) + ds1)
            d = b1(d)
            return b0(d + ds0)

        return logits, back

    # full graph ------------------------------------------------------------

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None):
        """Logits, loss components (when labels are given) and a backward closure.

        ``train`` selects the training path: GAS loss with fresh noise, RDC with
        augmented retrieval. ``back()`` accumulates gradients of the total loss.
        """
        cfg = self.cfg
        mask = batch.mask
        if not mask.any():
            raise ValueError("batch has no valid pixels")
        losses = {"gas": 0.0, "sc": 0.0, "sa": 0.0}
        gas_weight = None
        geo_backs, ref_back, stem_back = [], None, None
        if train and rng is None:
            raise ValueError("training forward needs an rng")

        if cfg.split_stems:
            f_geo, g_stem = self.stem("stem_g", batch.geo)
            fused = f_geo
            gas_loss_back = None
            if cfg.use_gas:
                if train:
                    l_gas, gas_loss_back = G.gas_loss(f_geo, self._gas_params(), cfg.gas, rng, mask)
                    losses["gas"] = l_gas
                if not train or cfg.apply_gas_weight_in_training:
                    gas_weight, fused, wback = G.gas_weight(f_geo, self._gas_params(), cfg.gas, mask)
                    geo_backs.append(wback)
            if cfg.use_ref_branch:
                f_ref, r_stem = self.stem("stem_r", batch.ref)
                if cfg.use_rdc:
                    mem = self.params["rdc.memory"]
                    if train:
                        ab = (rng.random(f_ref.shape[:2]), rng.random(f_ref.shape[:2]))
                    else:
                        ab = (None, None)
                    f_hat, l_sc, l_sa, retrieval, rback = R.rdc_forward(f_ref, mem.value, mask, cfg.rdc, *ab)
                    self.last_retrieval = retrieval
                    if train:
                        losses["sc"], losses["sa"] = l_sc, l_sa
                else:
                    f_hat, rback = f_ref, None
                fused = fused + f_hat

                def ref_back(d):
                    if rback is not None:
                        w = cfg.rdc_loss_weight if train else 0.0
                        d, dmem = rback(d, w * cfg.rdc.sc_weight, w * cfg.rdc.sa_weight)
                        self.params["rdc.memory"].grad += dmem
                    r_stem(d)

            def stem_back(d):
                dgeo = d
                for b in geo_backs:
                    dgeo = b(dgeo)
                if gas_loss_back is not None:
                    dl = gas_loss_back(cfg.gas_loss_weight)
                    if not cfg.gas.stop_gradient:
                        dgeo = dgeo + dl
                g_stem(dgeo)
                if ref_back is not None:
                    ref_back(d)
        else:
            fused, m_stem = self.stem("stem_m", np.concatenate([batch.geo, batch.ref], axis=1))
            stem_back = m_stem

        logits, bb_back = self.backbone(fused)
        seg_back = None
        if batch.labels is not None:
            ignore = (batch.labels == cfg.ignore_id) | ~mask
            losses["seg"], seg_back = K.cross_entropy(logits, batch.labels, ignore)
            losses["rdc"] = losses["sc"] + losses["sa"]
            losses["total"] = (losses["seg"] + cfg.gas_loss_weight * losses["gas"]
                               + cfg.rdc_loss_weight * losses["rdc"])

        def back():
            if seg_back is None:
                raise ValueError("backward needs labels")
            stem_back(bb_back(seg_back(1.0)))

        self.last_gas_weight = gas_weight
        return logits, losses, back

    def _gas_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("gas.")}

    def predict(self, batch: Batch) -> np.ndarray:
        """Argmax class per pixel, never choosing the ignore class."""
        logits, _, _ = self.forward(replace(batch, labels=None))
        if 0 <= self.cfg.ignore_id < self.cfg.num_classes:
            logits = logits.copy()
            logits[:, self.cfg.ignore_id] = -np.inf
        return logits.argmax(axis=1)


def fuse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse feature maps of shapes {a.shape} and {b.shape}")
    return a + b


# optimisation ------------------------------------------------------------------


def onecycle_lr(step: int, total: int, peak: float, warmup_frac: float = 0.3,
                div_start: float = 25.0, div_end: float = 100.0) -> float:
    """Linear warm-up from ``peak/div_start`` to ``peak``, cosine decay to ``peak/div_end``."""
    if total <= 1:
        return peak
    last = total - 1
    top = warmup_frac * last
    start, end = peak / div_start, peak / div_end
    if step <= top:
        return start + (peak - start) * (step / top if top > 0 else 1.0)
    t = (step - top) / (last - top)
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


class AdamW:
    """Adam with decoupled weight decay on ``weight`` and ``memory`` tensors."""

    def __init__(self, params: dict[str, K.ParamTensor], weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if p.role != "bias" and self.wd:
                p.value -= (lr * self.wd) * p.value
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.0025
    weight_decay: float = 1e-4
    schedule: str = "onecycle"
    warmup_frac: float = 0.3
    seed: int = 0
    precision: str = "float32"
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.schedule not in ("onecycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


class NumericAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, ids, losses: dict):
        self.epoch, self.batch, self.ids, self.losses = epoch, batch, tuple(ids), dict(losses)
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (scenes {list(ids)}): {losses}")


@dataclass
class TrainResult:
    model: "Model"
    history: dict[str, list[float]]
    initial: dict[str, float]
    steps: int


def train(model: Model, data, cfg: TrainConfig, progress=None) -> TrainResult:
    """Optimise ``model`` in place on ``data`` (anything with ``len`` and
    ``batches(epoch, batch_size, rng, augment)``)."""
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(model.params, cfg.weight_decay)
    keys = ("total", "seg", "gas", "sc", "sa")
    history = {k: [] for k in keys}
    initial = {}
    step = 0
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(keys, 0.0)
        shuffle = rng_stream(cfg.seed, "shuffle", epoch)
        for bi, batch in enumerate(data.batches(epoch, cfg.batch_size, shuffle, cfg.augment)):
            batch = batch.astype(model.dtype)
            noise = rng_stream(cfg.seed, "noise", epoch, bi)
            model.zero_grad()
            _, losses, back = model.forward(batch, train=True, rng=noise)
            if not all(math.isfinite(losses[k]) for k in keys):
                raise NumericAbort(epoch, bi, batch.ids, {k: losses[k] for k in keys})
            if step == 0:
                initial = {k: float(losses[k]) for k in keys}
            back()
            lr = cfg.lr if cfg.schedule == "constant" else onecycle_lr(step, total, cfg.lr, cfg.warmup_frac)
            opt.step(lr)
            for k in keys:
                sums[k] += losses[k]
            step += 1
        n = max(bi + 1, 1)
        for k in keys:
            history[k].append(sums[k] / n)
        log.info("epoch %d/%d loss %.4f seg %.4f", epoch + 1, cfg.epochs, history["total"][-1], history["seg"][-1])
        if progress:
            progress(epoch, history)
    return TrainResult(model, history, initial, step)


def param_names_by_module(model: Model) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for name in model.params:
        out.setdefault(name.split(".")[0], []).append(name)
    return out


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
