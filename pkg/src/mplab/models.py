"""Meta Pattern extractor, two-stream hierarchical fusion network and the LBP baseline map."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import layers as L
from .tensor import Tensor, add, concat, default_dtype

EXTRACTOR_VARIANTS = ("CONV1", "CONV2", "CONV3", "CDC1", "CDC2", "CDC3")
FUSION_MODES = ("hfm", "concat")


class ParameterSet:
    """Named trainable tensors plus non-trainable buffers (BatchNorm statistics)."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=default_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=default_dtype())
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @contextlib.contextmanager
    def frozen(self) -> Iterator["ParameterSet"]:
        """Temporarily stop gradients from reaching these parameters."""
        saved = {k: t.requires_grad for k, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.params.items():
                t.requires_grad = saved[k]

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed ``param/<name>`` / ``buffer/<name>``."""
        out = {f"param/{k}": t.data.copy() for k, t in self.params.items()}
        out.update({f"buffer/{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                t = self.params[name]
                if arr.shape != t.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
                t.data = np.array(arr, dtype=t.dtype)
            elif kind == "buffer":
                buf = self.buffers[name]
                buf[...] = arr
            else:
                raise KeyError(f"unknown state key {key!r}")

    def equal(self, other: "ParameterSet") -> bool:
        """Bitwise equality of parameters and buffers."""
        a, b = self.state(), other.state()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    # Layer views -----------------------------------------------------------

    def conv(self, name: str, stride: int = 1, padding: int = 0, cdc_theta: float = 0.0) -> L.ConvParams:
        bias = self.params.get(f"{name}.bias")
        return L.ConvParams(self.params[f"{name}.weight"], bias, stride, padding, cdc_theta)

    def bn(self, name: str, training: bool, update_stats: bool = True) -> L.BatchNormParams:
        return L.BatchNormParams(
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=training,
            update_stats=update_stats,
        )

    # Initializers ----------------------------------------------------------

    def init_conv(self, rng: np.random.Generator, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.add(f"{name}.weight", rng.standard_normal((cout, cin, k, k)) * std)
        if bias:
            self.add(f"{name}.bias", np.zeros(cout))

    def init_bn(self, name: str, channels: int) -> None:
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))
        self.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.add_buffer(f"{name}.running_var", np.ones(channels))

    def init_linear(self, rng: np.random.Generator, name: str, fin: int, fout: int) -> None:
        self.add(f"{name}.weight", rng.standard_normal((fin, fout)) * np.sqrt(1.0 / fin))
        self.add(f"{name}.bias", np.zeros(fout))


# ---------------------------------------------------------------------------
# Meta Pattern extractor
# ---------------------------------------------------------------------------


@dataclass
class ExtractorSpec:
    variant: str = "CONV2"
    hidden_channels: int = 16
    cdc_theta: float = L.DEFAULT_CDC_THETA
    # Adds a BatchNorm between the last convolution and the sigmoid.
    second_bn: bool = False

    def __post_init__(self) -> None:
        self.variant = str(self.variant).upper()
        if self.variant not in EXTRACTOR_VARIANTS:
            raise ValueError(f"unknown extractor variant {self.variant!r}; expected one of {EXTRACTOR_VARIANTS}")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be positive")
        if not 0.0 <= self.cdc_theta <= 1.0:
            raise ValueError(f"cdc_theta must lie in [0, 1], got {self.cdc_theta}")

    @property
    def depth(self) -> int:
        return int(self.variant[-1])

    @property
    def uses_cdc(self) -> bool:
        return self.variant.startswith("CDC")


class MetaPatternExtractor:
    """Shallow 3x3 conv net mapping an RGB image to a same-size 3-channel pattern in (0, 1).

    Layout for depth d: (conv-BN-ReLU) x (d-1), then a final conv and a sigmoid.
    """

    def __init__(self, spec: ExtractorSpec, params: ParameterSet) -> None:
        self.spec = spec
        self.params = params

    def __call__(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"extractor expects (N,3,H,W) images, got {x.shape}")
        theta = self.spec.cdc_theta if self.spec.uses_cdc else 0.0
        h = x
        d = self.spec.depth
        for i in range(d):
            h = L.conv2d(h, self.params.conv(f"conv{i}", 1, 1, theta))
            if i < d - 1:
                h = L.relu(L.batchnorm(h, self.params.bn(f"bn{i}", training, update_stats)))
        if self.spec.second_bn:
            h = L.batchnorm(h, self.params.bn(f"bn{d - 1}", training, update_stats))
        return L.sigmoid(h)


def build_extractor(spec: ExtractorSpec, rng: np.random.Generator) -> MetaPatternExtractor:
    ps = ParameterSet()
    d, hdim = spec.depth, spec.hidden_channels
    chans = [3] + [hdim] * (d - 1) + [3]
    for i in range(d):
        ps.init_conv(rng, f"conv{i}", chans[i], chans[i + 1], 3)
        if i < d - 1:
            ps.init_bn(f"bn{i}", chans[i + 1])
    if spec.second_bn:
        ps.init_bn(f"bn{d - 1}", 3)
    return MetaPatternExtractor(spec, ps)


def extract_pattern(phi: MetaPatternExtractor, x, training: bool = False, update_stats: bool = False) -> Tensor:
    """Run the extractor; ``x`` may be an array or tensor with values in [0, 1]."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))
    return phi(x, training=training, update_stats=update_stats)


# ---------------------------------------------------------------------------
# Hierarchical Fusion Network
# ---------------------------------------------------------------------------


@dataclass
class HfnSpec:
    """Two-stream residual backbone plus fusion head.

    Each stream: stride-``stem_stride`` 3x3 conv, BN, ReLU, ``stem_pool`` average
    pooling, then one residual stage per entry of ``channels``. The three stage
    outputs feed the fusion hierarchies (deepest first).
    """

    stem_channels: int = 16
    stem_stride: int = 2
    stem_pool: int = 2
    channels: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    strides: tuple = (2, 2, 2)
    fusion_mode: str = "hfm"
    fusion_width: int = 64
    pixel_map_size: int = 8
    input_size: int = 64

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.strides = tuple(int(s) for s in self.strides)
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if not (len(self.channels) == len(self.blocks) == len(self.strides) == 3):
            raise ValueError("the backbone needs exactly three stages (one per fusion hierarchy)")
        sizes = self.stage_sizes()
        if sizes[0] != self.pixel_map_size:
            raise ValueError(
                f"shallowest fused stage is {sizes[0]}x{sizes[0]} but pixel_map_size is {self.pixel_map_size}"
            )

    def stage_sizes(self) -> list[int]:
        """Spatial size of each stage output (shallowest first)."""
        size, out = self.input_size, []
        for i, div in enumerate((self.stem_stride, self.stem_pool, *self.strides)):
            if div < 1 or size % div:
                raise ValueError(f"input_size {self.input_size} is not divisible by the stride plan")
            size //= div
            if i >= 2:
                out.append(size)
        return out

    @classmethod
    def full_scale(cls, **overrides) -> "HfnSpec":
        """ResNet-50-like widths at 256x256 input (32x32 pixel map)."""
        cfg = dict(stem_channels=64, channels=(512, 1024, 2048), blocks=(4, 6, 3), fusion_width=256,
                   input_size=256, pixel_map_size=32)
        cfg.update(overrides)
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channels", "blocks", "strides"):
            d[k] = list(d[k])
        return d


@dataclass
class Prediction:
    s: Tensor  # (N, 2) class probabilities (spoof, genuine)
    m: Tensor  # (N, 1, P, P) pixel map in [0, 1]


@dataclass
class HfmAlign:
    top: L.ConvParams
    bottom: L.ConvParams
    prev: Optional[L.ConvParams] = None


def hfm_fuse(m_t: Tensor, m_b: Tensor, m_prev, align: HfmAlign) -> Tensor:
    """One fusion hierarchy: ``C(m_t) + C(m_b) + U(C(m_prev))``.

    ``m_prev`` of ``None`` or ``0`` is the zero sentinel of the first
    hierarchy; the third term is then omitted.
    """
    if m_t.shape != m_b.shape:
        raise ValueError(f"stream maps differ in shape: {m_t.shape} vs {m_b.shape}")
    out = add(L.conv2d(m_t, align.top), L.conv2d(m_b, align.bottom))
    if m_prev is None or (not isinstance(m_prev, Tensor) and m_prev == 0):
        return out
    if align.prev is None:
        raise ValueError("a previous fusion map was given without its alignment conv")
    c = L.conv2d(m_prev, align.prev)
    fh, rh = divmod(out.shape[2], c.shape[2])
    fw, rw = divmod(out.shape[3], c.shape[3])
    if rh or rw or fh != fw:
        raise ValueError(f"cannot upsample {c.shape[2:]} to {out.shape[2:]} by an integer factor")
    return add(out, L.upsample_nearest(c, fh))


class HierarchicalFusionNetwork:
    """Two identical residual streams (RGB and pattern) with hierarchical fusion."""

    def __init__(self, spec: HfnSpec, params: ParameterSet) -> None:
        self.spec = spec
        self.params = params

    def _stream(self, prefix: str, x: Tensor, training: bool, update: bool) -> list[Tensor]:
        sp, ps = self.spec, self.params
        h = L.conv2d(x, ps.conv(f"{prefix}.stem.conv", sp.stem_stride, 1))
        h = L.relu(L.batchnorm(h, ps.bn(f"{prefix}.stem.bn", training, update)))
        if sp.stem_pool > 1:
            h = L.avg_pool2d(h, sp.stem_pool)
        feats = []
        for si, (stride, nblocks) in enumerate(zip(sp.strides, sp.blocks)):
            for bi in range(nblocks):
                name = f"{prefix}.s{si}.b{bi}"
                st = stride if bi == 0 else 1
                main = L.conv2d(h, ps.conv(f"{name}.conv1", st, 1))
                main = L.relu(L.batchnorm(main, ps.bn(f"{name}.bn1", training, update)))
                main = L.conv2d(main, ps.conv(f"{name}.conv2", 1, 1))
                main = L.batchnorm(main, ps.bn(f"{name}.bn2", training, update))
                if f"{name}.proj.weight" in ps:
                    short = L.conv2d(h, ps.conv(f"{name}.proj", st, 0))
                    short = L.batchnorm(short, ps.bn(f"{name}.proj_bn", training, update))
                else:
                    short = h
                h = L.relu(add(main, short))
            feats.append(h)
        return feats

    def fuse(self, ft: Sequence[Tensor], fb: Sequence[Tensor]) -> Tensor:
        ps = self.params
        if self.spec.fusion_mode == "hfm":
            m = None
            for i, level in enumerate(reversed(range(len(ft))), start=1):
                align = HfmAlign(ps.conv(f"hfm{i}.top"), ps.conv(f"hfm{i}.bottom"),
                                 ps.conv(f"hfm{i}.prev") if i > 1 else None)
                m = hfm_fuse(ft[level], fb[level], m, align)
            return m
        target = ft[0].shape[2]
        maps = []
        for a, b in zip(ft, fb):
            f = target // a.shape[2]
            maps.extend([L.upsample_nearest(a, f), L.upsample_nearest(b, f)])
        return L.conv2d(concat(maps, axis=1), ps.conv("concat.align"))

    def __call__(self, x: Tensor, mp: Tensor, training: bool = True, update_stats: bool = True) -> Prediction:
        if x.shape != mp.shape:
            raise ValueError(f"image and pattern shapes differ: {x.shape} vs {mp.shape}")
        ft = self._stream("rgb", x, training, update_stats)
        fb = self._stream("mp", mp, training, update_stats)
        fused = self.fuse(ft, fb)
        m = L.sigmoid(L.conv2d(fused, self.params.conv("head.pixel")))
        pooled = concat([L.global_avg_pool(ft[-1]), L.global_avg_pool(fb[-1])], axis=1)
        logits = L.linear(pooled, self.params["head.fc.weight"], self.params["head.fc.bias"])
        return Prediction(L.softmax(logits), m)


def build_hfn(spec: HfnSpec, rng: np.random.Generator) -> HierarchicalFusionNetwork:
    ps = ParameterSet()
    for prefix in ("rgb", "mp"):
        ps.init_conv(rng, f"{prefix}.stem.conv", 3, spec.stem_channels, 3, bias=False)
        ps.init_bn(f"{prefix}.stem.bn", spec.stem_channels)
        cin = spec.stem_channels
        for si, (cout, nblocks, stride) in enumerate(zip(spec.channels, spec.blocks, spec.strides)):
            for bi in range(nblocks):
                name = f"{prefix}.s{si}.b{bi}"
                st = stride if bi == 0 else 1
                ps.init_conv(rng, f"{name}.conv1", cin, cout, 3, bias=False)
                ps.init_bn(f"{name}.bn1", cout)
                ps.init_conv(rng, f"{name}.conv2", cout, cout, 3, bias=False)
                ps.init_bn(f"{name}.bn2", cout)
                if st != 1 or cin != cout:
                    ps.init_conv(rng, f"{name}.proj", cin, cout, 1, bias=False)
                    ps.init_bn(f"{name}.proj_bn", cout)
                cin = cout
    fw = spec.fusion_width
    if spec.fusion_mode == "hfm":
        for i, level in enumerate(reversed(range(3)), start=1):
            c = spec.channels[level]
            ps.init_conv(rng, f"hfm{i}.top", c, fw, 1)
            ps.init_conv(rng, f"hfm{i}.bottom", c, fw, 1)
            if i > 1:
                ps.init_conv(rng, f"hfm{i}.prev", fw, fw, 1)
    else:
        ps.init_conv(rng, "concat.align", 2 * sum(spec.channels), fw, 1)
    ps.init_conv(rng, "head.pixel", fw, 1, 1)
    ps.init_linear(rng, "head.fc", 2 * spec.channels[-1], 2)
    return HierarchicalFusionNetwork(spec, ps)


def hfn_forward(theta: HierarchicalFusionNetwork, x: Tensor, mp: Tensor, training: bool = False) -> Prediction:
    return theta(x, mp, training=training, update_stats=training)


def compute_loss(pred: Prediction, labels) -> Tensor:
    """Classification cross-entropy plus pixel-map MSE against a constant 0/1 map."""
    lab = np.asarray(labels)
    bce = L.bce_loss(pred.s, lab)
    target = np.broadcast_to(lab.astype(pred.m.dtype).reshape(-1, 1, 1, 1), pred.m.shape)
    return add(bce, L.mse_loss(pred.m, np.ascontiguousarray(target)))


# ---------------------------------------------------------------------------
# ColorLBP baseline
# ---------------------------------------------------------------------------

# Neighbour offsets (dy, dx) clockwise from the top-left; neighbour k sets bit k.
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def color_lbp_map(x) -> np.ndarray:
    """Per-channel 8-neighbour, radius-1 LBP codes scaled to [0, 1].

    A neighbour sets its bit when it is >= the centre pixel; borders use
    edge replication. Returns an array shaped like the input.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"color_lbp_map expects (N,C,H,W), got {arr.shape}")
    H, W = arr.shape[2:]
    if H < 3 or W < 3:
        raise ValueError(f"image must be at least 3x3 for LBP, got {H}x{W}")
    padded = np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    code = np.zeros(arr.shape, dtype=np.int32)
    for k, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = padded[:, :, 1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        code |= (nb >= arr).astype(np.int32) << k
    return (code / 255.0).astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else default_dtype())
