"""DVMSR network: shallow conv, stacked residual state-space blocks, HConv,
global residual and pixel-shuffle reconstruction.

Weights are a flat ``dict`` of named :class:`~dvmsr.autodiff.Tensor` objects.
Names and shapes follow from :class:`ModelConfig` alone, through
:func:`param_specs`; :func:`build_model` only fills them in.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import functional as F
from .autodiff import Tensor, exp, flip, neg
from .functional import ConfigError
from .ssm import init_dt_bias, s4d_real_A, selective_scan_op

__all__ = [
    "ModelConfig",
    "DvmsrWeights",
    "ParamSpec",
    "PRESETS",
    "preset",
    "param_specs",
    "build_model",
    "vimm_forward",
    "rssb_forward",
    "dvmsr_forward",
    "dvmsr_features",
    "tokens_from_image",
    "image_from_tokens",
]

DvmsrWeights = dict  # name -> Tensor

UPSAMPLERS = ("direct", "classical")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``vimm_per_rssb`` is either one count shared by all blocks or a per-block
    sequence such as ``(2, 2, 9, 2)``.  ``upsampler="direct"`` is one 3x3 conv
    to ``3 r^2`` channels plus a pixel shuffle; ``"classical"`` is the
    conv(C -> num_feat) + LeakyReLU + x2/x3 shuffle stages + conv(num_feat -> 3)
    head used for the classical-SR ablations.
    """

    n_rssb: int = 4
    vimm_per_rssb: int | tuple[int, ...] = 2
    channels: int = 60
    scale: int = 4
    expand: float = 2.0
    n_state: int = 16
    d_conv: int = 4
    dt_rank: int | str = "auto"
    bidirectional: bool = False
    upsampler: str = "direct"
    num_feat: int = 64
    in_channels: int = 3
    proj_bias: bool = False
    d_skip: bool = True
    x1_activation: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.vimm_per_rssb, list):
            object.__setattr__(self, "vimm_per_rssb", tuple(self.vimm_per_rssb))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.n_rssb < 1:
            problems.append(f"n_rssb must be >= 1 (got {self.n_rssb})")
        counts = self.vimm_per_rssb
        if isinstance(counts, tuple):
            if len(counts) != self.n_rssb:
                problems.append(
                    f"vimm_per_rssb has {len(counts)} entries for {self.n_rssb} blocks"
                )
            if any(int(c) < 1 for c in counts):
                problems.append("every vimm_per_rssb entry must be >= 1")
        elif int(counts) < 1:
            problems.append(f"vimm_per_rssb must be >= 1 (got {counts})")
        if self.channels < 1:
            problems.append(f"channels must be >= 1 (got {self.channels})")
        inner = self.expand * self.channels
        if self.expand < 1 or abs(inner - round(inner)) > 1e-9:
            problems.append(
                f"expand * channels must be an integer >= channels (got {inner})"
            )
        if self.scale not in (2, 3, 4):
            problems.append(f"scale must be 2, 3 or 4 (got {self.scale})")
        if self.n_state < 1:
            problems.append("n_state must be >= 1")
        if self.d_conv < 1:
            problems.append("d_conv must be >= 1")
        if self.dt_rank != "auto" and (
            not isinstance(self.dt_rank, int) or self.dt_rank < 1
        ):
            problems.append(f"dt_rank must be 'auto' or a positive int (got {self.dt_rank!r})")
        if self.upsampler not in UPSAMPLERS:
            problems.append(f"upsampler must be one of {UPSAMPLERS} (got {self.upsampler!r})")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def inner(self) -> int:
        return int(round(self.expand * self.channels))

    @property
    def rank(self) -> int:
        if self.dt_rank == "auto":
            return math.ceil(self.channels / 16)
        return int(self.dt_rank)

    @property
    def vimm_counts(self) -> tuple[int, ...]:
        if isinstance(self.vimm_per_rssb, tuple):
            return tuple(int(c) for c in self.vimm_per_rssb)
        return (int(self.vimm_per_rssb),) * self.n_rssb

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["vimm_per_rssb"], tuple):
            d["vimm_per_rssb"] = list(d["vimm_per_rssb"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {', '.join(unknown)}")
        return cls(**dict(d))

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


PRESETS: dict[str, ModelConfig] = {
    "student": ModelConfig(n_rssb=4, vimm_per_rssb=2, channels=60),
    "teacher-small": ModelConfig(
        n_rssb=4, vimm_per_rssb=2, channels=192, upsampler="classical"
    ),
    "teacher-large": ModelConfig(
        n_rssb=8, vimm_per_rssb=2, channels=192, upsampler="classical"
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"
        ) from None
    return base.replace(**overrides) if overrides else base


# -- shape law ----------------------------------------------------------------

class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    init: str


def _conv(name: str, cout: int, cin: int, k: int = 3) -> Iterator[ParamSpec]:
    yield ParamSpec(f"{name}.weight", (cout, cin, k, k), "conv")
    yield ParamSpec(f"{name}.bias", (cout,), "conv_bias")


def _ssm_direction(prefix: str, cfg: ModelConfig) -> Iterator[ParamSpec]:
    e, s, r = cfg.inner, cfg.n_state, cfg.rank
    yield ParamSpec(f"{prefix}.conv1d.weight", (e, cfg.d_conv), "conv1d")
    yield ParamSpec(f"{prefix}.conv1d.bias", (e,), "conv1d_bias")
    yield ParamSpec(f"{prefix}.x_proj_dt", (r, e), "proj")
    yield ParamSpec(f"{prefix}.x_proj_B", (s, e), "proj")
    yield ParamSpec(f"{prefix}.x_proj_C", (s, e), "proj")
    yield ParamSpec(f"{prefix}.dt_proj.weight", (e, r), "dt_proj")
    yield ParamSpec(f"{prefix}.dt_proj.bias", (e,), "dt_bias")
    yield ParamSpec(f"{prefix}.A_log", (e, s), "A_log")
    if cfg.d_skip:
        yield ParamSpec(f"{prefix}.D", (e,), "ones")


def _vimm(prefix: str, cfg: ModelConfig) -> Iterator[ParamSpec]:
    c, e = cfg.channels, cfg.inner
    yield ParamSpec(f"{prefix}.norm.weight", (c,), "ones")
    yield ParamSpec(f"{prefix}.norm.bias", (c,), "zeros")
    for branch in ("in_proj_x", "in_proj_z"):
        yield ParamSpec(f"{prefix}.{branch}.weight", (e, c), "proj")
        if cfg.proj_bias:
            yield ParamSpec(f"{prefix}.{branch}.bias", (e,), "zeros")
    yield from _ssm_direction(f"{prefix}.fwd", cfg)
    if cfg.bidirectional:
        yield from _ssm_direction(f"{prefix}.bwd", cfg)
    yield ParamSpec(f"{prefix}.out_proj.weight", (c, e), "proj")


def upsample_stages(scale: int) -> list[int]:
    """Per-stage shuffle factors of the classical head."""
    if scale == 3:
        return [3]
    return [2] * int(round(math.log2(scale)))


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every parameter tensor of the network, in initialization order."""
    c = cfg.channels
    specs = list(_conv("head", c, cfg.in_channels))
    for i, n_vimm in enumerate(cfg.vimm_counts):
        for j in range(n_vimm):
            specs.extend(_vimm(f"body.{i}.vimm.{j}", cfg))
        specs.extend(_conv(f"body.{i}.conv", c, c))
    specs.extend(_conv("body_conv", c, c))
    out_ch = cfg.in_channels
    if cfg.upsampler == "direct":
        specs.extend(_conv("recon", out_ch * cfg.scale**2, c))
    else:
        f = cfg.num_feat
        specs.extend(_conv("recon.before", f, c))
        for k, r in enumerate(upsample_stages(cfg.scale)):
            specs.extend(_conv(f"recon.up.{k}", f * r * r, f))
        specs.extend(_conv("recon.last", out_ch, f))
    return specs


# -- initialization -------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _fan_in(spec: ParamSpec, specs: Mapping[str, ParamSpec]) -> int:
    wname = spec.name.rsplit(".", 1)[0] + ".weight"
    shape = specs[wname].shape
    return int(np.prod(shape[1:]))


def build_model(cfg: ModelConfig, seed: int = 0) -> DvmsrWeights:
    """Deterministically initialize every parameter of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    specs = param_specs(cfg)
    by_name = {s.name: s for s in specs}
    if len(by_name) != len(specs):
        raise ConfigError("duplicate parameter names in shape law")
    weights: DvmsrWeights = {}
    for spec in specs:
        shape = spec.shape
        kind = spec.init
        if kind in ("conv", "conv_bias", "conv1d", "conv1d_bias"):
            bound = 1.0 / math.sqrt(_fan_in(spec, by_name))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "proj":
            data = _trunc_normal(rng, shape)
        elif kind == "dt_proj":
            bound = shape[1] ** -0.5
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "dt_bias":
            data = init_dt_bias(shape[0], rng)
        elif kind == "A_log":
            data = np.log(-s4d_real_A(*shape))
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:  # pragma: no cover - shape law and initializers move together
            raise ConfigError(f"no initializer for {kind!r}")
        weights[spec.name] = Tensor(data, requires_grad=True)
    return weights


# -- forward ----------------------------------------------------------------------

class _View(Mapping):
    """Read-only prefix view into a flat weight dict."""

    def __init__(self, weights: Mapping[str, Tensor], prefix: str):
        self._w = weights
        self._p = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self._w[self._p + key]

    def __iter__(self):
        n = len(self._p)
        return (k[n:] for k in self._w if k.startswith(self._p))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __contains__(self, key) -> bool:
        return (self._p + key) in self._w


def tokens_from_image(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C) in raster order."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def image_from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, length, c = t.shape
    return t.transpose(0, 2, 1).reshape(n, c, h, w)


def _ssm_branch(xb: Tensor, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    xc = F.conv1d_causal(xb, w["conv1d.weight"], w["conv1d.bias"])
    if cfg.x1_activation:
        xc = F.silu(xc)
    delta = F.softplus(
        F.linear(F.linear(xc, w["x_proj_dt"]), w["dt_proj.weight"], w["dt_proj.bias"])
    )
    B = F.linear(xc, w["x_proj_B"])
    C = F.linear(xc, w["x_proj_C"])
    A = neg(exp(w["A_log"]))
    D = w["D"] if "D" in w else None
    return selective_scan_op(xc, delta, A, B, C, D)


def vimm_forward(x: Tensor, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Gated Mamba token mixer with residual, on (N, L, C) tokens.

    X1 = SSM(Conv1d(Linear(LN(X)))), X2 = SiLU(Linear(LN(X))),
    out = Linear(X1 * X2) + X.
    """
    if x.shape[-1] != cfg.channels:
        raise ConfigError(f"ViMM expects {cfg.channels} channels, got {x.shape[-1]}")
    ln = F.layer_norm(x, w["norm.weight"], w["norm.bias"], cfg.ln_eps)
    xb = F.linear(ln, w["in_proj_x.weight"], w.get("in_proj_x.bias"))
    z = F.linear(ln, w["in_proj_z.weight"], w.get("in_proj_z.bias"))
    x1 = _ssm_branch(xb, _View(w, "fwd."), cfg)
    if cfg.bidirectional:
        back = _ssm_branch(flip(xb, 1), _View(w, "bwd."), cfg)
        x1 = x1 + flip(back, 1)
    x2 = F.silu(z)
    return F.linear(F.hadamard(x1, x2), w["out_proj.weight"]) + x


def rssb_forward(
    feat: Tensor, w: Mapping[str, Tensor], cfg: ModelConfig, n_vimm: int
) -> Tensor:
    """ViMM stack over raster tokens, 3x3 conv, block residual."""
    h, wd = feat.shape[2:]
    t = tokens_from_image(feat)
    for j in range(n_vimm):
        t = vimm_forward(t, _View(w, f"vimm.{j}."), cfg)
    y = F.conv2d(image_from_tokens(t, h, wd), w["conv.weight"], w["conv.bias"], padding=1)
    return y + feat


def reconstruct(fused: Tensor, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    if cfg.upsampler == "direct":
        y = F.conv2d(fused, w["recon.weight"], w["recon.bias"], padding=1)
        return F.pixel_shuffle(y, cfg.scale)
    y = F.leaky_relu(
        F.conv2d(fused, w["recon.before.weight"], w["recon.before.bias"], padding=1)
    )
    for k, r in enumerate(upsample_stages(cfg.scale)):
        y = F.conv2d(y, w[f"recon.up.{k}.weight"], w[f"recon.up.{k}.bias"], padding=1)
        y = F.pixel_shuffle(y, r)
    return F.conv2d(y, w["recon.last.weight"], w["recon.last.bias"], padding=1)


def dvmsr_features(
    lr: Tensor, weights: Mapping[str, Tensor], cfg: ModelConfig
) -> tuple[Tensor, Tensor]:
    """Return ``(sr, deep)`` where ``deep`` is F_D = HConv(RSSB_k(...(F_0)))."""
    if lr.ndim != 4 or lr.shape[1] != cfg.in_channels:
        raise ConfigError(
            f"expected (N, {cfg.in_channels}, H, W) input, got {lr.shape}"
        )
    f0 = F.conv2d(lr, weights["head.weight"], weights["head.bias"], padding=1)
    f = f0
    for i, n_vimm in enumerate(cfg.vimm_counts):
        f = rssb_forward(f, _View(weights, f"body.{i}."), cfg, n_vimm)
    deep = F.conv2d(f, weights["body_conv.weight"], weights["body_conv.bias"], padding=1)
    return reconstruct(f0 + deep, weights, cfg), deep


def dvmsr_forward(
    lr: Tensor, weights: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """(N, 3, H, W) low-resolution batch -> (N, 3, rH, rW)."""
    return dvmsr_features(lr, weights, cfg)[0]


def parameters(weights: Mapping[str, Tensor]) -> Sequence[Tensor]:
    return list(weights.values())
