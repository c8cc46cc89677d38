"""Static complexity analysis: parameters, FLOPS and activation counts.

Costs are read off a per-layer plan derived from :class:`ModelConfig` alone;
no weights are allocated.  FLOPS follow a named convention:

``"MAC=1"`` (default)
    one multiply-accumulate counts as one FLOP; conv2d, linear, depthwise
    conv1d and the scan are counted, elementwise ops are not.  The scan costs
    ``SCAN_MACS_PER_STEP`` MACs per (token, channel, state) lane: the state
    update ``h <- A_bar h + B_bar x`` and the readout ``y += C h``.
``"MAC=2"``
    same layers, two FLOPs per MAC.
``"MAC=1+elementwise"``
    ``MAC=1`` plus one FLOP per element produced by every elementwise op
    (norms, activations, gates, residual adds, discretization, shuffles excluded).

Activations are the output elements of every conv2d layer.
"""

from __future__ import annotations

import itertools
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from .autodiff import Tensor, no_grad
from .model import ModelConfig, dvmsr_forward, param_specs, upsample_stages

__all__ = [
    "CONVENTIONS",
    "SCAN_MACS_PER_STEP",
    "Layer",
    "ProfileReport",
    "layer_plan",
    "count_params",
    "count_flops",
    "count_activations",
    "profile",
    "benchmark_inference",
    "BenchmarkResult",
    "PUBLISHED_PARAMS",
    "calibrate",
]

CONVENTIONS = ("MAC=1", "MAC=2", "MAC=1+elementwise")
SCAN_MACS_PER_STEP = 2


class Layer(NamedTuple):
    name: str
    kind: str
    macs: int
    elementwise: int
    out_elems: int


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count from the shape law."""
    return sum(int(np.prod(s.shape)) for s in param_specs(cfg))


def _conv(name: str, cin: int, cout: int, h: int, w: int, k: int = 3) -> Layer:
    out = cout * h * w
    return Layer(name, "conv2d", cout * cin * k * k * h * w, 0, out)


def _vimm_layers(prefix: str, cfg: ModelConfig, tokens: int) -> Iterator[Layer]:
    c, e, s, r, k = cfg.channels, cfg.inner, cfg.n_state, cfg.rank, cfg.d_conv
    L = tokens
    yield Layer(f"{prefix}.norm", "layer_norm", 0, L * c, 0)
    yield Layer(f"{prefix}.in_proj", "linear", L * 2 * e * c, 0, 0)
    directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    for d in directions:
        p = f"{prefix}.{d}"
        yield Layer(f"{p}.conv1d", "conv1d", L * e * k, 0, 0)
        if cfg.x1_activation:
            yield Layer(f"{p}.silu", "elementwise", 0, L * e, 0)
        yield Layer(f"{p}.x_proj", "linear", L * (r + 2 * s) * e, 0, 0)
        yield Layer(f"{p}.dt_proj", "linear", L * e * r, L * e, 0)
        # exp(delta A) and the ZOH gain, one element each per lane
        yield Layer(
            f"{p}.scan",
            "scan",
            SCAN_MACS_PER_STEP * L * e * s,
            2 * L * e * s + (L * e if cfg.d_skip else 0),
            0,
        )
    if cfg.bidirectional:
        yield Layer(f"{prefix}.merge", "elementwise", 0, L * e, 0)
    yield Layer(f"{prefix}.gate", "elementwise", 0, 2 * L * e, 0)
    yield Layer(f"{prefix}.out_proj", "linear", L * c * e, 0, 0)
    yield Layer(f"{prefix}.residual", "elementwise", 0, L * c, 0)


def layer_plan(cfg: ModelConfig, input_hw: tuple[int, int]) -> list[Layer]:
    """Every costed layer of one forward pass on a single (H, W) image."""
    h, w = input_hw
    if h < 1 or w < 1:
        raise ValueError(f"input size must be positive, got {input_hw}")
    c = cfg.channels
    plan = [_conv("head", cfg.in_channels, c, h, w)]
    for i, n_vimm in enumerate(cfg.vimm_counts):
        for j in range(n_vimm):
            plan.extend(_vimm_layers(f"body.{i}.vimm.{j}", cfg, h * w))
        plan.append(_conv(f"body.{i}.conv", c, c, h, w))
        plan.append(Layer(f"body.{i}.residual", "elementwise", 0, c * h * w, 0))
    plan.append(_conv("body_conv", c, c, h, w))
    plan.append(Layer("global_residual", "elementwise", 0, c * h * w, 0))
    out_ch = cfg.in_channels
    if cfg.upsampler == "direct":
        plan.append(_conv("recon", c, out_ch * cfg.scale**2, h, w))
    else:
        f = cfg.num_feat
        plan.append(_conv("recon.before", c, f, h, w))
        plan.append(Layer("recon.act", "elementwise", 0, f * h * w, 0))
        sh, sw = h, w
        for k, r in enumerate(upsample_stages(cfg.scale)):
            plan.append(_conv(f"recon.up.{k}", f, f * r * r, sh, sw))
            sh, sw = sh * r, sw * r
        plan.append(_conv("recon.last", f, out_ch, sh, sw))
    return plan


def count_flops(
    cfg: ModelConfig, input_hw: tuple[int, int], convention: str = "MAC=1"
) -> int:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")
    plan = layer_plan(cfg, input_hw)
    macs = sum(l.macs for l in plan)
    if convention == "MAC=2":
        return 2 * macs
    if convention == "MAC=1+elementwise":
        return macs + sum(l.elementwise for l in plan)
    return macs


def count_activations(cfg: ModelConfig, input_hw: tuple[int, int]) -> int:
    """Total conv2d output elements (raw count, not millions)."""
    return sum(l.out_elems for l in layer_plan(cfg, input_hw) if l.kind == "conv2d")


def _peak_activation_elems(cfg: ModelConfig, input_hw: tuple[int, int]) -> int:
    # widest live buffer set inside a ViMM (tokens, two branches, scan state) or a conv
    h, w = input_hw
    L = h * w
    vimm_live = L * (2 * cfg.channels + 3 * cfg.inner) + cfg.inner * cfg.n_state
    conv_live = max(l.out_elems for l in layer_plan(cfg, input_hw))
    return max(vimm_live, conv_live + cfg.channels * L)


@dataclass
class ProfileReport:
    params: int
    flops: int
    activations: int
    input_size: tuple[int, int]
    convention: str
    peak_activation_mb: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["params_M"] = self.params / 1e6
        d["flops_G"] = self.flops / 1e9
        d["activations_M"] = self.activations / 1e6
        d["peak_activation_note"] = (
            "theoretical float64 bound, not comparable to allocator-measured memory"
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        h, w = self.input_size
        rows = [
            ("input", f"{h}x{w}"),
            ("params", f"{self.params:,} ({self.params / 1e3:.1f} K, {self.params / 1e6:.4f} M)"),
            ("flops", f"{self.flops / 1e9:.4f} G [{self.convention}]"),
            ("activations", f"{self.activations / 1e6:.4f} M"),
            ("peak act. bound", f"{self.peak_activation_mb:.1f} MB (float64, non-comparable)"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def profile(
    cfg: ModelConfig,
    input_hw: tuple[int, int] = (256, 256),
    convention: str = "MAC=1",
) -> ProfileReport:
    return ProfileReport(
        params=count_params(cfg),
        flops=count_flops(cfg, input_hw, convention),
        activations=count_activations(cfg, input_hw),
        input_size=tuple(input_hw),
        convention=convention,
        peak_activation_mb=_peak_activation_elems(cfg, input_hw) * 8 / 2**20,
    )


@dataclass
class BenchmarkResult:
    median_s: float
    times_s: list[float]
    input_size: tuple[int, int]
    hardware: str


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} / {platform.system()} / numpy {np.__version__}"


def benchmark_inference(
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    input_hw: tuple[int, int],
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
) -> BenchmarkResult:
    """Median wall-clock of no-grad forward passes on a random image."""
    if repeats < 3 or warmup < 1:
        raise ValueError("benchmark_inference needs repeats >= 3 and warmup >= 1")
    h, w = input_hw
    x = Tensor(np.random.default_rng(seed).uniform(size=(1, cfg.in_channels, h, w)))
    times = []
    with no_grad():
        for _ in range(warmup):
            dvmsr_forward(x, weights, cfg)
        for _ in range(repeats):
            t0 = time.perf_counter()
            dvmsr_forward(x, weights, cfg)
            times.append(time.perf_counter() - t0)
    return BenchmarkResult(statistics.median(times), times, (h, w), hardware_descriptor())


# -- calibration against the published parameter tables ---------------------------

def _row(label, target_m, **kw):
    return (label, kw, target_m)


PUBLISHED_PARAMS = [
    _row("student", 0.4244, n_rssb=4, vimm_per_rssb=2, channels=60),
    _row("student bidirectional", 0.4849, n_rssb=4, vimm_per_rssb=2, channels=60, bidirectional=True),
    _row("ViMM 6,6,6,6", 7.222, n_rssb=4, vimm_per_rssb=(6, 6, 6, 6), channels=180, upsampler="classical"),
    _row("ViMM 2,2,9,2", 5.214, n_rssb=4, vimm_per_rssb=(2, 2, 9, 2), channels=180, upsampler="classical"),
    _row("ViMM 2,2,2,2", 3.651, n_rssb=4, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("ViMM 1,1,1,1", 2.758, n_rssb=4, vimm_per_rssb=1, channels=180, upsampler="classical"),
    _row("RSSB 2", 2.175, n_rssb=2, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("RSSB 4", 3.651, n_rssb=4, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("RSSB 6", 5.128, n_rssb=6, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("RSSB 10", 8.080, n_rssb=10, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("channels 150", 2.664, n_rssb=4, vimm_per_rssb=2, channels=150, upsampler="classical"),
    _row("channels 180", 3.651, n_rssb=4, vimm_per_rssb=2, channels=180, upsampler="classical"),
    _row("channels 192", 4.089, n_rssb=4, vimm_per_rssb=2, channels=192, upsampler="classical"),
    _row("channels 210", 4.809, n_rssb=4, vimm_per_rssb=2, channels=210, upsampler="classical"),
    _row("teacher 4x2x192", 4.089, n_rssb=4, vimm_per_rssb=2, channels=192, upsampler="classical"),
    _row("teacher 8x2x192", 7.432, n_rssb=8, vimm_per_rssb=2, channels=192, upsampler="classical"),
]

CALIBRATION_GRID = {
    "n_state": (8, 16),
    "d_conv": (3, 4),
    "expand": (1.5, 2.0),
    "dt_rank": ("auto", 1),
    "proj_bias": (False, True),
}


@dataclass
class CalibrationRow:
    hyper: dict
    max_rel_err: float
    errors: dict


def calibrate(grid: Mapping[str, tuple] = CALIBRATION_GRID) -> list[CalibrationRow]:
    """Score every hyperparameter combination against all published counts.

    Returns rows sorted best-first by the maximum relative error.
    """
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        hyper = dict(zip(keys, values))
        errors = {}
        for label, kw, target in PUBLISHED_PARAMS:
            p = count_params(ModelConfig(**kw, **hyper)) / 1e6
            errors[label] = (p - target) / target
        rows.append(
            CalibrationRow(hyper, max(abs(v) for v in errors.values()), errors)
        )
    rows.sort(key=lambda r: r.max_rel_err)
    return rows
