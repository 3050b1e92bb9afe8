"""Parameter counts, traced GFLOPs and wall-clock throughput."""

from __future__ import annotations

import platform
import statistics
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, EstimationError, MeasurementError
from .tensor import ParamStore

FLOP_CONVENTION = "FLOPs = 2 x multiply-accumulates over conv and selective-scan ops"


def count_params(params: ParamStore) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class FlopReport:
    input_size: int
    total: int
    per_layer: "OrderedDict[str, int]" = field(default_factory=OrderedDict)

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def trace_model_flops(model, input_size: int, batch: int = 1) -> FlopReport:
    """Run a shape-only forward pass at ``input_size`` and tabulate FLOPs per layer."""
    if input_size <= 0:
        raise EstimationError(f"input size must be positive, got {input_size}")
    x = T.Tensor(np.zeros((batch, 3, input_size, input_size), dtype=model.dtype))
    try:
        with T.no_grad(), T.trace_flops(execute=False) as records:
            model(x)
    except ContractError as exc:
        layer = getattr(exc, "layer", None) or "model"
        raise EstimationError(f"shape unresolvable at layer {layer!r}: {exc}") from exc
    per_layer: OrderedDict[str, int] = OrderedDict()
    for name, _kind, flops in records:
        per_layer[name] = per_layer.get(name, 0) + flops
    return FlopReport(input_size, sum(per_layer.values()), per_layer)


def estimate_gflops(model, input_size: int) -> float:
    """GFLOPs of one forward pass of a single image (2 x MACs, conv and scan only)."""
    return trace_model_flops(model, input_size).gflops


@dataclass
class FpsReport:
    fps: float
    fps_min: float
    fps_max: float
    n_warmup: int
    n_runs: int
    batch: int
    post_processing: bool

    @property
    def dispersion(self) -> float:
        return self.fps_max / self.fps_min


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, python {platform.python_version()}, numpy {np.__version__}"


def measure_fps(model, input_size: int, n_warmup: int = 2, n_runs: int = 5, batch: int = 1,
                post_processing: bool = False, seed: int = 0) -> FpsReport:
    """Median per-image throughput over ``n_runs`` timed passes after ``n_warmup`` discarded ones."""
    if n_runs < 3:
        raise MeasurementError(f"n_runs must be >= 3, got {n_runs}")
    rng = np.random.default_rng(seed)
    x = rng.random((batch, 3, input_size, input_size)).astype(model.dtype)
    resolution = time.get_clock_info("perf_counter").resolution

    def once():
        if post_processing:
            model.predict(x)
        else:
            with T.no_grad():
                model(T.Tensor(x))

    for _ in range(n_warmup):
        once()
    rates = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        once()
        dt = time.perf_counter() - t0
        if dt <= 10 * resolution:
            raise MeasurementError(f"run time {dt:.3g}s is within timer resolution {resolution:.3g}s")
        rates.append(batch / dt)
    return FpsReport(statistics.median(rates), min(rates), max(rates), n_warmup, n_runs, batch, post_processing)


@dataclass
class EfficiencyReport:
    param_count: int
    gflops: float
    input_size: int
    fps: float
    fps_min: float
    fps_max: float
    fps_with_post: float
    n_warmup: int
    n_runs: int
    hardware: str
    flop_convention: str = FLOP_CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)


def efficiency_report(model, input_size: int, n_warmup: int = 2, n_runs: int = 5) -> EfficiencyReport:
    raw = measure_fps(model, input_size, n_warmup, n_runs)
    post = measure_fps(model, input_size, n_warmup, n_runs, post_processing=True)
    return EfficiencyReport(
        param_count=count_params(model.parameters()),
        gflops=estimate_gflops(model, input_size),
        input_size=input_size,
        fps=raw.fps, fps_min=raw.fps_min, fps_max=raw.fps_max,
        fps_with_post=post.fps,
        n_warmup=n_warmup, n_runs=n_runs,
        hardware=hardware_note(),
    )
