"""Efficiency and rank verification harness.

Three claims are checked at desk scale:

* time: the streaming kernel's cost is linear in sequence length while
  softmax attention is quadratic (fitted log-log exponents);
* memory: the streaming kernel's internal working set does not grow with
  sequence length (tracked-allocator peak, inputs/outputs preallocated by
  the harness and excluded);
* rank: the token-mixing matrix of the kernelized forms never exceeds the
  feature width, and the local-conv branch does not lower (typically
  raises) the numerical rank of block outputs.

Sweeps run points sequentially on one worker; timing is median-of-R with a
discarded warmup.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attention import AttentionConfig
from .config import ModelConfig
from .errors import ContractError, ResourceError
from .grela import GrelaModel, grela_block
from .numerics import Tensor, alloc, make_rng
from .numerics import rank as numerical_rank
from .numerics import singular_values, tape_paused
from .positional import RopeTable

RANK_GUARD = 4096

SWEEP_AXES = ("N", "L", "h")

_BASE = {"n": 256, "dim": 64, "heads": 1, "conv_width": 4, "layers": 1}


def flops_estimate(variant: str, n: int, dim: int = 64, heads: int = 1,
                   conv_width: int = 4, layers: int = 1) -> float:
    """Closed-form forward FLOPs (multiply-add = 2 FLOPs), term by term.

    d = dim/heads is the per-head width.  The streaming kernelized forms
    cost Theta(n * dim * d) in their accumulators plus Theta(n * dim *
    conv_width) for the local branch; softmax attention costs
    Theta(n^2 * dim) in its score/value products.
    """
    if variant not in ("rela", "linear", "dot_product"):
        raise ContractError(f"unknown variant {variant!r}")
    d = dim // heads
    feature_map = 2 * (2 * n * dim)          # phi on queries and keys
    if variant == "dot_product":
        scores = 2 * n * n * dim             # Q K^T over all heads
        softmax = 5 * heads * n * n          # exp, sum, divide per score
        weighted = 2 * n * n * dim           # A V
        per_layer = scores + softmax + weighted
    else:
        kv_update = 2 * n * dim * d          # running key-value memory
        query_read = 2 * n * dim * d         # query x memory contraction
        normalizer = 2 * n * dim + n * dim   # key-sum dot plus divide
        per_layer = feature_map + kv_update + query_read + normalizer
        if variant == "rela":
            rotation = 6 * n * (dim // 2) * 2   # 2x2 rotation on q and k
            conv = 2 * n * dim * conv_width + 4 * n * dim  # branch + silu
            per_layer += rotation + conv
    return float(layers * per_layer)


def fit_exponent(xs, ys) -> float:
    """Least-squares slope on log-log points."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 2:
        raise ContractError("exponent fit needs at least two points")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


@dataclass
class BenchPoint:
    axis_value: int
    median_time: float = 0.0
    mem_peak_bytes: int = 0
    flops: float = 0.0
    status: str = "ok"  # or "oom"


@dataclass
class BenchReport:
    variant: str
    axis: str
    backend: str
    repeats: int
    points: list = field(default_factory=list)
    exponent: float = float("nan")

    def ok_points(self):
        return [p for p in self.points if p.status == "ok"]


def _sweep_config(axis: str, value: int, base: dict) -> dict:
    cfg = dict(base)
    if axis == "N":
        cfg["n"] = value
    elif axis == "L":
        cfg["layers"] = value
    elif axis == "h":
        cfg["heads"] = value
    return cfg


def _make_runner(variant, cfg, backend, causal, seed):
    """Allocate inputs/outputs up front and return a zero-allocation-free
    callable for timing (only kernel-internal buffers remain untracked)."""
    gen = make_rng((seed, cfg["n"], cfg["heads"], cfg["layers"]))
    n, dim = cfg["n"], cfg["dim"]
    q = gen.normal(size=(1, n, dim))
    k = gen.normal(size=(1, n, dim))
    v = gen.normal(size=(1, n, dim))
    out = np.empty_like(q)
    layers = cfg["layers"]
    if variant == "dot_product":
        def run():
            for _ in range(layers):
                kernels.sdp_forward(q, k, v, heads=cfg["heads"], causal=causal,
                                    out=out, backend=backend)
        return run
    if variant == "rela":
        table = RopeTable(n, dim)
        cos, sin = table.cos, table.sin
        kern = gen.normal(size=(cfg["conv_width"], dim)) * 0.02
        conv_out = np.empty_like(v)

        def run():
            for _ in range(layers):
                kernels.kla_forward(q, k, v, heads=cfg["heads"], causal=causal,
                                    eps=1e-6, scale_len=n, cos=cos, sin=sin,
                                    out=out, backend=backend)
                kernels.causal_conv_forward(v, kern, out=conv_out)
        return run

    def run():
        for _ in range(layers):
            kernels.kla_forward(q, k, v, heads=cfg["heads"], causal=causal,
                                out=out, backend=backend)
    return run


def runtime_sweep(variant: str, axis: str, values, repeats: int = 5,
                  base: dict | None = None, backend: str | None = None,
                  causal: bool = False, seed: int = 0) -> BenchReport:
    """Forward-only timing/memory sweep along one axis.

    Values must be sorted ascending.  Each point reports the median of
    ``repeats`` runs (one warmup discarded), the tracked peak of the
    kernel's internal allocations, and the closed-form FLOPs.  An
    allocation failure marks the point "oom" and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ContractError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if values != sorted(values) or len(values) < 1:
        raise ContractError("sweep values must be sorted ascending")
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    base_cfg = dict(_BASE)
    base_cfg.update(base or {})
    backend = backend or kernels.active_backend()
    report = BenchReport(variant=variant, axis=axis, backend=backend,
                         repeats=repeats)
    for value in values:
        cfg = _sweep_config(axis, int(value), base_cfg)
        point = BenchPoint(axis_value=int(value))
        point.flops = flops_estimate(variant, cfg["n"], cfg["dim"],
                                     cfg["heads"], cfg["conv_width"],
                                     cfg["layers"])
        try:
            run = _make_runner(variant, cfg, backend, causal, seed)
            run()  # warmup, discarded
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
            point.median_time = float(np.median(times))
            with alloc.track() as probe:
                run()
            point.mem_peak_bytes = int(probe.peak_bytes)
        except MemoryError:
            point.status = "oom"
        report.points.append(point)
        if point.status == "ok" and point.median_time <= 0:
            point.median_time = float(np.finfo(np.float64).tiny)
    ok = report.ok_points()
    if len(ok) >= 2:
        report.exponent = fit_exponent([p.axis_value for p in ok],
                                       [p.median_time for p in ok])
    return report


# ---------------------------------------------------------------------------
# rank probes
# ---------------------------------------------------------------------------


def rank_probe(matrix: np.ndarray, tol: float | None = None):
    """Numerical rank plus the magnitude grid for external plotting.

    Tolerance defaults to max(shape) * sigma_max * machine eps.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"rank probe needs a matrix, got shape {matrix.shape}")
    if max(matrix.shape) > RANK_GUARD:
        raise ResourceError(
            f"rank probe guard: max extent {max(matrix.shape)} exceeds {RANK_GUARD}")
    return numerical_rank(matrix, tol=tol), np.abs(matrix)


def block_output_rank_compare(seeds: int = 20, n: int = 200, dim: int = 64,
                              heads: int = 4, input_rank: int = 8,
                              seed_base: int = 0) -> dict:
    """Numerical rank with vs without the local conv branch over randomized
    parameter draws on low-rank inputs.

    Two measurement points per seed:

    * block output (what a stacked model propagates) — asserted direction:
      median with-branch >= median without;
    * the fused pre-gate representation — the sharp demonstration: the
      attention path alone inherits the input's limited directions (token
      mixing is an outer-product of rank <= d), while the conv branch's
      nonlinearity injects directions outside that span.

    Random parameters stand in for trained ones, so only directions are
    meaningful, not the absolute values.
    """
    from .attention import attend
    from .grela import rank_augmentation
    from .numerics import layer_norm, matmul

    cfg = ModelConfig(vocab_size=4, dim=dim, heads=heads, layers=1,
                      max_len=n, dropout=0.0, drop_path=0.0)
    out_with, out_without = [], []
    fused_with, fused_without = [], []
    with tape_paused():
        for s in range(seeds):
            gen = make_rng((seed_base, 50 + s))
            model = GrelaModel(cfg, seed=seed_base * 1000 + s)
            params = model.blocks[0]
            params.w_out.data[...] = gen.normal(size=(dim, dim)) * 0.2
            low = gen.normal(size=(n, input_rank)) @ gen.normal(size=(input_rank, dim))
            h = Tensor(low[None] / np.sqrt(input_rank))
            for flag, sink in ((True, out_with), (False, out_without)):
                out = grela_block(h, params, model.rope, model.attn_cfg,
                                  gate=cfg.gate, conv_branch=flag).data[0]
                sink.append(numerical_rank(out))
            h_g = layer_norm(h, params.ln_gain, params.ln_bias)
            q = matmul(h_g, params.w_q)
            k = matmul(h_g, params.w_k)
            v = matmul(h_g, params.w_in) + params.b_in
            o = attend(q, k, v, model.attn_cfg, rope=model.rope)
            s_branch = rank_augmentation(v, params.conv_kernel)
            fused_without.append(numerical_rank(o.data[0]))
            fused_with.append(numerical_rank((o + s_branch).data[0]))
    return {
        "ranks_with": out_with,
        "ranks_without": out_without,
        "median_with": float(np.median(out_with)),
        "median_without": float(np.median(out_without)),
        "fused_median_with": float(np.median(fused_with)),
        "fused_median_without": float(np.median(fused_without)),
        "input_rank": input_rank,
        "max_possible": dim,
    }


def singular_spectrum(matrix: np.ndarray) -> np.ndarray:
    """Descending singular values (convenience re-export for reports)."""
    return singular_values(matrix)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def write_report_tsv(report: BenchReport, path):
    lines = ["\t".join(["variant", "axis", "backend", "value", "status",
                        "median_time_s", "mem_peak_bytes", "flops"])]
    for p in report.points:
        lines.append("\t".join([
            report.variant, report.axis, report.backend, str(p.axis_value),
            p.status, f"{p.median_time:.6e}", str(p.mem_peak_bytes),
            f"{p.flops:.6e}"]))
    lines.append(f"# fitted log-log exponent: {report.exponent:.4f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def report_records(report: BenchReport) -> list:
    records = []
    for p in report.points:
        records.append({
            "variant": report.variant, "axis": report.axis,
            "backend": report.backend, "value": p.axis_value,
            "status": p.status, "median_time_s": p.median_time,
            "mem_peak_bytes": p.mem_peak_bytes, "flops": p.flops,
            "exponent": report.exponent,
        })
    return records


def write_grid(grid: np.ndarray, path):
    """Plain numeric rows, consumable by any plotting tool."""
    np.savetxt(path, grid, fmt="%.10e")
