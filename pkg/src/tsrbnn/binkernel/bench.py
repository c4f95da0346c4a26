"""Timing harness comparing the packed engine with the float reference path.

Reports are line-delimited ``key=value`` records, one per stage plus totals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from ..arch import infer_shapes
from ..layers import sign_forward
from ..network import Model, spec_layers
from .bitplane import pack_bits
from .engine import (
    BinaryConvStage,
    BinaryDenseStage,
    PackedModel,
    RealConvStage,
    ThresholdStage,
)
from .kernels import xnor_gemm


class BenchMismatchError(RuntimeError):
    """Packed and reference predictions disagree on the benchmark inputs."""


@dataclass
class StageTiming:
    name: str
    macs: int
    ns: float  # per inference
    reference_ns: float | None

    @property
    def speedup(self) -> float | None:
        if self.reference_ns is None or self.ns <= 0:
            return None
        return self.reference_ns / self.ns

    def to_line(self) -> str:
        sp = "n/a" if self.speedup is None else f"{self.speedup:.2f}"
        ref = "n/a" if self.reference_ns is None else f"{self.reference_ns:.0f}"
        return f"stage={self.name} macs={self.macs} ns={self.ns:.0f} reference_ns={ref} speedup={sp}"


@dataclass
class DenseBench:
    batch: int
    in_features: int
    out_features: int
    reference_ns: float  # per batch
    packed_ns: float

    @property
    def speedup(self) -> float:
        return self.reference_ns / self.packed_ns

    def to_lines(self) -> list[str]:
        return [
            f"dense_shape={self.batch}x{self.in_features}x{self.out_features}",
            f"dense_reference_ns={self.reference_ns:.0f}",
            f"dense_packed_ns={self.packed_ns:.0f}",
            f"dense_speedup={self.speedup:.2f}",
        ]


def _best_ns(fn, repeats: int) -> float:
    fn()  # warm-up (also triggers JIT compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - t0)
    return float(best)


def bench_dense(batch: int = 64, in_features: int = 1024, out_features: int = 1024,
                repeats: int = 20, seed: int = 0, threads: int = 1) -> DenseBench:
    """One +-1 dense layer: float32 BLAS on +-1 values vs XNOR-popcount on packed bits.

    Both paths start from real activations and binarize them; the weights are
    prepared once, as they would be in a deployed model.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, in_features)).astype(np.float32)
    w = sign_forward(rng.standard_normal((in_features, out_features)).astype(np.float32))
    w_packed = pack_bits(np.ascontiguousarray(w.T) > 0)

    def reference():
        return sign_forward(x) @ w

    def packed():
        return xnor_gemm(pack_bits(x >= 0), w_packed)

    with threadpool_limits(limits=threads):
        if not np.array_equal(reference(), packed()):
            raise BenchMismatchError("dense microbenchmark: packed result differs from reference")
        ref_ns = _best_ns(reference, repeats)
        packed_ns = _best_ns(packed, repeats)
    return DenseBench(batch, in_features, out_features, ref_ns, packed_ns)


def stage_macs(pm: PackedModel) -> list[int]:
    shapes = infer_shapes(pm.arch)
    out = []
    for st in pm.stages:
        if isinstance(st, (RealConvStage, BinaryConvStage)):
            oh, ow, f = shapes[st.layer_index]
            out.append(oh * ow * st.kernel * st.kernel * st.in_channels * f)
        elif isinstance(st, BinaryDenseStage):
            out.append(st.weights.length * st.weights.words.shape[0])
        else:
            out.append(0)
    return out


def _stage_reference_layer(stage) -> int | None:
    if isinstance(stage, ThresholdStage):
        return stage.bn_index
    if hasattr(stage, "layer_index"):
        return stage.layer_index
    return getattr(stage, "bn_index", None)


def bench_model(model: Model, pm: PackedModel, images: np.ndarray, batch: int = 64,
                threads: int = 1) -> tuple[list[StageTiming], float, float]:
    """Per-stage timings over ``images``; returns (stages, reference_ns, packed_ns) per inference.

    Raises :class:`BenchMismatchError` if any argmax differs between the paths.
    """
    layers = spec_layers(model)
    n = len(images)
    packed_t = np.zeros(len(pm.stages))
    ref_t = np.zeros(len(layers))
    flatten_at = next((i for i, s in enumerate(layers) if s.kind == "qdense"), None)
    with threadpool_limits(limits=threads):
        # warm caches and JIT before timing
        pm.forward(images[:1])
        for i in range(0, n, batch):
            chunk = np.asarray(images[i:i + batch], np.float32)
            x = chunk
            for j, layer in enumerate(layers):
                if j == flatten_at:
                    x = x.reshape(x.shape[0], -1)
                t0 = time.perf_counter_ns()
                x = layer.forward(x)
                ref_t[j] += time.perf_counter_ns() - t0
            ref_logits = x
            y = chunk
            for s, stage in enumerate(pm.stages):
                t0 = time.perf_counter_ns()
                y = stage.run(y)
                packed_t[s] += time.perf_counter_ns() - t0
            if not np.array_equal(np.argmax(ref_logits, axis=1), np.argmax(y, axis=1)):
                raise BenchMismatchError(
                    f"packed and reference predictions differ in images {i}..{i + len(chunk) - 1}"
                )
    macs = stage_macs(pm)
    timings = []
    for s, stage in enumerate(pm.stages):
        j = _stage_reference_layer(stage)
        ref = None if j is None else ref_t[j] / n
        timings.append(StageTiming(stage.name, macs[s], packed_t[s] / n, ref))
    return timings, float(ref_t.sum() / n), float(packed_t.sum() / n)
