"""Segmentation quality metrics and complexity accounting.

Complexity follows the unified OPs count OPs = BOPs/64 + FLOPs, with one
multiply-accumulate counted as 2 ops on both sides so the 1/64 divisor is
the only binary discount. Parameter storage counts latent binary weights at
1 bit plus their float32 per-channel scales; everything else is float32.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = 255


class ConfusionMatrix:
    """Accumulated (truth, prediction) counts with an excluded ignore label."""

    def __init__(self, n_classes: int, ignore_label: int = IGNORE_LABEL):
        self.n_classes = n_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, truth, pred):
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction shapes differ")
        keep = truth != self.ignore_label
        truth, pred = truth[keep], pred[keep]
        idx = truth * self.n_classes + pred
        self.counts += np.bincount(idx, minlength=self.n_classes**2).reshape(
            self.n_classes, self.n_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(conf: ConfusionMatrix):
    """Per-class IoU = TP / (TP + FP + FN) and their mean.

    Classes absent from both truth and prediction (zero denominator) are
    excluded from the mean. Returns (per_class_iou, mean_iou); excluded
    classes carry NaN in the per-class vector.
    """
    c = conf.counts
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    mean = float(np.nanmean(iou))
    return iou, mean


def mean_accuracy(conf: ConfusionMatrix):
    """Per-class recall TP/(TP+FN) and its mean over classes with truth pixels."""
    c = conf.counts
    tp = np.diag(c).astype(np.float64)
    support = c.sum(axis=1)
    acc = np.where(support > 0, tp / np.maximum(support, 1), np.nan)
    return acc, float(np.nanmean(acc))


def segmentation_scores(conf: ConfusionMatrix, road_class: int = 1) -> dict:
    """The Table-style row: mAcc, mIoU, road accuracy and road IoU."""
    iou, mean_iou_ = miou(conf)
    acc, mean_acc = mean_accuracy(conf)
    return {
        "mAcc": mean_acc,
        "mIoU": mean_iou_,
        "RoadAcc": float(acc[road_class]),
        "RoadIoU": float(iou[road_class]),
    }


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class LayerRow:
    name: str
    kind: str
    bops: int = 0
    flops: int = 0
    param_bits: int = 0

    @property
    def ops(self) -> float:
        # exact: bops is an integer and the divisor is a power of two
        return self.bops / 64 + self.flops


@dataclass
class ComplexityReport:
    rows: list = field(default_factory=list)

    @property
    def bops(self) -> int:
        return sum(r.bops for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def ops(self) -> float:
        return self.bops / 64 + self.flops

    @property
    def param_bits(self) -> int:
        return sum(r.param_bits for r in self.rows)

    @property
    def param_bytes(self) -> float:
        return self.param_bits / 8

    def as_text(self) -> str:
        lines = [f"{'layer':<44} {'kind':<12} {'BOPs':>14} {'FLOPs':>14} {'OPs':>16} {'param bytes':>12}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<44} {r.kind:<12} {r.bops:>14d} {r.flops:>14d} {r.ops:>16.1f} {r.param_bits / 8:>12.1f}"
            )
        lines.append(
            f"{'TOTAL':<44} {'':<12} {self.bops:>14d} {self.flops:>14d} {self.ops:>16.1f} {self.param_bytes:>12.1f}"
        )
        return "\n".join(lines)

    def as_keyvalues(self) -> str:
        return "\n".join(
            [
                f"bops = {self.bops}",
                f"flops = {self.flops}",
                f"ops = {self.ops!r}",
                f"param_bytes = {self.param_bytes!r}",
            ]
        )


def count_complexity(model) -> ComplexityReport:
    """Build the per-layer complexity table for an assembled model."""
    return ComplexityReport(rows=model.complexity_rows())


# ---------------------------------------------------------------------------
# GEMM microbenchmark


def naive_float_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Loop GEMM without library acceleration: per (i, k) scaled-row update."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        row = out[i]
        ai = a[i]
        for kk in range(k2):
            row += ai[kk] * b[kk]
    return out


def bench_gemm(sizes, repeats: int = 3, rng=None) -> list[dict]:
    """Median wall-clock times of binary vs full-precision GEMM per size.

    Compares the packed XNOR/PopCount kernel against the reference loop GEMM
    (the assertion target) and the BLAS matmul (reported for context only).
    """
    from . import bitcore

    rng = rng or np.random.default_rng(0)
    results = []
    for size in sizes:
        m, k, n = (size, size, size) if np.isscalar(size) else size
        wf = rng.choice([-1.0, 1.0], size=(m, k)).astype(np.float32)
        af = rng.choice([-1.0, 1.0], size=(k, n)).astype(np.float32)
        wb, ab = bitcore.sign_pack(wf), bitcore.sign_pack(af)
        scales = bitcore.ScaleFactors.unit(m)

        def timed(fn):
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                samples.append(time.perf_counter() - t0)
            return float(np.median(samples))

        t_binary = timed(lambda: bitcore.binary_gemm(wb, ab, scales))
        t_loop = timed(lambda: naive_float_gemm(wf, af))
        t_blas = timed(lambda: wf @ af)
        results.append(
            {
                "m": m,
                "k": k,
                "n": n,
                "binary_s": t_binary,
                "float_loop_s": t_loop,
                "float_blas_s": t_blas,
                "speedup_vs_loop": t_loop / t_binary if t_binary > 0 else float("inf"),
            }
        )
    return results


def bench_table(results) -> str:
    header = f"{'size':>6} {'binary [s]':>12} {'float loop [s]':>15} {'float BLAS [s]':>15} {'binary/loop speedup':>20}"
    lines = [header]
    for r in results:
        lines.append(
            f"{r['m']:>6} {r['binary_s']:>12.4f} {r['float_loop_s']:>15.4f} "
            f"{r['float_blas_s']:>15.4f} {r['speedup_vs_loop']:>20.2f}"
        )
    return "\n".join(lines)
