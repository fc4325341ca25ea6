"""Quality metrics and rate-distortion curve comparison.

BD-rate summarizes the average bitrate difference between two rate-quality
curves: each curve's log-bitrate is interpolated as a function of quality
with an Akima spline, both are integrated over the shared quality range, and
the difference of means is mapped through exp to a percentage. Negative
means the test curve spends fewer bits at equal quality.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np


def si_sdr(reference, estimate) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference, so any positive rescaling
    of the estimate leaves the value unchanged. A zero error vector returns
    ``math.inf``; an estimate orthogonal to the reference returns ``-inf``.
    """
    ref = np.asarray(reference, dtype=np.float64).ravel()
    est = np.asarray(estimate, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.size} vs {est.size}")
    denom = float(ref @ ref)
    if denom == 0.0:
        raise ValueError("reference signal is all zero")
    target = (float(est @ ref) / denom) * ref
    err = est - target
    p_err = float(err @ err)
    if p_err == 0.0:
        return math.inf
    p_target = float(target @ target)
    if p_target == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_target / p_err)


def distortion_metrics(z_ref, z_hat) -> dict:
    """mse, flattened si_sdr, and mean per-frame RMS difference (lsd)."""
    ref = np.asarray(z_ref, dtype=np.float64)
    hat = np.asarray(z_hat, dtype=np.float64)
    if ref.shape != hat.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {hat.shape}")
    diff = ref - hat
    return {
        "mse": float(np.mean(diff**2)),
        "si_sdr": si_sdr(ref, hat),
        "lsd": float(np.mean(np.sqrt(np.mean(diff**2, axis=0)))),
    }


class AkimaInterpolant:
    """Classic Akima cubic through strictly increasing knots.

    Knot slopes blend the four surrounding segment slopes weighted by how
    non-linear each side is; two phantom segments extrapolated at each end
    supply boundary slopes. Flat runs stay exactly flat (no overshoot).
    With two knots this degrades to the straight line, with three to the
    parabola through the points.
    """

    def __init__(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.ndim != 1 or xs.shape != ys.shape:
            raise ValueError("xs and ys must be matching 1-D arrays")
        if xs.size < 2:
            raise ValueError("need at least two knots")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("knots must be strictly increasing")
        self.xs = xs
        self.ys = ys
        self.slopes = self._knot_slopes(xs, ys)

    @staticmethod
    def _knot_slopes(xs, ys) -> np.ndarray:
        n = xs.size
        seg = np.diff(ys) / np.diff(xs)
        if n == 2:
            return np.array([seg[0], seg[0]])
        if n == 3:
            # slopes of the unique parabola through the three points
            t = np.empty(3)
            for i in range(3):
                others = [j for j in range(3) if j != i]
                a, b = others
                t[i] = ys[a] * (xs[i] - xs[b]) / ((xs[a] - xs[b]) * (xs[a] - xs[i])) + ys[b] * (
                    xs[i] - xs[a]
                ) / ((xs[b] - xs[a]) * (xs[b] - xs[i]))
                t[i] += ys[i] * (2 * xs[i] - xs[a] - xs[b]) / ((xs[i] - xs[a]) * (xs[i] - xs[b]))
            return t
        m = np.empty(n + 3)
        m[2:-2] = seg
        m[1] = 2.0 * m[2] - m[3]
        m[0] = 2.0 * m[1] - m[2]
        m[-2] = 2.0 * m[-3] - m[-4]
        m[-1] = 2.0 * m[-2] - m[-3]
        t = np.empty(n)
        for i in range(n):
            m1, m2, m3, m4 = m[i], m[i + 1], m[i + 2], m[i + 3]
            w_right = abs(m4 - m3)
            w_left = abs(m2 - m1)
            if w_right + w_left == 0.0:
                t[i] = 0.5 * (m2 + m3)
            else:
                t[i] = (w_right * m2 + w_left * m3) / (w_right + w_left)
        return t

    def __call__(self, x):
        x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
        idx = np.clip(np.searchsorted(self.xs, x_arr, side="right") - 1, 0, self.xs.size - 2)
        x0 = self.xs[idx]
        h = self.xs[idx + 1] - x0
        u = (x_arr - x0) / h
        u2 = u * u
        u3 = u2 * u
        h00 = 2 * u3 - 3 * u2 + 1
        h10 = u3 - 2 * u2 + u
        h01 = -2 * u3 + 3 * u2
        h11 = u3 - u2
        out = (
            h00 * self.ys[idx]
            + h10 * h * self.slopes[idx]
            + h01 * self.ys[idx + 1]
            + h11 * h * self.slopes[idx + 1]
        )
        return float(out[0]) if np.isscalar(x) or np.asarray(x).ndim == 0 else out


def akima_interp(xs, ys) -> AkimaInterpolant:
    """Build the interpolant; see :class:`AkimaInterpolant`."""
    return AkimaInterpolant(xs, ys)


def composite_simpson(fn, lo: float, hi: float, panels: int = 1000) -> float:
    """Composite Simpson quadrature with an even number of panels."""
    if panels < 2 or panels % 2:
        raise ValueError("panels must be a positive even count")
    xs = np.linspace(lo, hi, panels + 1)
    ys = np.asarray(fn(xs), dtype=np.float64)
    h = (hi - lo) / panels
    return float(h / 3.0 * (ys[0] + ys[-1] + 4.0 * ys[1:-1:2].sum() + 2.0 * ys[2:-2:2].sum()))


@dataclass
class RDCurve:
    """Operating points of one system: bitrates in kbps and quality scores."""

    label: str
    bitrates: np.ndarray
    qualities: np.ndarray

    def __post_init__(self):
        self.bitrates = np.asarray(self.bitrates, dtype=np.float64)
        self.qualities = np.asarray(self.qualities, dtype=np.float64)
        if self.bitrates.ndim != 1 or self.bitrates.shape != self.qualities.shape:
            raise ValueError("bitrates and qualities must be matching 1-D arrays")
        if self.bitrates.size < 2:
            raise ValueError(f"curve '{self.label}' needs at least two points")
        if np.any(self.bitrates <= 0):
            raise ValueError(f"curve '{self.label}' has non-positive bitrates")
        if not np.all(np.isfinite(self.bitrates)) or not np.all(np.isfinite(self.qualities)):
            raise ValueError(f"curve '{self.label}' has non-finite entries")
        order = np.argsort(self.bitrates, kind="stable")
        self.bitrates = self.bitrates[order]
        self.qualities = self.qualities[order]
        dup = np.diff(self.bitrates) == 0
        if np.any(dup):
            same = dup & (np.diff(self.qualities) == 0)
            if not np.all(dup == same):
                raise ValueError(f"curve '{self.label}' repeats a bitrate with two qualities")
            keep = np.concatenate([[True], ~dup])
            self.bitrates = self.bitrates[keep]
            self.qualities = self.qualities[keep]


@dataclass(frozen=True)
class BDRateReport:
    reference: str
    test: str
    metric: str
    bd_rate_percent: float
    quality_range: tuple

    def to_json(self) -> str:
        return json.dumps(
            {
                "reference": self.reference,
                "test": self.test,
                "metric": self.metric,
                "bd_rate_percent": self.bd_rate_percent,
                "quality_range": list(self.quality_range),
            },
            indent=2,
        )


def _quality_sorted(curve: RDCurve):
    order = np.argsort(curve.qualities, kind="stable")
    q = curve.qualities[order]
    r = curve.bitrates[order]
    if np.any(np.diff(q) == 0):
        raise ValueError(
            f"curve '{curve.label}': duplicate quality values; quality must be "
            "strictly monotone in bitrate for BD-rate"
        )
    return q, r


def bd_rate(reference: RDCurve, test: RDCurve, metric: str = "quality", panels: int = 1000) -> BDRateReport:
    """Average bitrate change of ``test`` relative to ``reference`` in percent.

    Integrates log-bitrate over the overlapping quality range with composite
    Simpson quadrature on Akima interpolants. Swapping the arguments inverts
    the factor: ``(1 + a/100) * (1 + b/100) == 1``.
    """
    q_ref, r_ref = _quality_sorted(reference)
    q_test, r_test = _quality_sorted(test)
    lo = max(q_ref.min(), q_test.min())
    hi = min(q_ref.max(), q_test.max())
    if not hi > lo:
        raise ValueError(
            f"no quality overlap between '{reference.label}' "
            f"[{q_ref.min():g}, {q_ref.max():g}] and '{test.label}' "
            f"[{q_test.min():g}, {q_test.max():g}]"
        )
    fit_ref = akima_interp(q_ref, np.log(r_ref))
    fit_test = akima_interp(q_test, np.log(r_test))
    mean_ref = composite_simpson(fit_ref, lo, hi, panels) / (hi - lo)
    mean_test = composite_simpson(fit_test, lo, hi, panels) / (hi - lo)
    return BDRateReport(
        reference=reference.label,
        test=test.label,
        metric=metric,
        bd_rate_percent=(math.exp(mean_test - mean_ref) - 1.0) * 100.0,
        quality_range=(lo, hi),
    )


RD_CSV_FIELDS = ("label", "bitrate_kbps", "metric_name", "value")


def write_rd_csv(points, label: str, path) -> None:
    """Write sweep points as ``label, bitrate_kbps, metric_name, value`` rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RD_CSV_FIELDS)
        for point in points:
            tag = f"{label}:{point.mode}"
            for name, value in sorted(point.metrics.items()):
                writer.writerow([tag, repr(point.bitrate_kbps), name, repr(value)])


def read_rd_curve(path, metric: str, label: str | None = None) -> RDCurve:
    """Load one curve (optionally filtered by label) for one metric."""
    bitrates = []
    qualities = []
    seen = set()
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(RD_CSV_FIELDS) - set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {RD_CSV_FIELDS}")
        for row in reader:
            seen.add(row["label"])
            if label is not None and row["label"] != label:
                continue
            if row["metric_name"] != metric:
                continue
            bitrates.append(float(row["bitrate_kbps"]))
            qualities.append(float(row["value"]))
    if not bitrates:
        raise ValueError(
            f"{path}: no rows for metric '{metric}'"
            + (f" and label '{label}' (labels present: {sorted(seen)})" if label else "")
        )
    return RDCurve(label or path, np.array(bitrates), np.array(qualities))


def export_importance_csv(encoding, path) -> None:
    """Per-frame importance and depth as CSV, with a mean-bitrate header line.

    Only variable-rate encodings carry an importance map; constant-rate input
    raises ValueError.
    """
    if encoding.mode != "vbr" or encoding.importance is None:
        raise ValueError("importance export needs a variable-rate encoding")
    depths = np.asarray(encoding.depths)
    depth_bits = max(0, (encoding.n_stages - 1).bit_length())
    bits = float(np.sum(depth_bits + encoding.code_bits * depths))
    seconds = encoding.frames * encoding.frame_rate_den / encoding.frame_rate_num
    mean_kbps = bits / seconds / 1000.0
    with open(path, "w", newline="") as f:
        f.write(f"# mean_bitrate_kbps={mean_kbps!r}\n")
        writer = csv.writer(f)
        writer.writerow(["frame", "importance", "depth"])
        for t in range(encoding.frames):
            writer.writerow([t, repr(float(encoding.importance[t])), int(depths[t])])
