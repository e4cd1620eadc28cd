"""Image-level metrics used in place of distribution metrics at desk scale."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


@dataclass
class FrameMetric:
    index: int
    generated: str
    ground_truth: str
    mse: float
    psnr_db: float

    @property
    def exact(self) -> bool:
        return math.isinf(self.psnr_db)

    def to_json(self) -> dict:
        d = asdict(self)
        d["psnr_db"] = None if self.exact else self.psnr_db
        d["exact"] = self.exact
        return d


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)
    coverage_fraction: float | None = None
    asset_fraction: float | None = None
    runtime_s: float | None = None

    @property
    def mean_psnr_db(self) -> float | None:
        finite = [f.psnr_db for f in self.frames if not f.exact]
        return float(np.mean(finite)) if finite else None

    def to_json(self) -> dict:
        doc = {
            "n_frames": len(self.frames),
            "frames": [f.to_json() for f in self.frames],
            "mean_psnr_db": self.mean_psnr_db,
            "all_exact": all(f.exact for f in self.frames),
            "coverage_fraction": self.coverage_fraction,
            "asset_fraction": self.asset_fraction,
        }
        if self.runtime_s is not None:
            doc["runtime_s"] = self.runtime_s
        return doc

    def csv_rows(self) -> list[list[str]]:
        rows = [["index", "generated", "ground_truth", "mse", "psnr_db"]]
        for f in self.frames:
            rows.append([str(f.index), f.generated, f.ground_truth, f"{f.mse:.10g}",
                         "inf" if f.exact else f"{f.psnr_db:.6f}"])
        return rows
