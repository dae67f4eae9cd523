"""MCU-side roles: image pre-processing, post-processing and bus accounting.

The co-processor runs only the backbone; the host normalizes images into
int8, applies the fully-connected head / top-k / NMS on the returned
feature vector, and moves frames over SDIO or SPI.  ``system_report``
combines a simulator trace with a bus model into frame-level figures
(sustained FPS, energy per frame, processing efficiency in Frames/s/mJ).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ir import TensorShape
from .oracle import RefTensor


class HostError(ValueError):
    pass


# -- images ---------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> (h, w, 3) uint8."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise HostError("not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise HostError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after the header
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=h * w * 3)
    if pixels.size != h * w * 3:
        raise HostError("truncated PPM pixel data")
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise HostError("write_ppm wants (h, w, 3) uint8")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def preprocess(image: np.ndarray, mean, scale) -> RefTensor:
    """Color normalization: per-channel (v - mean) * scale, rounded to int8."""
    h, w, c = image.shape
    if h > 256 or w > 256:
        raise HostError(f"image {w}x{h} exceeds the 256x256 input budget")
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (c,))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float32), (c,))
    v = (image.astype(np.float32) - mean) * scale
    q = np.clip(np.rint(v), -128, 127).astype(np.int8)
    return RefTensor(TensorShape(h, w, c), np.ascontiguousarray(q.transpose(2, 0, 1)))


# -- classification head ----------------------------------------------------------

def fc_head(feature: np.ndarray, weights: np.ndarray, scale: float) -> np.ndarray:
    """int8 x int8 fully-connected layer -> float32 logits."""
    feature = np.asarray(feature, dtype=np.int8)
    weights = np.asarray(weights, dtype=np.int8)
    if weights.ndim != 2 or weights.shape[1] != feature.size:
        raise HostError(f"weight shape {weights.shape} does not match "
                        f"{feature.size}-dim feature")
    acc = weights.astype(np.int32) @ feature.astype(np.int32)
    return acc.astype(np.float32) * np.float32(scale)


def topk(logits: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest logits; ties broken by lower index."""
    order = np.argsort(-np.asarray(logits), kind="stable")
    return [int(i) for i in order[:k]]


# -- detection --------------------------------------------------------------------

@dataclass(frozen=True)
class DetBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    cls: int = 0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise HostError("degenerate box")
        if not 0.0 <= self.score <= 1.0:
            raise HostError("score must be in [0, 1]")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def iou(a: DetBox, b: DetBox) -> float:
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(boxes: list[DetBox], iou_thresh: float) -> list[DetBox]:
    """Greedy score-descending suppression of boxes with IoU > threshold."""
    if not 0.0 < iou_thresh < 1.0:
        raise HostError("iou_thresh must be in (0, 1)")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


# -- bus and system model ----------------------------------------------------------

@dataclass(frozen=True)
class BusSpec:
    kind: str
    bandwidth: float  # bits/s

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise HostError("bus bandwidth must be positive")


SDIO = BusSpec("SDIO", 500e6)
SPI = BusSpec("SPI", 100e6)


def fps_bound(image: TensorShape, bus: BusSpec) -> float:
    """Frames/s the bus sustains for RGB frames of this size."""
    return bus.bandwidth / (image.h * image.w * 3 * 8)


@dataclass
class SystemProfile:
    stats: object            # TraceStats
    bus: BusSpec
    image: TensorShape
    mcu_overhead_s: float = 0.0
    mcu_power_w: float = 0.0


def processing_efficiency(fps: float, energy_per_frame_mj: float) -> float:
    """Frames per second per millijoule."""
    if energy_per_frame_mj == 0:
        return float("inf")
    return fps / energy_per_frame_mj


def system_report(profile: SystemProfile) -> dict:
    """Frame latency, sustained FPS, energy split and processing efficiency.

    Compute and transfer overlap under double buffering, so the frame
    time is max(compute, transfer) plus any host overhead.  NCP and MCU
    energy are reported separately; efficiency uses their sum.
    """
    stats = profile.stats
    compute_s = stats.latency_s
    transfer_s = 1.0 / fps_bound(profile.image, profile.bus)
    frame_s = max(compute_s, transfer_s) + profile.mcu_overhead_s
    fps = 1.0 / frame_s
    ncp_mj = stats.energy_j * 1e3
    mcu_mj = profile.mcu_power_w * frame_s * 1e3
    return {
        "bus": profile.bus.kind,
        "compute_latency_ms": compute_s * 1e3,
        "transfer_time_ms": transfer_s * 1e3,
        "frame_time_ms": frame_s * 1e3,
        "fps_bus_bound": fps_bound(profile.image, profile.bus),
        "fps": fps,
        "ncp_energy_per_frame_mj": ncp_mj,
        "mcu_energy_per_frame_mj": mcu_mj,
        "ncp_avg_power_mw": stats.avg_power_w * 1e3,
        "processing_efficiency": processing_efficiency(fps, ncp_mj + mcu_mj),
    }


def system_report_text(report: dict) -> str:
    return "".join(f"{k:<26} {v:.6g}\n" if isinstance(v, float)
                   else f"{k:<26} {v}\n" for k, v in report.items())
