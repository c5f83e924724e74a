"""Pose accuracy metrics over a query set."""
from dataclasses import dataclass

import numpy as np

from .errors import UnknownFrame
from .geometry import pose_error

DEFAULT_THRESHOLDS = ((5.0, 5.0), (10.0, 5.0))   # (cm, degrees)


@dataclass(frozen=True)
class FrameResult:
    frame_id: str
    translation_cm: float
    rotation_deg: float
    inliers: int
    success: bool


@dataclass
class EvalReport:
    frames: list
    thresholds: tuple = DEFAULT_THRESHOLDS

    def _errors(self):
        t = np.array([f.translation_cm for f in self.frames], dtype=np.float64)
        r = np.array([f.rotation_deg for f in self.frames], dtype=np.float64)
        return t, r

    def accuracy(self, cm, deg):
        """Percentage of frames with both errors strictly below the threshold."""
        if not self.frames:
            return 0.0
        t, r = self._errors()
        return 100.0 * float(np.mean((t < cm) & (r < deg)))

    @property
    def accuracies(self):
        return {(cm, deg): self.accuracy(cm, deg) for cm, deg in self.thresholds}

    @property
    def median_translation_cm(self):
        return float(np.median(self._errors()[0])) if self.frames else float("inf")

    @property
    def median_rotation_deg(self):
        return float(np.median(self._errors()[1])) if self.frames else float("inf")

    @property
    def failures(self):
        return sum(not f.success for f in self.frames)

    def summary(self):
        lines = [f"frames: {len(self.frames)}", f"failures: {self.failures}"]
        for (cm, deg), acc in self.accuracies.items():
            lines.append(f"accuracy ({cm:g}cm, {deg:g}deg): {acc:.1f}%")
        lines.append(f"median translation: {self.median_translation_cm:.2f} cm")
        lines.append(f"median rotation: {self.median_rotation_deg:.3f} deg")
        return "\n".join(lines)


def evaluate(estimates, ground_truth, thresholds=DEFAULT_THRESHOLDS):
    """Compare ``estimates`` (frame id -> object with pose/inlier_count/success)
    against ``ground_truth`` (frame id -> Pose).

    Failed or missing frames get infinite error, so they miss every threshold
    and sort last for the medians.
    """
    unknown = sorted(set(estimates) - set(ground_truth))
    if unknown:
        raise UnknownFrame(f"estimate for unknown frame {unknown[0]!r}")
    frames = []
    for fid in sorted(ground_truth):
        est = estimates.get(fid)
        if est is None or not est.success:
            frames.append(FrameResult(fid, float("inf"), float("inf"),
                                      0 if est is None else int(est.inlier_count), False))
            continue
        cm, deg = pose_error(est.pose, ground_truth[fid])
        frames.append(FrameResult(fid, float(cm), float(deg), int(est.inlier_count), True))
    return EvalReport(frames, tuple(tuple(map(float, th)) for th in thresholds))
