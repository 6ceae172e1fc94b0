import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from django.conf import settings
from tqdm import tqdm

from dataset.positions import frame_targets
from dsp.processing import frame_centers
from tensorcore.exceptions import ContractViolation
from tracking.services import ScoreTracker, center_of_mass, score_time, standardized_frames

from .choices import EvalMode
from .metrics import PixelCounts, alignment_error_cm, onset_errors, onset_error_table, pixel_counts

logger = logging.getLogger(__name__)


@dataclass
class PieceResult:
    piece: str
    counts: PixelCounts = field(default_factory=PixelCounts)
    errors_cm: list = field(default_factory=list)
    frames: int = 0
    unpredicted_frames: int = 0
    onset_times: list = field(default_factory=list)
    predicted_times: list = field(default_factory=list)

    def summary(self):
        precision, recall, f1 = self.counts.scores()
        errors = np.asarray(self.errors_cm)
        return {
            "piece": self.piece,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "mean_err_cm": float(errors.mean()) if len(errors) else None,
            "median_err_cm": float(np.median(errors)) if len(errors) else None,
            "frames": self.frames,
            "unpredicted_frames": self.unpredicted_frames,
        }


@dataclass
class EvalReport:
    mode: str
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    mean_err_cm: Optional[float] = None
    median_err_cm: Optional[float] = None
    onset_table: dict = field(default_factory=dict)
    frames: int = 0
    predicted_frames: int = 0
    unpredicted_frames: int = 0
    onsets: int = 0
    predicted_onsets: int = 0
    aggregation: str = "frame"
    per_piece: list = field(default_factory=list)

    def to_dict(self):
        data = asdict(self)
        data["onset_table"] = {f"{tau:g}": value for tau, value in self.onset_table.items()}
        return data


def n_frames(piece, fps=None):
    fps = fps or settings.PAGETRACK["FPS"]
    if piece.features is not None:
        return len(piece.features)
    return len(frame_centers(len(piece.audio.samples), piece.audio.sample_rate, fps))


def evaluate_piece(model, piece, mode=EvalMode.ALL, threshold=None, weighted=True, oracle=False, stride=1):
    """
    Runs the tracker over one piece (or plays back the ground truth when
    ``oracle`` is set) and collects every measure the mode asks for.
    """
    mode = EvalMode(mode)
    fps = settings.PAGETRACK["FPS"]
    page, track = piece.model_view
    if oracle:
        count = n_frames(piece, fps)
        masks = iter(frame_targets(page, track, count, fps).astype(np.float32))
    else:
        frames = standardized_frames(model, piece)
        count = len(frames)
        masks = (p.mask for p in ScoreTracker(model, page, threshold, weighted, stride).run(frames))
    targets = frame_targets(page, track, count, fps)
    onset_frames = {}
    for index, onset in enumerate(track.onsets):
        onset_frames.setdefault(min(int(np.floor(onset * fps + 0.5)), count - 1), []).append(index)

    result = PieceResult(piece.id, frames=count)
    result.onset_times = [float(t) for t in track.onsets]
    result.predicted_times = [None] * len(track)
    for f, (mask, target) in enumerate(zip(masks, targets)):
        if mode.includes(EvalMode.PIXEL):
            result.counts = result.counts + pixel_counts(mask, target, threshold)
        position = center_of_mass(mask, threshold, weighted)
        if position is None:
            result.unpredicted_frames += 1
        elif mode.includes(EvalMode.GEOMETRIC):
            result.errors_cm.append(alignment_error_cm(mask, target, threshold, piece.page.downscale, weighted=weighted))
        if mode.includes(EvalMode.TEMPORAL) and position is not None:
            for index in onset_frames.get(f, ()):
                result.predicted_times[index] = score_time(position, page, track)
    return result


def aggregate(results, mode=EvalMode.ALL, thresholds=None, per_piece=False):
    """Merges per-piece results; pixel counts and onset errors are pooled."""
    mode = EvalMode(mode)
    report = EvalReport(mode=mode.value, aggregation="piece" if per_piece else "frame")
    report.frames = sum(r.frames for r in results)
    report.unpredicted_frames = sum(r.unpredicted_frames for r in results)
    report.predicted_frames = report.frames - report.unpredicted_frames
    report.per_piece = [r.summary() for r in results]

    if mode.includes(EvalMode.PIXEL):
        counts = sum((r.counts for r in results), PixelCounts())
        report.precision, report.recall, report.f1 = counts.scores()
    if mode.includes(EvalMode.GEOMETRIC):
        if per_piece:
            means = [s["mean_err_cm"] for s in report.per_piece if s["mean_err_cm"] is not None]
            medians = [s["median_err_cm"] for s in report.per_piece if s["median_err_cm"] is not None]
            if means:
                report.mean_err_cm, report.median_err_cm = float(np.mean(means)), float(np.median(medians))
        else:
            errors = np.concatenate([np.asarray(r.errors_cm, dtype=np.float64) for r in results] or [[]])
            if len(errors):
                report.mean_err_cm, report.median_err_cm = float(errors.mean()), float(np.median(errors))
    if mode.includes(EvalMode.TEMPORAL):
        predicted = [p for r in results for p in r.predicted_times]
        true = [t for r in results for t in r.onset_times]
        report.onset_table = onset_error_table(predicted, true, thresholds)
        report.onsets = len(true)
        report.predicted_onsets = sum(p is not None for p in predicted)
    return report


def evaluate(model, pieces, mode=EvalMode.ALL, threshold=None, weighted=True, oracle=False, per_piece=False,
             stride=1, progress=False):
    """Evaluate a model (or the ground-truth oracle) on pieces; returns (report, onset rows)."""
    pieces = list(pieces)
    if not pieces:
        raise ContractViolation("nothing to evaluate")
    if model is None and not oracle:
        raise ContractViolation("a model is required unless the oracle predictor is used")
    results = [
        evaluate_piece(model, piece, mode, threshold, weighted, oracle, stride)
        for piece in tqdm(pieces, desc="evaluate", disable=not progress)
    ]
    report = aggregate(results, mode, per_piece=per_piece)
    logger.info(
        f"Evaluated {len(pieces)} pieces ({report.frames} frames, {report.unpredicted_frames} unpredicted): "
        f"F1 {report.f1}, mean error {report.mean_err_cm} cm"
    )
    return report, onset_rows(results)


def onset_rows(results):
    rows = []
    for result in results:
        errors = onset_errors(result.predicted_times, result.onset_times)
        for onset, predicted, error in zip(result.onset_times, result.predicted_times, errors):
            rows.append({"piece": result.piece, "onset_time": onset, "predicted_time": predicted, "abs_error": error})
    return rows


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(report.to_dict()), f, indent=2, sort_keys=True)
        f.write("\n")


def write_onsets(rows, path):
    columns = ["piece", "onset_time", "predicted_time", "abs_error"]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
