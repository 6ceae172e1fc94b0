"""
Pixel, geometric and temporal measures of a score follower.

Pixel measures are micro-averaged: counts are summed over every frame of
every piece before precision and recall are formed.
"""

from dataclasses import dataclass

import numpy as np
from django.conf import settings

from tensorcore.exceptions import ContractViolation
from tracking.services import center_of_mass


def _setting(key):
    return settings.PAGETRACK[key]


@dataclass
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return PixelCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def scores(self):
        """(precision, recall, f1); a zero denominator gives 0."""
        precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1


def pixel_counts(pred_masks, gt_masks, threshold=None):
    threshold = _setting("THRESHOLD") if threshold is None else threshold
    pred_masks, gt_masks = np.asarray(pred_masks), np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ContractViolation(f"prediction {pred_masks.shape} and ground truth {gt_masks.shape} differ in shape")
    pred = pred_masks >= threshold
    gt = gt_masks.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    return PixelCounts(tp, int(np.count_nonzero(pred)) - tp, int(np.count_nonzero(gt)) - tp)


def pixel_metrics(pred_masks, gt_masks, threshold=None):
    return pixel_counts(pred_masks, gt_masks, threshold).scores()


def alignment_error_cm(pred_mask, gt_mask, threshold=None, downscale=None, cm_per_pixel=None, weighted=True):
    """
    Distance between the centers of mass of prediction and ground truth in
    cm. Masks are at model resolution and scaled by ``downscale`` to the
    full page before conversion. None when the prediction is empty.
    """
    downscale = _setting("DOWNSCALE") if downscale is None else downscale
    cm_per_pixel = _setting("CM_PER_PIXEL") if cm_per_pixel is None else cm_per_pixel
    gt_center = center_of_mass(gt_mask, threshold, weighted)
    if gt_center is None:
        raise ContractViolation("ground-truth mask is empty")
    pred_center = center_of_mass(pred_mask, threshold, weighted)
    if pred_center is None:
        return None
    distance = np.hypot(pred_center[0] - gt_center[0], pred_center[1] - gt_center[1])
    return float(distance * downscale * cm_per_pixel)


def onset_errors(predicted, true):
    """Absolute errors; onsets without a prediction (None or NaN) get infinity."""
    predicted = np.array([np.nan if p is None else p for p in predicted], dtype=np.float64)
    errors = np.abs(predicted - np.asarray(true, dtype=np.float64))
    errors[np.isnan(errors)] = np.inf
    return errors


def onset_error_table(predicted, true, thresholds=None):
    """Cumulative fraction of onsets tracked within each threshold (seconds)."""
    thresholds = _setting("ONSET_THRESHOLDS") if thresholds is None else thresholds
    errors = onset_errors(predicted, true)
    if len(errors) == 0:
        return {float(tau): 0.0 for tau in thresholds}
    return {float(tau): float(np.mean(errors <= tau)) for tau in thresholds}
