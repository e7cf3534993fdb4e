#pragma once

#include <map>
#include <vector>

#include "ctxbias/core/dataset.hpp"
#include "ctxbias/core/types.hpp"

namespace ctxbias::det {

// Greedy matching in descending confidence: a detection is a true positive
// iff its class matches and IoU >= threshold; each ground truth is assigned
// at most once. Returns the detections with matched_gt / iou_with_match set.
std::vector<DetectionRecord> match_detections(std::vector<DetectionRecord> dets,
                                              const std::vector<InstanceAnnotation>& annotations,
                                              double iou_threshold);

struct EvalResult {
    std::map<int, double> ap_per_class;  // classes present in ground truth
    double map = 0.0;
};

// mAP at the given IoU threshold; AP per class via all-point interpolation
// of the precision-recall curve, mean over classes present in ground truth.
EvalResult evaluate_map(const std::vector<std::vector<DetectionRecord>>& dets_per_image,
                        const Dataset& dataset, double iou_threshold = 0.5);

}  // namespace ctxbias::det
