#include "ctxbias/detector/eval.hpp"

#include <algorithm>
#include <cmath>

namespace ctxbias::det {

std::vector<DetectionRecord> match_detections(std::vector<DetectionRecord> dets,
                                              const std::vector<InstanceAnnotation>& annotations,
                                              double iou_threshold) {
    if (iou_threshold <= 0.0 || iou_threshold >= 1.0)
        throw numeric_error("match_detections: iou_threshold must lie in (0,1)");

    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < dets.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (dets[a].confidence != dets[b].confidence)
            return dets[a].confidence > dets[b].confidence;
        return dets[a].cell_index < dets[b].cell_index;
    });

    std::vector<bool> gt_used(annotations.size(), false);
    for (size_t oi : order) {
        DetectionRecord& d = dets[oi];
        d.matched_gt.reset();
        d.iou_with_match.reset();
        int best = -1;
        double best_iou = 0.0;
        for (size_t g = 0; g < annotations.size(); ++g) {
            if (gt_used[g] || annotations[g].class_id != d.class_id) continue;
            const double v = iou(d.bbox, annotations[g].bbox);
            if (v >= iou_threshold && v > best_iou) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) {
            gt_used[static_cast<size_t>(best)] = true;
            d.matched_gt = best;
            d.iou_with_match = best_iou;
        }
    }
    return dets;
}

EvalResult evaluate_map(const std::vector<std::vector<DetectionRecord>>& dets_per_image,
                        const Dataset& dataset, double iou_threshold) {
    if (dets_per_image.size() != dataset.images.size())
        throw numeric_error("evaluate_map: detections/images count mismatch");

    std::map<int, int> gt_count;
    for (const auto& im : dataset.images)
        for (const auto& ann : im.instances) ++gt_count[ann.class_id];
    if (gt_count.empty()) throw numeric_error("evaluate_map: no ground truth annotations");

    EvalResult out;
    for (const auto& [cls, n_gt] : gt_count) {
        // rank all detections of this class across images
        struct Entry {
            double confidence;
            size_t image;
            int cell;
            Box box;
        };
        std::vector<Entry> entries;
        for (size_t i = 0; i < dets_per_image.size(); ++i)
            for (const auto& d : dets_per_image[i])
                if (d.class_id == cls) entries.push_back({d.confidence, i, d.cell_index, d.bbox});
        std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            if (a.confidence != b.confidence) return a.confidence > b.confidence;
            if (a.image != b.image) return a.image < b.image;
            return a.cell < b.cell;
        });

        std::vector<std::vector<bool>> used(dataset.images.size());
        for (size_t i = 0; i < dataset.images.size(); ++i)
            used[i].assign(dataset.images[i].instances.size(), false);

        std::vector<int> is_tp(entries.size(), 0);
        for (size_t e = 0; e < entries.size(); ++e) {
            const auto& anns = dataset.images[entries[e].image].instances;
            int best = -1;
            double best_iou = 0.0;
            for (size_t g = 0; g < anns.size(); ++g) {
                if (used[entries[e].image][g] || anns[g].class_id != cls) continue;
                const double v = iou(entries[e].box, anns[g].bbox);
                if (v >= iou_threshold && v > best_iou) {
                    best = static_cast<int>(g);
                    best_iou = v;
                }
            }
            if (best >= 0) {
                used[entries[e].image][static_cast<size_t>(best)] = true;
                is_tp[e] = 1;
            }
        }

        // all-point interpolated AP: area under the precision envelope
        std::vector<double> precision(entries.size()), recall(entries.size());
        int tp = 0;
        for (size_t e = 0; e < entries.size(); ++e) {
            tp += is_tp[e];
            precision[e] = static_cast<double>(tp) / static_cast<double>(e + 1);
            recall[e] = static_cast<double>(tp) / static_cast<double>(n_gt);
        }
        for (size_t e = entries.size(); e-- > 1;)
            precision[e - 1] = std::max(precision[e - 1], precision[e]);
        double ap = 0.0;
        double prev_recall = 0.0;
        for (size_t e = 0; e < entries.size(); ++e) {
            if (is_tp[e]) {
                ap += (recall[e] - prev_recall) * precision[e];
                prev_recall = recall[e];
            }
        }
        out.ap_per_class[cls] = ap;
    }

    double sum = 0.0;
    for (const auto& [cls, ap] : out.ap_per_class) sum += ap;
    out.map = sum / static_cast<double>(out.ap_per_class.size());
    return out;
}

}  // namespace ctxbias::det
