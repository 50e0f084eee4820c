#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>

#include "runet/tensor.hpp"

namespace runet {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// prob >= threshold maps to foreground (so exactly 0.5 is foreground).
template <typename T>
Tensor<T> binarize(const Tensor<T>& probs, T threshold = T(0.5)) {
    Tensor<T> out(probs.shape);
    for (int64_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? T(1) : T(0);
    return out;
}

template <typename T>
ConfusionCounts confusion(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask) {
    if (pred_mask.shape != gt_mask.shape)
        throw InvalidShapeError(cat("confusion: shape mismatch ", shape_str(pred_mask.shape),
                                    " vs ", shape_str(gt_mask.shape)));
    ConfusionCounts c;
    for (int64_t i = 0; i < pred_mask.size(); ++i) {
        bool p = pred_mask[i] > T(0.5), g = gt_mask[i] > T(0.5);
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

// Degenerate-denominator conventions: empty gt and empty pred agree perfectly
// (score 1); an empty side against a non-empty one scores 0. These keep the
// f1 = 2*iou/(1+iou) identity valid in every case.
inline double iou(const ConfusionCounts& c) {
    int64_t den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : double(c.tp) / double(den);
}

inline double precision(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
    return double(c.tp) / double(c.tp + c.fp);
}

inline double recall(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
    return double(c.tp) / double(c.tp + c.fn);
}

inline double f1(const ConfusionCounts& c) {
    double p = precision(c), r = recall(c);
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

struct PerImageMetrics {
    std::string id;
    double iou = 0, precision = 0, recall = 0, f1 = 0;
};

template <typename T>
PerImageMetrics image_metrics(std::string id, const Tensor<T>& prob, const Tensor<T>& gt,
                              T threshold = T(0.5)) {
    ConfusionCounts c = confusion(binarize(prob, threshold), gt);
    return {std::move(id), iou(c), precision(c), recall(c), f1(c)};
}

struct MetricsReport {
    std::vector<PerImageMetrics> per_image;
    double mean_iou = 0, mean_precision = 0, mean_recall = 0, mean_f1 = 0;
};

// Unweighted mean over images (not pixel-pooled).
inline MetricsReport mean_metrics(std::vector<PerImageMetrics> per_image) {
    if (per_image.empty()) throw InvalidDataError("mean_metrics: empty image list");
    MetricsReport r;
    for (const auto& m : per_image) {
        r.mean_iou += m.iou;
        r.mean_precision += m.precision;
        r.mean_recall += m.recall;
        r.mean_f1 += m.f1;
    }
    double n = double(per_image.size());
    r.mean_iou /= n;
    r.mean_precision /= n;
    r.mean_recall /= n;
    r.mean_f1 /= n;
    r.per_image = std::move(per_image);
    return r;
}

struct BreakEven {
    double threshold = 0;
    double value = 0;  // (precision + recall) / 2 at the break-even threshold
};

// Sweeps the binarization threshold over all distinct predicted scores with
// dataset-pooled counts and returns the threshold minimizing |P - R|.
// Implemented with a descending sort + running counts, which visits each
// candidate threshold in O(1) after the sort; the test oracle recounts every
// threshold from scratch.
template <typename T>
BreakEven pr_break_even(const std::vector<Tensor<T>>& prob_maps,
                        const std::vector<Tensor<T>>& gt_masks) {
    if (prob_maps.size() != gt_masks.size() || prob_maps.empty())
        throw InvalidDataError("pr_break_even: prob/gt list size mismatch or empty");
    std::vector<std::pair<T, bool>> scored;  // (score, is_foreground)
    int64_t total_fg = 0;
    for (size_t i = 0; i < prob_maps.size(); ++i) {
        const Tensor<T>&p = prob_maps[i], &g = gt_masks[i];
        if (p.size() != g.size())
            throw InvalidShapeError("pr_break_even: prob/gt element count mismatch");
        for (int64_t j = 0; j < p.size(); ++j) {
            bool fg = g[j] > T(0.5);
            total_fg += fg;
            scored.emplace_back(p[j], fg);
        }
    }
    if (total_fg == 0) throw InvalidDataError("pr_break_even: ground truth has no foreground");

    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    BreakEven best;
    double best_gap = std::numeric_limits<double>::infinity();
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < scored.size()) {
        T thr = scored[i].first;
        // consume the whole tie group: threshold thr predicts all scores >= thr
        while (i < scored.size() && scored[i].first == thr) {
            if (scored[i].second)
                ++tp;
            else
                ++fp;
            ++i;
        }
        double p = double(tp) / double(tp + fp);
        double r = double(tp) / double(total_fg);
        double gap = std::abs(p - r);
        if (gap < best_gap) {
            best_gap = gap;
            best = {double(thr), (p + r) / 2.0};
        }
    }
    return best;
}

inline void write_metrics_csv(const std::string& path, const MetricsReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError(cat("cannot open ", path, " for writing"));
    out << "image,iou,precision,recall,f1\n" << std::setprecision(6) << std::fixed;
    for (const auto& m : report.per_image)
        out << m.id << ',' << m.iou << ',' << m.precision << ',' << m.recall << ',' << m.f1
            << '\n';
    out << "mean," << report.mean_iou << ',' << report.mean_precision << ',' << report.mean_recall
        << ',' << report.mean_f1 << '\n';
    if (!out) throw IoError(cat("failed writing ", path));
}

}  // namespace runet
