#include "ctxbias/assoc/assoc.hpp"

#include <algorithm>
#include <cmath>

#include "ctxbias/core/rng.hpp"

namespace ctxbias::assoc {

ExtractedFeatures extract_features(const Mask& cam_grid, const Mask& instance_grid,
                                   const FeatureTensor& activation) {
    const int h = static_cast<int>(activation.height());
    const int w = static_cast<int>(activation.width());
    const int c = static_cast<int>(activation.channels());
    if (cam_grid.width != w || cam_grid.height != h || instance_grid.width != w ||
        instance_grid.height != h)
        throw numeric_error("extract_features: mask grids must match the activation grid");
    for (size_t i = 0; i < instance_grid.bits.size(); ++i)
        if (instance_grid.bits[i] && !cam_grid.bits[i])
            throw numeric_error("extract_features: instance region must lie inside cam region");

    const size_t hw = static_cast<size_t>(h) * w;
    ExtractedFeatures out;
    out.x_c.assign(activation.data.size(), 0.0f);

    double sq = 0.0;
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < hw; ++i)
            if (cam_grid.bits[i]) {
                const float v = activation.data[static_cast<size_t>(ch) * hw + i];
                out.x_c[static_cast<size_t>(ch) * hw + i] = v;
                sq += static_cast<double>(v) * v;
            }
    out.x_c_norm = std::sqrt(sq);
    if (out.x_c_norm > 0.0) {
        const float inv = static_cast<float>(1.0 / out.x_c_norm);
        for (auto& v : out.x_c) v *= inv;
    }

    size_t n_fg = 0, n_bg = 0;
    for (size_t i = 0; i < hw; ++i) {
        if (instance_grid.bits[i]) ++n_fg;
        else if (cam_grid.bits[i]) ++n_bg;
    }
    if (n_fg == 0) throw numeric_error("extract_features: empty instance region on the grid");
    if (n_bg == 0)
        throw bg_undefined_error("extract_features: cam minus instance region is empty");

    out.x_f_avg.assign(static_cast<size_t>(c), 0.0f);
    out.x_b_avg.assign(static_cast<size_t>(c), 0.0f);
    for (int ch = 0; ch < c; ++ch) {
        double f = 0.0, b = 0.0;
        for (size_t i = 0; i < hw; ++i) {
            if (instance_grid.bits[i]) f += out.x_c[static_cast<size_t>(ch) * hw + i];
            else if (cam_grid.bits[i]) b += out.x_c[static_cast<size_t>(ch) * hw + i];
        }
        out.x_f_avg[static_cast<size_t>(ch)] = static_cast<float>(f / static_cast<double>(n_fg));
        out.x_b_avg[static_cast<size_t>(ch)] = static_cast<float>(b / static_cast<double>(n_bg));
    }
    return out;
}

AssociationPartition partition(const std::string& domain,
                               const std::vector<OutcomeRecord>& outcomes,
                               const std::vector<InstanceFeatures>& features) {
    std::map<std::pair<std::string, int>, const InstanceFeatures*> by_instance;
    for (const auto& f : features) by_instance[{f.image_id, f.instance_index}] = &f;

    AssociationPartition out;
    for (const auto& o : outcomes) {
        const auto it = by_instance.find({o.image_id, o.instance_index});
        if (it == by_instance.end()) continue;  // no feature bundle for this instance
        AssociationRecord r;
        r.domain = domain;
        r.image_id = o.image_id;
        r.instance_index = o.instance_index;
        r.fg_class = o.fg_class;
        r.bg_label = o.bg_label;
        r.associated = o.dropped;
        r.features = it->second;
        (o.dropped ? out.f_a : out.f_na).push_back(std::move(r));
    }
    return out;
}

BalancedSample balance_sample(const std::vector<AssociationRecord>& f_a,
                              const std::vector<AssociationRecord>& f_na, std::uint64_t seed) {
    BalancedSample out;
    if (f_a.empty()) return out;
    if (f_na.size() <= f_a.size()) {
        out.records = f_na;
        out.low_support = f_na.size() < f_a.size();
        return out;
    }
    Rng rng(derive_seed(seed, "balance"));
    const std::vector<int> picks =
        rng.sample_without_replacement(static_cast<int>(f_na.size()), static_cast<int>(f_a.size()));
    std::vector<int> sorted = picks;
    std::sort(sorted.begin(), sorted.end());
    for (int i : sorted) out.records.push_back(f_na[static_cast<size_t>(i)]);
    return out;
}

metrics::PartitionFeatures stack_features(const std::vector<AssociationRecord>& records,
                                          const std::string& layer) {
    metrics::PartitionFeatures out;
    for (const auto& r : records) {
        const auto it = r.features->per_layer.find(layer);
        if (it == r.features->per_layer.end())
            throw numeric_error("stack_features: record lacks layer " + layer);
        out.f_avg.push_row(it->second.first);
        out.b_avg.push_row(it->second.second);
    }
    return out;
}

}  // namespace ctxbias::assoc
