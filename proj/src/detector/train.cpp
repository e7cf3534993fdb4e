#include "ctxbias/detector/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ctxbias/core/rng.hpp"
#include "ctxbias/detector/eval.hpp"
#include "ctxbias/kernels/kernels.hpp"

namespace ctxbias::det {

namespace {

struct Sample {
    std::vector<float> chw;
    std::vector<Box> boxes;
    std::vector<int> classes;
};

struct Target {
    int cell = 0;
    int cls = 0;
    float box[4] = {0, 0, 0, 0};  // tx*, ty*, tw*, th* in logit/log space
    double area = 0.0;
};

double logit(double p) { return std::log(p / (1.0 - p)); }

void augment(Sample& s, int image_size, const TrainConfig& cfg, Rng& rng) {
    const int S = image_size;
    const size_t hw = static_cast<size_t>(S) * S;

    if (cfg.resize_crop && rng.next_double() < 0.5) {
        // random crop of [0.8, 1.0] scale, nearest-neighbor resize back
        const double scale = rng.next_uniform(0.8, 1.0);
        const int cw = std::max(8, static_cast<int>(S * scale));
        const int ox = rng.next_int(0, S - cw);
        const int oy = rng.next_int(0, S - cw);
        std::vector<float> out(3 * hw);
        const double f = static_cast<double>(cw) / S;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    const int sx = ox + std::min(cw - 1, static_cast<int>(x * f));
                    const int sy = oy + std::min(cw - 1, static_cast<int>(y * f));
                    out[(static_cast<size_t>(c) * S + y) * S + x] =
                        s.chw[(static_cast<size_t>(c) * S + sy) * S + sx];
                }
        s.chw = std::move(out);
        std::vector<Box> boxes;
        std::vector<int> classes;
        for (size_t i = 0; i < s.boxes.size(); ++i) {
            Box b = s.boxes[i];
            b.x = (b.x - ox) / f;
            b.y = (b.y - oy) / f;
            b.w /= f;
            b.h /= f;
            const double cx = b.x + b.w / 2, cy = b.y + b.h / 2;
            if (cx < 0 || cx >= S || cy < 0 || cy >= S) continue;
            boxes.push_back(b);
            classes.push_back(s.classes[i]);
        }
        s.boxes = std::move(boxes);
        s.classes = std::move(classes);
    }

    if (cfg.flip && rng.next_double() < 0.5) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S / 2; ++x)
                    std::swap(s.chw[(static_cast<size_t>(c) * S + y) * S + x],
                              s.chw[(static_cast<size_t>(c) * S + y) * S + (S - 1 - x)]);
        for (auto& b : s.boxes) b.x = S - b.x - b.w;
    }

    if (cfg.color_jitter) {
        const float gain = static_cast<float>(rng.next_uniform(0.9, 1.1));
        const float bias = static_cast<float>(rng.next_uniform(-0.05, 0.05));
        for (auto& v : s.chw) v = std::clamp(v * gain + bias, 0.0f, 1.0f);
    }
}

std::vector<Target> build_targets(const Sample& s, const ModelConfig& mc) {
    const int g = mc.grid();
    std::vector<Target> out;
    std::vector<int> cell_of(static_cast<size_t>(g) * g, -1);
    for (size_t i = 0; i < s.boxes.size(); ++i) {
        const Box& b = s.boxes[i];
        const double cx = b.x + b.w / 2.0, cy = b.y + b.h / 2.0;
        const int gx = std::clamp(static_cast<int>(cx / 8.0), 0, g - 1);
        const int gy = std::clamp(static_cast<int>(cy / 8.0), 0, g - 1);
        const int cell = gy * g + gx;

        Target t;
        t.cell = cell;
        t.cls = s.classes[i];
        t.area = b.area();
        t.box[0] = static_cast<float>(logit(std::clamp(cx / 8.0 - gx, 1e-3, 1.0 - 1e-3)));
        t.box[1] = static_cast<float>(logit(std::clamp(cy / 8.0 - gy, 1e-3, 1.0 - 1e-3)));
        t.box[2] = static_cast<float>(std::clamp(std::log(b.w / mc.base_box), -4.0, 4.0));
        t.box[3] = static_cast<float>(std::clamp(std::log(b.h / mc.base_box), -4.0, 4.0));

        const int prev = cell_of[static_cast<size_t>(cell)];
        if (prev >= 0) {
            // cell collision: the larger object wins
            if (out[static_cast<size_t>(prev)].area >= t.area) continue;
            out[static_cast<size_t>(prev)] = t;
        } else {
            cell_of[static_cast<size_t>(cell)] = static_cast<int>(out.size());
            out.push_back(t);
        }
    }
    return out;
}

// Fills grad_head, returns the loss value.
double loss_and_grad(const std::vector<float>& head, const std::vector<Target>& targets,
                     const ModelConfig& mc, const TrainConfig& cfg, std::vector<float>& ghead) {
    const int g = mc.grid();
    const int K = mc.num_classes;
    const size_t hw = static_cast<size_t>(g) * g;
    ghead.assign(head.size(), 0.0f);

    std::vector<int> pos_cls(hw, -1);
    std::vector<const Target*> pos_tgt(hw, nullptr);
    for (const auto& t : targets) {
        pos_cls[static_cast<size_t>(t.cell)] = t.cls;
        pos_tgt[static_cast<size_t>(t.cell)] = &t;
    }
    const double npos = std::max<size_t>(1, targets.size());
    const double ncells = static_cast<double>(hw);

    double loss = 0.0;
    for (size_t at = 0; at < hw; ++at) {
        const bool pos = pos_cls[at] >= 0;
        const double w = pos ? cfg.pos_obj_weight : 1.0;
        const double l = head[at];
        const double t = pos ? 1.0 : 0.0;
        const double sp = l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l));
        loss += w * (sp - t * l) / ncells;
        const double sig = 1.0 / (1.0 + std::exp(-l));
        ghead[at] = static_cast<float>(w * (sig - t) / ncells);

        if (!pos) continue;
        const Target& tgt = *pos_tgt[at];

        // class cross-entropy
        double mx = head[5 * hw + at];
        for (int c = 1; c < K; ++c) mx = std::max(mx, static_cast<double>(head[(5 + static_cast<size_t>(c)) * hw + at]));
        double denom = 0.0;
        for (int c = 0; c < K; ++c) denom += std::exp(static_cast<double>(head[(5 + static_cast<size_t>(c)) * hw + at]) - mx);
        for (int c = 0; c < K; ++c) {
            const double p = std::exp(static_cast<double>(head[(5 + static_cast<size_t>(c)) * hw + at]) - mx) / denom;
            const double delta = c == tgt.cls ? 1.0 : 0.0;
            ghead[(5 + static_cast<size_t>(c)) * hw + at] = static_cast<float>((p - delta) / npos);
            if (c == tgt.cls) loss += -std::log(std::max(p, 1e-12)) / npos;
        }

        // smooth L1 on the four box channels
        for (int d = 0; d < 4; ++d) {
            const double diff = static_cast<double>(head[(1 + static_cast<size_t>(d)) * hw + at]) - tgt.box[d];
            const double ad = std::abs(diff);
            loss += cfg.box_weight * (ad < 1.0 ? 0.5 * diff * diff : ad - 0.5) / npos;
            const double gdiff = ad < 1.0 ? diff : (diff > 0 ? 1.0 : -1.0);
            ghead[(1 + static_cast<size_t>(d)) * hw + at] =
                static_cast<float>(cfg.box_weight * gdiff / npos);
        }
    }
    return loss;
}

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<std::vector<float>> mw, vw, mb, vb;

    void init(const ToyDetector& model) {
        for (const auto& l : model.layers()) {
            mw.emplace_back(l.w.size(), 0.0f);
            vw.emplace_back(l.w.size(), 0.0f);
            mb.emplace_back(l.b.size(), 0.0f);
            vb.emplace_back(l.b.size(), 0.0f);
        }
    }
    void apply(ToyDetector& model, const ToyDetector::ParamGrads& g) {
        ++step;
        const float bc1 = static_cast<float>(1.0 / (1.0 - std::pow(beta1, step)));
        const float bc2 = static_cast<float>(1.0 / (1.0 - std::pow(beta2, step)));
        const kern::Kernels& K = kern::active();
        for (size_t i = 0; i < model.layers().size(); ++i) {
            ConvLayer& l = model.layers()[i];
            K.adam_step(l.w.data(), g.w[i].data(), mw[i].data(), vw[i].data(), l.w.size(),
                        static_cast<float>(lr), static_cast<float>(beta1),
                        static_cast<float>(beta2), static_cast<float>(eps), bc1, bc2);
            K.adam_step(l.b.data(), g.b[i].data(), mb[i].data(), vb[i].data(), l.b.size(),
                        static_cast<float>(lr), static_cast<float>(beta1),
                        static_cast<float>(beta2), static_cast<float>(eps), bc1, bc2);
        }
    }
};

}  // namespace

double dataset_map50(const ToyDetector& model, const Dataset& data) {
    PredictOptions opt;
    opt.score_threshold = 0.05;
    std::vector<std::vector<DetectionRecord>> dets;
    dets.reserve(data.images.size());
    for (const auto& im : data.images) dets.push_back(model.predict(im.pixels, {}, opt));
    return evaluate_map(dets, data, 0.5).map;
}

TrainResult train(ToyDetector& model, const Dataset& train_data, const Dataset* val,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.images.empty()) throw config_error("train: dataset is empty");
    {
        std::set<int> seen;
        for (const auto& im : train_data.images)
            for (const auto& ann : im.instances) seen.insert(ann.class_id);
        for (int c = 0; c < train_data.label_space.num_fg(); ++c)
            if (!seen.count(c))
                throw config_error("train: class '" + train_data.label_space.fg_classes[static_cast<size_t>(c)] +
                                   "' has no instances in the training set");
    }

    const ModelConfig& mc = model.config();
    std::vector<Sample> base;
    base.reserve(train_data.images.size());
    for (const auto& im : train_data.images) {
        Sample s;
        s.chw = image_to_chw(im.pixels);
        for (const auto& ann : im.instances) {
            s.boxes.push_back(ann.bbox);
            s.classes.push_back(ann.class_id);
        }
        base.push_back(std::move(s));
    }

    model.init_weights(cfg.seed);
    Adam opt;
    opt.lr = cfg.learning_rate;
    opt.init(model);

    TrainResult res;
    std::vector<float> ghead;
    ToyDetector::ParamGrads batch_grads, sample_grads;
    batch_grads.init(model);
    sample_grads.init(model);

    std::vector<std::vector<float>> best_w, best_b;
    long global_step = 0;

    const size_t n = base.size();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic shuffle per epoch
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        std::vector<int> order = shuffle_rng.sample_without_replacement(static_cast<int>(n),
                                                                        static_cast<int>(n));
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            for (auto& gw : batch_grads.w) std::fill(gw.begin(), gw.end(), 0.0f);
            for (auto& gb : batch_grads.b) std::fill(gb.begin(), gb.end(), 0.0f);

            double batch_loss = 0.0;
            for (size_t bi = start; bi < end; ++bi) {
                Sample s = base[static_cast<size_t>(order[bi])];
                Rng aug_rng(derive_seed(cfg.seed, "augment",
                                        static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                            static_cast<std::uint64_t>(order[bi])));
                augment(s, mc.image_size, cfg, aug_rng);
                const std::vector<Target> targets = build_targets(s, mc);

                const ToyDetector::Forward fwd = model.forward_chw(s.chw);
                batch_loss += loss_and_grad(fwd.head, targets, mc, cfg, ghead);

                for (auto& gw : sample_grads.w) std::fill(gw.begin(), gw.end(), 0.0f);
                for (auto& gb : sample_grads.b) std::fill(gb.begin(), gb.end(), 0.0f);
                model.backward_train(fwd, ghead, sample_grads);
                batch_grads.accumulate(sample_grads);
            }
            const double count = static_cast<double>(end - start);
            batch_loss /= count;
            batch_grads.scale(static_cast<float>(1.0 / count));

            ++global_step;
            if (!std::isfinite(batch_loss))
                throw numeric_error("training diverged (non-finite loss) at step " +
                                    std::to_string(global_step));
            opt.apply(model, batch_grads);
            res.step_losses.push_back(batch_loss);
            epoch_loss += batch_loss;
            ++batches;
        }
        res.epoch_losses.push_back(epoch_loss / std::max(1, batches));

        if (val && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
            const double m = dataset_map50(model, *val);
            res.val_maps.push_back(m);
            if (m > res.best_map) {
                res.best_map = m;
                res.best_epoch = epoch;
                best_w.clear();
                best_b.clear();
                for (const auto& l : model.layers()) {
                    best_w.push_back(l.w);
                    best_b.push_back(l.b);
                }
            }
        }
    }

    if (val && !best_w.empty()) {
        for (size_t i = 0; i < model.layers().size(); ++i) {
            model.layers()[i].w = best_w[i];
            model.layers()[i].b = best_b[i];
        }
    }
    return res;
}

}  // namespace ctxbias::det
