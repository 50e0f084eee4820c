#pragma once

#include <chrono>

#include "runet/augment.hpp"
#include "runet/checkpoint.hpp"
#include "runet/dataset.hpp"
#include "runet/loss.hpp"
#include "runet/metrics.hpp"

namespace runet {

struct TrainConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    double clip = 10.0;
    int epochs = 10;
    int batch = 4;
    uint64_t seed = 1;
    bool augment = false;

    void validate() const {
        if (!(lr >= 1e-9 && lr <= 1e-3))
            throw InvalidConfigError(cat("train: lr must lie in [1e-9, 1e-3], got ", lr));
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw InvalidConfigError(cat("train: momentum must lie in [0,1), got ", momentum));
        if (!(clip > 0)) throw InvalidConfigError("train: clip threshold must be positive");
        if (epochs < 1) throw InvalidConfigError(cat("train: epochs must be >= 1, got ", epochs));
        if (batch < 1) throw InvalidConfigError(cat("train: batch must be >= 1, got ", batch));
    }
};

struct EpochRow {
    int epoch = 0;
    std::string split;
    double loss = 0, miou = 0, lr = 0, seconds = 0;
};

inline std::string format_log_row(const EpochRow& r) {
    std::ostringstream os;
    os << r.epoch << ',' << r.split << ',' << std::fixed << std::setprecision(6) << r.loss << ','
       << r.miou << ',' << std::defaultfloat << std::setprecision(10) << r.lr << ',' << std::fixed
       << std::setprecision(3) << r.seconds;
    return os.str();
}

struct EvalOptions {
    bool keep_probs = false;  // retain final-step foreground maps (for P/R sweeps)
};

template <typename T>
struct EvalResult {
    double loss = 0;
    std::vector<MetricsReport> per_step;  // one report per refinement step
    std::vector<Tensor<T>> probs;         // per image, final step, when requested

    const MetricsReport& final_step() const { return per_step.back(); }
};

namespace detail {

// Copies image b of an (B,C,H,W) tensor into (C,H,W).
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, int b) {
    int64_t per = t.size() / t.dim(0);
    Tensor<T> out({t.dim(1), t.dim(2), t.dim(3)});
    std::copy_n(t.ptr() + b * per, per, out.ptr());
    return out;
}

inline std::vector<std::vector<size_t>> make_batches(size_t n, int batch) {
    std::vector<std::vector<size_t>> out;
    for (size_t i = 0; i < n; i += size_t(batch)) {
        std::vector<size_t> idx;
        for (size_t j = i; j < std::min(n, i + size_t(batch)); ++j) idx.push_back(j);
        out.push_back(std::move(idx));
    }
    return out;
}

}  // namespace detail

// Tape-free evaluation over a dataset: mean multi-step loss plus per-step
// image metrics (so refinement across iterations is observable).
template <typename T>
EvalResult<T> evaluate(Model<T>& model, const std::vector<SamplePair<T>>& data, int batch,
                       EvalOptions opts = {}) {
    if (data.empty()) throw InvalidDataError("evaluate: empty dataset");
    NoGradGuard guard;
    EvalResult<T> result;
    std::vector<std::vector<PerImageMetrics>> per_step_rows;
    double loss_sum = 0;

    for (const auto& batch_idx : detail::make_batches(data.size(), batch)) {
        auto [images, masks] = stack_samples(data, batch_idx);
        auto logits = model.forward(images, false);
        loss_sum +=
            double(multi_step_loss(logits, masks, T(model.spec.alpha))->value[0]) * batch_idx.size();
        per_step_rows.resize(logits.size());
        for (size_t t = 0; t < logits.size(); ++t) {
            Tensor<T> probs = softmax2_foreground(logits[t])->value;
            for (size_t b = 0; b < batch_idx.size(); ++b) {
                Tensor<T> p = detail::slice_batch(probs, int(b));
                Tensor<T> g = detail::slice_batch(masks, int(b));
                per_step_rows[t].push_back(
                    image_metrics(data[batch_idx[b]].id, p, g));
                if (opts.keep_probs && t + 1 == logits.size()) result.probs.push_back(std::move(p));
            }
        }
    }
    result.loss = loss_sum / double(data.size());
    for (auto& rows : per_step_rows) result.per_step.push_back(mean_metrics(std::move(rows)));
    return result;
}

template <typename T>
struct TrainResult {
    std::vector<EpochRow> log;
    int best_epoch = -1;
    double best_val_miou = 0;
    double final_train_loss = 0;
    std::string checkpoint_path;
};

// Shuffled mini-batch SGD with momentum, global-norm clipping, per-epoch
// validation, and best-validation checkpointing. Every random stream derives
// from (seed, epoch, sample index), so runs are bit-reproducible.
template <typename T>
TrainResult<T> train_model(Model<T>& model, const TrainConfig& cfg,
                           const std::vector<SamplePair<T>>& train_set,
                           const std::vector<SamplePair<T>>& val_set,
                           const std::string& out_dir = "") {
    cfg.validate();
    model.spec.validate();
    if (train_set.empty()) throw InvalidDataError("train: empty training set");

    namespace fs = std::filesystem;
    std::ofstream log_file;
    TrainResult<T> result;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        log_file.open((fs::path(out_dir) / "log.csv").string());
        if (!log_file) throw IoError(cat("cannot open training log under ", out_dir));
        log_file << "epoch,split,loss,miou,lr,seconds\n";
        result.checkpoint_path = (fs::path(out_dir) / "best.ckpt").string();
    }
    auto emit = [&](const EpochRow& row) {
        if (log_file) log_file << format_log_row(row) << '\n' << std::flush;
        result.log.push_back(row);
    };

    SgdMomentum<T> opt(model.store, T(cfg.lr), T(cfg.momentum));

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto shuffle_rng = make_rng(cfg.seed, 0x5348ULL, uint64_t(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0;
        std::vector<PerImageMetrics> train_rows;
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
            std::vector<size_t> batch_idx(
                order.begin() + std::ptrdiff_t(start),
                order.begin() + std::ptrdiff_t(std::min(order.size(), start + size_t(cfg.batch))));

            Tensor<T> images, masks;
            if (cfg.augment) {
                std::vector<SamplePair<T>> augmented;
                augmented.reserve(batch_idx.size());
                for (size_t idx : batch_idx) {
                    auto rng = make_rng(cfg.seed, uint64_t(epoch), uint64_t(idx));
                    auto [img, msk] = augment_pair(train_set[idx].image, train_set[idx].mask, rng);
                    augmented.push_back({std::move(img), std::move(msk), train_set[idx].id});
                }
                std::vector<size_t> local(augmented.size());
                for (size_t i = 0; i < local.size(); ++i) local[i] = i;
                std::tie(images, masks) = stack_samples(augmented, local);
            } else {
                std::tie(images, masks) = stack_samples(train_set, batch_idx);
            }

            auto logits = model.forward(images, true);
            LossReport<T> report;
            Var<T> loss = multi_step_loss(logits, masks, T(model.spec.alpha), &report);
            if (!std::isfinite(double(report.total)))
                throw NumericError(cat("training diverged: non-finite loss at epoch ", epoch));
            backward(loss);
            if (!std::isfinite(double(grad_norm(model.store))))
                throw NumericError(cat("training diverged: non-finite gradients at epoch ", epoch));
            clip_gradients(model.store, T(cfg.clip));
            opt.step(model.store);
            model.store.zero_grads();
            loss_sum += double(report.total) * double(batch_idx.size());

            {
                NoGradGuard guard;
                Tensor<T> probs = softmax2_foreground(logits.back())->value;
                for (size_t b = 0; b < batch_idx.size(); ++b)
                    train_rows.push_back(image_metrics(train_set[batch_idx[b]].id,
                                                       detail::slice_batch(probs, int(b)),
                                                       detail::slice_batch(masks, int(b))));
            }
        }

        double train_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochRow train_row{epoch, "train", loss_sum / double(train_set.size()),
                           mean_metrics(std::move(train_rows)).mean_iou, cfg.lr, train_seconds};
        result.final_train_loss = train_row.loss;
        emit(train_row);

        if (!val_set.empty()) {
            auto v0 = std::chrono::steady_clock::now();
            EvalResult<T> ev = evaluate(model, val_set, cfg.batch);
            double val_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - v0).count();
            double val_miou = ev.final_step().mean_iou;
            emit({epoch, "val", ev.loss, val_miou, cfg.lr, val_seconds});
            if (val_miou > result.best_val_miou || result.best_epoch < 0) {
                result.best_val_miou = val_miou;
                result.best_epoch = epoch;
                if (!result.checkpoint_path.empty())
                    save_checkpoint(result.checkpoint_path, model, epoch, val_miou, &opt);
            }
        }
    }
    return result;
}

}  // namespace runet
