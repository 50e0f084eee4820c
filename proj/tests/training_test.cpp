#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "runet/synthetic.hpp"
#include "runet/train.hpp"

using namespace runet;
using Catch::Approx;

namespace {

Var<float> leaf_from(const Tensor<float>& t) { return leaf(t); }

Tensor<double> widen(const Tensor<float>& t) {
    Tensor<double> out(t.shape);
    for (int64_t i = 0; i < t.size(); ++i) out[i] = double(t[i]);
    return out;
}

std::vector<SamplePair<float>> synthetic_pairs(uint64_t seed, int count, int size) {
    std::vector<SamplePair<float>> out;
    for (int i = 0; i < count; ++i) {
        SyntheticSample s = make_synthetic_sample(seed, i, size);
        out.push_back({image_to_tensor<float>(s.image), mask_to_tensor<float>(s.mask),
                       cat("s", i)});
    }
    return out;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name)
        : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("step weights decay geometrically toward earlier steps") {
    SECTION("three steps at 0.4") {
        auto w = step_weights(3, 0.4);
        REQUIRE(w.size() == 3);
        // w[0] is alpha^2; 0.16 differs from the computed square in the last
        // ulp, so the check allows exactly that much
        CHECK(w[0] == Approx(0.16).margin(1e-12));
        CHECK(w[1] == 0.4);
        CHECK(w[2] == 1.0);
    }
    SECTION("alpha 1 keeps every step at full weight") {
        for (double w : step_weights(3, 1.0)) CHECK(w == 1.0);
    }
    SECTION("single step") {
        auto w = step_weights(1, 0.4);
        REQUIRE(w.size() == 1);
        CHECK(w[0] == 1.0);
    }
    SECTION("weights are nondecreasing and end at 1") {
        auto rng = make_rng(3);
        std::uniform_real_distribution<double> unif(0.05, 1.0);
        for (int k = 0; k < 50; ++k) {
            int n = 1 + int(k % 6);
            auto w = step_weights(n, unif(rng));
            CHECK(w.back() == 1.0);
            for (size_t t = 1; t < w.size(); ++t) CHECK(w[t] >= w[t - 1]);
        }
    }
    SECTION("invalid arguments") {
        CHECK_THROWS_AS(step_weights(0, 0.4), InvalidConfigError);
        CHECK_THROWS_AS(step_weights(3, 0.0), InvalidConfigError);
        CHECK_THROWS_AS(step_weights(3, -0.4), InvalidConfigError);
        CHECK_THROWS_AS(step_weights(3, 1.5), InvalidConfigError);
    }
}

TEST_CASE("multi-step loss sums weighted per-step cross-entropies") {
    auto rng = make_rng(41);
    std::normal_distribution<float> logit_dist(0.0f, 2.0f);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto random_logits = [&](int B, int H, int W) {
        Tensor<float> t({B, 2, H, W});
        for (auto& v : t.data) v = logit_dist(rng);
        return t;
    };
    auto random_target = [&](int B, int H, int W) {
        Tensor<float> t({B, 1, H, W});
        for (auto& v : t.data) v = unif(rng) < 0.4 ? 1.0f : 0.0f;
        return t;
    };

    SECTION("identical steps at alpha 1 triple the single-step loss") {
        Tensor<float> logits = random_logits(1, 6, 6);
        Tensor<float> target = random_target(1, 6, 6);
        Var<float> l = leaf_from(logits);
        float single = softmax_ce_loss(l, target)->value[0];
        float total = multi_step_loss<float>({l, l, l}, target, 1.0f)->value[0];
        CHECK(total == Approx(3.0f * single).epsilon(1e-6));
    }

    SECTION("saturated correct logits give near-zero loss") {
        Tensor<float> target = random_target(1, 6, 6);
        Tensor<float> logits({1, 2, 6, 6});
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                bool fg = target.at(0, 0, y, x) > 0.5f;
                logits.at(0, 0, y, x) = fg ? -20.0f : 20.0f;
                logits.at(0, 1, y, x) = fg ? 20.0f : -20.0f;
            }
        Var<float> l = leaf_from(logits);
        CHECK(multi_step_loss<float>({l, l}, target, 0.4f)->value[0] < 1e-8f);
    }

    SECTION("random cases agree with a scalar double-precision recomputation") {
        for (int k = 0; k < 20; ++k) {
            int steps = 1 + int(k % 4);
            int B = 1 + int(k % 2);
            double alpha = (k % 3 == 0) ? 1.0 : (k % 3 == 1) ? 0.4 : 0.7;
            Tensor<float> target = random_target(B, 5, 7);
            std::vector<Var<float>> seq;
            double want = 0;
            for (int t = 0; t < steps; ++t) {
                Tensor<float> logits = random_logits(B, 5, 7);
                seq.push_back(leaf_from(logits));
                want += std::pow(alpha, double(steps - 1 - t)) *
                        oracles::softmax_ce_ref(widen(logits), widen(target));
            }
            LossReport<float> report;
            float got = multi_step_loss(seq, target, float(alpha), &report)->value[0];
            REQUIRE(double(got) == Approx(want).epsilon(1e-6));
            REQUIRE(report.per_step.size() == size_t(steps));
            REQUIRE(report.weights.size() == size_t(steps));
            double recombined = 0;
            for (int t = 0; t < steps; ++t)
                recombined += double(report.weights[size_t(t)]) * double(report.per_step[size_t(t)]);
            CHECK(double(report.total) == Approx(recombined).epsilon(1e-6));
        }
    }

    SECTION("alpha 1 makes the total invariant to step order") {
        Tensor<float> target = random_target(1, 4, 4);
        std::vector<Var<float>> seq;
        for (int t = 0; t < 3; ++t) seq.push_back(leaf_from(random_logits(1, 4, 4)));
        float a = multi_step_loss<float>({seq[0], seq[1], seq[2]}, target, 1.0f)->value[0];
        float b = multi_step_loss<float>({seq[2], seq[0], seq[1]}, target, 1.0f)->value[0];
        CHECK(a == Approx(b).epsilon(1e-6));
    }

    SECTION("gradient reaches every step, scaled by its weight") {
        Tensor<float> target = random_target(1, 4, 4);
        std::vector<Var<float>> seq;
        for (int t = 0; t < 3; ++t) {
            seq.push_back(leaf_from(random_logits(1, 4, 4)));
            seq.back()->requires_grad = true;
        }
        Var<float> total = multi_step_loss(seq, target, 0.4f);
        backward(total);
        // the same logits fed as a single step reproduce each grad / weight
        auto w = step_weights(3, 0.4f);
        for (int t = 0; t < 3; ++t) {
            REQUIRE(seq[size_t(t)]->has_grad());
            Var<float> solo = leaf_from(seq[size_t(t)]->value);
            solo->requires_grad = true;
            backward(softmax_ce_loss(solo, target));
            for (int64_t i = 0; i < solo->grad.size(); ++i)
                REQUIRE(seq[size_t(t)]->grad[i] ==
                        Approx(w[size_t(t)] * solo->grad[i]).margin(1e-7));
        }
    }

    SECTION("invalid inputs") {
        Tensor<float> target({1, 1, 4, 4}, 0.25f);  // not binary
        Var<float> l = leaf_from(random_logits(1, 4, 4));
        CHECK_THROWS_AS(multi_step_loss<float>({l}, target, 0.4f), InvalidDataError);
        Tensor<float> ok({1, 1, 4, 4}, 1.0f);
        CHECK_THROWS_AS(multi_step_loss<float>({}, ok, 0.4f), InvalidConfigError);
    }
}

TEST_CASE("sgd with momentum") {
    auto make_store = [](std::initializer_list<float> values) {
        auto ps = std::make_unique<ParamStore<float>>();
        Tensor<float> t({int(values.size())}, std::vector<float>(values));
        ps->add("w.bias", std::move(t), ParamRole::bias, true);
        return ps;
    };
    auto set_grad = [](ParamStore<float>& ps, std::initializer_list<float> g) {
        auto& var = *ps.entries[0].var;
        var.ensure_grad();
        std::copy(g.begin(), g.end(), var.grad.data.begin());
    };

    SECTION("first step from zero velocity is plain gradient descent") {
        auto ps = make_store({1.0f, -2.0f});
        set_grad(*ps, {0.5f, -0.25f});
        SgdMomentum<float> opt(*ps, 0.1f, 0.9f);
        opt.step(*ps);
        CHECK(ps->entries[0].var->value[0] == Approx(1.0f - 0.1f * 0.5f).margin(1e-7));
        CHECK(ps->entries[0].var->value[1] == Approx(-2.0f + 0.1f * 0.25f).margin(1e-7));
    }

    SECTION("zero gradient decays the velocity geometrically") {
        auto ps = make_store({0.0f});
        set_grad(*ps, {1.0f});
        SgdMomentum<float> opt(*ps, 0.1f, 0.9f);
        opt.step(*ps);  // v = 1, p = -0.1
        set_grad(*ps, {0.0f});
        opt.step(*ps);  // v = 0.9, p = -0.19
        CHECK(opt.velocity[0][0] == Approx(0.9f).margin(1e-7));
        CHECK(ps->entries[0].var->value[0] == Approx(-0.19f).margin(1e-7));
        opt.step(*ps);  // v = 0.81
        CHECK(opt.velocity[0][0] == Approx(0.81f).margin(1e-7));
    }

    SECTION("minimizes a quadratic") {
        auto ps = make_store({3.0f});
        SgdMomentum<float> opt(*ps, 0.05f, 0.5f);
        auto& var = *ps->entries[0].var;
        float f0 = var.value[0] * var.value[0];
        for (int i = 0; i < 40; ++i) {
            var.ensure_grad();
            var.grad[0] = 2.0f * var.value[0];
            opt.step(*ps);
            ps->zero_grads();
        }
        CHECK(var.value[0] * var.value[0] < 1e-4f * f0);
    }

    SECTION("missing gradients are a contract violation") {
        auto ps = make_store({1.0f});
        SgdMomentum<float> opt(*ps, 0.1f);
        CHECK_THROWS_AS(opt.step(*ps), ContractError);
    }

    SECTION("store mismatch is a contract violation") {
        auto a = make_store({1.0f});
        SgdMomentum<float> opt(*a, 0.1f);
        auto b = make_store({1.0f});
        b->add("extra.bias", Tensor<float>({1}), ParamRole::bias, true);
        CHECK_THROWS_AS(opt.step(*b), ContractError);
    }
}

TEST_CASE("global gradient norm clipping") {
    auto make_ps = [](const std::vector<float>& grads) {
        auto ps = std::make_unique<ParamStore<float>>();
        auto v = ps->add("w.bias", Tensor<float>({int(grads.size())}), ParamRole::bias, true);
        v->ensure_grad();
        std::copy(grads.begin(), grads.end(), v->grad.data.begin());
        return ps;
    };

    SECTION("norm below the threshold is untouched") {
        auto ps = make_ps({3.0f, 4.0f});  // norm 5
        CHECK(grad_norm(*ps) == Approx(5.0f));
        CHECK(clip_gradients(*ps, 10.0f) == 1.0f);
        CHECK(ps->entries[0].var->grad[0] == 3.0f);
        CHECK(ps->entries[0].var->grad[1] == 4.0f);
    }

    SECTION("norm above the threshold rescales onto the sphere") {
        auto ps = make_ps({30.0f, 40.0f});  // norm 50
        float scale = clip_gradients(*ps, 10.0f);
        CHECK(scale == Approx(0.2f).margin(1e-7));
        CHECK(ps->entries[0].var->grad[0] == Approx(6.0f).margin(1e-5));
        CHECK(ps->entries[0].var->grad[1] == Approx(8.0f).margin(1e-5));
        CHECK(grad_norm(*ps) == Approx(10.0f).margin(1e-5));
    }

    SECTION("clipping is idempotent") {
        auto rng = make_rng(43);
        std::normal_distribution<float> g(0.0f, 5.0f);
        std::vector<float> grads(64);
        for (auto& v : grads) v = g(rng);
        auto ps = make_ps(grads);
        clip_gradients(*ps, 10.0f);
        Tensor<float> after = ps->entries[0].var->grad;
        float second = clip_gradients(*ps, 10.0f);
        CHECK(second == Approx(1.0f).margin(1e-6));
        for (int64_t i = 0; i < after.size(); ++i)
            CHECK(ps->entries[0].var->grad[i] == Approx(after[i]).margin(1e-6));
    }

    SECTION("parameters without gradients contribute zero to the norm") {
        auto ps = make_ps({3.0f, 4.0f});
        ps->add("cold.weight", Tensor<float>({8, 1, 3, 3}), ParamRole::conv_weight, true);
        CHECK(grad_norm(*ps) == Approx(5.0f));
    }
}

TEST_CASE("parameter initialization by family") {
    ParamStore<float> ps;
    // batch norm so the store carries running-stat buffers too
    ConvBlock<float> block(ps, "blk", 64, 64, NormKind::batch);
    he_init(ps, 7);

    SECTION("biases, norm offsets and running stats take their identities") {
        for (const auto& e : ps.entries) {
            std::string fam = family_of(e.role);
            if (fam == "weight") continue;
            for (float v : e.var->value.data) {
                if (fam == "gamma") CHECK(v == 1.0f);
                if (fam == "bias" || fam == "beta") CHECK(v == 0.0f);
            }
        }
        const auto* rv = ps.find("blk.norm1.running_var");
        REQUIRE(rv != nullptr);
        for (float v : rv->var->value.data) CHECK(v == 1.0f);
        const auto* rm = ps.find("blk.norm1.running_mean");
        REQUIRE(rm != nullptr);
        for (float v : rm->var->value.data) CHECK(v == 0.0f);
    }

    SECTION("conv weights match the 2/fan_in variance within sampling error") {
        const auto* w = ps.find("blk.conv1.weight");
        REQUIRE(w != nullptr);
        REQUIRE(w->var->value.shape == Shape{64, 64, 3, 3});
        double mean = 0, sq = 0;
        int64_t n = w->var->value.size();
        for (float v : w->var->value.data) {
            mean += v;
            sq += double(v) * double(v);
        }
        mean /= double(n);
        double var = sq / double(n) - mean * mean;
        double want = 2.0 / (64.0 * 9.0);
        CHECK(std::abs(mean) < 0.05 * std::sqrt(want));
        CHECK(var == Approx(want).epsilon(0.15));
    }

    SECTION("same seed reproduces, different seed differs") {
        ParamStore<float> again;
        ConvBlock<float> block2(again, "blk", 64, 64, NormKind::group);
        he_init(again, 7);
        const auto *a = ps.find("blk.conv1.weight"), *b = again.find("blk.conv1.weight");
        REQUIRE(a->var->value.data == b->var->value.data);
        he_init(again, 8);
        CHECK(again.find("blk.conv1.weight")->var->value.data != a->var->value.data);
    }
}

TEST_CASE("geometric augmentation") {
    auto rng = make_rng(47);
    std::uniform_real_distribution<float> unif(0.0f, 1.0f);
    Tensor<float> image({3, 33, 33});
    for (auto& v : image.data) v = unif(rng);
    // centered disk, radius 10, about the exact rotation center (16,16)
    Tensor<float> disk({1, 33, 33});
    for (int y = 0; y < 33; ++y)
        for (int x = 0; x < 33; ++x)
            disk.at(0, y, x) = (x - 16) * (x - 16) + (y - 16) * (y - 16) <= 100 ? 1.0f : 0.0f;

    SECTION("horizontal flip is an involution") {
        Tensor<float> twice = hflip(hflip(image));
        REQUIRE(twice.data == image.data);
    }

    SECTION("identity parameters return the pair unchanged") {
        auto [img, msk] = apply_augment(image, disk, AugmentParams{0.0, false});
        CHECK(img.data == image.data);
        CHECK(msk.data == disk.data);
    }

    SECTION("flip-only transform moves pixels without inventing values") {
        auto [img, msk] = apply_augment(image, disk, AugmentParams{0.0, true});
        CHECK(img.data == hflip(image).data);
        // the disk is mirror-symmetric about the center column
        CHECK(msk.data == disk.data);
    }

    SECTION("rotation roughly preserves the area of a centered disk") {
        double base = 0;
        for (float v : disk.data) base += v;
        for (int k = 0; k < 25; ++k) {
            auto params = sample_augment(rng);
            auto [img, msk] = apply_augment(image, disk, params);
            double area = 0;
            for (float v : msk.data) {
                CHECK((v == 0.0f || v == 1.0f));
                area += v;
            }
            CHECK(std::abs(area - base) < 0.2 * base);
            for (float v : img.data) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
        }
    }

    SECTION("rotation fills uncovered corners with zero") {
        Tensor<float> ones({1, 33, 33}, 1.0f);
        Tensor<float> rot = rotate_bilinear(ones, 10.0);
        CHECK(rot.at(0, 0, 0) == 0.0f);
        CHECK(rot.at(0, 32, 32) == 0.0f);
        CHECK(rot.at(0, 16, 16) == Approx(1.0f));
    }

    SECTION("sampled angles stay inside the configured range") {
        for (int k = 0; k < 200; ++k) {
            auto p = sample_augment(rng);
            CHECK(std::abs(p.angle_deg) <= 10.0);
        }
    }

    SECTION("mismatched shapes are rejected") {
        Tensor<float> small({1, 16, 16});
        CHECK_THROWS_AS(apply_augment(image, small, AugmentParams{}), InvalidShapeError);
    }
}

TEST_CASE("training loop") {
    ModelSpec spec;
    spec.variant = Variant::unet_g;
    spec.base_channels = 4;
    spec.depth = 2;

    auto fresh_model = [&]() {
        Model<float> m = build_model<float>(spec);
        he_init(m.store, 123);
        return m;
    };
    auto data = synthetic_pairs(99, 4, 32);

    SECTION("config validation") {
        TrainConfig cfg;
        cfg.lr = 2e-3;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
        cfg.lr = 0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
        cfg = {};
        cfg.epochs = 0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
        cfg = {};
        cfg.batch = 0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
        cfg = {};
        cfg.momentum = 1.0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
        cfg = {};
        CHECK_NOTHROW(cfg.validate());
    }

    SECTION("one epoch emits train and val rows plus artifacts") {
        TempDir dir("runet_train_smoke");
        Model<float> model = fresh_model();
        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch = 2;
        std::vector<SamplePair<float>> train(data.begin(), data.begin() + 2);
        std::vector<SamplePair<float>> val(data.begin() + 2, data.end());
        auto res = train_model(model, cfg, train, val, dir.path.string());

        REQUIRE(res.log.size() == 2);
        CHECK(res.log[0].split == "train");
        CHECK(res.log[1].split == "val");
        CHECK(std::isfinite(res.log[0].loss));
        CHECK(res.best_epoch == 1);
        CHECK(std::filesystem::exists(dir.path / "best.ckpt"));

        std::ifstream log(dir.path / "log.csv");
        REQUIRE(log.good());
        std::string line;
        std::getline(log, line);
        CHECK(line == "epoch,split,loss,miou,lr,seconds");
        int rows = 0;
        while (std::getline(log, line))
            if (!line.empty()) {
                ++rows;
                CHECK(line.find(rows == 1 ? ",train," : ",val,") != std::string::npos);
            }
        CHECK(rows == 2);
    }

    SECTION("loss on a fixed batch decreases monotonically") {
        Model<float> model = fresh_model();
        TrainConfig cfg;
        cfg.epochs = 20;
        cfg.batch = 4;  // the whole set: one optimizer step per epoch
        cfg.lr = 1e-3;
        cfg.momentum = 0.9;
        auto res = train_model(model, cfg, data, {});
        REQUIRE(res.log.size() == 20);
        for (size_t i = 1; i < res.log.size(); ++i)
            CHECK(res.log[i].loss < res.log[i - 1].loss);
        CHECK(res.log.back().loss < 0.9 * res.log.front().loss);
    }

    SECTION("identical seeds give identical runs") {
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch = 2;
        Model<float> a = fresh_model();
        auto ra = train_model(a, cfg, data, {});
        Model<float> b = fresh_model();
        auto rb = train_model(b, cfg, data, {});
        REQUIRE(std::abs(ra.final_train_loss - rb.final_train_loss) <= 1e-6);
        // parameters should in fact agree bitwise
        for (size_t i = 0; i < a.store.entries.size(); ++i)
            REQUIRE(a.store.entries[i].var->value.data == b.store.entries[i].var->value.data);
    }

    SECTION("augmentation changes the trajectory but stays finite") {
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch = 2;
        cfg.augment = true;
        Model<float> model = fresh_model();
        auto res = train_model(model, cfg, data, {});
        CHECK(std::isfinite(res.final_train_loss));
        Model<float> plain = fresh_model();
        cfg.augment = false;
        auto res2 = train_model(plain, cfg, data, {});
        CHECK(res.final_train_loss != res2.final_train_loss);
    }

    SECTION("non-finite loss raises a numeric error") {
        Model<float> model = fresh_model();
        model.store.entries[0].var->value[0] = std::numeric_limits<float>::quiet_NaN();
        TrainConfig cfg;
        cfg.epochs = 1;
        CHECK_THROWS_AS(train_model(model, cfg, data, {}), NumericError);
    }

    SECTION("empty training set is invalid") {
        Model<float> model = fresh_model();
        CHECK_THROWS_AS(train_model(model, TrainConfig{}, {}, {}), InvalidDataError);
    }
}

TEST_CASE("evaluation produces per-step metrics and optional probability maps") {
    ModelSpec spec;
    spec.variant = Variant::runet_sru;
    spec.level = 0;
    spec.steps = 2;
    spec.base_channels = 4;
    spec.depth = 2;
    Model<float> model = build_model<float>(spec);
    he_init(model.store, 5);
    auto data = synthetic_pairs(31, 3, 32);

    EvalOptions opts;
    opts.keep_probs = true;
    auto res = evaluate(model, data, 2, opts);
    REQUIRE(res.per_step.size() == 2);
    CHECK(std::isfinite(res.loss));
    for (const auto& report : res.per_step) {
        REQUIRE(report.per_image.size() == 3);
        CHECK(report.mean_iou >= 0.0);
        CHECK(report.mean_iou <= 1.0);
    }
    REQUIRE(res.probs.size() == 3);
    for (const auto& p : res.probs) {
        REQUIRE(p.shape == Shape{1, 32, 32});
        for (float v : p.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK(res.final_step().per_image[0].id == "s0");

    CHECK_THROWS_AS(evaluate(model, {}, 2), InvalidDataError);
}
