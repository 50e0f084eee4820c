// Command-line front end: train / eval / predict / gradcheck / synth.
//
// One command per process. Configuration comes from flags, optionally layered
// over a plain `key = value` file (--config); flags given on the command line
// always win. Exit codes: 0 success, 1 usage or invalid configuration,
// 2 data/io/format error, 3 numeric failure.

#include <CLI11.hpp>

#include <iostream>
#include <map>

#include "runet/gemm.hpp"
#include "runet/gradcheck.hpp"
#include "runet/overlay.hpp"
#include "runet/synthetic.hpp"
#include "runet/train.hpp"

namespace {

using namespace runet;
namespace fs = std::filesystem;

struct Opts {
    // model recipe
    std::string model = "runet-sru";
    int level = 0;
    int steps = 3;
    double alpha = 0.4;
    double s0 = 1.0;
    double h0 = 1.0;
    int base = 8;
    int depth = 4;
    // optimization
    double lr = 1e-3;
    double momentum = 0.9;
    double clip = 10.0;
    int epochs = 10;
    int batch = 4;
    uint64_t seed = 1;
    bool augment = false;
    // data / paths
    std::string config, data, out;
    std::string split = "test";
    int train_size = 0;
    // command-specific
    std::string checkpoint, image;
    int eval_steps = 0;  // 0 = as stored in the checkpoint
    int synth_n = 100;
    int synth_size = 64;
    bool pr = false, force = false, dry_run = false;
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& text) {
    std::string t;
    for (char c : text) t += char(std::tolower(static_cast<unsigned char>(c)));
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw UsageError(cat("config key '", key, "' expects a boolean, got '", text, "'"));
}

template <typename V>
V parse_scalar(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<V, std::string>) {
        return text;
    } else {
        try {
            size_t pos = 0;
            if constexpr (std::is_floating_point_v<V>) {
                double v = std::stod(text, &pos);
                if (pos != text.size()) throw std::invalid_argument("trailing characters");
                return static_cast<V>(v);
            } else if constexpr (std::is_unsigned_v<V>) {
                unsigned long long v = std::stoull(text, &pos);
                if (pos != text.size()) throw std::invalid_argument("trailing characters");
                return static_cast<V>(v);
            } else {
                long v = std::stol(text, &pos);
                if (pos != text.size()) throw std::invalid_argument("trailing characters");
                return static_cast<V>(v);
            }
        } catch (const std::exception&) {
            throw UsageError(cat("config key '", key, "' has unparsable value '", text, "'"));
        }
    }
}

// `key = value` per line, `#` starts a comment, later duplicates win.
std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(cat("cannot open config file ", path));
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (size_t hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError(cat(path, ":", lineno, ": expected 'key = value', got '", t, "'"));
        std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw UsageError(cat(path, ":", lineno, ": empty key"));
        kv[key] = trim(t.substr(eq + 1));
    }
    return kv;
}

// Couples a subcommand's flags to config-file keys of the same spelling, so a
// file can preset anything a flag can and explicit flags keep priority.
struct KeyedCommand {
    CLI::App* cmd = nullptr;
    std::map<std::string, std::pair<CLI::Option*, std::function<void(const std::string&)>>> keys;

    template <typename V>
    CLI::Option* add_value(const std::string& name, V& ref, const std::string& desc) {
        CLI::Option* opt = cmd->add_option("--" + name, ref, desc)->capture_default_str();
        keys[name] = {opt, [&ref, name](const std::string& text) {
                          ref = parse_scalar<V>(name, text);
                      }};
        return opt;
    }

    CLI::Option* add_toggle(const std::string& name, bool& ref, const std::string& desc) {
        CLI::Option* opt = cmd->add_flag("--" + name, ref, desc);
        keys[name] = {opt, [&ref, name](const std::string& text) {
                          ref = parse_bool(name, text);
                      }};
        return opt;
    }

    void apply_config(const std::string& path) const {
        if (path.empty()) return;
        for (const auto& [key, value] : read_config_file(path)) {
            auto it = keys.find(key);
            if (it == keys.end())
                throw UsageError(cat("unknown config key '", key, "' in ", path));
            if (it->second.first->count() == 0) it->second.second(value);
        }
    }
};

void add_model_keys(KeyedCommand& k, Opts& o) {
    k.add_value("model", o.model,
                "variant: unet-b|unet-g|rec-last|rec-mid|rec-simple|runet-sru|runet-dru");
    k.add_value("level", o.level, "gate-unit level (runet variants): 0 = full resolution");
    k.add_value("steps", o.steps, "refinement steps for recurrent variants");
    k.add_value("alpha", o.alpha, "per-step loss decay in (0,1]; final step always weighs 1");
    k.add_value("s0", o.s0, "initial value of the fed-back segmentation map");
    k.add_value("h0", o.h0, "initial value of the recurrent hidden state");
    k.add_value("base", o.base, "channels at full resolution; doubles per encoder level");
    k.add_value("depth", o.depth, "number of pooling levels in the backbone");
}

void add_train_keys(KeyedCommand& k, Opts& o) {
    k.add_value("lr", o.lr, "learning rate, at most 1e-3");
    k.add_value("momentum", o.momentum, "SGD momentum in [0,1)");
    k.add_value("clip", o.clip, "global gradient-norm clip threshold");
    k.add_value("epochs", o.epochs, "training epochs");
    k.add_value("batch", o.batch, "mini-batch size");
    k.add_value("train-size", o.train_size, "resize every sample to this square size; 0 = native");
    k.add_toggle("augment", o.augment, "random rotation (max 10 deg) and horizontal flip");
}

ModelSpec spec_from(const Opts& o) {
    ModelSpec s;
    s.variant = parse_variant(o.model);
    s.level = o.level;
    s.steps = o.steps;
    s.alpha = o.alpha;
    s.s0_init = o.s0;
    s.h0_init = o.h0;
    s.base_channels = o.base;
    s.depth = o.depth;
    s.validate();
    return s;
}

TrainConfig train_config_from(const Opts& o) {
    TrainConfig tc;
    tc.lr = o.lr;
    tc.momentum = o.momentum;
    tc.clip = o.clip;
    tc.epochs = o.epochs;
    tc.batch = o.batch;
    tc.seed = o.seed;
    tc.augment = o.augment;
    tc.validate();
    return tc;
}

void print_resolved(const Opts& o) {
    std::cout << "resolved configuration:\n"
              << "  model = " << o.model << "\n"
              << "  level = " << o.level << "\n"
              << "  steps = " << o.steps << "\n"
              << "  alpha = " << o.alpha << "\n"
              << "  s0 = " << o.s0 << "\n"
              << "  h0 = " << o.h0 << "\n"
              << "  base = " << o.base << "\n"
              << "  depth = " << o.depth << "\n"
              << "  lr = " << o.lr << "\n"
              << "  momentum = " << o.momentum << "\n"
              << "  clip = " << o.clip << "\n"
              << "  epochs = " << o.epochs << "\n"
              << "  batch = " << o.batch << "\n"
              << "  seed = " << o.seed << "\n"
              << "  train-size = " << o.train_size << "\n"
              << "  augment = " << (o.augment ? "true" : "false") << "\n"
              << "  data = " << o.data << "\n"
              << "  out = " << o.out << "\n";
}

int cmd_train(const Opts& o) {
    ModelSpec spec = spec_from(o);
    TrainConfig tc = train_config_from(o);
    print_resolved(o);
    if (o.dry_run) return 0;
    if (o.data.empty()) throw UsageError("train: --data is required");
    if (o.out.empty()) throw UsageError("train: --out is required");

    // load both splits before touching the output directory, so a bad dataset
    // leaves no partial artifacts behind
    auto train_set = load_dataset<float>(o.data, "train", o.train_size);
    auto val_set = load_dataset<float>(o.data, "val", o.train_size);
    std::cout << "train: " << train_set.size() << " samples, val: " << val_set.size()
              << " samples\n";

    Model<float> model = build_model<float>(spec);
    he_init(model.store, o.seed);
    TrainResult<float> res = train_model(model, tc, train_set, val_set, o.out);

    std::cout << "epoch,split,loss,miou,lr,seconds\n";
    for (const auto& row : res.log) std::cout << format_log_row(row) << "\n";
    std::cout << std::fixed << std::setprecision(6) << "best val mIoU " << res.best_val_miou
              << " at epoch " << res.best_epoch << "\n"
              << "checkpoint: " << res.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const Opts& o) {
    if (o.data.empty()) throw UsageError("eval: --data is required");
    CheckpointData<float> ck = load_checkpoint<float>(o.checkpoint);
    Model<float> model = model_from_checkpoint(ck);
    if (o.eval_steps > 0) {
        model.spec.steps = o.eval_steps;  // recurrent weights are step-independent
        model.spec.validate();
    }
    auto data = load_dataset<float>(o.data, o.split, o.train_size);

    EvalOptions eo;
    eo.keep_probs = o.pr;
    EvalResult<float> res = evaluate(model, data, o.batch, eo);

    std::cout << "checkpoint: " << o.checkpoint << " (" << variant_name(model.spec.variant)
              << ", epoch " << ck.epoch << ")\n"
              << std::fixed << std::setprecision(6) << "split '" << o.split << "': " << data.size()
              << " images, loss " << res.loss << "\n";
    for (size_t t = 0; t < res.per_step.size(); ++t) {
        const MetricsReport& r = res.per_step[t];
        std::cout << "step " << (t + 1) << ": mIoU " << r.mean_iou << "  mPrec "
                  << r.mean_precision << "  mRec " << r.mean_recall << "  mF1 " << r.mean_f1
                  << "\n";
    }
    if (o.pr) {
        std::vector<Tensor<float>> gts;
        gts.reserve(data.size());
        for (const auto& s : data) gts.push_back(s.mask);
        BreakEven be = pr_break_even(res.probs, gts);
        std::cout << "P/R break-even " << be.value << " at threshold " << be.threshold << "\n";
    }
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        std::string csv = (fs::path(o.out) / "metrics.csv").string();
        write_metrics_csv(csv, res.final_step());
        std::cout << "wrote " << csv << "\n";
    }
    return 0;
}

int cmd_predict(const Opts& o) {
    if (o.out.empty()) throw UsageError("predict: --out prefix is required");
    CheckpointData<float> ck = load_checkpoint<float>(o.checkpoint);
    Model<float> model = model_from_checkpoint(ck);

    Tensor<float> img = image_to_tensor<float>(read_png(o.image));
    int H = img.dim(1), W = img.dim(2);
    int div = 1 << model.spec.depth;
    int Hp = (H + div - 1) / div * div, Wp = (W + div - 1) / div * div;
    Tensor<float> padded = reflect_pad_bottom_right(img, Hp, Wp);

    Tensor<float> batch({1, 3, Hp, Wp});
    std::copy_n(padded.ptr(), padded.size(), batch.ptr());
    NoGradGuard guard;
    auto logits = model.forward(batch, false);
    Tensor<float> prob4 = softmax2_foreground(logits.back())->value;  // (1,1,Hp,Wp)
    Tensor<float> prob({1, Hp, Wp});
    std::copy_n(prob4.ptr(), prob4.size(), prob.ptr());
    prob = crop_top_left(prob, H, W);

    fs::path prefix(o.out);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    std::string mask_path = o.out + "_mask.png";
    std::string overlay_path = o.out + "_overlay.png";
    write_png(mask_path, tensor_to_image(binarize(prob)));
    export_overlay(img, prob, overlay_path);
    std::cout << "wrote " << mask_path << " and " << overlay_path << " (" << W << "x" << H
              << ")\n";
    return 0;
}

int cmd_gradcheck(const Opts& o) {
    ModelSpec spec = spec_from(o);
    Model<double> model = build_model<double>(spec);
    he_init(model.store, o.seed);
    GradCheckConfig cfg;
    cfg.seed = o.seed;
    GradCheckResult res = gradcheck_model(model, cfg);

    std::cout << std::scientific << std::setprecision(3);
    const FamilyStat* worst = nullptr;
    for (const auto& f : res.families) {
        std::cout << "family " << f.family << ": checked " << f.checked << ", skipped "
                  << f.skipped << ", max rel err " << f.max_rel_err;
        if (f.worst_index >= 0) std::cout << " (" << f.worst_param << "[" << f.worst_index << "])";
        std::cout << "\n";
        if (!worst || f.max_rel_err > worst->max_rel_err) worst = &f;
    }
    std::cout << "max relative error " << res.max_rel_err << " over " << res.checked
              << " checked elements (kept " << std::fixed << std::setprecision(1)
              << 100.0 * res.kept_fraction() << "%)\n";
    if (!res.passed(cfg.tol)) {
        std::cout << std::scientific << std::setprecision(3) << "gradient check FAILED: "
                  << res.max_rel_err << " at " << worst->worst_param << "[" << worst->worst_index
                  << "] exceeds " << cfg.tol << "\n";
        return 3;
    }
    std::cout << std::scientific << std::setprecision(3) << "gradient check passed (threshold "
              << cfg.tol << ")\n";
    return 0;
}

int cmd_synth(const Opts& o) {
    if (o.out.empty()) throw UsageError("synth: --out is required");
    fs::path root(o.out);
    if (fs::exists(root) && !fs::is_empty(root) && !o.force)
        throw InvalidDataError(cat(o.out, " exists and is not empty; pass --force to overwrite"));
    generate_synthetic(o.seed, o.synth_n, o.synth_size, o.out);
    int n_train = o.synth_n * 6 / 10, n_val = o.synth_n * 2 / 10;
    std::cout << "wrote " << o.synth_n << " samples of size " << o.synth_size << " under " << o.out
              << " (" << n_train << " train / " << n_val << " val / "
              << (o.synth_n - n_train - n_val) << " test)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    ensure_blas_configured();  // honors RUNET_THREADS; defaults to one thread
    Opts o;
    CLI::App app{"Recurrent U-Net binary segmentation toolkit"};
    app.require_subcommand(1);

    KeyedCommand train_keys, eval_keys, grad_keys;

    CLI::App* train = app.add_subcommand("train", "Train a model; writes checkpoint + CSV log");
    train_keys.cmd = train;
    add_model_keys(train_keys, o);
    add_train_keys(train_keys, o);
    train_keys.add_value("seed", o.seed, "seed for init, shuffling and augmentation");
    train_keys.add_value("data", o.data, "dataset root with <split>/images and <split>/masks");
    train_keys.add_value("out", o.out, "output directory for best.ckpt and log.csv");
    train->add_option("--config", o.config, "key = value file; explicit flags override it");
    train->add_flag("--dry-run", o.dry_run, "print the resolved configuration and exit");

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval->add_option("checkpoint", o.checkpoint, "checkpoint file")->required();
    eval_keys.cmd = eval;
    eval_keys.add_value("data", o.data, "dataset root");
    eval_keys.add_value("split", o.split, "dataset split to evaluate");
    eval_keys.add_value("batch", o.batch, "evaluation batch size");
    eval_keys.add_value("train-size", o.train_size, "resize samples to this square size; 0 = native");
    eval_keys.add_value("steps", o.eval_steps, "refinement steps; 0 = as stored");
    eval_keys.add_value("out", o.out, "also write per-image metrics.csv here");
    eval->add_flag("--pr", o.pr, "report the pooled precision/recall break-even point");
    eval->add_option("--config", o.config, "key = value file; explicit flags override it");

    CLI::App* predict = app.add_subcommand("predict", "Segment one image with a checkpoint");
    predict->add_option("checkpoint", o.checkpoint, "checkpoint file")->required();
    predict->add_option("image", o.image, "input PNG (any size; padded internally)")->required();
    predict->add_option("--out", o.out, "output prefix for <out>_mask.png and <out>_overlay.png")
        ->required();

    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "Finite-difference check of the backward pass on a random 16x16 instance");
    grad_keys.cmd = gradcheck;
    add_model_keys(grad_keys, o);
    grad_keys.add_value("seed", o.seed, "seed for parameters and the probe input");
    gradcheck->add_option("--config", o.config, "key = value file; explicit flags override it");

    CLI::App* synth = app.add_subcommand("synth",
                                         "Generate a synthetic shape-segmentation dataset");
    synth->add_option("--out", o.out, "output dataset root")->required();
    synth->add_option("--n", o.synth_n, "total sample count, split 60/20/20")
        ->capture_default_str();
    synth->add_option("--size", o.synth_size, "square image size, multiple of 16")
        ->capture_default_str();
    synth->add_option("--seed", o.seed, "generator seed")->capture_default_str();
    synth->add_flag("--force", o.force, "write into a non-empty directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            train_keys.apply_config(o.config);
            return cmd_train(o);
        }
        if (eval->parsed()) {
            eval_keys.apply_config(o.config);
            return cmd_eval(o);
        }
        if (predict->parsed()) return cmd_predict(o);
        if (gradcheck->parsed()) {
            grad_keys.apply_config(o.config);
            return cmd_gradcheck(o);
        }
        if (synth->parsed()) return cmd_synth(o);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const InvalidConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
