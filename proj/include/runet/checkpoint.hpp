#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "runet/optim.hpp"
#include "runet/recurrent.hpp"

namespace runet {

// Versioned binary checkpoint: magic, format version, scalar width, the model
// recipe, training progress, then name-prefixed tensor records in parameter
// registration order, followed by optimizer velocity records (possibly none).
// Values are raw host-endian scalars, so a round trip is bit-exact.
inline constexpr char kCheckpointMagic[8] = {'R', 'U', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
struct CheckpointData {
    ModelSpec spec;
    int epoch = 0;
    double best_miou = 0;
    std::vector<std::pair<std::string, Tensor<T>>> tensors;
    std::vector<std::pair<std::string, Tensor<T>>> velocities;
};

namespace detail {

struct CkWriter {
    std::ofstream out;
    explicit CkWriter(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError(cat("cannot open ", path, " for writing"));
    }
    void bytes(const void* p, size_t n) { out.write(static_cast<const char*>(p), std::streamsize(n)); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void i32(int32_t v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    template <typename T>
    void tensor(const std::string& name, const Tensor<T>& t) {
        str(name);
        u32(static_cast<uint32_t>(t.rank()));
        for (int d : t.shape) i32(d);
        bytes(t.data.data(), t.data.size() * sizeof(T));
    }
};

struct CkReader {
    std::ifstream in;
    int64_t offset = 0;
    explicit CkReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw IoError(cat("cannot open checkpoint ", path));
    }
    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), std::streamsize(n));
        if (in.gcount() != std::streamsize(n))
            throw FormatError(cat("truncated checkpoint record at byte ", offset));
        offset += static_cast<int64_t>(n);
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    int32_t i32() {
        int32_t v;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        if (n > 4096) throw FormatError(cat("implausible string length ", n, " at byte ", offset));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    template <typename T>
    std::pair<std::string, Tensor<T>> tensor() {
        std::string name = str();
        uint32_t rank = u32();
        if (rank > 8) throw FormatError(cat("implausible tensor rank ", rank, " at byte ", offset));
        Shape shape(rank);
        for (auto& d : shape) d = i32();
        Tensor<T> t(shape);
        bytes(t.data.data(), t.data.size() * sizeof(T));
        return {std::move(name), std::move(t)};
    }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, int epoch, double best_miou,
                     const SgdMomentum<T>* opt = nullptr) {
    std::string tmp = path + ".tmp";
    {
        detail::CkWriter w(tmp);
        w.bytes(kCheckpointMagic, 8);
        w.u32(kCheckpointVersion);
        w.u32(sizeof(T));
        const ModelSpec& s = model.spec;
        w.str(variant_name(s.variant));
        w.i32(s.level);
        w.i32(s.steps);
        w.i32(s.in_channels);
        w.i32(s.base_channels);
        w.i32(s.depth);
        w.f64(s.s0_init);
        w.f64(s.h0_init);
        w.f64(s.alpha);
        w.i32(epoch);
        w.f64(best_miou);
        w.u32(static_cast<uint32_t>(model.store.entries.size()));
        for (const auto& e : model.store.entries) w.tensor(e.name, e.var->value);
        if (opt) {
            uint32_t n = 0;
            for (size_t i = 0; i < model.store.entries.size(); ++i)
                if (model.store.entries[i].trainable) ++n;
            w.u32(n);
            for (size_t i = 0; i < model.store.entries.size(); ++i)
                if (model.store.entries[i].trainable)
                    w.tensor(model.store.entries[i].name, opt->velocity[i]);
        } else {
            w.u32(0);
        }
        if (!w.out) throw IoError(cat("failed writing checkpoint ", tmp));
    }
    std::filesystem::rename(tmp, path);  // atomic publish
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::string& path) {
    detail::CkReader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError(cat(path, ": not a checkpoint (bad magic)"));
    uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError(cat(path, ": unsupported checkpoint version ", version));
    uint32_t scalar = r.u32();
    if (scalar != sizeof(T))
        throw FormatError(cat(path, ": checkpoint holds ", scalar, "-byte scalars, expected ",
                              sizeof(T)));

    CheckpointData<T> ck;
    ck.spec.variant = parse_variant(r.str());
    ck.spec.level = r.i32();
    ck.spec.steps = r.i32();
    ck.spec.in_channels = r.i32();
    ck.spec.base_channels = r.i32();
    ck.spec.depth = r.i32();
    ck.spec.s0_init = r.f64();
    ck.spec.h0_init = r.f64();
    ck.spec.alpha = r.f64();
    ck.epoch = r.i32();
    ck.best_miou = r.f64();
    uint32_t n_tensors = r.u32();
    ck.tensors.reserve(n_tensors);
    for (uint32_t i = 0; i < n_tensors; ++i) ck.tensors.push_back(r.tensor<T>());
    uint32_t n_vel = r.u32();
    ck.velocities.reserve(n_vel);
    for (uint32_t i = 0; i < n_vel; ++i) ck.velocities.push_back(r.tensor<T>());
    return ck;
}

// Rebuilds the model from the stored recipe and installs every tensor. The
// record order must match registration order exactly — anything else means
// the file does not describe this architecture.
template <typename T>
Model<T> model_from_checkpoint(const CheckpointData<T>& ck) {
    Model<T> m = build_model<T>(ck.spec);
    if (ck.tensors.size() != m.store.entries.size())
        throw FormatError(cat("checkpoint has ", ck.tensors.size(), " tensors, model expects ",
                              m.store.entries.size()));
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
        auto& e = m.store.entries[i];
        const auto& [name, tensor] = ck.tensors[i];
        if (name != e.name)
            throw FormatError(cat("checkpoint tensor ", i, " is '", name, "', expected '",
                                  e.name, "'"));
        if (tensor.shape != e.var->value.shape)
            throw FormatError(cat(name, ": stored shape ", shape_str(tensor.shape),
                                  " vs model shape ", shape_str(e.var->value.shape)));
        e.var->value = tensor;
    }
    return m;
}

template <typename T>
void restore_velocities(const CheckpointData<T>& ck, const ParamStore<T>& ps,
                        SgdMomentum<T>& opt) {
    size_t k = 0;
    for (size_t i = 0; i < ps.entries.size(); ++i) {
        if (!ps.entries[i].trainable) continue;
        if (k >= ck.velocities.size()) throw FormatError("checkpoint is missing velocity records");
        const auto& [name, tensor] = ck.velocities[k++];
        if (name != ps.entries[i].name || tensor.shape != opt.velocity[i].shape)
            throw FormatError(cat("velocity record mismatch for ", ps.entries[i].name));
        opt.velocity[i] = tensor;
    }
    if (k != ck.velocities.size())
        throw FormatError("checkpoint has surplus velocity records");
}

}  // namespace runet
