#pragma once

#include <filesystem>
#include <iomanip>

#include "runet/png_io.hpp"

namespace runet {

// Filled foreground primitive: a rotated ellipse or a capsule (segment with
// thickness). Membership is evaluated analytically at pixel centers, so the
// ground-truth mask is exact by construction.
struct ShapeSpec {
    enum class Kind { ellipse, capsule };
    Kind kind = Kind::ellipse;
    double cx = 0, cy = 0, rx = 1, ry = 1, angle = 0;  // ellipse
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0, r = 1;      // capsule

    bool contains(double px, double py) const {
        if (kind == Kind::ellipse) {
            double dx = px - cx, dy = py - cy;
            double cs = std::cos(angle), sn = std::sin(angle);
            double u = (cs * dx + sn * dy) / rx;
            double v = (-sn * dx + cs * dy) / ry;
            return u * u + v * v <= 1.0;
        }
        double vx = x2 - x1, vy = y2 - y1;
        double len2 = vx * vx + vy * vy;
        double t = len2 == 0 ? 0 : std::max(0.0, std::min(1.0, ((px - x1) * vx + (py - y1) * vy) / len2));
        double dx = px - (x1 + t * vx), dy = py - (y1 + t * vy);
        return dx * dx + dy * dy <= r * r;
    }
};

struct SyntheticSample {
    ImageU8 image;                  // RGB: textured gradient + distractor rings + warm shapes
    ImageU8 mask;                   // grayscale 0/255, foreground shapes only
    std::vector<ShapeSpec> shapes;  // the rasterized foreground primitives
};

namespace detail {

struct Rgb {
    double r, g, b;
};

inline ShapeSpec sample_shape(std::mt19937_64& rng, int size) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ShapeSpec s;
    if (unif(rng) < 0.6) {
        s.kind = ShapeSpec::Kind::ellipse;
        s.cx = (0.15 + 0.7 * unif(rng)) * size;
        s.cy = (0.15 + 0.7 * unif(rng)) * size;
        s.rx = (0.08 + 0.14 * unif(rng)) * size;
        s.ry = (0.08 + 0.14 * unif(rng)) * size;
        s.angle = unif(rng) * 3.14159265358979323846;
    } else {
        s.kind = ShapeSpec::Kind::capsule;
        s.x1 = (0.15 + 0.7 * unif(rng)) * size;
        s.y1 = (0.15 + 0.7 * unif(rng)) * size;
        double theta = unif(rng) * 2 * 3.14159265358979323846;
        double len = (0.2 + 0.3 * unif(rng)) * size;
        s.x2 = std::max(0.05 * size, std::min(0.95 * size, s.x1 + len * std::cos(theta)));
        s.y2 = std::max(0.05 * size, std::min(0.95 * size, s.y1 + len * std::sin(theta)));
        s.r = (0.05 + 0.07 * unif(rng)) * size;
    }
    return s;
}

}  // namespace detail

// Renders one deterministic sample keyed by (seed, index): cool gradient
// background with pixel noise, 1-2 dark elliptical outline rings that belong
// to the background, and 1-3 warm filled shapes that define the mask. The
// foreground fraction is kept in [2%, 50%] by resampling the shape set.
inline SyntheticSample make_synthetic_sample(uint64_t seed, int64_t index, int size) {
    auto rng = make_rng(seed, 0x53595448ULL, static_cast<uint64_t>(index));
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SyntheticSample out;
    const int64_t total = static_cast<int64_t>(size) * size;

    std::vector<uint8_t> fg(static_cast<size_t>(total));
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 200)
            throw ContractError("synthetic generator failed to hit the foreground bounds");
        out.shapes.clear();
        int count = 1 + static_cast<int>(unif(rng) * 3);  // 1..3
        for (int i = 0; i < count; ++i) out.shapes.push_back(detail::sample_shape(rng, size));
        int64_t covered = 0;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                bool inside = false;
                for (const auto& s : out.shapes)
                    if (s.contains(x, y)) {
                        inside = true;
                        break;
                    }
                fg[static_cast<size_t>(y) * size + x] = inside;
                covered += inside;
            }
        double frac = double(covered) / double(total);
        if (frac >= 0.02 && frac <= 0.50) break;
    }

    // background gradient between two cool colors along a random direction
    detail::Rgb bg_a{0.10 + 0.15 * unif(rng), 0.20 + 0.25 * unif(rng), 0.55 + 0.35 * unif(rng)};
    detail::Rgb bg_b{0.05 + 0.15 * unif(rng), 0.35 + 0.30 * unif(rng), 0.35 + 0.30 * unif(rng)};
    double gtheta = unif(rng) * 2 * 3.14159265358979323846;
    double gx = std::cos(gtheta), gy = std::sin(gtheta);

    // distractor outlines: same cool family, never in the mask
    int n_rings = 1 + static_cast<int>(unif(rng) * 2);  // 1..2
    std::vector<ShapeSpec> rings;
    for (int i = 0; i < n_rings; ++i) {
        ShapeSpec s = detail::sample_shape(rng, size);
        s.kind = ShapeSpec::Kind::ellipse;
        if (s.rx < 1) s.rx = 0.15 * size;
        if (s.ry < 1) s.ry = 0.15 * size;
        rings.push_back(s);
    }
    double ring_thickness = 0.10 + 0.10 * unif(rng);
    detail::Rgb ring_color{0.04 + 0.08 * unif(rng), 0.08 + 0.10 * unif(rng),
                           0.18 + 0.15 * unif(rng)};

    // per-shape warm fill colors
    std::vector<detail::Rgb> shape_colors;
    for (size_t i = 0; i < out.shapes.size(); ++i)
        shape_colors.push_back({0.75 + 0.25 * unif(rng), 0.30 + 0.30 * unif(rng),
                                0.05 + 0.20 * unif(rng)});

    out.image.width = out.image.height = size;
    out.image.channels = 3;
    out.image.pixels.resize(static_cast<size_t>(total) * 3);
    out.mask.width = out.mask.height = size;
    out.mask.channels = 1;
    out.mask.pixels.resize(static_cast<size_t>(total));

    std::uniform_real_distribution<double> noise(-0.04, 0.04);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double t = 0.5 + 0.5 * ((x - size / 2.0) * gx + (y - size / 2.0) * gy) / (size / 2.0);
            t = std::max(0.0, std::min(1.0, t));
            detail::Rgb px{bg_a.r + t * (bg_b.r - bg_a.r), bg_a.g + t * (bg_b.g - bg_a.g),
                           bg_a.b + t * (bg_b.b - bg_a.b)};
            for (const auto& ring : rings) {
                double dx = x - ring.cx, dy = y - ring.cy;
                double cs = std::cos(ring.angle), sn = std::sin(ring.angle);
                double u = (cs * dx + sn * dy) / ring.rx;
                double v = (-sn * dx + cs * dy) / ring.ry;
                double d = std::sqrt(u * u + v * v);
                if (std::abs(d - 1.0) <= ring_thickness) px = ring_color;
            }
            size_t flat = static_cast<size_t>(y) * size + x;
            if (fg[flat]) {
                for (size_t i = 0; i < out.shapes.size(); ++i)
                    if (out.shapes[i].contains(x, y)) {
                        px = shape_colors[i];  // first containing shape wins
                        break;
                    }
            }
            out.mask.pixels[flat] = fg[flat] ? 255 : 0;
            for (int c = 0; c < 3; ++c) {
                double v = (c == 0 ? px.r : c == 1 ? px.g : px.b) + noise(rng);
                v = std::max(0.0, std::min(1.0, v));
                out.image.pixels[flat * 3 + static_cast<size_t>(c)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
        }
    return out;
}

// Index-contiguous 60/20/20 split; sample content depends only on (seed,
// index), never on n.
inline std::string synthetic_split_of(int index, int n) {
    int n_train = n * 6 / 10, n_val = n * 2 / 10;
    if (index < n_train) return "train";
    if (index < n_train + n_val) return "val";
    return "test";
}

inline void generate_synthetic(uint64_t seed, int n, int size, const std::string& out_root) {
    if (n < 1) throw InvalidConfigError(cat("synthetic: n must be >= 1, got ", n));
    if (size < 16 || size % 16 != 0)
        throw InvalidConfigError(cat("synthetic: size must be a positive multiple of 16, got ",
                                     size));
    namespace fs = std::filesystem;
    for (const char* split : {"train", "val", "test"}) {
        fs::create_directories(fs::path(out_root) / split / "images");
        fs::create_directories(fs::path(out_root) / split / "masks");
    }
    for (int i = 0; i < n; ++i) {
        SyntheticSample s = make_synthetic_sample(seed, i, size);
        std::ostringstream name;
        name << std::setw(5) << std::setfill('0') << i << ".png";
        fs::path split_dir = fs::path(out_root) / synthetic_split_of(i, n);
        write_png((split_dir / "images" / name.str()).string(), s.image);
        write_png((split_dir / "masks" / name.str()).string(), s.mask);
    }
}

}  // namespace runet
