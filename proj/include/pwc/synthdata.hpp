#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pwc/image.hpp"
#include "pwc/warp.hpp"

namespace pwc {

// row-major 2x3: x' = a x + b y + tx, y' = c x + d y + ty
struct Affine2 {
    double a = 1.0, b = 0.0, tx = 0.0;
    double c = 0.0, d = 1.0, ty = 0.0;

    std::array<double, 2> apply(double x, double y) const {
        return {a * x + b * y + tx, c * x + d * y + ty};
    }

    Affine2 inverse() const {
        double det = a * d - b * c;
        if (std::abs(det) < 1e-12) throw std::runtime_error("affine is not invertible");
        Affine2 r;
        r.a = d / det;
        r.b = -b / det;
        r.c = -c / det;
        r.d = a / det;
        r.tx = -(r.a * tx + r.b * ty);
        r.ty = -(r.c * tx + r.d * ty);
        return r;
    }

    // f after g: result(p) = f(g(p))
    static Affine2 compose(const Affine2& f, const Affine2& g) {
        Affine2 r;
        r.a = f.a * g.a + f.b * g.c;
        r.b = f.a * g.b + f.b * g.d;
        r.c = f.c * g.a + f.d * g.c;
        r.d = f.c * g.b + f.d * g.d;
        r.tx = f.a * g.tx + f.b * g.ty + f.tx;
        r.ty = f.c * g.tx + f.d * g.ty + f.ty;
        return r;
    }

    static Affine2 translation(double x, double y) { return {1.0, 0.0, x, 0.0, 1.0, y}; }

    static Affine2 rotation_scale(double theta, double s) {
        double co = std::cos(theta) * s, si = std::sin(theta) * s;
        return {co, -si, 0.0, si, co, 0.0};
    }
};

struct SynthConfig {
    int image_size = 64;
    int n_classes = 4;
    int template_size = 48;
    int n_regions = 8;  // one landmark per region
    double scale_lo = 0.6, scale_hi = 1.4;
    double rot_range = std::numbers::pi / 6.0;
    double inside_min = 0.8;
    double coverage_lo = 0.15, coverage_hi = 0.60;
    double hue_margin = 0.05;
    int place_tries = 32;
    int max_distractors = 3;
    bool jitter = true;

    void validate() const {
        if (n_classes < 2) throw std::invalid_argument("synth: n_classes must be at least 2");
        if (image_size < 16 || template_size < 16)
            throw std::invalid_argument("synth: sizes too small");
        if (n_regions < 4 || n_regions > 8)
            throw std::invalid_argument("synth: region count must be 4..8");
        if (!(scale_lo > 0.0 && scale_hi >= scale_lo))
            throw std::invalid_argument("synth: bad scale range");
    }
};

struct ClassTemplate {
    int class_id = 0;
    int size = 0;
    std::vector<std::uint8_t> silhouette;
    std::vector<int> region;  // -1 outside the silhouette
    Image texture;
    std::vector<std::array<double, 2>> landmarks;
    double base_hue = 0.0;

    bool inside(double x, double y) const {
        int xi = static_cast<int>(std::lround(x)), yi = static_cast<int>(std::lround(y));
        if (xi < 0 || xi >= size || yi < 0 || yi >= size) return false;
        return silhouette[static_cast<std::size_t>(yi) * size + xi] != 0;
    }
};

namespace detail {

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h -= std::floor(h);
    double f6 = h * 6.0;
    int i = static_cast<int>(f6) % 6;
    double f = f6 - std::floor(f6);
    double p = v * (1.0 - s), q = v * (1.0 - f * s), t = v * (1.0 - (1.0 - f) * s);
    double r, g, b;
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

// two-octave value noise on coarse random lattices
struct ValueNoise {
    int n0 = 5, n1 = 9;
    std::vector<double> lat0, lat1;

    ValueNoise(Rng& rng) {
        lat0.resize(static_cast<std::size_t>(n0) * n0);
        lat1.resize(static_cast<std::size_t>(n1) * n1);
        for (double& v : lat0) v = rng.uniform();
        for (double& v : lat1) v = rng.uniform();
    }

    static double lerp_grid(const std::vector<double>& lat, int n, double u, double v) {
        double gx = u * (n - 1), gy = v * (n - 1);
        int x0 = std::min(static_cast<int>(gx), n - 2), y0 = std::min(static_cast<int>(gy), n - 2);
        double fx = gx - x0, fy = gy - y0;
        auto at = [&](int x, int y) { return lat[static_cast<std::size_t>(y) * n + x]; };
        return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
               fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
    }

    double at(double u, double v) const {
        return 0.65 * lerp_grid(lat0, n0, u, v) + 0.35 * lerp_grid(lat1, n1, u, v);
    }
};

}  // namespace detail

inline std::vector<ClassTemplate> make_templates(Rng& rng, int n_classes,
                                                 const SynthConfig& cfg = {}) {
    if (n_classes < 2) throw std::invalid_argument("make_templates: need at least 2 classes");
    cfg.validate();
    const double pi = std::numbers::pi;
    int ts = cfg.template_size;
    std::vector<ClassTemplate> out;
    out.reserve(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        ClassTemplate t;
        t.class_id = c;
        t.size = ts;
        t.base_hue = (c + 0.5 + rng.uniform(-0.1, 0.1)) / n_classes;
        t.silhouette.assign(static_cast<std::size_t>(ts) * ts, 0);
        t.region.assign(t.silhouette.size(), -1);
        t.texture = Image({3, ts, ts}, 0.0f);

        // star-convex blob: radius varies with angle by a few low harmonics
        double r0 = 0.36 * ts;
        std::array<double, 4> amp, phase;
        for (int k = 0; k < 4; ++k) {
            amp[k] = rng.uniform(-0.12, 0.12);
            phase[k] = rng.uniform(0.0, 2.0 * pi);
        }
        double cx = ts / 2.0, cy = ts / 2.0;
        auto radius_at = [&](double phi) {
            double r = 1.0;
            for (int k = 0; k < 4; ++k) r += amp[k] * std::cos((k + 1) * phi + phase[k]);
            return std::min(r0 * r, 0.48 * ts);
        };
        for (int y = 0; y < ts; ++y)
            for (int x = 0; x < ts; ++x) {
                double dx = x - cx, dy = y - cy;
                double rr = std::hypot(dx, dy);
                if (rr <= radius_at(std::atan2(dy, dx)))
                    t.silhouette[static_cast<std::size_t>(y) * ts + x] = 1;
            }

        // region sites inside the blob, assignment by nearest site
        std::vector<std::array<double, 2>> sites;
        while (static_cast<int>(sites.size()) < cfg.n_regions) {
            double sx = rng.uniform(0.0, ts - 1.0), sy = rng.uniform(0.0, ts - 1.0);
            if (t.inside(sx, sy)) sites.push_back({sx, sy});
        }
        for (int y = 0; y < ts; ++y)
            for (int x = 0; x < ts; ++x) {
                std::size_t i = static_cast<std::size_t>(y) * ts + x;
                if (!t.silhouette[i]) continue;
                int best = 0;
                double bd = 1e30;
                for (int s = 0; s < cfg.n_regions; ++s) {
                    double d = std::hypot(x - sites[s][0], y - sites[s][1]);
                    if (d < bd) {
                        bd = d;
                        best = s;
                    }
                }
                t.region[i] = best;
            }

        // Per-region texture: class hue with an offset wide enough that hue
        // varies visibly from region to region, so color identifies a place
        // inside an instance and not just the class. The value channel mixes
        // two oblique waves plus a radial wave anchored at the region site;
        // the three periods are mutually incommensurate so local patches stay
        // distinctive instead of repeating every few pixels. Orientation and
        // frequency band are anchored to the class, giving classes a
        // structural identity besides their hue.
        struct RegionStyle {
            double hue, sat, a1, p1, f1, a2, p2, f2, pd, f3;
        };
        double band = 3.0 + 1.3 * (c % 4);
        double class_angle = pi * (c % 3) / 3.0;
        std::vector<RegionStyle> styles(static_cast<std::size_t>(cfg.n_regions));
        for (auto& st : styles) {
            st.hue = t.base_hue + rng.uniform(-0.12, 0.12);
            st.sat = rng.uniform(0.55, 0.85);
            st.a1 = class_angle + rng.uniform(-pi / 10.0, pi / 10.0);
            st.p1 = band + rng.uniform(-0.5, 0.5);
            st.f1 = rng.uniform(0.0, 2.0 * pi);
            st.a2 = st.a1 + pi / 2.0 * (0.7 + rng.uniform(0.0, 0.6));
            st.p2 = band * 1.618 + rng.uniform(-0.6, 0.6);
            st.f2 = rng.uniform(0.0, 2.0 * pi);
            st.pd = band * 2.414 + rng.uniform(-0.8, 0.8);
            st.f3 = rng.uniform(0.0, 2.0 * pi);
        }
        for (int y = 0; y < ts; ++y)
            for (int x = 0; x < ts; ++x) {
                std::size_t i = static_cast<std::size_t>(y) * ts + x;
                if (t.region[i] < 0) continue;
                std::size_t r = static_cast<std::size_t>(t.region[i]);
                const RegionStyle& st = styles[r];
                double u1 = x * std::cos(st.a1) + y * std::sin(st.a1);
                double u2 = x * std::cos(st.a2) + y * std::sin(st.a2);
                double d = std::hypot(x - sites[r][0], y - sites[r][1]);
                double v = 0.55 + 0.17 * std::sin(2.0 * pi * u1 / st.p1 + st.f1) +
                           0.12 * std::sin(2.0 * pi * u2 / st.p2 + st.f2) +
                           0.11 * std::sin(2.0 * pi * d / st.pd + st.f3);
                auto rgb = detail::hsv_to_rgb(st.hue, st.sat, std::clamp(v, 0.05, 0.98));
                for (int ch = 0; ch < 3; ++ch) t.texture.at(ch, y, x) = rgb[ch];
            }

        // landmarks: region centroids, snapped to the nearest member pixel when
        // the centroid itself falls outside the silhouette
        t.landmarks.resize(static_cast<std::size_t>(cfg.n_regions));
        for (int s = 0; s < cfg.n_regions; ++s) {
            double sx = 0, sy = 0;
            long n = 0;
            for (int y = 0; y < ts; ++y)
                for (int x = 0; x < ts; ++x)
                    if (t.region[static_cast<std::size_t>(y) * ts + x] == s) {
                        sx += x;
                        sy += y;
                        ++n;
                    }
            sx /= n;
            sy /= n;
            if (!t.inside(sx, sy)) {
                double bd = 1e30;
                double bx = sites[s][0], by = sites[s][1];
                for (int y = 0; y < ts; ++y)
                    for (int x = 0; x < ts; ++x)
                        if (t.region[static_cast<std::size_t>(y) * ts + x] == s) {
                            double d = std::hypot(x - sx, y - sy);
                            if (d < bd) {
                                bd = d;
                                bx = x;
                                by = y;
                            }
                        }
                sx = bx;
                sy = by;
            }
            t.landmarks[s] = {sx, sy};
        }
        out.push_back(std::move(t));
    }
    return out;
}

struct PairKeypoint {
    double ax = 0, ay = 0, bx = 0, by = 0;
};

struct InstancePair {
    Image image_a, image_b;
    Affine2 fg_a, fg_b;  // template -> image
    DenseWarp gt_map_ab;  // image_b -> image_a, valid on b's foreground; empty for negatives
    std::vector<PairKeypoint> keypoints;
    bool positive = false;
    int class_a = 0, class_b = 0;
};

namespace detail {

// instance foreground pixel count in-frame and the analytic instance area
struct PlacementStats {
    long in_frame = 0;
    double area = 0.0;
};

inline PlacementStats placement_stats(const ClassTemplate& tpl, const Affine2& T, int s,
                                      double scale) {
    PlacementStats st;
    long fg = 0;
    for (std::uint8_t v : tpl.silhouette) fg += v ? 1 : 0;
    st.area = static_cast<double>(fg) * scale * scale;
    Affine2 inv = T.inverse();
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            auto p = inv.apply(x, y);
            if (tpl.inside(p[0], p[1])) ++st.in_frame;
        }
    return st;
}

inline Affine2 sample_placement(Rng& rng, const ClassTemplate& tpl, const SynthConfig& cfg) {
    int s = cfg.image_size;
    for (int t = 0; t < cfg.place_tries; ++t) {
        double sc = rng.uniform(cfg.scale_lo, cfg.scale_hi);
        double th = rng.uniform(-cfg.rot_range, cfg.rot_range);
        double cx = rng.uniform(0.25 * s, 0.75 * s);
        double cy = rng.uniform(0.25 * s, 0.75 * s);
        Affine2 T = Affine2::compose(
            Affine2::compose(Affine2::translation(cx, cy), Affine2::rotation_scale(th, sc)),
            Affine2::translation(-tpl.size / 2.0, -tpl.size / 2.0));
        PlacementStats st = placement_stats(tpl, T, s, sc);
        double coverage = static_cast<double>(st.in_frame) / (static_cast<double>(s) * s);
        double inside = static_cast<double>(st.in_frame) / st.area;
        if (coverage >= cfg.coverage_lo && coverage <= cfg.coverage_hi &&
            inside >= cfg.inside_min)
            return T;
    }
    throw std::runtime_error("instance placement rejected after the retry budget");
}

inline void paint_background(Image& img, Rng& rng, const std::vector<ClassTemplate>& tpls,
                             int skip_a, int skip_b, const SynthConfig& cfg) {
    int s = cfg.image_size;
    ValueNoise noise(rng);
    double hue = rng.uniform(), sat = rng.uniform(0.10, 0.30);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double v = 0.35 + 0.4 * noise.at(static_cast<double>(x) / (s - 1),
                                             static_cast<double>(y) / (s - 1));
            auto rgb = hsv_to_rgb(hue, sat, v);
            for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = rgb[ch];
        }
    // distractor ellipses textured from classes outside the pair
    std::size_t excluded = (skip_a == skip_b) ? 1 : 2;
    if (tpls.size() <= excluded) return;
    int n = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.max_distractors) + 1));
    for (int k = 0; k < n; ++k) {
        std::size_t pick = rng.index(tpls.size());
        while (static_cast<int>(pick) == skip_a || static_cast<int>(pick) == skip_b)
            pick = (pick + 1) % tpls.size();
        const ClassTemplate& src = tpls[pick];
        double ex = rng.uniform(0.0, s - 1.0), ey = rng.uniform(0.0, s - 1.0);
        double rx = rng.uniform(3.0, 8.0), ry = rng.uniform(3.0, 8.0);
        double ang = rng.uniform(0.0, std::numbers::pi);
        double anchor_x, anchor_y;
        do {
            anchor_x = rng.uniform(0.0, src.size - 1.0);
            anchor_y = rng.uniform(0.0, src.size - 1.0);
        } while (!src.inside(anchor_x, anchor_y));
        double ca = std::cos(ang), sa = std::sin(ang);
        int x0 = std::max(0, static_cast<int>(ex - rx - ry)),
            x1 = std::min(s - 1, static_cast<int>(ex + rx + ry) + 1);
        int y0 = std::max(0, static_cast<int>(ey - rx - ry)),
            y1 = std::min(s - 1, static_cast<int>(ey + rx + ry) + 1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double lx = (x - ex) * ca + (y - ey) * sa;
                double ly = -(x - ex) * sa + (y - ey) * ca;
                if ((lx / rx) * (lx / rx) + (ly / ry) * (ly / ry) > 1.0) continue;
                double tx = anchor_x + lx, ty = anchor_y + ly;
                if (!src.inside(tx, ty)) continue;
                for (int ch = 0; ch < 3; ++ch)
                    img.at(ch, y, x) = bilinear_at(src.texture, ch, tx, ty);
            }
    }
}

inline void rasterize_instance(Image& img, std::vector<std::uint8_t>& mask,
                               const ClassTemplate& tpl, const Affine2& T) {
    int s = img_height(img);
    mask.assign(static_cast<std::size_t>(s) * s, 0);
    Affine2 inv = T.inverse();
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            auto p = inv.apply(x, y);
            if (!tpl.inside(p[0], p[1])) continue;
            mask[static_cast<std::size_t>(y) * s + x] = 1;
            for (int ch = 0; ch < 3; ++ch)
                img.at(ch, y, x) = bilinear_at(tpl.texture, ch, p[0], p[1]);
        }
}

}  // namespace detail

// Deterministic pair construction from explicit placements. make_pair samples
// the placements; tests may pass fixed transforms.
inline InstancePair pair_from_placements(Rng& rng, const std::vector<ClassTemplate>& tpls,
                                         int ia, int ib, const Affine2& ta, const Affine2& tb,
                                         bool positive, const SynthConfig& cfg) {
    int s = cfg.image_size;
    InstancePair pr;
    pr.positive = positive;
    pr.class_a = tpls[static_cast<std::size_t>(ia)].class_id;
    pr.class_b = tpls[static_cast<std::size_t>(ib)].class_id;
    pr.fg_a = ta;
    pr.fg_b = tb;
    pr.image_a = Image({3, s, s}, 0.0f);
    pr.image_b = Image({3, s, s}, 0.0f);

    detail::paint_background(pr.image_a, rng, tpls, pr.class_a, pr.class_b, cfg);
    detail::paint_background(pr.image_b, rng, tpls, pr.class_a, pr.class_b, cfg);
    std::vector<std::uint8_t> mask_a, mask_b;
    detail::rasterize_instance(pr.image_a, mask_a, tpls[static_cast<std::size_t>(ia)], ta);
    detail::rasterize_instance(pr.image_b, mask_b, tpls[static_cast<std::size_t>(ib)], tb);

    if (positive) {
        Affine2 map = Affine2::compose(ta, tb.inverse());
        pr.gt_map_ab = DenseWarp(s, s);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                std::size_t i = pr.gt_map_ab.idx(x, y);
                if (mask_b[i]) {
                    auto q = map.apply(x, y);
                    pr.gt_map_ab.mx[i] = q[0];
                    pr.gt_map_ab.my[i] = q[1];
                } else {
                    pr.gt_map_ab.mx[i] = -1.0;
                    pr.gt_map_ab.my[i] = -1.0;
                }
            }
        pr.gt_map_ab.refresh_valid();
        for (const auto& lm : tpls[static_cast<std::size_t>(ia)].landmarks) {
            auto a = ta.apply(lm[0], lm[1]);
            auto b = tb.apply(lm[0], lm[1]);
            pr.keypoints.push_back({a[0], a[1], b[0], b[1]});
        }
    }
    if (cfg.jitter) {
        apply_jitter(pr.image_a, rng);
        apply_jitter(pr.image_b, rng);
    }
    return pr;
}

inline InstancePair make_pair(Rng& rng, const std::vector<ClassTemplate>& tpls, bool positive,
                              const SynthConfig& cfg = {}) {
    if (tpls.empty()) throw std::invalid_argument("make_pair: no templates");
    cfg.validate();
    int ia, ib;
    if (positive) {
        ia = ib = static_cast<int>(rng.index(tpls.size()));
    } else {
        if (tpls.size() < 2) throw std::invalid_argument("make_pair: negatives need 2 classes");
        ia = static_cast<int>(rng.index(tpls.size()));
        ib = static_cast<int>((ia + 1 + rng.index(tpls.size() - 1)) % tpls.size());
    }
    Affine2 ta = detail::sample_placement(rng, tpls[static_cast<std::size_t>(ia)], cfg);
    Affine2 tb = detail::sample_placement(rng, tpls[static_cast<std::size_t>(ib)], cfg);
    return pair_from_placements(rng, tpls, ia, ib, ta, tb, positive, cfg);
}

// ---- deterministic indexed access ---------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split split_of(int local_index, int n_label) {
    int tr = static_cast<int>(std::floor(0.70 * n_label));
    int va = static_cast<int>(std::floor(0.85 * n_label));
    if (local_index < tr) return Split::train;
    if (local_index < va) return Split::val;
    return Split::test;
}

// pairs 0..n_pos-1 are positive, the rest negative; split by index within label
inline Split dataset_split(int index, int n_pos, int n_neg) {
    if (index < n_pos) return split_of(index, n_pos);
    return split_of(index - n_pos, n_neg);
}

inline std::vector<ClassTemplate> dataset_templates(std::uint64_t seed, const SynthConfig& cfg) {
    Rng rng(Rng::key(seed, 0, 0));
    return make_templates(rng, cfg.n_classes, cfg);
}

inline InstancePair dataset_pair(std::uint64_t seed, int index, int n_pos,
                                 const std::vector<ClassTemplate>& tpls,
                                 const SynthConfig& cfg) {
    bool positive = index < n_pos;
    Rng rng(Rng::key(seed, static_cast<std::uint64_t>(index) + 1, positive ? 1 : 2));
    return make_pair(rng, tpls, positive, cfg);
}

// ---- persistence -----------------------------------------------------------------

struct PairRecord {
    int index = 0;
    bool positive = false;
    Split split = Split::train;
    std::string image_a, image_b, gt;  // gt empty for negatives
    int class_a = 0, class_b = 0;
    std::vector<PairKeypoint> keypoints;
};

inline void write_dataset(const std::string& dir, std::uint64_t seed, int n_pos, int n_neg,
                          const SynthConfig& cfg) {
    cfg.validate();
    if (n_pos < 1 || n_neg < 0) throw std::invalid_argument("write_dataset: bad pair counts");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create dataset directory " + dir);
    std::vector<ClassTemplate> tpls = dataset_templates(seed, cfg);

    std::ofstream manifest(dir + "/manifest.jsonl", std::ios::binary);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
    char name[64];
    for (int index = 0; index < n_pos + n_neg; ++index) {
        InstancePair pr = dataset_pair(seed, index, n_pos, tpls, cfg);
        nlohmann::json rec;
        rec["index"] = index;
        rec["label"] = pr.positive ? "positive" : "negative";
        rec["split"] = split_name(dataset_split(index, n_pos, n_neg));
        rec["class_a"] = pr.class_a;
        rec["class_b"] = pr.class_b;
        std::snprintf(name, sizeof name, "pair_%05d_a.pwim", index);
        rec["image_a"] = name;
        write_pwim(dir + "/" + name, pr.image_a);
        std::snprintf(name, sizeof name, "pair_%05d_b.pwim", index);
        rec["image_b"] = name;
        write_pwim(dir + "/" + name, pr.image_b);
        if (pr.positive) {
            std::snprintf(name, sizeof name, "pair_%05d_gt.pwim", index);
            rec["gt"] = name;
            write_pwim(dir + "/" + name, warp_to_tensor(pr.gt_map_ab));
            auto kps = nlohmann::json::array();
            for (const PairKeypoint& kp : pr.keypoints)
                kps.push_back({kp.ax, kp.ay, kp.bx, kp.by});
            rec["keypoints"] = std::move(kps);
        } else {
            rec["gt"] = nullptr;
            rec["keypoints"] = nlohmann::json::array();
        }
        manifest << rec.dump() << "\n";
    }
    if (!manifest) throw std::runtime_error("manifest write failed in " + dir);
}

inline std::vector<PairRecord> read_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.jsonl", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open manifest in " + dir);
    std::vector<PairRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PairRecord r;
        r.index = j.at("index").get<int>();
        r.positive = j.at("label").get<std::string>() == "positive";
        std::string sp = j.at("split").get<std::string>();
        r.split = sp == "train" ? Split::train : sp == "val" ? Split::val : Split::test;
        r.image_a = j.at("image_a").get<std::string>();
        r.image_b = j.at("image_b").get<std::string>();
        if (!j.at("gt").is_null()) r.gt = j.at("gt").get<std::string>();
        r.class_a = j.at("class_a").get<int>();
        r.class_b = j.at("class_b").get<int>();
        for (const auto& kp : j.at("keypoints"))
            r.keypoints.push_back({kp[0].get<double>(), kp[1].get<double>(),
                                   kp[2].get<double>(), kp[3].get<double>()});
        out.push_back(std::move(r));
    }
    return out;
}

struct LoadedPair {
    Image image_a, image_b;
    DenseWarp gt_map_ab;  // empty when the record has no ground truth
};

inline LoadedPair load_pair(const std::string& dir, const PairRecord& rec) {
    LoadedPair p;
    p.image_a = read_pwim(dir + "/" + rec.image_a);
    p.image_b = read_pwim(dir + "/" + rec.image_b);
    if (!rec.gt.empty()) p.gt_map_ab = warp_from_tensor(read_pwim(dir + "/" + rec.gt));
    return p;
}

}  // namespace pwc
