#pragma once

// Random warp sampling and rasterization. A transform maps normalized
// destination coordinates in [-1, 1] to normalized source coordinates; the
// rasterized DenseWarp stores, per destination pixel, the real source pixel
// to sample. Horizontal flip, when drawn, is composed outermost (the warped
// image is flipped).

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "pwc/common.hpp"
#include "pwc/image.hpp"

namespace pwc {

struct WarpConfig {
    double sigma_h = 0.4;
    double sigma_tps = 0.4;
    double affine_scale_range = 0.45;
    double affine_translation_range = 0.25;
    double affine_angle_range = 3.14159265358979323846 / 12.0;  // rotation and shear
    double p_flip = 0.05;
    int resize_size = 340;
    int crop_size = 320;

    void validate() const {
        if (sigma_h < 0.0 || sigma_h > 1.0) throw std::invalid_argument("sigma_h must be in [0,1]");
        if (p_flip < 0.0 || p_flip > 1.0) throw std::invalid_argument("p_flip must be in [0,1]");
        if (crop_size > resize_size) throw std::invalid_argument("crop_size must be <= resize_size");
    }
};

enum class WarpKind { homography, tps, affine_tps };

struct DenseWarp {
    int width = 0, height = 0;
    std::vector<double> mx, my;          // source coordinates per destination pixel
    std::vector<std::uint8_t> valid;     // 1 iff 0 <= mx <= w-1 and 0 <= my <= h-1

    DenseWarp() = default;
    DenseWarp(int w, int h)
        : width(w), height(h),
          mx(static_cast<std::size_t>(w) * h, 0.0),
          my(static_cast<std::size_t>(w) * h, 0.0),
          valid(static_cast<std::size_t>(w) * h, 0) {}

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }

    void refresh_valid() {
        for (std::size_t i = 0; i < mx.size(); ++i)
            valid[i] = (std::isfinite(mx[i]) && std::isfinite(my[i]) &&
                        mx[i] >= 0.0 && mx[i] <= width - 1.0 &&
                        my[i] >= 0.0 && my[i] <= height - 1.0)
                           ? 1
                           : 0;
    }
};

namespace detail {

// Gaussian elimination with partial pivoting, nrhs right-hand sides stored
// column-wise in b (n x nrhs, row-major). Returns false on a tiny pivot.
inline bool solve_linear(std::vector<double>& a, std::vector<double>& b, int n, int nrhs,
                         double tol = 1e-9) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        if (std::abs(a[piv * n + col]) < tol) return false;
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
            for (int c = 0; c < nrhs; ++c) std::swap(b[col * nrhs + c], b[piv * nrhs + c]);
        }
        double inv = 1.0 / a[col * n + col];
        for (int r = col + 1; r < n; ++r) {
            double f = a[r * n + col] * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            for (int c = 0; c < nrhs; ++c) b[r * nrhs + c] -= f * b[col * nrhs + c];
        }
    }
    for (int col = n - 1; col >= 0; --col) {
        double inv = 1.0 / a[col * n + col];
        for (int c = 0; c < nrhs; ++c) {
            double acc = b[col * nrhs + c];
            for (int k = col + 1; k < n; ++k) acc -= a[col * n + k] * b[k * nrhs + c];
            b[col * nrhs + c] = acc * inv;
        }
    }
    return true;
}

inline double tps_kernel(double r2) {
    double u = std::max(r2, 1e-12);
    return u * std::log(u);
}

}  // namespace detail

// y-major corner / control-point orders keep the convention consistent with
// grid vectorization elsewhere.
inline std::array<std::pair<double, double>, 4> homography_corners() {
    return {{{-1.0, -1.0}, {1.0, -1.0}, {-1.0, 1.0}, {1.0, 1.0}}};
}

inline std::array<std::pair<double, double>, 9> tps_control_points() {
    std::array<std::pair<double, double>, 9> pts;
    int k = 0;
    for (double y : {-1.0, 0.0, 1.0})
        for (double x : {-1.0, 0.0, 1.0}) pts[k++] = {x, y};
    return pts;
}

struct WarpTransform {
    WarpKind kind = WarpKind::homography;
    bool flip = false;

    // homography: normalized dst -> src, row-major 3x3 with h[8] = 1
    std::array<double, 9> h{};
    std::array<double, 8> corner_disp{};  // dx,dy per corner, sampling order

    // tps: weights per control point plus affine tail, per output coordinate
    std::array<double, 18> tps_disp{};
    std::array<double, 9> tps_wx{}, tps_wy{};
    std::array<double, 3> tps_ax{}, tps_ay{};  // 1, x, y coefficients

    // leading affine for affine_tps, row-major 2x3 (dst -> intermediate)
    std::array<double, 6> aff{1, 0, 0, 0, 1, 0};
    std::array<double, 6> aff_params{};  // sx, sy, tx, ty, theta, shear

    bool identity = false;  // analytic identity, rasterizes to map(p) = p

    // normalized dst -> normalized src
    std::pair<double, double> apply(double x, double y) const {
        if (flip) x = -x;
        if (identity) return {x, y};
        switch (kind) {
            case WarpKind::homography: {
                double d = h[6] * x + h[7] * y + h[8];
                return {(h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d};
            }
            case WarpKind::tps:
                return apply_tps(x, y);
            case WarpKind::affine_tps: {
                double ax = aff[0] * x + aff[1] * y + aff[2];
                double ay = aff[3] * x + aff[4] * y + aff[5];
                return apply_tps(ax, ay);
            }
        }
        return {x, y};
    }

    std::pair<double, double> apply_tps(double x, double y) const {
        auto cps = tps_control_points();
        double ox = tps_ax[0] + tps_ax[1] * x + tps_ax[2] * y;
        double oy = tps_ay[0] + tps_ay[1] * x + tps_ay[2] * y;
        for (int k = 0; k < 9; ++k) {
            double dx = x - cps[k].first, dy = y - cps[k].second;
            double u = detail::tps_kernel(dx * dx + dy * dy);
            ox += tps_wx[k] * u;
            oy += tps_wy[k] * u;
        }
        return {ox, oy};
    }
};

namespace detail {

// Homography from the 4 canonical corners to displaced targets, h33 = 1.
// Returns false when the DLT system is degenerate.
inline bool solve_dlt(const std::array<double, 8>& disp, std::array<double, 9>& h_out) {
    auto corners = homography_corners();
    std::vector<double> A(64, 0.0), b(8, 0.0);
    for (int k = 0; k < 4; ++k) {
        double x = corners[k].first, y = corners[k].second;
        double u = x + disp[2 * k], v = y + disp[2 * k + 1];
        double* r1 = &A[(2 * k) * 8];
        double* r2 = &A[(2 * k + 1) * 8];
        r1[0] = x; r1[1] = y; r1[2] = 1; r1[6] = -u * x; r1[7] = -u * y;
        r2[3] = x; r2[4] = y; r2[5] = 1; r2[6] = -v * x; r2[7] = -v * y;
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    if (!solve_linear(A, b, 8, 1)) return false;
    for (int i = 0; i < 8; ++i) h_out[i] = b[i];
    h_out[8] = 1.0;
    return true;
}

// Thin-plate spline through the 9 control points with given displacements.
inline void solve_tps(const std::array<double, 18>& disp, WarpTransform& t) {
    auto cps = tps_control_points();
    const int n = 9, m = n + 3;
    std::vector<double> L(m * m, 0.0), rhs(m * 2, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double dx = cps[i].first - cps[j].first, dy = cps[i].second - cps[j].second;
            L[i * m + j] = tps_kernel(dx * dx + dy * dy);
        }
        L[i * m + n] = 1.0;
        L[i * m + n + 1] = cps[i].first;
        L[i * m + n + 2] = cps[i].second;
        L[n * m + i] = 1.0;
        L[(n + 1) * m + i] = cps[i].first;
        L[(n + 2) * m + i] = cps[i].second;
        rhs[i * 2] = cps[i].first + disp[2 * i];
        rhs[i * 2 + 1] = cps[i].second + disp[2 * i + 1];
    }
    // the TPS system is nonsingular for distinct control points; the grid is
    // fixed, so a failure here is a programming error
    if (!solve_linear(L, rhs, m, 2, 1e-12))
        throw std::logic_error("tps system unexpectedly singular");
    for (int i = 0; i < n; ++i) {
        t.tps_wx[i] = rhs[i * 2];
        t.tps_wy[i] = rhs[i * 2 + 1];
    }
    for (int k = 0; k < 3; ++k) {
        t.tps_ax[k] = rhs[(n + k) * 2];
        t.tps_ay[k] = rhs[(n + k) * 2 + 1];
    }
}

inline bool all_zero(const double* p, int n) {
    for (int i = 0; i < n; ++i)
        if (p[i] != 0.0) return false;
    return true;
}

}  // namespace detail

// Draws the transform type (1/3 each), its parameters, and the flip bit.
// Degenerate homographies are re-drawn up to 16 times; rejected draws advance
// the generator, so the outcome stays a pure function of the seed.
inline WarpTransform sample_transform(Rng& rng, const WarpConfig& cfg) {
    cfg.validate();
    WarpTransform t;
    switch (rng.index(3)) {
        case 0: t.kind = WarpKind::homography; break;
        case 1: t.kind = WarpKind::tps; break;
        default: t.kind = WarpKind::affine_tps; break;
    }
    if (t.kind == WarpKind::homography) {
        int tries = 0;
        for (;;) {
            for (auto& d : t.corner_disp) d = rng.uniform(-cfg.sigma_h, cfg.sigma_h);
            if (detail::solve_dlt(t.corner_disp, t.h)) break;
            if (++tries >= 16) throw std::runtime_error("degenerate homography after 16 draws");
        }
        t.identity = detail::all_zero(t.corner_disp.data(), 8);
    } else {
        if (t.kind == WarpKind::affine_tps) {
            double sx = rng.uniform(1.0 - cfg.affine_scale_range, 1.0 + cfg.affine_scale_range);
            double sy = rng.uniform(1.0 - cfg.affine_scale_range, 1.0 + cfg.affine_scale_range);
            double tx = rng.uniform(-cfg.affine_translation_range, cfg.affine_translation_range);
            double ty = rng.uniform(-cfg.affine_translation_range, cfg.affine_translation_range);
            double theta = rng.uniform(-cfg.affine_angle_range, cfg.affine_angle_range);
            double shear = rng.uniform(-cfg.affine_angle_range, cfg.affine_angle_range);
            t.aff_params = {sx, sy, tx, ty, theta, shear};
            // T * R(theta) * Sh(shear) * S(sx, sy)
            double c = std::cos(theta), s = std::sin(theta), sh = std::tan(shear);
            // R * Sh = [[c, c*sh - s], [s, s*sh + c]]
            t.aff[0] = c * sx;
            t.aff[1] = (c * sh - s) * sy;
            t.aff[2] = tx;
            t.aff[3] = s * sx;
            t.aff[4] = (s * sh + c) * sy;
            t.aff[5] = ty;
        }
        for (auto& d : t.tps_disp) d = rng.uniform(-cfg.sigma_tps, cfg.sigma_tps);
        detail::solve_tps(t.tps_disp, t);
        bool tps_id = detail::all_zero(t.tps_disp.data(), 18);
        bool aff_id = t.kind == WarpKind::tps ||
                      (t.aff[0] == 1.0 && t.aff[1] == 0.0 && t.aff[2] == 0.0 &&
                       t.aff[3] == 0.0 && t.aff[4] == 1.0 && t.aff[5] == 0.0);
        t.identity = tps_id && aff_id;
    }
    t.flip = rng.bernoulli(cfg.p_flip);
    if (t.flip) t.identity = false;
    return t;
}

inline DenseWarp rasterize_transform(const WarpTransform& t, int w, int h) {
    DenseWarp out(w, h);
    if (t.identity) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                std::size_t i = out.idx(x, y);
                out.mx[i] = x;
                out.my[i] = y;
            }
        out.refresh_valid();
        return out;
    }
    double sx = (w - 1) / 2.0, sy = (h - 1) / 2.0;
    for (int y = 0; y < h; ++y) {
        double ny = y / sy - 1.0;
        for (int x = 0; x < w; ++x) {
            double nx = x / sx - 1.0;
            auto [u, v] = t.apply(nx, ny);
            std::size_t i = out.idx(x, y);
            if (std::isfinite(u) && std::isfinite(v)) {
                out.mx[i] = (u + 1.0) * sx;
                out.my[i] = (v + 1.0) * sy;
            } else {
                out.mx[i] = -1.0;  // finite sentinel, never valid
                out.my[i] = -1.0;
            }
        }
    }
    out.refresh_valid();
    return out;
}

// Fraction of valid pixels inside the central crop_size/resize_size window.
inline double central_valid_fraction(const DenseWarp& wp, const WarpConfig& cfg) {
    double frac = static_cast<double>(cfg.crop_size) / cfg.resize_size;
    int cw = std::max(1, static_cast<int>(std::lround(wp.width * frac)));
    int ch = std::max(1, static_cast<int>(std::lround(wp.height * frac)));
    int ox = (wp.width - cw) / 2, oy = (wp.height - ch) / 2;
    std::size_t n = 0, ok = 0;
    for (int y = oy; y < oy + ch; ++y)
        for (int x = ox; x < ox + cw; ++x) {
            ++n;
            ok += wp.valid[wp.idx(x, y)];
        }
    return n ? static_cast<double>(ok) / n : 0.0;
}

// Samples transforms until the rasterized warp keeps at least a quarter of
// the central window valid (cap 16), then returns the dense map.
inline DenseWarp sample_warp(Rng& rng, const WarpConfig& cfg, int w, int h) {
    if (w < 8 || h < 8) throw std::invalid_argument("sample_warp: dims must be >= 8");
    for (int tries = 0; tries < 16; ++tries) {
        WarpTransform t = sample_transform(rng, cfg);
        DenseWarp wp = rasterize_transform(t, w, h);
        if (central_valid_fraction(wp, cfg) >= 0.25) return wp;
    }
    throw std::runtime_error("no usable warp after 16 draws");
}

// Destination pixels whose mapped source is out of bounds come out black.
inline Image warp_image(const Image& img, const DenseWarp& wp) {
    if (img.shape[1] != wp.height || img.shape[2] != wp.width)
        throw std::invalid_argument("warp_image: image and warp dims differ");
    Image out(img.shape, 0.0f);
    int c = img.shape[0];
    for (int y = 0; y < wp.height; ++y)
        for (int x = 0; x < wp.width; ++x) {
            std::size_t i = wp.idx(x, y);
            if (!wp.valid[i]) continue;
            for (int ch = 0; ch < c; ++ch)
                out.at(ch, y, x) = static_cast<float>(bilinear_at(img, ch, wp.mx[i], wp.my[i]));
        }
    return out;
}

// map(p) = in.map(w-1-x, y): the dense-level equivalent of composing a
// horizontal flip outermost.
inline DenseWarp flip_dense(const DenseWarp& in) {
    DenseWarp out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            std::size_t src = in.idx(in.width - 1 - x, y), dst = out.idx(x, y);
            out.mx[dst] = in.mx[src];
            out.my[dst] = in.my[src];
            out.valid[dst] = in.valid[src];
        }
    return out;
}

inline Image crop_center(const Image& img, int s) {
    int h = img.shape[1], w = img.shape[2];
    if (s > h || s > w) throw std::invalid_argument("crop_center: crop larger than image");
    int ox = (w - s) / 2, oy = (h - s) / 2;
    Image out({img.shape[0], s, s});
    for (int c = 0; c < img.shape[0]; ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) out.at(c, y, x) = img.at(c, oy + y, ox + x);
    return out;
}

// Re-expresses a warp in centrally-cropped coordinates (offset subtracted on
// both sides) and recomputes validity against the cropped bounds.
inline DenseWarp crop_warp(const DenseWarp& wp, int s) {
    if (s > wp.width || s > wp.height) throw std::invalid_argument("crop_warp: crop larger than warp");
    int ox = (wp.width - s) / 2, oy = (wp.height - s) / 2;
    DenseWarp out(s, s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            std::size_t src = wp.idx(ox + x, oy + y), dst = out.idx(x, y);
            out.mx[dst] = wp.mx[src] - ox;
            out.my[dst] = wp.my[src] - oy;
        }
    out.refresh_valid();
    return out;
}

struct Triplet {
    Image image_i, image_i_prime, image_j;
    DenseWarp warp;  // cropped coordinates: image_i_prime pixel -> image_i pixel
};

// I' = warp(I), then central crop of all three and of the warp itself.
// Jitter (when a generator is supplied) runs after the geometric
// construction, in the order I, I', J.
inline Triplet build_triplet(const Image& img_i, const Image& img_j, const DenseWarp& wp, int s,
                             Rng* jitter_rng = nullptr) {
    if (img_i.shape != img_j.shape) throw std::invalid_argument("build_triplet: image dims differ");
    if (img_i.shape[1] != wp.height || img_i.shape[2] != wp.width)
        throw std::invalid_argument("build_triplet: warp dims differ from images");
    if (s > wp.width || s > wp.height)
        throw std::invalid_argument("build_triplet: crop larger than source");
    Triplet t;
    Image warped = warp_image(img_i, wp);
    t.image_i = crop_center(img_i, s);
    t.image_i_prime = crop_center(warped, s);
    t.image_j = crop_center(img_j, s);
    t.warp = crop_warp(wp, s);
    if (jitter_rng) {
        apply_jitter(t.image_i, *jitter_rng);
        apply_jitter(t.image_i_prime, *jitter_rng);
        apply_jitter(t.image_j, *jitter_rng);
    }
    return t;
}

// Coarse version of a warp: the map field is bilinearly sampled at grid cell
// centers and target coordinates are rescaled into grid units. A cell is
// valid when every contributing map pixel is valid and the scaled target
// lands inside the grid.
inline DenseWarp downscale_warp(const DenseWarp& wp, int grid_w, int grid_h) {
    if (grid_w <= 0 || grid_h <= 0) throw std::invalid_argument("downscale_warp: zero grid dims");
    DenseWarp out(grid_w, grid_h);
    double rx = static_cast<double>(wp.width) / grid_w;
    double ry = static_cast<double>(wp.height) / grid_h;
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            double ix = (gx + 0.5) * rx - 0.5;
            double iy = (gy + 0.5) * ry - 0.5;
            int x0 = static_cast<int>(std::floor(ix)), y0 = static_cast<int>(std::floor(iy));
            double fx = ix - x0, fy = iy - y0;
            double sx = 0.0, sy = 0.0;
            bool ok = true;
            for (int dy = 0; dy < 2 && ok; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                    if (wgt == 0.0) continue;
                    int xi = x0 + dx, yi = y0 + dy;
                    if (xi < 0 || xi >= wp.width || yi < 0 || yi >= wp.height ||
                        !wp.valid[wp.idx(xi, yi)]) {
                        ok = false;
                        break;
                    }
                    sx += wgt * wp.mx[wp.idx(xi, yi)];
                    sy += wgt * wp.my[wp.idx(xi, yi)];
                }
            std::size_t i = out.idx(gx, gy);
            if (ok) {
                out.mx[i] = (sx + 0.5) / rx - 0.5;
                out.my[i] = (sy + 0.5) / ry - 0.5;
            } else {
                out.mx[i] = -1.0;
                out.my[i] = -1.0;
            }
        }
    out.refresh_valid();  // the (-1,-1) sentinel is out of bounds, hence invalid
    return out;
}

// warp serialization: channel 0 = mx, 1 = my, 2 = valid flag
inline Tensor<float> warp_to_tensor(const DenseWarp& wp) {
    Tensor<float> t({3, wp.height, wp.width});
    for (int y = 0; y < wp.height; ++y)
        for (int x = 0; x < wp.width; ++x) {
            std::size_t i = wp.idx(x, y);
            t.at(0, y, x) = static_cast<float>(wp.mx[i]);
            t.at(1, y, x) = static_cast<float>(wp.my[i]);
            t.at(2, y, x) = wp.valid[i] ? 1.0f : 0.0f;
        }
    return t;
}

inline DenseWarp warp_from_tensor(const Tensor<float>& t) {
    if (t.rank() != 3 || t.shape[0] != 3) throw std::invalid_argument("warp tensor needs 3 channels");
    DenseWarp wp(t.shape[2], t.shape[1]);
    for (int y = 0; y < wp.height; ++y)
        for (int x = 0; x < wp.width; ++x) {
            std::size_t i = wp.idx(x, y);
            wp.mx[i] = t.at(0, y, x);
            wp.my[i] = t.at(1, y, x);
            wp.valid[i] = t.at(2, y, x) > 0.5f ? 1 : 0;
        }
    return wp;
}

}  // namespace pwc
