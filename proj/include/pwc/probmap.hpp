#pragma once

// Probabilistic mappings: column-stochastic matrices giving, per source cell
// j, a distribution over target cells i, optionally extended with an
// unmatched state. Two representations live here: a plain value type used by
// ground truth, oracles and serialization, and thin Var wrappers for the
// differentiable pipeline (cost volume -> softmax -> composition).

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "pwc/graph.hpp"
#include "pwc/image.hpp"
#include "pwc/tensor.hpp"
#include "pwc/warp.hpp"

namespace pwc {

// Cells of an (h, w) grid are vectorized y-major: index = y * w + x.
struct Grid {
    int h = 0, w = 0;
    int cells() const { return h * w; }
    bool operator==(const Grid&) const = default;
};

template <typename T>
struct ProbMapping {
    Tensor<T> probs;  // rows x cols
    Grid tgt, src;
    bool has_unmatched_state = false;   // extra final row
    bool has_unmatched_column = false;  // fixed final column e_null
    // per spatial source column: ground truth usable (empty = all eligible)
    std::vector<std::uint8_t> eligible;

    int rows() const { return tgt.cells() + (has_unmatched_state ? 1 : 0); }
    int cols() const { return src.cells() + (has_unmatched_column ? 1 : 0); }
    int spatial_rows() const { return tgt.cells(); }
    int spatial_cols() const { return src.cells(); }

    bool column_eligible(int j) const {
        return eligible.empty() ? true : eligible[j] != 0;
    }

    void check() const {
        if (probs.shape != std::vector<int>{rows(), cols()})
            throw std::logic_error("prob mapping shape is inconsistent with its grids");
        for (int j = 0; j < cols(); ++j) {
            T s{0};
            for (int i = 0; i < rows(); ++i) s += probs.at(i, j);
            if (std::abs(static_cast<double>(s) - 1.0) > 1e-6)
                throw std::logic_error("prob mapping column does not sum to 1");
        }
    }
};

template <typename T>
std::vector<T> column_sums(const Tensor<T>& m) {
    std::vector<T> s(m.shape[1], T{0});
    for (int i = 0; i < m.shape[0]; ++i)
        for (int j = 0; j < m.shape[1]; ++j) s[j] += m.at(i, j);
    return s;
}

// ---- ground truth -----------------------------------------------------------

enum class GtMode { onehot, smooth };

namespace detail {

// 3x3 gaussian, sigma 1, normalized
inline const double* gauss3x3() {
    static double k[9];
    static bool init = [] {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                double v = std::exp(-(dx * dx + dy * dy) / 2.0);
                k[(dy + 1) * 3 + (dx + 1)] = v;
                s += v;
            }
        for (double& v : k) v /= s;
        return true;
    }();
    (void)init;
    return k;
}

// 4-neighbour bilinear spread of unit mass at (mx, my), blurred by the 3x3
// gaussian and renormalized over the grid.
inline std::vector<double> smooth_plane(int h, int w, double mx, double my) {
    std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    std::vector<double> plane(n, 0.0);
    int x0 = static_cast<int>(std::floor(mx)), y0 = static_cast<int>(std::floor(my));
    double fx = mx - x0, fy = my - y0;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
            if (wgt == 0.0) continue;
            int xi = x0 + dx, yi = y0 + dy;
            if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
            plane[static_cast<std::size_t>(yi) * w + xi] += wgt;
        }
    const double* k = gauss3x3();
    std::vector<double> blurred(n);
    double total = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int xs = x - dx, ys = y - dy;
                    if (xs < 0 || xs >= w || ys < 0 || ys >= h) continue;
                    acc += plane[static_cast<std::size_t>(ys) * w + xs] * k[(dy + 1) * 3 + (dx + 1)];
                }
            blurred[static_cast<std::size_t>(y) * w + x] = acc;
            total += acc;
        }
    if (total <= 0.0) throw std::invalid_argument("smooth target has no in-grid mass");
    for (double& v : blurred) v /= total;
    return blurred;
}

}  // namespace detail

// Builds the constant target mapping from a grid-resolution warp. Valid
// source cells point at their warped location (mode 1 mass at the nearest
// cell, or a blurred 4-neighbour spread); invalid cells either point at the
// unmatched state or, without one, get a uniform placeholder column flagged
// ineligible so downstream losses skip it.
template <typename T = double>
ProbMapping<T> gt_prob_mapping(const DenseWarp& warp, GtMode mode, bool with_unmatched_state) {
    ProbMapping<T> out;
    out.tgt = {warp.height, warp.width};
    out.src = {warp.height, warp.width};
    out.has_unmatched_state = with_unmatched_state;
    out.has_unmatched_column = with_unmatched_state;
    int n = out.src.cells(), rows = out.rows();
    out.probs = Tensor<T>({rows, out.cols()}, T{0});
    out.eligible.assign(n, 1);

    int h = warp.height, w = warp.width;
    for (int j = 0; j < n; ++j) {
        int sx = j % w, sy = j / w;
        if (!warp.valid[warp.idx(sx, sy)]) {
            out.eligible[j] = 0;
            if (with_unmatched_state) {
                out.probs.at(rows - 1, j) = T{1};
            } else {
                for (int i = 0; i < n; ++i) out.probs.at(i, j) = T{1} / static_cast<T>(n);
            }
            continue;
        }
        double mx = warp.mx[warp.idx(sx, sy)], my = warp.my[warp.idx(sx, sy)];
        if (mode == GtMode::onehot) {
            int ix = static_cast<int>(std::lround(mx)), iy = static_cast<int>(std::lround(my));
            out.probs.at(iy * w + ix, j) = T{1};
            continue;
        }
        std::vector<double> blurred = detail::smooth_plane(h, w, mx, my);
        for (int i = 0; i < n; ++i) out.probs.at(i, j) = static_cast<T>(blurred[i]);
    }
    if (with_unmatched_state) out.probs.at(rows - 1, n) = T{1};  // the fixed e_null column
    return out;
}

// target cell index per eligible source column (argmax of the spatial rows),
// -1 for ineligible columns
template <typename T>
std::vector<int> gt_target_indices(const ProbMapping<T>& gt) {
    std::vector<int> idx(gt.spatial_cols(), -1);
    for (int j = 0; j < gt.spatial_cols(); ++j) {
        if (!gt.column_eligible(j)) continue;
        int best = 0;
        for (int i = 1; i < gt.spatial_rows(); ++i)
            if (gt.probs.at(i, j) > gt.probs.at(best, j)) best = i;
        idx[j] = best;
    }
    return idx;
}

// ---- value-side composition (oracle path) -----------------------------------

template <typename T>
ProbMapping<T> compose_value(const ProbMapping<T>& a, const ProbMapping<T>& b) {
    if (!(a.src == b.tgt)) throw std::invalid_argument("compose: grid mismatch");
    if (a.has_unmatched_state != b.has_unmatched_state)
        throw std::invalid_argument("compose: unmatched-state flags differ");
    if (a.has_unmatched_state && !a.has_unmatched_column)
        throw std::invalid_argument("compose: left mapping lacks the fixed unmatched column");
    if (a.probs.shape[1] != b.probs.shape[0])
        throw std::invalid_argument("compose: inner dimensions differ");
    ProbMapping<T> out;
    out.tgt = a.tgt;
    out.src = b.src;
    out.has_unmatched_state = a.has_unmatched_state;
    out.has_unmatched_column = b.has_unmatched_column;
    out.probs = Graph<T>::matmul_raw(a.probs, b.probs);
    return out;
}

// ---- match extraction --------------------------------------------------------

struct Match {
    double x = 0.0, y = 0.0;
    double confidence = 0.0;
    bool unmatched = false;
};

struct MatchSet {
    Grid grid;  // source grid: one match per spatial source cell
    std::vector<Match> matches;
};

// Mode of each source column; ties resolve to the lowest vectorized index,
// and the unmatched row (the highest index) loses all ties.
template <typename T>
MatchSet argmax_match(const ProbMapping<T>& p) {
    MatchSet out;
    out.grid = p.src;
    out.matches.resize(p.spatial_cols());
    int w = p.tgt.w;
    for (int j = 0; j < p.spatial_cols(); ++j) {
        int best = 0;
        for (int i = 1; i < p.rows(); ++i)
            if (p.probs.at(i, j) > p.probs.at(best, j)) best = i;
        Match& m = out.matches[j];
        m.confidence = static_cast<double>(p.probs.at(best, j));
        if (p.has_unmatched_state && best == p.rows() - 1) {
            m.unmatched = true;
        } else {
            m.x = best % w;
            m.y = best / w;
        }
    }
    return out;
}

// Expected target location over the spatial cells, with any unmatched mass
// excluded and the remainder renormalized. Confidence is 1 - P(null) when the
// state exists, else the mode probability.
template <typename T>
MatchSet soft_argmax_match(const ProbMapping<T>& p) {
    MatchSet out;
    out.grid = p.src;
    out.matches.resize(p.spatial_cols());
    int w = p.tgt.w;
    for (int j = 0; j < p.spatial_cols(); ++j) {
        Match& m = out.matches[j];
        double s = 0.0, ex = 0.0, ey = 0.0, mode = 0.0;
        for (int i = 0; i < p.spatial_rows(); ++i) {
            double v = static_cast<double>(p.probs.at(i, j));
            s += v;
            ex += v * (i % w);
            ey += v * (i / w);
            mode = std::max(mode, v);
        }
        if (p.has_unmatched_state) {
            m.confidence = 1.0 - static_cast<double>(p.probs.at(p.rows() - 1, j));
            if (s <= 0.0) {
                m.unmatched = true;
                continue;
            }
        } else {
            m.confidence = mode;
        }
        m.x = ex / s;
        m.y = ey / s;
    }
    return out;
}

// ---- differentiable pipeline -------------------------------------------------

template <typename T>
struct CostVolumeVar {
    Var<T> scores;  // (tgt cells [+1]) x (src cells)
    Grid tgt, src;
    bool has_bin = false;
};

template <typename T>
struct MappingVar {
    Var<T> probs;
    Grid tgt, src;
    bool has_unmatched_state = false;
    bool has_unmatched_column = false;
};

// scores(i, j) = <feat_t(:, i), feat_s(:, j)>; bin row filled with z when given.
template <typename T>
CostVolumeVar<T> cost_volume(Graph<T>& g, Var<T> feat_t, Var<T> feat_s,
                             std::optional<Var<T>> bin_z = std::nullopt) {
    const auto& ft = g.value(feat_t);
    const auto& fs = g.value(feat_s);
    if (ft.rank() != 3 || fs.rank() != 3) throw std::invalid_argument("cost_volume: rank must be 3");
    if (ft.shape[0] != fs.shape[0]) throw std::invalid_argument("cost_volume: channel mismatch");
    int d = ft.shape[0];
    CostVolumeVar<T> cv;
    cv.tgt = {ft.shape[1], ft.shape[2]};
    cv.src = {fs.shape[1], fs.shape[2]};
    Var<T> t2 = g.reshape(feat_t, {d, cv.tgt.cells()});
    Var<T> s2 = g.reshape(feat_s, {d, cv.src.cells()});
    cv.scores = g.matmul(g.transpose(t2), s2);
    if (bin_z) {
        cv.scores = g.append_fill_row(cv.scores, *bin_z);
        cv.has_bin = true;
    }
    return cv;
}

template <typename T>
CostVolumeVar<T> cost_volume(Graph<T>& g, Var<T> feat_t, Var<T> feat_s, Var<T> bin_z) {
    return cost_volume(g, feat_t, feat_s, std::optional<Var<T>>(bin_z));
}

// Column softmax at the given temperature; with a bin, the fixed e_null
// column is appended so the mapping closes under composition.
template <typename T>
MappingVar<T> to_prob_mapping(Graph<T>& g, const CostVolumeVar<T>& cv, T temperature) {
    MappingVar<T> m;
    m.tgt = cv.tgt;
    m.src = cv.src;
    m.has_unmatched_state = cv.has_bin;
    m.probs = g.softmax_columns(cv.scores, temperature);
    if (cv.has_bin) {
        std::vector<T> e_null(cv.tgt.cells() + 1, T{0});
        e_null.back() = T{1};
        m.probs = g.append_const_col(m.probs, e_null);
        m.has_unmatched_column = true;
    }
    return m;
}

template <typename T>
MappingVar<T> compose(Graph<T>& g, const MappingVar<T>& a, const MappingVar<T>& b) {
    if (!(a.src == b.tgt)) throw std::invalid_argument("compose: grid mismatch");
    if (a.has_unmatched_state != b.has_unmatched_state)
        throw std::invalid_argument("compose: unmatched-state flags differ");
    if (a.has_unmatched_state && !a.has_unmatched_column)
        throw std::invalid_argument("compose: left mapping lacks the fixed unmatched column");
    MappingVar<T> out;
    out.tgt = a.tgt;
    out.src = b.src;
    out.has_unmatched_state = a.has_unmatched_state;
    out.has_unmatched_column = b.has_unmatched_column;
    out.probs = g.matmul(a.probs, b.probs);
    return out;
}

// constant leaf wrapper for ground-truth mappings
template <typename T>
MappingVar<T> constant_mapping(Graph<T>& g, const ProbMapping<T>& p) {
    MappingVar<T> m;
    m.tgt = p.tgt;
    m.src = p.src;
    m.has_unmatched_state = p.has_unmatched_state;
    m.has_unmatched_column = p.has_unmatched_column;
    m.probs = g.constant(p.probs);
    return m;
}

// value snapshot of a pipeline mapping
template <typename T>
ProbMapping<T> mapping_value(const Graph<T>& g, const MappingVar<T>& m) {
    ProbMapping<T> p;
    p.tgt = m.tgt;
    p.src = m.src;
    p.has_unmatched_state = m.has_unmatched_state;
    p.has_unmatched_column = m.has_unmatched_column;
    p.probs = g.value(m.probs);
    return p;
}

// ---- serialization ------------------------------------------------------------

// Stored as a [1, rows, cols] PWIM tensor; the grid-metadata extension carries
// the two grids, and the unmatched flags are recovered from the row/column
// surplus over the grid cell counts.
template <typename T>
void save_prob_mapping(const std::string& path, const ProbMapping<T>& p) {
    Tensor<float> t({1, p.rows(), p.cols()});
    for (std::size_t i = 0; i < p.probs.data.size(); ++i)
        t.data[i] = static_cast<float>(p.probs.data[i]);
    GridMeta meta{static_cast<std::uint16_t>(p.tgt.h), static_cast<std::uint16_t>(p.tgt.w),
                  static_cast<std::uint16_t>(p.src.h), static_cast<std::uint16_t>(p.src.w)};
    write_pwim(path, t, meta);
}

template <typename T = double>
ProbMapping<T> load_prob_mapping(const std::string& path) {
    GridMeta meta;
    Tensor<float> t = read_pwim(path, &meta);
    if (t.shape[0] != 1) throw std::runtime_error(path + ": not a prob mapping tensor");
    ProbMapping<T> p;
    p.tgt = {meta.tgt_h, meta.tgt_w};
    p.src = {meta.src_h, meta.src_w};
    int rows = t.shape[1], cols = t.shape[2];
    if (rows == p.tgt.cells() + 1 && cols == p.src.cells() + 1) {
        p.has_unmatched_state = p.has_unmatched_column = true;
    } else if (rows != p.tgt.cells() || cols != p.src.cells()) {
        throw std::runtime_error(path + ": dims inconsistent with grid metadata");
    }
    p.probs = Tensor<T>({rows, cols});
    for (std::size_t i = 0; i < t.data.size(); ++i) p.probs.data[i] = static_cast<T>(t.data[i]);
    return p;
}

}  // namespace pwc
