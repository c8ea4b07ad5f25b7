#pragma once

// Match-quality metrics and report emission: keypoint accuracy at distance
// thresholds, dense transfer accuracy against synthetic ground truth, and
// confidence sparsification curves with their area-under-error summary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pwc/common.hpp"
#include "pwc/model.hpp"
#include "pwc/probmap.hpp"
#include "pwc/warp.hpp"

namespace pwc {

enum class PckReference { image, bbox };
enum class Extractor { argmax, soft_argmax };

inline const char* reference_name(PckReference r) {
    return r == PckReference::image ? "image" : "bbox";
}

inline PckReference reference_from_string(const std::string& s) {
    if (s == "image") return PckReference::image;
    if (s == "bbox") return PckReference::bbox;
    throw std::invalid_argument("unknown reference: " + s);
}

inline const char* extractor_name(Extractor e) {
    return e == Extractor::argmax ? "argmax" : "soft_argmax";
}

inline Extractor extractor_from_string(const std::string& s) {
    if (s == "argmax") return Extractor::argmax;
    if (s == "soft_argmax") return Extractor::soft_argmax;
    throw std::invalid_argument("unknown extractor: " + s);
}

struct PckConfig {
    std::vector<double> alphas{0.05, 0.10, 0.15};
    PckReference reference = PckReference::image;

    void validate() const {
        if (alphas.empty()) throw std::invalid_argument("eval: alphas must not be empty");
        for (double a : alphas)
            if (!(a > 0.0 && a <= 1.0))
                throw std::invalid_argument("eval: every alpha must be in (0, 1]");
    }
};

// one scored correspondence with its ground truth, in reference pixels
struct EvalPoint {
    double px = 0.0, py = 0.0;  // predicted target
    double gx = 0.0, gy = 0.0;  // true target
    double confidence = 0.0;
    bool unmatched = false;
};

inline double point_error(const EvalPoint& p) {
    return p.unmatched ? std::numeric_limits<double>::infinity()
                       : std::hypot(p.px - p.gx, p.py - p.gy);
}

inline double pck_threshold(double alpha, int ref_h, int ref_w) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("pck: alpha must be in (0, 1]");
    if (ref_h < 1 || ref_w < 1) throw std::invalid_argument("pck: reference dims must be positive");
    return alpha * std::max(ref_h, ref_w);
}

// fraction of points within alpha * max(ref dims); unmatched counts as wrong
inline double pck(const std::vector<EvalPoint>& pts, double alpha, int ref_h, int ref_w) {
    if (pts.empty()) throw std::invalid_argument("pck: empty match set");
    double thr = pck_threshold(alpha, ref_h, ref_w);
    int correct = 0;
    for (const EvalPoint& p : pts)
        if (point_error(p) <= thr) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pts.size());
}

// tight bounding box of the valid cells, scaled to reference pixels
inline std::pair<int, int> bbox_dims(const DenseWarp& gt_map, int ref_h, int ref_w) {
    int minx = gt_map.width, maxx = -1, miny = gt_map.height, maxy = -1;
    for (int y = 0; y < gt_map.height; ++y)
        for (int x = 0; x < gt_map.width; ++x)
            if (gt_map.valid[gt_map.idx(x, y)]) {
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
            }
    if (maxx < 0) throw std::invalid_argument("bbox_dims: no valid cells");
    double sx = static_cast<double>(ref_w) / gt_map.width;
    double sy = static_cast<double>(ref_h) / gt_map.height;
    int bw = std::max(1, static_cast<int>(std::lround((maxx - minx + 1) * sx)));
    int bh = std::max(1, static_cast<int>(std::lround((maxy - miny + 1) * sy)));
    return {bh, bw};
}

// One point per valid foreground cell of the grid-resolution gt map, with
// both prediction and truth scaled from grid cells to reference pixels.
template <typename T>
std::vector<EvalPoint> dense_transfer_points(const ProbMapping<T>& p, const DenseWarp& gt_map,
                                             int ref_h, int ref_w, Extractor ex) {
    if (gt_map.width != p.src.w || gt_map.height != p.src.h)
        throw std::invalid_argument("dense_transfer: gt grid differs from the mapping source grid");
    MatchSet ms = ex == Extractor::argmax ? argmax_match(p) : soft_argmax_match(p);
    double sx = static_cast<double>(ref_w) / p.tgt.w;
    double sy = static_cast<double>(ref_h) / p.tgt.h;
    std::vector<EvalPoint> out;
    for (int j = 0; j < p.spatial_cols(); ++j) {
        if (!gt_map.valid[static_cast<std::size_t>(j)]) continue;
        const Match& m = ms.matches[static_cast<std::size_t>(j)];
        EvalPoint e;
        e.gx = gt_map.mx[static_cast<std::size_t>(j)] * sx;
        e.gy = gt_map.my[static_cast<std::size_t>(j)] * sy;
        e.px = m.x * sx;
        e.py = m.y * sy;
        e.confidence = m.confidence;
        e.unmatched = m.unmatched;
        out.push_back(e);
    }
    if (out.empty()) throw std::invalid_argument("dense_transfer: gt has no valid cells");
    return out;
}

template <typename T>
double dense_transfer_pck(const ProbMapping<T>& p, const DenseWarp& gt_map, double alpha,
                          int ref_h, int ref_w, Extractor ex) {
    return pck(dense_transfer_points(p, gt_map, ref_h, ref_w, ex), alpha, ref_h, ref_w);
}

// ---- sparsification ------------------------------------------------------------

struct SparsificationResult {
    std::vector<double> fractions_removed;  // 0, 0.02, ..., 0.98
    std::vector<double> pck_curve;          // remaining accuracy, low confidence dropped first
    std::vector<double> oracle_curve;       // remaining accuracy, largest true error dropped first
    std::vector<double> error_curve;        // oracle - actual
    double ause = 0.0;                      // trapezoidal area of error_curve
};

inline constexpr int kSparsificationSteps = 50;
inline constexpr double kSparsificationStep = 0.02;

namespace detail {

// suffix counts of surviving correct points under a removal order
inline std::vector<int> correct_after_removal(const std::vector<int>& order,
                                              const std::vector<double>& err, double thr) {
    std::size_t n = order.size();
    std::vector<int> suffix(n + 1, 0);
    for (std::size_t i = n; i-- > 0;)
        suffix[i] = suffix[i + 1] + (err[static_cast<std::size_t>(order[i])] <= thr ? 1 : 0);
    return suffix;
}

inline double trapezoid(const std::vector<double>& xs, const std::vector<double>& ys) {
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        area += 0.5 * (xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]);
    return area;
}

}  // namespace detail

// Progressively removes points, least confident first, and tracks the
// accuracy of the remainder against the best achievable removal order.
inline SparsificationResult sparsification(const std::vector<EvalPoint>& pts, double alpha,
                                           int ref_h, int ref_w) {
    if (pts.size() < 5) throw std::invalid_argument("sparsification: needs at least 5 points");
    double thr = pck_threshold(alpha, ref_h, ref_w);
    std::size_t n = pts.size();
    std::vector<double> err(n);
    for (std::size_t i = 0; i < n; ++i) err[i] = point_error(pts[i]);

    std::vector<int> by_conf(n), by_err(n);
    std::iota(by_conf.begin(), by_conf.end(), 0);
    by_err = by_conf;
    std::sort(by_conf.begin(), by_conf.end(), [&](int a, int b) {
        double ca = pts[static_cast<std::size_t>(a)].confidence;
        double cb = pts[static_cast<std::size_t>(b)].confidence;
        return ca != cb ? ca < cb : a < b;
    });
    std::sort(by_err.begin(), by_err.end(), [&](int a, int b) {
        double ea = err[static_cast<std::size_t>(a)], eb = err[static_cast<std::size_t>(b)];
        return ea != eb ? ea > eb : a < b;
    });
    std::vector<int> conf_suffix = detail::correct_after_removal(by_conf, err, thr);
    std::vector<int> err_suffix = detail::correct_after_removal(by_err, err, thr);

    SparsificationResult r;
    for (int k = 0; k < kSparsificationSteps; ++k) {
        double f = kSparsificationStep * k;
        std::size_t drop = static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
        std::size_t left = n - drop;
        r.fractions_removed.push_back(f);
        r.pck_curve.push_back(static_cast<double>(conf_suffix[drop]) / static_cast<double>(left));
        r.oracle_curve.push_back(static_cast<double>(err_suffix[drop]) / static_cast<double>(left));
        r.error_curve.push_back(r.oracle_curve.back() - r.pck_curve.back());
    }
    r.ause = detail::trapezoid(r.fractions_removed, r.error_curve);
    return r;
}

// Curves averaged pointwise over pairs; the integral of the averaged curve is
// kept alongside the mean of the per-pair integrals since they differ.
struct AuseAggregate {
    std::vector<double> fractions;
    std::vector<double> mean_error_curve;
    double ause_of_mean_curve = 0.0;
    double mean_of_pair_ause = 0.0;
    int n_pairs = 0;
};

inline AuseAggregate aggregate_sparsification(const std::vector<SparsificationResult>& rs) {
    if (rs.empty()) throw std::invalid_argument("aggregate_sparsification: no results");
    AuseAggregate agg;
    agg.n_pairs = static_cast<int>(rs.size());
    agg.fractions = rs[0].fractions_removed;
    agg.mean_error_curve.assign(agg.fractions.size(), 0.0);
    for (const SparsificationResult& r : rs) {
        if (r.error_curve.size() != agg.fractions.size())
            throw std::invalid_argument("aggregate_sparsification: curve lengths differ");
        for (std::size_t i = 0; i < r.error_curve.size(); ++i)
            agg.mean_error_curve[i] += r.error_curve[i];
        agg.mean_of_pair_ause += r.ause;
    }
    for (double& v : agg.mean_error_curve) v /= agg.n_pairs;
    agg.mean_of_pair_ause /= agg.n_pairs;
    agg.ause_of_mean_curve = detail::trapezoid(agg.fractions, agg.mean_error_curve);
    return agg;
}

// mean unmatched probability over the source cells
template <typename T>
double mean_null_prob(const ProbMapping<T>& p) {
    if (!p.has_unmatched_state)
        throw std::invalid_argument("mean_null_prob: mapping has no unmatched state");
    double s = 0.0;
    for (int j = 0; j < p.spatial_cols(); ++j)
        s += static_cast<double>(p.probs.at(p.rows() - 1, j));
    return s / p.spatial_cols();
}

// ---- checkpoint evaluation -------------------------------------------------------

// forward pass only: the mapping from image b cells to image a cells
inline ProbMapping<float> predict_mapping(const Encoder<float>& enc, const Image& a,
                                          const Image& b, double temperature) {
    Graph<float> g;
    EncoderVars<float> pv = encoder_leaves(g, enc);
    Var<float> f_a = encode(g, pv, a);
    Var<float> f_b = encode(g, pv, b);
    auto cv = pv.bin_z ? cost_volume(g, f_a, f_b, *pv.bin_z) : cost_volume(g, f_a, f_b);
    return mapping_value(g, to_prob_mapping(g, cv, static_cast<float>(temperature)));
}

struct MetricRow {
    std::string checkpoint;
    std::string metric;
    std::string alpha;      // "-" when not applicable
    std::string reference;  // "-" when not applicable
    double value = 0.0;
};

struct EvalOutput {
    std::vector<MetricRow> rows;
    std::vector<double> fractions;
    // one averaged sparsification error curve per alpha, at the configured reference
    std::vector<std::pair<double, std::vector<double>>> mean_error_curves;
};

namespace detail {

struct PooledPck {
    long correct = 0, total = 0;
    double value() const {
        return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    }
    void add(const std::vector<EvalPoint>& pts, double thr) {
        for (const EvalPoint& p : pts)
            if (point_error(p) <= thr) ++correct;
        total += static_cast<long>(pts.size());
    }
};

}  // namespace detail

// Runs a checkpointed encoder over one split. Positive pairs contribute the
// keypoint and dense-transfer accuracies plus sparsification curves; negative
// pairs contribute the mean unmatched probability when the bin exists.
// Accuracies pool points across pairs; thresholds stay per pair so the bbox
// reference keeps its meaning.
inline EvalOutput evaluate_checkpoint(const std::string& label, const PairStore& store,
                                      Split split, const Encoder<float>& enc, double temperature,
                                      int crop_size, const PckConfig& pcfg, Extractor ex) {
    pcfg.validate();
    if (crop_size < 8 || crop_size % 4 != 0)
        throw std::invalid_argument("evaluate_checkpoint: bad crop_size");
    int gs = crop_size / 4;
    const std::vector<int>& pos = store.indices(split, true);
    if (pos.empty()) throw std::invalid_argument("evaluate_checkpoint: split has no positive pairs");

    struct RefKit {
        PckReference ref;
        std::vector<detail::PooledPck> kp, dense;  // one slot per alpha
    };
    std::vector<RefKit> kits;
    for (PckReference ref : {PckReference::image, PckReference::bbox}) {
        RefKit k;
        k.ref = ref;
        k.kp.resize(pcfg.alphas.size());
        k.dense.resize(pcfg.alphas.size());
        kits.push_back(std::move(k));
    }
    std::vector<std::vector<SparsificationResult>> spars(pcfg.alphas.size());

    int used_pairs = 0;
    for (int index : pos) {
        LoadedPair lp = store.load(index);
        Image a = crop_center(lp.image_a, crop_size);
        Image b = crop_center(lp.image_b, crop_size);
        DenseWarp gt_grid = downscale_warp(crop_warp(lp.gt_map_ab, crop_size), gs, gs);
        bool any_valid = false;
        for (std::uint8_t v : gt_grid.valid) any_valid |= v != 0;
        if (!any_valid) continue;  // object fell outside the evaluated crop
        ++used_pairs;

        ProbMapping<float> p = predict_mapping(enc, a, b, temperature);
        std::vector<KeypointPair> kps =
            grid_keypoints(store.record(index).keypoints, img_height(lp.image_a), crop_size);
        MatchSet ms = ex == Extractor::argmax ? argmax_match(p) : soft_argmax_match(p);

        for (RefKit& kit : kits) {
            auto [rh, rw] = kit.ref == PckReference::image
                                ? std::pair<int, int>{crop_size, crop_size}
                                : bbox_dims(gt_grid, crop_size, crop_size);
            double cell = static_cast<double>(crop_size) / gs;
            std::vector<EvalPoint> kp_pts;
            for (const KeypointPair& kp : kps) {
                int cx = static_cast<int>(std::lround(kp.sx));
                int cy = static_cast<int>(std::lround(kp.sy));
                const Match& m = ms.matches[static_cast<std::size_t>(cy * gs + cx)];
                EvalPoint e;
                e.px = m.x * cell;
                e.py = m.y * cell;
                e.gx = kp.tx * cell;
                e.gy = kp.ty * cell;
                e.confidence = m.confidence;
                e.unmatched = m.unmatched;
                kp_pts.push_back(e);
            }
            std::vector<EvalPoint> dense_pts =
                dense_transfer_points(p, gt_grid, crop_size, crop_size, ex);
            for (std::size_t ai = 0; ai < pcfg.alphas.size(); ++ai) {
                double thr = pck_threshold(pcfg.alphas[ai], rh, rw);
                if (!kp_pts.empty()) kit.kp[ai].add(kp_pts, thr);
                kit.dense[ai].add(dense_pts, thr);
                if (kit.ref == pcfg.reference && dense_pts.size() >= 5)
                    spars[ai].push_back(sparsification(dense_pts, pcfg.alphas[ai], rh, rw));
            }
        }
    }
    if (used_pairs == 0)
        throw std::invalid_argument("evaluate_checkpoint: no usable positive pairs in the split");

    EvalOutput out;
    auto push = [&](const std::string& metric, const std::string& alpha,
                    const std::string& reference, double value) {
        out.rows.push_back({label, metric, alpha, reference, value});
    };
    for (std::size_t ai = 0; ai < pcfg.alphas.size(); ++ai) {
        std::string alpha = format_sig6(pcfg.alphas[ai]);
        for (const RefKit& kit : kits) {
            const char* ref = reference_name(kit.ref);
            if (kit.kp[ai].total > 0) push("pck", alpha, ref, kit.kp[ai].value());
            push("dense_transfer_pck", alpha, ref, kit.dense[ai].value());
        }
        if (!spars[ai].empty()) {
            AuseAggregate agg = aggregate_sparsification(spars[ai]);
            const char* ref = reference_name(pcfg.reference);
            push("ause", alpha, ref, agg.ause_of_mean_curve);
            push("ause_pair_mean", alpha, ref, agg.mean_of_pair_ause);
            out.fractions = agg.fractions;
            out.mean_error_curves.emplace_back(pcfg.alphas[ai], std::move(agg.mean_error_curve));
        }
    }

    const std::vector<int>& neg = store.indices(split, false);
    if (enc.use_bin && !neg.empty()) {
        double s = 0.0;
        for (int index : neg) {
            LoadedPair lp = store.load(index);
            ProbMapping<float> p = predict_mapping(enc, crop_center(lp.image_a, crop_size),
                                                   crop_center(lp.image_b, crop_size), temperature);
            s += mean_null_prob(p);
        }
        push("mean_null_prob_neg", "-", "-", s / static_cast<double>(neg.size()));
    }
    return out;
}

// ---- report files ---------------------------------------------------------------

inline constexpr const char* kMetricsCsvHeader = "checkpoint,metric,alpha,reference,value";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << kMetricsCsvHeader << '\n';
    for (const MetricRow& r : rows)
        os << r.checkpoint << ',' << r.metric << ',' << r.alpha << ',' << r.reference << ','
           << format_sig6(r.value) << '\n';
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + path);
}

struct SvgCurve {
    std::string label;
    std::string color;  // svg color name or #rrggbb
    std::vector<double> x, y;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

}  // namespace detail

// Fixed-size plot with linear axes; x spans the data, y starts at zero.
inline void write_curves_svg(const std::string& path, const std::vector<SvgCurve>& curves,
                             const std::string& x_label, const std::string& y_label) {
    double x_lo = 0.0, x_hi = 1.0, y_hi = 0.0;
    bool any = false;
    for (const SvgCurve& c : curves) {
        if (c.x.size() != c.y.size())
            throw std::invalid_argument("write_curves_svg: curve lengths differ");
        for (std::size_t i = 0; i < c.x.size(); ++i) {
            if (!any) {
                x_lo = x_hi = c.x[i];
                any = true;
            } else {
                x_lo = std::min(x_lo, c.x[i]);
                x_hi = std::max(x_hi, c.x[i]);
            }
            y_hi = std::max(y_hi, c.y[i]);
        }
    }
    if (x_hi <= x_lo) x_hi = x_lo + 1.0;
    if (y_hi <= 0.0) y_hi = 1.0;
    y_hi *= 1.05;

    const double w = 640, h = 440, ml = 60, mr = 20, mt = 20, mb = 50;
    auto sx = [&](double x) { return ml + (x - x_lo) / (x_hi - x_lo) * (w - ml - mr); };
    auto sy = [&](double y) { return h - mb - y / y_hi * (h - mt - mb); };

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
       << "\" fill=\"white\"/>\n";
    os << "<line x1=\"" << format_sig6(ml) << "\" y1=\"" << format_sig6(h - mb) << "\" x2=\""
       << format_sig6(w - mr) << "\" y2=\"" << format_sig6(h - mb)
       << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    os << "<line x1=\"" << format_sig6(ml) << "\" y1=\"" << format_sig6(mt) << "\" x2=\""
       << format_sig6(ml) << "\" y2=\"" << format_sig6(h - mb)
       << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        double fx = x_lo + (x_hi - x_lo) * t / 4.0;
        double fy = y_hi * t / 4.0 / 1.05;
        os << "<text x=\"" << format_sig6(sx(fx)) << "\" y=\"" << format_sig6(h - mb + 18)
           << "\" font-size=\"11\" text-anchor=\"middle\">" << format_sig6(fx) << "</text>\n";
        os << "<text x=\"" << format_sig6(ml - 6) << "\" y=\"" << format_sig6(sy(fy) + 4)
           << "\" font-size=\"11\" text-anchor=\"end\">" << format_sig6(fy) << "</text>\n";
    }
    os << "<text x=\"" << format_sig6((ml + w - mr) / 2) << "\" y=\"" << format_sig6(h - 12)
       << "\" font-size=\"13\" text-anchor=\"middle\">" << detail::xml_escape(x_label)
       << "</text>\n";
    os << "<text x=\"16\" y=\"" << format_sig6((mt + h - mb) / 2)
       << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << format_sig6((mt + h - mb) / 2) << ")\">" << detail::xml_escape(y_label) << "</text>\n";
    int li = 0;
    for (const SvgCurve& c : curves) {
        os << "<polyline fill=\"none\" stroke=\"" << c.color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < c.x.size(); ++i) {
            if (i) os << ' ';
            os << format_sig6(sx(c.x[i])) << ',' << format_sig6(sy(c.y[i]));
        }
        os << "\"/>\n";
        double ly = mt + 16 + 16 * li++;
        os << "<line x1=\"" << format_sig6(w - mr - 150) << "\" y1=\"" << format_sig6(ly - 4)
           << "\" x2=\"" << format_sig6(w - mr - 126) << "\" y2=\"" << format_sig6(ly - 4)
           << "\" stroke=\"" << c.color << "\" stroke-width=\"1.5\"/>\n";
        os << "<text x=\"" << format_sig6(w - mr - 120) << "\" y=\"" << format_sig6(ly)
           << "\" font-size=\"12\">" << detail::xml_escape(c.label) << "</text>\n";
    }
    os << "</svg>\n";
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + path);
}

}  // namespace pwc
