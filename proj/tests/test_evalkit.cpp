#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "pwc/evalkit.hpp"
#include "pwc/synthdata.hpp"

using pwc::EvalPoint;
using pwc::Extractor;
using pwc::PckReference;
using pwc::ProbMapping;

namespace {

EvalPoint pt(double px, double py, double gx, double gy, double conf, bool unmatched = false) {
    EvalPoint e;
    e.px = px;
    e.py = py;
    e.gx = gx;
    e.gy = gy;
    e.confidence = conf;
    e.unmatched = unmatched;
    return e;
}

// mapping over square grids with explicit per-column spatial distributions
ProbMapping<float> grid_mapping(int gs, const std::vector<std::vector<float>>& cols) {
    ProbMapping<float> p;
    p.tgt = {gs, gs};
    p.src = {gs, gs};
    p.probs = pwc::Tensor<float>({gs * gs, gs * gs});
    for (int j = 0; j < gs * gs; ++j)
        for (int i = 0; i < gs * gs; ++i)
            p.probs.at(i, j) = cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    p.check();
    return p;
}

ProbMapping<float> identity_mapping(int gs) {
    std::vector<std::vector<float>> cols(static_cast<std::size_t>(gs * gs),
                                         std::vector<float>(static_cast<std::size_t>(gs * gs), 0.f));
    for (int j = 0; j < gs * gs; ++j) cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)] = 1.f;
    return grid_mapping(gs, cols);
}

pwc::DenseWarp identity_gt(int gs) {
    pwc::DenseWarp wp(gs, gs);
    for (int y = 0; y < gs; ++y)
        for (int x = 0; x < gs; ++x) {
            wp.mx[wp.idx(x, y)] = x;
            wp.my[wp.idx(x, y)] = y;
        }
    wp.refresh_valid();
    return wp;
}

// independent reimplementation: sort survivors from scratch at every fraction
pwc::SparsificationResult brute_sparsification(const std::vector<EvalPoint>& pts, double alpha,
                                               int ref_h, int ref_w) {
    double thr = alpha * std::max(ref_h, ref_w);
    std::size_t n = pts.size();
    pwc::SparsificationResult r;
    for (int k = 0; k < 50; ++k) {
        double f = 0.02 * k;
        std::size_t drop = static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
        std::vector<std::size_t> conf_order(n), err_order(n);
        std::iota(conf_order.begin(), conf_order.end(), std::size_t{0});
        err_order = conf_order;
        std::stable_sort(conf_order.begin(), conf_order.end(), [&](std::size_t a, std::size_t b) {
            return pts[a].confidence < pts[b].confidence;
        });
        std::stable_sort(err_order.begin(), err_order.end(), [&](std::size_t a, std::size_t b) {
            return pwc::point_error(pts[a]) > pwc::point_error(pts[b]);
        });
        auto remaining_pck = [&](const std::vector<std::size_t>& order) {
            double c = 0;
            for (std::size_t i = drop; i < n; ++i)
                if (pwc::point_error(pts[order[i]]) <= thr) c += 1.0;
            return c / static_cast<double>(n - drop);
        };
        r.fractions_removed.push_back(f);
        r.pck_curve.push_back(remaining_pck(conf_order));
        r.oracle_curve.push_back(remaining_pck(err_order));
        r.error_curve.push_back(r.oracle_curve.back() - r.pck_curve.back());
    }
    for (int k = 0; k + 1 < 50; ++k)
        r.ause += 0.5 * (r.fractions_removed[static_cast<std::size_t>(k + 1)] -
                         r.fractions_removed[static_cast<std::size_t>(k)]) *
                  (r.error_curve[static_cast<std::size_t>(k)] +
                   r.error_curve[static_cast<std::size_t>(k + 1)]);
    return r;
}

std::vector<EvalPoint> random_points(pwc::Rng& rng, int n) {
    std::vector<EvalPoint> pts;
    for (int i = 0; i < n; ++i) {
        EvalPoint e = pt(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100),
                         rng.uniform(0, 100), rng.uniform());
        if (rng.uniform() < 0.1) e.unmatched = true;
        pts.push_back(e);
    }
    return pts;
}

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// minimal well-formedness scan: tags balance, quotes close, one root
bool xml_well_formed(const std::string& s) {
    std::vector<std::string> stack;
    std::size_t i = 0;
    int roots = 0;
    while (i < s.size()) {
        if (s[i] != '<') {
            ++i;
            continue;
        }
        std::size_t end = i + 1;
        bool in_quote = false;
        while (end < s.size() && (in_quote || s[end] != '>')) {
            if (s[end] == '"') in_quote = !in_quote;
            ++end;
        }
        if (end >= s.size() || in_quote) return false;
        std::string tag = s.substr(i + 1, end - i - 1);
        if (!tag.empty() && tag.front() == '?') {
            // declaration
        } else if (!tag.empty() && tag.front() == '/') {
            if (stack.empty() || stack.back() != tag.substr(1)) return false;
            stack.pop_back();
            if (stack.empty()) ++roots;
        } else if (!tag.empty() && tag.back() == '/') {
            if (stack.empty()) ++roots;
        } else if (!tag.empty()) {
            std::string name = tag.substr(0, tag.find_first_of(" \t\n"));
            stack.push_back(name);
        }
        i = end + 1;
    }
    return stack.empty() && roots == 1;
}

}  // namespace

TEST_CASE("pck counts hits under the scaled threshold", "[evalkit][pck]") {
    std::vector<EvalPoint> two = {pt(3, 0, 0, 0, 1.0), pt(8, 0, 0, 0, 1.0)};
    REQUIRE(pwc::pck(two, 0.05, 100, 100) == 0.5);  // threshold 5 splits errors {3, 8}

    std::vector<EvalPoint> exact = {pt(4, 7, 4, 7, 1.0), pt(0, 0, 0, 0, 0.2)};
    REQUIRE(pwc::pck(exact, 0.05, 100, 100) == 1.0);

    // an unmatched flag makes a zero-distance prediction wrong
    std::vector<EvalPoint> un = {pt(0, 0, 0, 0, 1.0, true), pt(1, 0, 0, 0, 1.0)};
    REQUIRE(pwc::pck(un, 0.10, 100, 100) == 0.5);

    // threshold uses max of the reference dims
    std::vector<EvalPoint> wide = {pt(9, 0, 0, 0, 1.0)};
    REQUIRE(pwc::pck(wide, 0.05, 50, 200) == 1.0);   // 0.05 * 200 = 10
    REQUIRE(pwc::pck(wide, 0.05, 50, 100) == 0.0);   // 0.05 * 100 = 5

    REQUIRE_THROWS_AS(pwc::pck({}, 0.1, 100, 100), std::invalid_argument);
    REQUIRE_THROWS_AS(pwc::pck(two, 0.0, 100, 100), std::invalid_argument);
    REQUIRE_THROWS_AS(pwc::pck(two, 1.5, 100, 100), std::invalid_argument);
    REQUIRE_THROWS_AS(pwc::pck(two, 0.1, 0, 100), std::invalid_argument);
}

TEST_CASE("pck never decreases as alpha grows", "[evalkit][pck]") {
    pwc::Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<EvalPoint> pts = random_points(rng, 30);
        double prev = 0.0;
        for (double a = 0.02; a <= 1.0; a += 0.02) {
            double v = pwc::pck(pts, a, 100, 100);
            REQUIRE(v >= prev);
            prev = v;
        }
        REQUIRE(prev <= 1.0);
    }
}

TEST_CASE("dense transfer pck scales grid coordinates to the reference", "[evalkit][dense]") {
    auto p = identity_mapping(4);
    auto gt = identity_gt(4);
    REQUIRE(pwc::dense_transfer_pck(p, gt, 0.05, 64, 64, Extractor::argmax) == 1.0);

    // gt displaced by one cell: 16 ref pixels on a 4-cell 64 px grid
    pwc::DenseWarp off(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            off.mx[off.idx(x, y)] = x + 1.0;
            off.my[off.idx(x, y)] = y;
        }
    off.refresh_valid();  // x = 3 column falls off the grid and drops out
    double hit = pwc::dense_transfer_pck(p, off, 0.25, 64, 64, Extractor::argmax);
    double miss = pwc::dense_transfer_pck(p, off, 0.24, 64, 64, Extractor::argmax);
    REQUIRE(hit == 1.0);   // threshold 16 >= 16
    REQUIRE(miss == 0.0);  // threshold 15.36 < 16

    pwc::DenseWarp wrong_grid(3, 3);
    REQUIRE_THROWS_AS(pwc::dense_transfer_pck(p, wrong_grid, 0.1, 64, 64, Extractor::argmax),
                      std::invalid_argument);
    pwc::DenseWarp none(4, 4);
    for (auto& v : none.mx) v = -5.0;
    none.refresh_valid();
    REQUIRE_THROWS_AS(pwc::dense_transfer_pck(p, none, 0.1, 64, 64, Extractor::argmax),
                      std::invalid_argument);
}

TEST_CASE("dense transfer restricted to the foreground differs from all cells",
          "[evalkit][dense]") {
    int gs = 3, n = 9;
    // correct on cells 0 and 1, pointing at cell 8 everywhere else
    std::vector<std::vector<float>> cols(static_cast<std::size_t>(n),
                                         std::vector<float>(static_cast<std::size_t>(n), 0.f));
    cols[0][0] = 1.f;
    cols[1][1] = 1.f;
    for (int j = 2; j < n; ++j) cols[static_cast<std::size_t>(j)][8] = 1.f;
    auto p = grid_mapping(gs, cols);

    pwc::DenseWarp fg = identity_gt(gs);
    for (std::size_t i = 2; i < fg.mx.size(); ++i) fg.mx[i] = -9.0;  // background sentinel
    fg.refresh_valid();
    REQUIRE(pwc::dense_transfer_pck(p, fg, 0.05, 60, 60, Extractor::argmax) == 1.0);

    pwc::DenseWarp all = identity_gt(gs);
    double full = pwc::dense_transfer_pck(p, all, 0.05, 60, 60, Extractor::argmax);
    REQUIRE(full == Catch::Approx(3.0 / 9.0).margin(1e-12));  // cells 0, 1 and 8 itself
}

TEST_CASE("uniform prediction matches the centroid geometry", "[evalkit][dense]") {
    int gs = 4, n = 16;
    std::vector<std::vector<float>> cols(static_cast<std::size_t>(n),
                                         std::vector<float>(static_cast<std::size_t>(n),
                                                            1.0f / static_cast<float>(n)));
    auto p = grid_mapping(gs, cols);
    auto gt = identity_gt(gs);
    double cell = 64.0 / gs;
    for (double alpha : {0.2, 0.35, 0.5}) {
        double thr = alpha * 64.0;
        int inside = 0;
        for (int y = 0; y < gs; ++y)
            for (int x = 0; x < gs; ++x)
                if (std::hypot((x - 1.5) * cell, (y - 1.5) * cell) <= thr) ++inside;
        double expect = static_cast<double>(inside) / n;
        REQUIRE(pwc::dense_transfer_pck(p, gt, alpha, 64, 64, Extractor::soft_argmax) ==
                Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("bbox dims wrap the valid cells", "[evalkit][bbox]") {
    pwc::DenseWarp wp(4, 4);
    for (auto& v : wp.mx) v = -9.0;
    auto mark = [&](int x, int y) {
        wp.mx[wp.idx(x, y)] = 0.0;
        wp.my[wp.idx(x, y)] = 0.0;
    };
    mark(1, 1);
    mark(2, 1);
    mark(1, 3);
    wp.refresh_valid();
    auto [bh, bw] = pwc::bbox_dims(wp, 100, 100);
    REQUIRE(bh == 75);  // rows 1..3 of 4 at 25 px per cell
    REQUIRE(bw == 50);  // cols 1..2

    pwc::DenseWarp empty(4, 4);
    for (auto& v : empty.mx) v = -9.0;
    empty.refresh_valid();
    REQUIRE_THROWS_AS(pwc::bbox_dims(empty, 100, 100), std::invalid_argument);
}

TEST_CASE("sparsification drops low confidence first and bounds the oracle",
          "[evalkit][sparsification]") {
    std::vector<EvalPoint> four(4, pt(0, 0, 0, 0, 0.5));
    REQUIRE_THROWS_AS(pwc::sparsification(four, 0.1, 100, 100), std::invalid_argument);

    pwc::Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<EvalPoint> pts = random_points(rng, 20 + static_cast<int>(rng.index(31)));
        double alpha = 0.05 + 0.05 * static_cast<double>(rng.index(3));
        auto r = pwc::sparsification(pts, alpha, 100, 100);
        REQUIRE(r.fractions_removed.size() == 50);
        REQUIRE(r.fractions_removed.front() == 0.0);
        REQUIRE(r.fractions_removed.back() == Catch::Approx(0.98).margin(1e-12));
        for (std::size_t k = 0; k < 50; ++k) {
            REQUIRE(r.error_curve[k] >= -1e-12);
            REQUIRE(r.oracle_curve[k] >= r.pck_curve[k] - 1e-12);
            if (k) REQUIRE(r.oracle_curve[k] >= r.oracle_curve[k - 1] - 1e-12);
        }
        REQUIRE(r.ause >= -1e-12);
    }
}

TEST_CASE("sparsification matches a brute force reimplementation", "[evalkit][sparsification]") {
    pwc::Rng rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 20 + static_cast<int>(rng.index(31));
        std::vector<EvalPoint> pts = random_points(rng, n);
        double alpha = 0.05 + 0.05 * static_cast<double>(rng.index(3));
        auto a = pwc::sparsification(pts, alpha, 100, 100);
        auto b = brute_sparsification(pts, alpha, 100, 100);
        for (std::size_t k = 0; k < 50; ++k) {
            REQUIRE(a.pck_curve[k] == Catch::Approx(b.pck_curve[k]).margin(1e-12));
            REQUIRE(a.oracle_curve[k] == Catch::Approx(b.oracle_curve[k]).margin(1e-12));
        }
        REQUIRE(a.ause == Catch::Approx(b.ause).margin(1e-12));
    }
}

TEST_CASE("perfectly anti-ordered confidence gives zero sparsification error",
          "[evalkit][sparsification]") {
    pwc::Rng rng(31);
    std::vector<EvalPoint> pts;
    for (int i = 0; i < 24; ++i) {
        double err = rng.uniform(0, 40);
        pts.push_back(pt(err, 0, 0, 0, -err));  // confidence = negated error
    }
    auto r = pwc::sparsification(pts, 0.1, 100, 100);
    for (double e : r.error_curve) REQUIRE(std::fabs(e) <= 1e-12);
    REQUIRE(std::fabs(r.ause) <= 1e-12);
}

TEST_CASE("constant confidence removes points in index order", "[evalkit][sparsification]") {
    int n = 20;
    std::vector<EvalPoint> pts;
    for (int i = 0; i < n; ++i) pts.push_back(pt(i, 0, 0, 0, 0.5));
    double alpha = 0.105;  // threshold 10.5: indices 0..10 are correct
    auto r = pwc::sparsification(pts, alpha, 100, 100);
    for (int k = 0; k < 50; ++k) {
        int drop = static_cast<int>(std::floor(0.02 * k * n));
        int correct = std::max(0, 11 - drop);
        double expect = static_cast<double>(correct) / (n - drop);
        REQUIRE(r.pck_curve[static_cast<std::size_t>(k)] ==
                Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("aggregation averages curves and integrals agree by linearity",
          "[evalkit][sparsification]") {
    pwc::Rng rng(37);
    std::vector<pwc::SparsificationResult> rs;
    for (int i = 0; i < 7; ++i)
        rs.push_back(pwc::sparsification(random_points(rng, 25), 0.1, 100, 100));
    auto agg = pwc::aggregate_sparsification(rs);
    REQUIRE(agg.n_pairs == 7);
    REQUIRE(agg.fractions.size() == 50);
    for (std::size_t k = 0; k < 50; ++k) {
        double m = 0;
        for (const auto& r : rs) m += r.error_curve[k];
        REQUIRE(agg.mean_error_curve[k] == Catch::Approx(m / 7).margin(1e-12));
    }
    // the trapezoid rule is linear, so both aggregation orders coincide here
    REQUIRE(agg.ause_of_mean_curve == Catch::Approx(agg.mean_of_pair_ause).margin(1e-12));
    REQUIRE_THROWS_AS(pwc::aggregate_sparsification({}), std::invalid_argument);
}

TEST_CASE("mean null probability averages the bin row", "[evalkit][nullprob]") {
    ProbMapping<float> p;
    p.tgt = {2, 1};
    p.src = {2, 1};
    p.has_unmatched_state = true;
    p.has_unmatched_column = true;
    p.probs = pwc::Tensor<float>({3, 3}, 0.f);
    p.probs.at(0, 0) = 0.7f;
    p.probs.at(2, 0) = 0.3f;
    p.probs.at(1, 1) = 0.9f;
    p.probs.at(2, 1) = 0.1f;
    p.probs.at(2, 2) = 1.0f;
    p.check();
    REQUIRE(pwc::mean_null_prob(p) == Catch::Approx(0.2).margin(1e-7));
    REQUIRE_THROWS_AS(pwc::mean_null_prob(identity_mapping(2)), std::invalid_argument);
}

TEST_CASE("metrics csv has the fixed header and deterministic bytes", "[evalkit][report]") {
    namespace fs = std::filesystem;
    fs::create_directories("evalkit_out");
    std::vector<pwc::MetricRow> rows = {
        {"step_000000", "pck", "0.05", "image", 0.517893},
        {"step_000000", "ause", "0.1", "bbox", 0.00123456},
        {"step_000000", "mean_null_prob_neg", "-", "-", 0.25},
    };
    pwc::write_metrics_csv("evalkit_out/metrics.csv", rows);
    std::string text = slurp("evalkit_out/metrics.csv");
    REQUIRE(text == "checkpoint,metric,alpha,reference,value\n"
                    "step_000000,pck,0.05,image,0.517893\n"
                    "step_000000,ause,0.1,bbox,0.00123456\n"
                    "step_000000,mean_null_prob_neg,-,-,0.25\n");
    pwc::write_metrics_csv("evalkit_out/metrics.csv", rows);
    REQUIRE(slurp("evalkit_out/metrics.csv") == text);
    REQUIRE_THROWS_AS(pwc::write_metrics_csv("evalkit_out/missing/metrics.csv", rows),
                      std::runtime_error);
    fs::remove_all("evalkit_out");
}

TEST_CASE("curves svg is well formed and deterministic", "[evalkit][report]") {
    namespace fs = std::filesystem;
    fs::create_directories("evalkit_out");
    pwc::SvgCurve c1, c2;
    c1.label = "alpha 0.05 & friends";
    c1.color = "#1f77b4";
    c2.label = "alpha <0.1>";
    c2.color = "#d62728";
    for (int i = 0; i < 50; ++i) {
        double f = 0.02 * i;
        c1.x.push_back(f);
        c1.y.push_back(0.08 * std::exp(-3.0 * f));
        c2.x.push_back(f);
        c2.y.push_back(0.05 * (1.0 - f));
    }
    pwc::write_curves_svg("evalkit_out/curves.svg", {c1, c2}, "fraction removed",
                          "sparsification error");
    std::string text = slurp("evalkit_out/curves.svg");
    REQUIRE(xml_well_formed(text));
    REQUIRE(text.find("polyline") != std::string::npos);
    REQUIRE(text.find("&amp; friends") != std::string::npos);
    REQUIRE(text.find("&lt;0.1&gt;") != std::string::npos);
    pwc::write_curves_svg("evalkit_out/curves.svg", {c1, c2}, "fraction removed",
                          "sparsification error");
    REQUIRE(slurp("evalkit_out/curves.svg") == text);
    fs::remove_all("evalkit_out");
}

TEST_CASE("checkpoint evaluation walks a dataset split", "[evalkit][integration]") {
    namespace fs = std::filesystem;
    std::string dir = "evalkit_data";
    fs::remove_all(dir);
    pwc::SynthConfig scfg;
    pwc::write_dataset(dir, 5, 8, 6, scfg);
    pwc::PairStore store(dir);

    auto enc = pwc::make_encoder<float>(8, true, 0.0f, 3);
    pwc::PckConfig pcfg;
    auto out = pwc::evaluate_checkpoint("step_000000", store, pwc::Split::train, enc, 0.02, 56,
                                        pcfg, Extractor::argmax);

    bool saw_pck = false, saw_dense = false, saw_ause = false, saw_null = false;
    for (const auto& r : out.rows) {
        REQUIRE(r.checkpoint == "step_000000");
        if (r.metric == "pck") saw_pck = true;
        if (r.metric == "dense_transfer_pck") {
            saw_dense = true;
            REQUIRE(r.value >= 0.0);
            REQUIRE(r.value <= 1.0);
        }
        if (r.metric == "ause") saw_ause = true;
        if (r.metric == "mean_null_prob_neg") {
            saw_null = true;
            REQUIRE(r.value >= 0.0);
            REQUIRE(r.value <= 1.0);
        }
    }
    REQUIRE(saw_pck);
    REQUIRE(saw_dense);
    REQUIRE(saw_ause);
    REQUIRE(saw_null);
    REQUIRE(out.mean_error_curves.size() == pcfg.alphas.size());

    // deterministic end to end
    auto again = pwc::evaluate_checkpoint("step_000000", store, pwc::Split::train, enc, 0.02, 56,
                                          pcfg, Extractor::argmax);
    REQUIRE(again.rows.size() == out.rows.size());
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
        REQUIRE(again.rows[i].metric == out.rows[i].metric);
        REQUIRE(again.rows[i].value == out.rows[i].value);
    }

    // soft argmax path stays in range as well
    auto soft = pwc::evaluate_checkpoint("step_000000", store, pwc::Split::train, enc, 0.02, 56,
                                         pcfg, Extractor::soft_argmax);
    for (const auto& r : soft.rows)
        if (r.metric == "dense_transfer_pck") {
            REQUIRE(r.value >= 0.0);
            REQUIRE(r.value <= 1.0);
        }
    fs::remove_all(dir);
}
