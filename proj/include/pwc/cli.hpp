#pragma once

// Batch front end over the library: dataset generation, training, evaluation,
// gradient checking, and warp previews. Exit code 0 on success, 1 on a
// contract violation (bad flags, bad config, invalid arguments), 2 on I/O
// failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "pwc/config.hpp"
#include "pwc/evalkit.hpp"
#include "pwc/model.hpp"

namespace pwc {

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split: " + s);
}

// ---- gradient check suite --------------------------------------------------------

struct GradcheckLine {
    std::string name;
    double max_err = 0.0;
    double limit = 0.0;
    bool ok() const { return max_err < limit; }
};

namespace detail {

inline Tensor<double> gc_rand(std::vector<int> shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

inline DenseWarp gc_rand_warp(int w, int h, Rng& rng) {
    DenseWarp wp(w, h);
    for (std::size_t i = 0; i < wp.mx.size(); ++i) {
        wp.mx[i] = rng.uniform(0.0, w - 1.0);
        wp.my[i] = rng.uniform(0.0, h - 1.0);
    }
    wp.refresh_valid();
    return wp;
}

}  // namespace detail

// Finite-difference audit of the differentiable stack: primitives at the
// tight tolerance, each loss term, then the full weak and strong objectives
// on a random 4x4 grid, all in 64-bit.
inline std::vector<GradcheckLine> gradcheck_suite(std::uint64_t seed) {
    std::vector<GradcheckLine> out;
    Rng rng(Rng::key(seed, 0, 7));
    auto run = [&](const std::string& name, double limit, auto builder,
                   std::vector<Tensor<double>> params) {
        auto r = gradcheck<double>(builder, std::move(params), 1e-3);
        out.push_back({name, r.max_err, limit});
    };
    auto kinkless = [&](std::vector<int> shape) {
        Tensor<double> t = detail::gc_rand(std::move(shape), rng);
        for (double& v : t.data)
            if (std::abs(v) < 0.05) v = 0.2;
        return t;
    };

    run(
        "relu", 1e-4,
        [](Graph<double>& g, const std::vector<Var<double>>& v) { return g.sum(g.relu(v[0])); },
        {kinkless({4, 4})});
    run(
        "softmax_columns", 1e-4,
        [](Graph<double>& g, const std::vector<Var<double>>& v) {
            return g.sum(g.mul(g.softmax_columns(v[0], 0.25), v[1]));
        },
        {detail::gc_rand({5, 4}, rng), detail::gc_rand({5, 4}, rng)});
    run(
        "l2_normalize_columns", 1e-4,
        [](Graph<double>& g, const std::vector<Var<double>>& v) {
            return g.sum(g.mul(g.l2_normalize_columns(v[0], 1e-8), v[1]));
        },
        {detail::gc_rand({3, 6}, rng), detail::gc_rand({3, 6}, rng)});
    run(
        "conv2d_3x3", 1e-4,
        [](Graph<double>& g, const std::vector<Var<double>>& v) {
            return g.sum(g.add_channel_bias(g.conv2d_3x3(v[0], v[1], 2), v[2]));
        },
        {detail::gc_rand({2, 6, 6}, rng), detail::gc_rand({3, 2, 3, 3}, rng),
         detail::gc_rand({3}, rng)});
    run(
        "matmul", 1e-4,
        [](Graph<double>& g, const std::vector<Var<double>>& v) {
            return g.sum(g.matmul(v[0], v[1]));
        },
        {detail::gc_rand({4, 5}, rng), detail::gc_rand({5, 3}, rng)});

    const int gw = 4, gh = 4, d = 3;
    DenseWarp warp = detail::gc_rand_warp(gw, gh, rng);
    auto gt_hot_bin = gt_prob_mapping<double>(warp, GtMode::onehot, true);
    auto gt_soft_bin = gt_prob_mapping<double>(warp, GtMode::smooth, true);
    auto gt_hot_free = gt_prob_mapping<double>(warp, GtMode::onehot, false);
    auto gt_soft_free = gt_prob_mapping<double>(warp, GtMode::smooth, false);
    std::vector<KeypointPair> kps = {{0.0, 1.0, 2.2, 1.4}, {3.0, 2.0, 0.6, 2.8},
                                     {1.0, 3.0, 3.0, 0.5}};
    auto feats = [&] { return detail::gc_rand({d, gh, gw}, rng); };
    auto bin_mapping = [](Graph<double>& g, Var<double> ft, Var<double> fs, Var<double> z) {
        return to_prob_mapping(g, cost_volume(g, ft, fs, z), 1.0);
    };
    auto free_mapping = [](Graph<double>& g, Var<double> ft, Var<double> fs) {
        return to_prob_mapping(g, cost_volume(g, ft, fs), 1.0);
    };

    run(
        "pw_bipath", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            auto left = bin_mapping(g, v[0], v[2], v[3]);
            auto right = bin_mapping(g, v[2], v[1], v[3]);
            return pw_bipath_loss(g, left, right, gt_hot_bin, 1.0).loss;
        },
        {feats(), feats(), feats(), detail::gc_rand({1}, rng)});
    run(
        "pwarp_sup", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return pwarp_sup_loss(g, bin_mapping(g, v[0], v[1], v[2]), gt_soft_bin);
        },
        {feats(), feats(), detail::gc_rand({1}, rng)});
    run(
        "pneg", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return pneg_loss(g, bin_mapping(g, v[0], v[1], v[2]), 0.9);
        },
        {feats(), feats(), detail::gc_rand({1}, rng)});
    run(
        "keypoint_ce", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return keypoint_loss(g, free_mapping(g, v[0], v[1]), kps, KeypointLossKind::ce);
        },
        {feats(), feats()});
    run(
        "keypoint_epe", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return keypoint_loss(g, free_mapping(g, v[0], v[1]), kps, KeypointLossKind::epe);
        },
        {feats(), feats()});
    run(
        "baseline_max_score", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return baseline_loss(g, free_mapping(g, v[0], v[1]), BaselineKind::max_score, 1);
        },
        {feats(), feats()});
    run(
        "baseline_min_entropy", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            return baseline_loss(g, free_mapping(g, v[0], v[1]), BaselineKind::min_entropy, -1);
        },
        {feats(), feats()});

    run(
        "weak_total", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            auto left = bin_mapping(g, v[0], v[2], v[3]);
            auto right = bin_mapping(g, v[2], v[1], v[3]);
            auto direct = bin_mapping(g, v[0], v[1], v[3]);
            auto bi = pw_bipath_loss(g, left, right, gt_hot_bin, 1.0);
            auto psup = pwarp_sup_loss(g, direct, gt_soft_bin);
            auto pneg = pneg_loss(g, direct, 0.9);
            return weak_total(g, bi.loss, psup, pneg, 0.7, 1.0);
        },
        {feats(), feats(), feats(), detail::gc_rand({1}, rng)});
    run(
        "strong_total", 1e-3,
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            auto left = free_mapping(g, v[0], v[2]);
            auto right = free_mapping(g, v[2], v[1]);
            auto direct = free_mapping(g, v[0], v[1]);
            auto bi = pw_bipath_loss(g, left, right, gt_hot_free, 1.0);
            auto psup = pwarp_sup_loss(g, direct, gt_soft_free);
            auto kp = keypoint_loss(g, direct, kps, KeypointLossKind::ce);
            return strong_total(g, bi.loss, psup, kp, 0.5, 0.25);
        },
        {feats(), feats(), feats()});
    return out;
}

// ---- checkpoint inspection -------------------------------------------------------

// The parameter count in the header tells the two encoder layouts apart
// without loading the tensors.
inline bool checkpoint_uses_bin(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "PWRC")
        throw std::runtime_error(path + ": bad checkpoint magic");
    if (get_u32(is) != 1) throw std::runtime_error(path + ": unsupported checkpoint version");
    std::uint32_t count = get_u32(is);
    if (!is || count % 3 != 0) throw std::runtime_error(path + ": corrupt tensor count");
    std::uint32_t n_params = count / 3;
    if (n_params == 7) return true;
    if (n_params == 6) return false;
    throw std::runtime_error(path + ": unrecognized parameter count " + std::to_string(n_params));
}

// ---- warp previews ---------------------------------------------------------------

namespace detail {

inline Image hstack(const Image& a, const Image& b) {
    if (a.shape[0] != b.shape[0] || a.shape[1] != b.shape[1])
        throw std::invalid_argument("hstack: images disagree on channels or height");
    int c = a.shape[0], h = a.shape[1], wa = a.shape[2], wb = b.shape[2];
    Image out({c, h, wa + wb});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < wa; ++x) out.at(ch, y, x) = a.at(ch, y, x);
            for (int x = 0; x < wb; ++x) out.at(ch, y, wa + x) = b.at(ch, y, x);
        }
    return out;
}

}  // namespace detail

// ---- commands --------------------------------------------------------------------

namespace detail {

inline ExperimentConfig config_from_path(const std::string& path,
                                         const std::string& objective_override = "") {
    ConfigDraft draft = path.empty() ? ConfigDraft{} : load_config_draft(path);
    return resolve_config(std::move(draft), objective_override);
}

inline void apply_threads(int threads) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    worker_count() = threads > 0 ? std::clamp(threads, 1, hw) : hw;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
    if (!os) throw std::runtime_error("write failed for " + path);
}

inline int cmd_make_dataset(const ExperimentConfig& cfg, const std::string& out,
                            std::uint64_t seed) {
    write_dataset(out, seed, cfg.n_pos, cfg.n_neg, cfg.synth());
    std::cout << "wrote " << cfg.n_pos + cfg.n_neg << " pairs to " << out << '\n';
    return 0;
}

inline int cmd_train(const ExperimentConfig& cfg, const std::string& data, const std::string& out,
                     bool resume) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw std::runtime_error("cannot create experiment directory " + out);
    write_text_file(out + "/config.echo", config_echo(cfg));
    TrainLoopResult res = train_loop(data, out, cfg.train, cfg.warp, resume);
    std::cout << "trained " << objective_name(cfg.train.objective) << " to step "
              << res.final_step << ", final checkpoint " << res.final_checkpoint << '\n';
    return 0;
}

inline int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint,
                    const std::string& data, const std::string& split_str,
                    const std::string& out) {
    namespace fs = std::filesystem;
    Split split = split_from_string(split_str);
    bool bin = checkpoint_uses_bin(checkpoint);
    Encoder<float> enc = make_encoder<float>(cfg.train.d, bin,
                                             static_cast<float>(cfg.train.z_init),
                                             cfg.train.seed);
    Adam<float> adam = Adam<float>::make(enc, cfg.train);
    load_checkpoint(checkpoint, enc, adam);
    PairStore store(data);
    std::string label = fs::path(checkpoint).filename().string();
    EvalOutput ev = evaluate_checkpoint(label, store, split, enc, cfg.train.temperature,
                                        cfg.train.crop_size, cfg.pck, cfg.extractor);
    std::error_code ec;
    fs::create_directories(out + "/eval", ec);
    if (ec) throw std::runtime_error("cannot create eval directory under " + out);
    write_metrics_csv(out + "/eval/metrics.csv", ev.rows);
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                    "#d62728", "#9467bd", "#8c564b"};
    std::vector<SvgCurve> curves;
    for (std::size_t i = 0; i < ev.mean_error_curves.size(); ++i) {
        SvgCurve c;
        c.label = "alpha " + format_sig6(ev.mean_error_curves[i].first);
        c.color = palette[i % 6];
        c.x = ev.fractions;
        c.y = ev.mean_error_curves[i].second;
        curves.push_back(std::move(c));
    }
    write_curves_svg(out + "/eval/curves.svg", curves, "fraction removed", "oracle gap");
    std::cout << "evaluated " << label << " on " << split_str << ": " << ev.rows.size()
              << " metric rows in " << out << "/eval/metrics.csv" << '\n';
    return 0;
}

inline int cmd_gradcheck(std::uint64_t seed) {
    std::vector<GradcheckLine> lines = gradcheck_suite(seed);
    bool all_ok = true;
    for (const GradcheckLine& l : lines) {
        std::cout << (l.ok() ? "pass" : "FAIL") << ' ' << l.name << " max_err "
                  << format_sig6(l.max_err) << " limit " << format_sig6(l.limit) << '\n';
        all_ok = all_ok && l.ok();
    }
    if (!all_ok) throw std::invalid_argument("gradient check failed");
    return 0;
}

inline int cmd_sample_warps(const ExperimentConfig& cfg, int n, const std::string& out,
                            std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_warps: --n must be at least 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out);
    SynthConfig scfg = cfg.synth();
    std::vector<ClassTemplate> tpls = dataset_templates(seed, scfg);
    Rng img_rng(Rng::key(seed, 0, 1));
    Image demo = make_pair(img_rng, tpls, true, scfg).image_a;
    char name[48];
    for (int i = 0; i < n; ++i) {
        Rng wr(Rng::key(seed, static_cast<std::uint64_t>(i) + 1, 2));
        DenseWarp wp = sample_warp(wr, cfg.warp, img_width(demo), img_height(demo));
        std::snprintf(name, sizeof name, "/warp_%03d.pwim", i);
        write_pwim(out + name, warp_to_tensor(wp));
        std::snprintf(name, sizeof name, "/sample_%03d.ppm", i);
        write_ppm(out + name, hstack(demo, warp_image(demo, wp)));
    }
    std::cout << "wrote " << n << " warp previews to " << out << '\n';
    return 0;
}

}  // namespace detail

inline int cli_main(int argc, char** argv) {
    CLI::App app{"probabilistic warp consistency workbench"};
    app.require_subcommand(1);

    std::string config_path;
    int threads = 0;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "configuration file")->envname("PWCONFIG");
        cmd->add_option("--threads", threads, "cap on worker threads (default: logical cores)");
    };

    std::string mk_out;
    std::uint64_t mk_seed = 0;
    CLI::App* mk = app.add_subcommand("make_dataset", "generate a synthetic pair dataset");
    add_common(mk);
    mk->add_option("--out", mk_out, "dataset directory")->required();
    mk->add_option("--seed", mk_seed, "dataset seed");

    std::string tr_data, tr_out, tr_objective;
    bool tr_resume = false;
    CLI::App* tr = app.add_subcommand("train", "optimize an encoder on a dataset");
    add_common(tr);
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "experiment directory")->required();
    tr->add_option("--objective", tr_objective, "objective override");
    tr->add_flag("--resume", tr_resume, "continue from the newest checkpoint in --out");

    std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on one split");
    add_common(ev);
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "train, val or test");
    ev->add_option("--out", ev_out, "experiment directory")->required();

    std::uint64_t gc_seed = 0;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of the losses");
    add_common(gc);
    gc->add_option("--seed", gc_seed, "random draw seed");

    std::string sw_out;
    int sw_n = 8;
    std::uint64_t sw_seed = 0;
    CLI::App* sw = app.add_subcommand("sample_warps", "render warp fields and warped images");
    add_common(sw);
    sw->add_option("--n", sw_n, "number of warps");
    sw->add_option("--out", sw_out, "output directory")->required();
    sw->add_option("--seed", sw_seed, "warp draw seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        detail::apply_threads(threads);
        if (app.got_subcommand(mk))
            return detail::cmd_make_dataset(detail::config_from_path(config_path), mk_out,
                                            mk_seed);
        if (app.got_subcommand(tr))
            return detail::cmd_train(detail::config_from_path(config_path, tr_objective),
                                     tr_data, tr_out, tr_resume);
        if (app.got_subcommand(ev))
            return detail::cmd_eval(detail::config_from_path(config_path), ev_ckpt, ev_data,
                                    ev_split, ev_out);
        if (app.got_subcommand(gc)) return detail::cmd_gradcheck(gc_seed);
        return detail::cmd_sample_warps(detail::config_from_path(config_path), sw_n, sw_out,
                                        sw_seed);
    } catch (const std::logic_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace pwc
