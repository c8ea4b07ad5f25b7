#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pwc/graph.hpp"
#include "pwc/objectives.hpp"
#include "pwc/probmap.hpp"
#include "pwc/synthdata.hpp"
#include "pwc/warp.hpp"

namespace pwc {

enum class Objective { weak, strong, warp_sup_only, pw_bipath_only, max_score, min_entropy };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::weak: return "weak";
        case Objective::strong: return "strong";
        case Objective::warp_sup_only: return "warp_sup_only";
        case Objective::pw_bipath_only: return "pw_bipath_only";
        case Objective::max_score: return "max_score";
        default: return "min_entropy";
    }
}

inline Objective objective_from_string(const std::string& s) {
    if (s == "weak") return Objective::weak;
    if (s == "strong") return Objective::strong;
    if (s == "warp_sup_only") return Objective::warp_sup_only;
    if (s == "pw_bipath_only") return Objective::pw_bipath_only;
    if (s == "max_score") return Objective::max_score;
    if (s == "min_entropy") return Objective::min_entropy;
    throw std::invalid_argument("unknown objective: " + s);
}

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int batch_size = 4;  // positives per step; negative-using objectives add as many negatives
    int steps = 2000;
    Objective objective = Objective::weak;
    double gamma = 0.7;
    double temperature = 0.02;
    double p_neg = 0.9;
    double z_init = 0.0;
    bool use_bin = true;
    int d = 16;
    int crop_size = 56;
    KeypointLossKind kp_loss = KeypointLossKind::ce;
    std::uint64_t seed = 0;
    int checkpoint_every = 500;

    // The negative-pair term needs the unmatched state; the keypoint and
    // score-only objectives are defined over purely spatial mappings.
    bool needs_bin() const { return objective == Objective::weak; }
    bool forbids_bin() const {
        return objective == Objective::strong || objective == Objective::pw_bipath_only ||
               objective == Objective::max_score || objective == Objective::min_entropy;
    }
    bool uses_negatives() const {
        return objective == Objective::weak || objective == Objective::max_score ||
               objective == Objective::min_entropy;
    }

    void validate() const {
        if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be non-negative");
        if (steps < 1) throw std::invalid_argument("train: steps must be at least 1");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
        if (!(gamma > 0.0 && gamma <= 1.0))
            throw std::invalid_argument("train: gamma must be in (0, 1]");
        if (!(temperature > 0.0)) throw std::invalid_argument("train: temperature must be positive");
        if (!(p_neg > 0.0 && p_neg < 1.0))
            throw std::invalid_argument("train: p_neg must be in (0, 1)");
        if (d < 1) throw std::invalid_argument("train: d must be at least 1");
        if (crop_size < 8 || crop_size % 4 != 0)
            throw std::invalid_argument("train: crop_size must be a multiple of 4 and at least 8");
        if (checkpoint_every < 1)
            throw std::invalid_argument("train: checkpoint_every must be at least 1");
        if (needs_bin() && !use_bin)
            throw std::invalid_argument("train: the weak objective requires use_bin");
        if (forbids_bin() && use_bin)
            throw std::invalid_argument(std::string("train: objective ") +
                                        objective_name(objective) + " requires use_bin = 0");
    }
};

// ---- encoder -----------------------------------------------------------------

template <typename T>
struct Encoder {
    int d = 16;
    bool use_bin = true;
    std::vector<std::string> names;
    std::vector<Tensor<T>> params;

    int find(const std::string& n) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == n) return static_cast<int>(i);
        return -1;
    }
    const Tensor<T>& at(const std::string& n) const {
        int i = find(n);
        if (i < 0) throw std::invalid_argument("encoder has no tensor named " + n);
        return params[static_cast<std::size_t>(i)];
    }
};

// He-normal conv weights, zero biases, bin logit at its configured start.
template <typename T>
Encoder<T> make_encoder(int d, bool use_bin, T z_init, std::uint64_t seed) {
    if (d < 1) throw std::invalid_argument("make_encoder: d must be at least 1");
    Encoder<T> e;
    e.d = d;
    e.use_bin = use_bin;
    Rng rng(Rng::key(seed, 0, 3));
    auto he = [&](std::vector<int> shape, int fan_in) {
        Tensor<T> t(std::move(shape));
        T s = static_cast<T>(std::sqrt(2.0 / fan_in));
        for (auto& v : t.data) v = s * static_cast<T>(rng.normal());
        return t;
    };
    e.names = {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b"};
    e.params.push_back(he({16, 3, 3, 3}, 27));
    e.params.push_back(Tensor<T>({16}, T{0}));
    e.params.push_back(he({16, 16, 3, 3}, 144));
    e.params.push_back(Tensor<T>({16}, T{0}));
    e.params.push_back(he({d, 16, 3, 3}, 144));
    e.params.push_back(Tensor<T>({d}, T{0}));
    if (use_bin) {
        e.names.push_back("bin.z");
        e.params.push_back(Tensor<T>({1}, {z_init}));
    }
    return e;
}

template <typename T>
struct EncoderVars {
    std::vector<Var<T>> all;
    std::optional<Var<T>> bin_z;
};

template <typename T>
EncoderVars<T> encoder_leaves(Graph<T>& g, const Encoder<T>& e) {
    EncoderVars<T> v;
    for (const Tensor<T>& p : e.params) v.all.push_back(g.leaf(p, true));
    if (e.use_bin) v.bin_z = v.all.back();
    return v;
}

// conv stack with stride 4 total; per-cell unit L2 norm
template <typename T>
Var<T> encode(Graph<T>& g, const EncoderVars<T>& p, const Tensor<T>& img) {
    if (img.rank() != 3 || img.shape[0] != 3)
        throw std::invalid_argument("encode: image must be [3, h, w]");
    int h = img.shape[1], w = img.shape[2];
    if (h % 4 != 0 || w % 4 != 0)
        throw std::invalid_argument("encode: image dims must be divisible by 4");
    Var<T> x = g.constant(img);
    x = g.relu(g.add_channel_bias(g.conv2d_3x3(x, p.all[0], 2), p.all[1]));
    x = g.relu(g.add_channel_bias(g.conv2d_3x3(x, p.all[2], 2), p.all[3]));
    x = g.add_channel_bias(g.conv2d_3x3(x, p.all[4], 1), p.all[5]);
    const auto& sh = g.value(x).shape;
    int d = sh[0], gh = sh[1], gw = sh[2];
    x = g.l2_normalize_columns(g.reshape(x, {d, gh * gw}), T{1e-8});
    return g.reshape(x, {d, gh, gw});
}

// ---- optimizer ---------------------------------------------------------------

template <typename T>
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<Tensor<T>> m, v;

    static Adam make(const Encoder<T>& e, const TrainConfig& cfg) {
        Adam a;
        a.lr = cfg.lr;
        a.beta1 = cfg.beta1;
        a.beta2 = cfg.beta2;
        a.eps = cfg.eps;
        for (const Tensor<T>& p : e.params) {
            a.m.push_back(Tensor<T>(p.shape, T{0}));
            a.v.push_back(Tensor<T>(p.shape, T{0}));
        }
        return a;
    }

    void apply(Encoder<T>& e, const std::vector<Tensor<T>>& grads) {
        if (grads.size() != e.params.size())
            throw std::invalid_argument("adam: gradient count mismatch");
        ++t;
        double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < e.params.size(); ++i) {
            Tensor<T>& p = e.params[i];
            const Tensor<T>& gr = grads[i];
            if (gr.shape != p.shape) throw std::invalid_argument("adam: gradient shape mismatch");
            for (std::size_t k = 0; k < p.data.size(); ++k) {
                double gv = gr.data[k];
                double mm = beta1 * m[i].data[k] + (1.0 - beta1) * gv;
                double vv = beta2 * v[i].data[k] + (1.0 - beta2) * gv * gv;
                m[i].data[k] = static_cast<T>(mm);
                v[i].data[k] = static_cast<T>(vv);
                p.data[k] -= static_cast<T>(lr * (mm / c1) / (std::sqrt(vv / c2) + eps));
            }
        }
    }
};

// ---- checkpoints ----------------------------------------------------------------

namespace detail {

inline void put_named_tensor(std::ostream& os, const std::string& name,
                             const Tensor<float>& t) {
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data) put_f32(os, v);
}

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

inline NamedTensor get_named_tensor(std::istream& is) {
    NamedTensor nt;
    std::uint16_t len = get_u16(is);
    nt.name.resize(len);
    is.read(nt.name.data(), len);
    if (!is) throw std::runtime_error("unexpected end of file");
    int rank = get_u8(is);
    if (rank < 1 || rank > 4) throw std::runtime_error("checkpoint tensor rank out of range");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::size_t n = 1;
    for (int& d : shape) {
        d = static_cast<int>(get_u32(is));
        if (d < 1 || d > (1 << 24)) throw std::runtime_error("checkpoint tensor dim out of range");
        n *= static_cast<std::size_t>(d);
    }
    std::vector<float> data(n);
    for (float& v : data) v = get_f32(is);
    nt.value = Tensor<float>(shape, std::move(data));
    return nt;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Encoder<float>& enc,
                            const Adam<float>& adam, std::uint64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os.write("PWRC", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(enc.params.size() * 3));
    for (std::size_t i = 0; i < enc.params.size(); ++i)
        detail::put_named_tensor(os, enc.names[i], enc.params[i]);
    for (std::size_t i = 0; i < enc.params.size(); ++i) {
        detail::put_named_tensor(os, enc.names[i] + ".m", adam.m[i]);
        detail::put_named_tensor(os, enc.names[i] + ".v", adam.v[i]);
    }
    put_u64(os, step);
    if (!os) throw std::runtime_error("write failed for " + path);
}

// Loads into an encoder/optimizer pair already shaped by the config; any
// disagreement is reported with the tensor name and stream offset.
inline std::uint64_t load_checkpoint(const std::string& path, Encoder<float>& enc,
                                     Adam<float>& adam) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    auto fail = [&](const std::string& what) -> std::runtime_error {
        std::ostringstream ss;
        ss << path << ": " << what << " (offset " << is.tellg() << ")";
        return std::runtime_error(ss.str());
    };
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "PWRC") throw fail("bad checkpoint magic");
    if (get_u32(is) != 1) throw fail("unsupported checkpoint version");
    std::uint32_t count = get_u32(is);
    if (count != enc.params.size() * 3)
        throw fail("tensor count does not match the configured encoder");
    std::map<std::string, Tensor<float>> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        detail::NamedTensor nt = detail::get_named_tensor(is);
        if (!table.emplace(nt.name, std::move(nt.value)).second)
            throw fail("duplicate tensor " + nt.name);
    }
    std::uint64_t step = get_u64(is);
    auto take = [&](const std::string& name, const Tensor<float>& like) {
        auto it = table.find(name);
        if (it == table.end()) throw fail("missing tensor " + name);
        if (it->second.shape != like.shape)
            throw fail("shape mismatch for tensor " + name + ": checkpoint " +
                       shape_str(it->second) + " vs configured " + shape_str(like));
        return it->second;
    };
    for (std::size_t i = 0; i < enc.params.size(); ++i) {
        enc.params[i] = take(enc.names[i], enc.params[i]);
        adam.m[i] = take(enc.names[i] + ".m", adam.m[i]);
        adam.v[i] = take(enc.names[i] + ".v", adam.v[i]);
    }
    adam.t = step;
    return step;
}

// ---- batch assembly ---------------------------------------------------------------

struct PositiveSample {
    Triplet triplet;
    DenseWarp grid_warp;
    std::vector<KeypointPair> kps;  // feature-grid coordinates
};

struct NegativeSample {
    Image a, b;
};

struct StepBatch {
    std::vector<PositiveSample> pos;
    std::vector<NegativeSample> neg;
};

class PairStore {
  public:
    explicit PairStore(std::string dir) : dir_(std::move(dir)), records_(read_manifest(dir_)) {
        for (const PairRecord& r : records_) {
            int slot = static_cast<int>(r.split) * 2 + (r.positive ? 0 : 1);
            buckets_[static_cast<std::size_t>(slot)].push_back(r.index);
        }
        for (const PairRecord& r : records_)
            if (r.index != records_[static_cast<std::size_t>(r.index)].index)
                throw std::runtime_error("manifest indices are not dense in " + dir_);
    }

    const std::vector<PairRecord>& records() const { return records_; }
    const PairRecord& record(int index) const {
        return records_.at(static_cast<std::size_t>(index));
    }
    const std::vector<int>& indices(Split s, bool positive) const {
        return buckets_[static_cast<std::size_t>(static_cast<int>(s) * 2 + (positive ? 0 : 1))];
    }
    LoadedPair load(int index) const { return load_pair(dir_, record(index)); }

  private:
    std::string dir_;
    std::vector<PairRecord> records_;
    std::array<std::vector<int>, 6> buckets_;
};

inline double image_to_grid(double image_coord, int crop_offset) {
    return (image_coord - crop_offset + 0.5) / 4.0 - 0.5;
}

// keypoints in feature-grid coordinates; drops pairs falling off the grid
inline std::vector<KeypointPair> grid_keypoints(const std::vector<PairKeypoint>& kps,
                                                int image_size, int crop_size) {
    int off = (image_size - crop_size) / 2;
    int gs = crop_size / 4;
    std::vector<KeypointPair> out;
    for (const PairKeypoint& kp : kps) {
        KeypointPair g;
        g.sx = image_to_grid(kp.bx, off);
        g.sy = image_to_grid(kp.by, off);
        g.tx = image_to_grid(kp.ax, off);
        g.ty = image_to_grid(kp.ay, off);
        long cx = std::lround(g.sx), cy = std::lround(g.sy);
        if (cx < 0 || cx >= gs || cy < 0 || cy >= gs) continue;
        if (g.tx < 0.0 || g.tx > gs - 1.0 || g.ty < 0.0 || g.ty > gs - 1.0) continue;
        out.push_back(g);
    }
    return out;
}

inline StepBatch make_step_batch(const PairStore& store, const TrainConfig& cfg,
                                 const WarpConfig& wcfg, int step) {
    const std::vector<int>& pos = store.indices(Split::train, true);
    if (pos.empty()) throw std::runtime_error("dataset has no positive training pairs");
    StepBatch batch;
    Rng sel(Rng::key(cfg.seed, static_cast<std::uint64_t>(step) + 1, 0));
    for (int k = 0; k < cfg.batch_size; ++k) {
        int index = pos[sel.index(pos.size())];
        LoadedPair lp = store.load(index);
        int img = img_height(lp.image_a);
        Rng wr(Rng::key(cfg.seed, static_cast<std::uint64_t>(step) + 1,
                        100 + static_cast<std::uint64_t>(k)));
        DenseWarp wp = sample_warp(wr, wcfg, img, img);
        Rng jr(Rng::key(cfg.seed, static_cast<std::uint64_t>(step) + 1,
                        200 + static_cast<std::uint64_t>(k)));
        PositiveSample s;
        s.triplet = build_triplet(lp.image_a, lp.image_b, wp, cfg.crop_size, &jr);
        s.grid_warp = downscale_warp(s.triplet.warp, cfg.crop_size / 4, cfg.crop_size / 4);
        if (cfg.objective == Objective::strong)
            s.kps = grid_keypoints(store.record(index).keypoints, img, cfg.crop_size);
        batch.pos.push_back(std::move(s));
    }
    if (cfg.uses_negatives()) {
        const std::vector<int>& neg = store.indices(Split::train, false);
        if (neg.empty()) throw std::runtime_error("dataset has no negative training pairs");
        for (int k = 0; k < cfg.batch_size; ++k) {
            int index = neg[sel.index(neg.size())];
            LoadedPair lp = store.load(index);
            Rng jr(Rng::key(cfg.seed, static_cast<std::uint64_t>(step) + 1,
                            300 + static_cast<std::uint64_t>(k)));
            NegativeSample s;
            s.a = crop_center(lp.image_a, cfg.crop_size);
            s.b = crop_center(lp.image_b, cfg.crop_size);
            apply_jitter(s.a, jr);
            apply_jitter(s.b, jr);
            batch.neg.push_back(std::move(s));
        }
    }
    return batch;
}

// ---- one optimization step ----------------------------------------------------------

namespace detail {

template <typename T>
Var<T> mean_of(Graph<T>& g, const std::vector<Var<T>>& terms) {
    if (terms.empty()) return g.constant(Tensor<T>({1}, {T{0}}));
    Var<T> acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return g.scale(acc, T{1} / static_cast<T>(terms.size()));
}

}  // namespace detail

inline LossReport train_step(Encoder<float>& enc, Adam<float>& adam, const StepBatch& batch,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (batch.pos.empty()) throw std::invalid_argument("train_step: empty batch");
    Graph<float> g;
    EncoderVars<float> pv = encoder_leaves(g, enc);
    float temp = static_cast<float>(cfg.temperature);
    double gamma = cfg.objective == Objective::pw_bipath_only ? 1.0 : cfg.gamma;
    BaselineKind bk = cfg.objective == Objective::max_score ? BaselineKind::max_score
                                                            : BaselineKind::min_entropy;

    std::vector<Var<float>> vis_terms, psup_terms, pneg_terms, kp_terms, base_pos, base_neg;
    int at = 0;
    try {
        for (const PositiveSample& s : batch.pos) {
            Var<float> f_i = encode(g, pv, s.triplet.image_i);
            Var<float> f_ip = encode(g, pv, s.triplet.image_i_prime);
            auto mapping = [&](Var<float> ft, Var<float> fs) {
                auto cv = pv.bin_z ? cost_volume(g, ft, fs, *pv.bin_z) : cost_volume(g, ft, fs);
                return to_prob_mapping(g, cv, temp);
            };
            switch (cfg.objective) {
                case Objective::weak:
                case Objective::strong:
                case Objective::pw_bipath_only: {
                    Var<float> f_j = encode(g, pv, s.triplet.image_j);
                    auto p_ij = mapping(f_i, f_j);
                    auto p_jip = mapping(f_j, f_ip);
                    auto gt_hot = gt_prob_mapping<float>(s.grid_warp, GtMode::onehot, cfg.use_bin);
                    vis_terms.push_back(pw_bipath_loss(g, p_ij, p_jip, gt_hot, gamma).loss);
                    if (cfg.objective != Objective::pw_bipath_only) {
                        auto gt_soft =
                            gt_prob_mapping<float>(s.grid_warp, GtMode::smooth, cfg.use_bin);
                        psup_terms.push_back(pwarp_sup_loss(g, mapping(f_i, f_ip), gt_soft));
                    }
                    if (cfg.objective == Objective::strong && !s.kps.empty())
                        kp_terms.push_back(keypoint_loss(g, p_ij, s.kps, cfg.kp_loss));
                    break;
                }
                case Objective::warp_sup_only: {
                    auto gt_soft =
                        gt_prob_mapping<float>(s.grid_warp, GtMode::smooth, cfg.use_bin);
                    psup_terms.push_back(pwarp_sup_loss(g, mapping(f_i, f_ip), gt_soft));
                    break;
                }
                case Objective::max_score:
                case Objective::min_entropy: {
                    Var<float> f_j = encode(g, pv, s.triplet.image_j);
                    base_pos.push_back(baseline_loss(g, mapping(f_i, f_j), bk, 1));
                    break;
                }
            }
            ++at;
        }
        at = 0;
        for (const NegativeSample& s : batch.neg) {
            Var<float> f_a = encode(g, pv, s.a);
            Var<float> f_b = encode(g, pv, s.b);
            auto cv = pv.bin_z ? cost_volume(g, f_a, f_b, *pv.bin_z) : cost_volume(g, f_a, f_b);
            auto p_ab = to_prob_mapping(g, cv, temp);
            if (cfg.objective == Objective::weak)
                pneg_terms.push_back(pneg_loss(g, p_ab, cfg.p_neg));
            else
                base_neg.push_back(baseline_loss(g, p_ab, bk, -1));
            ++at;
        }
    } catch (const std::exception& e) {
        throw std::runtime_error("train_step: batch sample " + std::to_string(at) +
                                 " failed: " + e.what());
    }

    Var<float> vis = detail::mean_of(g, vis_terms);
    Var<float> psup = detail::mean_of(g, psup_terms);
    LossReport rep;
    Var<float> total = vis;
    switch (cfg.objective) {
        case Objective::weak: {
            Var<float> pneg = detail::mean_of(g, pneg_terms);
            std::tie(total, rep) = weak_objective(g, vis, psup, pneg);
            break;
        }
        case Objective::strong: {
            Var<float> kp = detail::mean_of(g, kp_terms);
            std::tie(total, rep) = strong_objective(g, vis, psup, kp);
            break;
        }
        case Objective::warp_sup_only:
            total = psup;
            rep.pwarp_sup = g.value(psup).data[0];
            rep.total = rep.pwarp_sup;
            break;
        case Objective::pw_bipath_only:
            total = vis;
            rep.vis_pw_bi = g.value(vis).data[0];
            rep.total = rep.vis_pw_bi;
            break;
        case Objective::max_score:
        case Objective::min_entropy: {
            // the score means land in the bipath/pneg columns of the report
            Var<float> bp = detail::mean_of(g, base_pos);
            Var<float> bn = detail::mean_of(g, base_neg);
            total = g.add(bp, bn);
            rep.vis_pw_bi = g.value(bp).data[0];
            rep.pneg = g.value(bn).data[0];
            rep.total = g.value(total).data[0];
            break;
        }
    }

    g.backward(total);
    std::vector<Tensor<float>> grads;
    grads.reserve(pv.all.size());
    for (Var<float> v : pv.all) grads.push_back(g.grad(v));
    adam.apply(enc, grads);
    return rep;
}

// ---- full loop --------------------------------------------------------------------

inline std::string checkpoint_path(const std::string& out_dir, int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06d.pwrc", step);
    return out_dir + "/checkpoints/" + buf;
}

inline void append_csv_row(std::ostream& os, int step, const LossReport& r) {
    os << step << ',' << format_sig6(r.vis_pw_bi) << ',' << format_sig6(r.pwarp_sup) << ','
       << format_sig6(r.pneg) << ',' << format_sig6(r.kp) << ',' << format_sig6(r.lambda_psup)
       << ',' << format_sig6(r.lambda_pneg) << ',' << format_sig6(r.lambda_kp) << ','
       << format_sig6(r.total) << '\n';
}

inline constexpr const char* kTrainCsvHeader =
    "step,vis_pw_bi,pwarp_sup,pneg,kp,lambda_psup,lambda_pneg,lambda_kp,total";

struct TrainLoopResult {
    int final_step = 0;
    std::string final_checkpoint;
};

// Runs (or resumes) the optimization, writing logs/train.csv and periodic
// checkpoints under out_dir. Resume restarts from the newest checkpoint and
// reproduces the uninterrupted byte stream because every step draws from
// counters keyed by (seed, step).
inline TrainLoopResult train_loop(const std::string& data_dir, const std::string& out_dir,
                                  const TrainConfig& cfg, const WarpConfig& wcfg,
                                  bool resume = false) {
    cfg.validate();
    wcfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir + "/checkpoints", ec);
    fs::create_directories(out_dir + "/logs", ec);
    if (ec) throw std::runtime_error("cannot create experiment directory " + out_dir);

    PairStore store(data_dir);
    Encoder<float> enc =
        make_encoder<float>(cfg.d, cfg.use_bin, static_cast<float>(cfg.z_init), cfg.seed);
    Adam<float> adam = Adam<float>::make(enc, cfg);

    int start_step = 0;
    std::string csv_path = out_dir + "/logs/train.csv";
    std::vector<std::string> kept_rows;
    if (resume) {
        int best = -1;
        for (const auto& entry : fs::directory_iterator(out_dir + "/checkpoints")) {
            std::string name = entry.path().filename().string();
            int step = -1;
            if (std::sscanf(name.c_str(), "step_%d.pwrc", &step) == 1 && step > best &&
                step <= cfg.steps)
                best = step;
        }
        if (best < 0) throw std::runtime_error("resume requested but no checkpoint in " + out_dir);
        start_step = static_cast<int>(load_checkpoint(checkpoint_path(out_dir, best), enc, adam));
        std::ifstream old(csv_path);
        std::string line;
        bool first = true;
        while (std::getline(old, line)) {
            if (first) {
                first = false;
                continue;
            }
            int step = 0;
            if (std::sscanf(line.c_str(), "%d,", &step) == 1 && step <= start_step)
                kept_rows.push_back(line);
        }
    } else {
        save_checkpoint(checkpoint_path(out_dir, 0), enc, adam, 0);
    }

    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << kTrainCsvHeader << '\n';
    for (const std::string& row : kept_rows) csv << row << '\n';

    TrainLoopResult result;
    for (int step = start_step; step < cfg.steps; ++step) {
        StepBatch batch = make_step_batch(store, cfg, wcfg, step);
        LossReport rep = train_step(enc, adam, batch, cfg);
        int done = step + 1;
        append_csv_row(csv, done, rep);
        if (done % cfg.checkpoint_every == 0 || done == cfg.steps)
            save_checkpoint(checkpoint_path(out_dir, done), enc, adam,
                            static_cast<std::uint64_t>(done));
    }
    csv.flush();
    if (!csv) throw std::runtime_error("write failed for " + csv_path);
    result.final_step = cfg.steps;
    result.final_checkpoint = checkpoint_path(out_dir, cfg.steps);
    return result;
}

}  // namespace pwc
