#pragma once

// Plain-text experiment configuration: `key = value` lines grouped by
// [section] headers, resolved against built-in defaults. Unknown sections or
// keys are hard errors so typos cannot silently fall back to defaults.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pwc/evalkit.hpp"
#include "pwc/model.hpp"
#include "pwc/synthdata.hpp"
#include "pwc/warp.hpp"

namespace pwc {

inline const char* kp_loss_name(KeypointLossKind k) {
    return k == KeypointLossKind::ce ? "ce" : "epe";
}

inline KeypointLossKind kp_loss_from_string(const std::string& s) {
    if (s == "ce") return KeypointLossKind::ce;
    if (s == "epe") return KeypointLossKind::epe;
    throw std::invalid_argument("unknown kp_loss: " + s);
}

struct ExperimentConfig {
    int n_pos = 286, n_neg = 286;  // per-label pair counts before the split
    int n_classes = 4;
    int image_size = 64;
    WarpConfig warp;  // geometry knobs; sizes are derived, see resolve_config
    TrainConfig train;
    PckConfig pck;
    Extractor extractor = Extractor::argmax;

    SynthConfig synth() const {
        SynthConfig s;
        s.image_size = image_size;
        s.n_classes = n_classes;
        return s;
    }

    void validate() const {
        if (n_pos < 0 || n_neg < 0 || n_pos + n_neg < 1)
            throw std::invalid_argument("dataset: pair counts must be non-negative and not both zero");
        synth().validate();
        if (train.crop_size > image_size)
            throw std::invalid_argument("train: crop_size exceeds the dataset image_size");
        warp.validate();
        train.validate();
        pck.validate();
    }
};

namespace detail {

// shortest of %.6g and %.17g that parses back to the same value
inline std::string format_exact(double v) {
    std::string s = format_sig6(v);
    if (std::strtod(s.c_str(), nullptr) == v) return s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigDraft {
    ExperimentConfig cfg;
    bool use_bin_set = false;  // explicit use_bin wins over objective alignment
};

inline ConfigDraft parse_config_text(const std::string& text) {
    ConfigDraft draft;
    ExperimentConfig& c = draft.cfg;
    // the warp sampler defaults target large photos; our images are smaller
    c.warp.resize_size = c.image_size;
    c.warp.crop_size = c.train.crop_size;

    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    auto fail = [&](const std::string& what) -> std::invalid_argument {
        return std::invalid_argument("config: " + what + " (line " + std::to_string(line_no) + ")");
    };
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw fail("malformed section header");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section != "dataset" && section != "warp" && section != "train" &&
                section != "eval")
                throw fail("unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) throw fail("expected key = value");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw fail("empty key");
        if (section.empty()) throw fail("key '" + key + "' outside any [section]");

        auto bad_value = [&]() { return fail("invalid value for " + section + "." + key); };
        auto as_int = [&](int lo) {
            try {
                std::size_t used = 0;
                int v = std::stoi(value, &used);
                if (used != value.size() || v < lo) throw std::invalid_argument("");
                return v;
            } catch (...) {
                throw bad_value();
            }
        };
        auto as_u64 = [&]() {
            try {
                std::size_t used = 0;
                unsigned long long v = std::stoull(value, &used);
                if (used != value.size()) throw std::invalid_argument("");
                return static_cast<std::uint64_t>(v);
            } catch (...) {
                throw bad_value();
            }
        };
        auto as_double = [&]() {
            try {
                std::size_t used = 0;
                double v = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument("");
                return v;
            } catch (...) {
                throw bad_value();
            }
        };
        auto as_bool = [&]() {
            if (value == "0" || value == "false") return false;
            if (value == "1" || value == "true") return true;
            throw bad_value();
        };

        if (section == "dataset") {
            if (key == "n_pos") c.n_pos = as_int(0);
            else if (key == "n_neg") c.n_neg = as_int(0);
            else if (key == "n_classes") c.n_classes = as_int(2);
            else if (key == "image_size") c.image_size = as_int(16);
            else throw fail("unknown key '" + key + "' in [dataset]");
        } else if (section == "warp") {
            if (key == "sigma_h") c.warp.sigma_h = as_double();
            else if (key == "sigma_tps") c.warp.sigma_tps = as_double();
            else if (key == "affine_scale_range") c.warp.affine_scale_range = as_double();
            else if (key == "affine_translation_range") c.warp.affine_translation_range = as_double();
            else if (key == "affine_angle_range") c.warp.affine_angle_range = as_double();
            else if (key == "p_flip") c.warp.p_flip = as_double();
            else throw fail("unknown key '" + key + "' in [warp]");
        } else if (section == "train") {
            if (key == "lr") c.train.lr = as_double();
            else if (key == "beta1") c.train.beta1 = as_double();
            else if (key == "beta2") c.train.beta2 = as_double();
            else if (key == "eps") c.train.eps = as_double();
            else if (key == "batch_size") c.train.batch_size = as_int(1);
            else if (key == "steps") c.train.steps = as_int(1);
            else if (key == "objective") {
                try {
                    c.train.objective = objective_from_string(value);
                } catch (...) {
                    throw bad_value();
                }
            } else if (key == "gamma") c.train.gamma = as_double();
            else if (key == "temperature") c.train.temperature = as_double();
            else if (key == "p_neg") c.train.p_neg = as_double();
            else if (key == "z_init") c.train.z_init = as_double();
            else if (key == "use_bin") {
                c.train.use_bin = as_bool();
                draft.use_bin_set = true;
            } else if (key == "d") c.train.d = as_int(1);
            else if (key == "crop_size") c.train.crop_size = as_int(8);
            else if (key == "kp_loss") {
                try {
                    c.train.kp_loss = kp_loss_from_string(value);
                } catch (...) {
                    throw bad_value();
                }
            } else if (key == "seed") c.train.seed = as_u64();
            else if (key == "checkpoint_every") c.train.checkpoint_every = as_int(1);
            else throw fail("unknown key '" + key + "' in [train]");
        } else {  // eval
            if (key == "alphas") {
                std::vector<double> alphas;
                std::string item;
                std::istringstream list(value);
                while (std::getline(list, item, ',')) {
                    item = detail::trim(item);
                    if (item.empty()) throw bad_value();
                    try {
                        std::size_t used = 0;
                        alphas.push_back(std::stod(item, &used));
                        if (used != item.size()) throw std::invalid_argument("");
                    } catch (...) {
                        throw bad_value();
                    }
                }
                if (alphas.empty()) throw bad_value();
                c.pck.alphas = std::move(alphas);
            } else if (key == "reference") {
                try {
                    c.pck.reference = reference_from_string(value);
                } catch (...) {
                    throw bad_value();
                }
            } else if (key == "extractor") {
                try {
                    c.extractor = extractor_from_string(value);
                } catch (...) {
                    throw bad_value();
                }
            } else throw fail("unknown key '" + key + "' in [eval]");
        }
    }
    return draft;
}

inline ConfigDraft load_config_draft(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// Applies the objective override, lines the unmatched bin up with whatever
// the objective needs unless the file pinned it, derives the warp sampler
// sizes, and validates the result.
inline ExperimentConfig resolve_config(ConfigDraft draft,
                                       const std::string& objective_override = "") {
    ExperimentConfig& c = draft.cfg;
    if (!objective_override.empty())
        c.train.objective = objective_from_string(objective_override);
    if (!draft.use_bin_set) {
        if (c.train.needs_bin()) c.train.use_bin = true;
        else if (c.train.forbids_bin()) c.train.use_bin = false;
    }
    c.warp.resize_size = c.image_size;
    c.warp.crop_size = c.train.crop_size;
    c.validate();
    return c;
}

inline ExperimentConfig parse_config(const std::string& text,
                                     const std::string& objective_override = "") {
    return resolve_config(parse_config_text(text), objective_override);
}

inline std::string config_echo(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "[dataset]\n";
    os << "n_pos = " << c.n_pos << '\n';
    os << "n_neg = " << c.n_neg << '\n';
    os << "n_classes = " << c.n_classes << '\n';
    os << "image_size = " << c.image_size << '\n';
    os << '\n';
    os << "[warp]\n";
    os << "sigma_h = " << detail::format_exact(c.warp.sigma_h) << '\n';
    os << "sigma_tps = " << detail::format_exact(c.warp.sigma_tps) << '\n';
    os << "affine_scale_range = " << detail::format_exact(c.warp.affine_scale_range) << '\n';
    os << "affine_translation_range = " << detail::format_exact(c.warp.affine_translation_range)
       << '\n';
    os << "affine_angle_range = " << detail::format_exact(c.warp.affine_angle_range) << '\n';
    os << "p_flip = " << detail::format_exact(c.warp.p_flip) << '\n';
    os << '\n';
    os << "[train]\n";
    os << "lr = " << detail::format_exact(c.train.lr) << '\n';
    os << "beta1 = " << detail::format_exact(c.train.beta1) << '\n';
    os << "beta2 = " << detail::format_exact(c.train.beta2) << '\n';
    os << "eps = " << detail::format_exact(c.train.eps) << '\n';
    os << "batch_size = " << c.train.batch_size << '\n';
    os << "steps = " << c.train.steps << '\n';
    os << "objective = " << objective_name(c.train.objective) << '\n';
    os << "gamma = " << detail::format_exact(c.train.gamma) << '\n';
    os << "temperature = " << detail::format_exact(c.train.temperature) << '\n';
    os << "p_neg = " << detail::format_exact(c.train.p_neg) << '\n';
    os << "z_init = " << detail::format_exact(c.train.z_init) << '\n';
    os << "use_bin = " << (c.train.use_bin ? 1 : 0) << '\n';
    os << "d = " << c.train.d << '\n';
    os << "crop_size = " << c.train.crop_size << '\n';
    os << "kp_loss = " << kp_loss_name(c.train.kp_loss) << '\n';
    os << "seed = " << c.train.seed << '\n';
    os << "checkpoint_every = " << c.train.checkpoint_every << '\n';
    os << '\n';
    os << "[eval]\n";
    os << "alphas = ";
    for (std::size_t i = 0; i < c.pck.alphas.size(); ++i) {
        if (i) os << ", ";
        os << detail::format_exact(c.pck.alphas[i]);
    }
    os << '\n';
    os << "reference = " << reference_name(c.pck.reference) << '\n';
    os << "extractor = " << extractor_name(c.extractor) << '\n';
    return os.str();
}

}  // namespace pwc
