#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pwc/cli.hpp"
#include "pwc/config.hpp"

using pwc::ExperimentConfig;

namespace {

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    REQUIRE(out.good());
    out << text;
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "pwc");
    std::vector<char*> argv;
    for (std::string& a : args) argv.push_back(a.data());
    return pwc::cli_main(static_cast<int>(argv.size()), argv.data());
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("default config resolves to the weak recipe", "[config]") {
    ExperimentConfig cfg = pwc::resolve_config({});
    CHECK(cfg.n_pos == 286);
    CHECK(cfg.n_neg == 286);
    CHECK(cfg.n_classes == 4);
    CHECK(cfg.image_size == 64);
    CHECK(cfg.train.objective == pwc::Objective::weak);
    CHECK(cfg.train.use_bin);
    CHECK(cfg.train.d == 16);
    CHECK(cfg.train.steps == 2000);
    CHECK(cfg.train.batch_size == 4);
    CHECK(cfg.train.crop_size == 56);
    CHECK(cfg.train.lr == 1e-3);
    CHECK(cfg.train.temperature == 0.02);
    CHECK(cfg.warp.resize_size == 64);
    CHECK(cfg.warp.crop_size == 56);
    CHECK(cfg.pck.alphas == std::vector<double>{0.05, 0.10, 0.15});
    CHECK(cfg.pck.reference == pwc::PckReference::image);
    CHECK(cfg.extractor == pwc::Extractor::argmax);
}

TEST_CASE("config text lands in the right fields", "[config]") {
    std::string text =
        "# toy experiment\n"
        "[dataset]\n"
        "n_pos = 6\n"
        "n_neg = 4\n"
        "\n"
        "[warp]\n"
        "sigma_h = 0.2\n"
        "p_flip = 0\n"
        "\n"
        "[train]\n"
        "steps = 12\n"
        "objective = strong\n"
        "d = 8\n"
        "crop_size = 32\n"
        "seed = 7\n"
        "temperature = 0.5\n"
        "kp_loss = epe\n"
        "\n"
        "[eval]\n"
        "alphas = 0.05, 0.2\n"
        "reference = bbox\n"
        "extractor = soft_argmax\n";
    ExperimentConfig cfg = pwc::parse_config(text);
    CHECK(cfg.n_pos == 6);
    CHECK(cfg.n_neg == 4);
    CHECK(cfg.warp.sigma_h == 0.2);
    CHECK(cfg.warp.p_flip == 0.0);
    CHECK(cfg.train.steps == 12);
    CHECK(cfg.train.objective == pwc::Objective::strong);
    CHECK_FALSE(cfg.train.use_bin);  // aligned to the objective
    CHECK(cfg.train.d == 8);
    CHECK(cfg.train.crop_size == 32);
    CHECK(cfg.train.seed == 7);
    CHECK(cfg.train.temperature == 0.5);
    CHECK(cfg.train.kp_loss == pwc::KeypointLossKind::epe);
    CHECK(cfg.warp.resize_size == 64);
    CHECK(cfg.warp.crop_size == 32);
    CHECK(cfg.pck.alphas == std::vector<double>{0.05, 0.2});
    CHECK(cfg.pck.reference == pwc::PckReference::bbox);
    CHECK(cfg.extractor == pwc::Extractor::soft_argmax);
}

TEST_CASE("parse errors name the key and the line", "[config]") {
    using Catch::Matchers::ContainsSubstring;
    CHECK_THROWS_MATCHES(pwc::parse_config("[dataset]\nn_pso = 3\n"), std::invalid_argument,
                         Catch::Matchers::MessageMatches(ContainsSubstring("n_pso") &&
                                                         ContainsSubstring("line 2")));
    CHECK_THROWS_MATCHES(pwc::parse_config("[extra]\n"), std::invalid_argument,
                         Catch::Matchers::MessageMatches(ContainsSubstring("extra")));
    CHECK_THROWS_MATCHES(pwc::parse_config("steps = 3\n"), std::invalid_argument,
                         Catch::Matchers::MessageMatches(ContainsSubstring("outside")));
    CHECK_THROWS_MATCHES(pwc::parse_config("[train]\nlr = fast\n"), std::invalid_argument,
                         Catch::Matchers::MessageMatches(ContainsSubstring("train.lr")));
    CHECK_THROWS_AS(pwc::parse_config("[train\nlr = 0.1\n"), std::invalid_argument);
    CHECK_THROWS_AS(pwc::parse_config("[train]\nno equals sign\n"), std::invalid_argument);
    CHECK_THROWS_AS(pwc::parse_config("[train]\nsteps = 0\n"), std::invalid_argument);
    // pinning the bin against the objective's policy is rejected at resolve time
    CHECK_THROWS_AS(pwc::parse_config("[train]\nobjective = strong\nuse_bin = 1\n"),
                    std::invalid_argument);
}

TEST_CASE("objective override follows the bin policy", "[config]") {
    ExperimentConfig cfg = pwc::parse_config("", "min_entropy");
    CHECK(cfg.train.objective == pwc::Objective::min_entropy);
    CHECK_FALSE(cfg.train.use_bin);
    cfg = pwc::parse_config("[train]\nobjective = strong\n", "weak");
    CHECK(cfg.train.objective == pwc::Objective::weak);
    CHECK(cfg.train.use_bin);
    CHECK_THROWS_AS(pwc::parse_config("[train]\nuse_bin = 0\n", "weak"), std::invalid_argument);
}

TEST_CASE("echo round trips byte for byte", "[config]") {
    ExperimentConfig cfg = pwc::resolve_config({});
    std::string echo = pwc::config_echo(cfg);
    CHECK(echo.find("[train]\n") != std::string::npos);
    CHECK(echo.find("objective = weak\n") != std::string::npos);
    CHECK(echo.find("use_bin = 1\n") != std::string::npos);
    CHECK(pwc::config_echo(pwc::parse_config(echo)) == echo);

    // values whose shortest decimal form is long still survive the trip
    std::string text =
        "[warp]\n"
        "affine_angle_range = 0.26179938779914941\n"
        "[train]\n"
        "lr = 0.1\n"
        "gamma = 0.35\n"
        "[eval]\n"
        "alphas = 0.07, 0.33\n";
    ExperimentConfig odd = pwc::parse_config(text);
    std::string echo2 = pwc::config_echo(odd);
    ExperimentConfig back = pwc::parse_config(echo2);
    CHECK(back.warp.affine_angle_range == odd.warp.affine_angle_range);
    CHECK(back.train.lr == 0.1);
    CHECK(back.pck.alphas == odd.pck.alphas);
    CHECK(pwc::config_echo(back) == echo2);
}

TEST_CASE("gradcheck suite stays within its limits", "[cli][gradcheck]") {
    std::vector<pwc::GradcheckLine> lines = pwc::gradcheck_suite(0);
    REQUIRE(lines.size() == 14);
    bool saw_weak = false, saw_strong = false;
    for (const pwc::GradcheckLine& l : lines) {
        INFO(l.name << " max_err " << l.max_err << " limit " << l.limit);
        CHECK(l.ok());
        saw_weak = saw_weak || l.name == "weak_total";
        saw_strong = saw_strong || l.name == "strong_total";
    }
    CHECK(saw_weak);
    CHECK(saw_strong);
}

TEST_CASE("cli drives the pipeline end to end", "[cli]") {
    namespace fs = std::filesystem;
    fs::remove_all("cli_pipe");
    fs::create_directories("cli_pipe");
    std::string cfg_path = "cli_pipe/exp.cfg";
    spit(cfg_path,
         "[dataset]\n"
         "n_pos = 6\n"
         "n_neg = 4\n"
         "[train]\n"
         "steps = 2\n"
         "checkpoint_every = 1\n"
         "batch_size = 1\n"
         "d = 4\n"
         "seed = 9\n"
         "[eval]\n"
         "alphas = 0.05, 0.1, 0.15\n");

    SECTION("dataset, training and eval artifacts") {
        REQUIRE(run_cli({"make_dataset", "--config", cfg_path, "--out", "cli_pipe/data",
                         "--seed", "3"}) == 0);
        REQUIRE(fs::exists("cli_pipe/data/manifest.jsonl"));
        CHECK(count_lines(slurp("cli_pipe/data/manifest.jsonl")) == 10);

        REQUIRE(run_cli({"train", "--config", cfg_path, "--data", "cli_pipe/data", "--out",
                         "cli_pipe/run"}) == 0);
        REQUIRE(fs::exists("cli_pipe/run/config.echo"));
        CHECK(slurp("cli_pipe/run/config.echo") ==
              pwc::config_echo(pwc::parse_config(slurp(cfg_path))));
        std::string csv = slurp("cli_pipe/run/logs/train.csv");
        CHECK(csv.rfind(pwc::kTrainCsvHeader, 0) == 0);
        CHECK(count_lines(csv) == 3);
        REQUIRE(fs::exists("cli_pipe/run/checkpoints/step_000000.pwrc"));
        REQUIRE(fs::exists("cli_pipe/run/checkpoints/step_000002.pwrc"));
        std::string ckpt = slurp("cli_pipe/run/checkpoints/step_000002.pwrc");

        // identical flags reproduce identical bytes
        REQUIRE(run_cli({"train", "--config", cfg_path, "--data", "cli_pipe/data", "--out",
                         "cli_pipe/run"}) == 0);
        CHECK(slurp("cli_pipe/run/logs/train.csv") == csv);
        CHECK(slurp("cli_pipe/run/checkpoints/step_000002.pwrc") == ckpt);

        // resuming a finished run adds nothing
        REQUIRE(run_cli({"train", "--config", cfg_path, "--data", "cli_pipe/data", "--out",
                         "cli_pipe/run", "--resume"}) == 0);
        CHECK(slurp("cli_pipe/run/logs/train.csv") == csv);
        CHECK(slurp("cli_pipe/run/checkpoints/step_000002.pwrc") == ckpt);

        REQUIRE(run_cli({"eval", "--config", cfg_path, "--checkpoint",
                         "cli_pipe/run/checkpoints/step_000002.pwrc", "--data", "cli_pipe/data",
                         "--split", "test", "--out", "cli_pipe/run"}) == 0);
        std::string metrics = slurp("cli_pipe/run/eval/metrics.csv");
        CHECK(metrics.rfind(pwc::kMetricsCsvHeader, 0) == 0);
        CHECK(metrics.find("dense_transfer_pck,0.05,image") != std::string::npos);
        CHECK(metrics.find("dense_transfer_pck,0.1,image") != std::string::npos);
        CHECK(metrics.find("dense_transfer_pck,0.15,image") != std::string::npos);
        CHECK(metrics.find("dense_transfer_pck,0.1,bbox") != std::string::npos);
        CHECK(metrics.find("mean_null_prob_neg") != std::string::npos);
        std::string svg = slurp("cli_pipe/run/eval/curves.svg");
        CHECK(svg.rfind("<?xml", 0) == 0);

        REQUIRE(run_cli({"eval", "--config", cfg_path, "--checkpoint",
                         "cli_pipe/run/checkpoints/step_000002.pwrc", "--data", "cli_pipe/data",
                         "--split", "test", "--out", "cli_pipe/run"}) == 0);
        CHECK(slurp("cli_pipe/run/eval/metrics.csv") == metrics);

        // the override switches objective and drops the bin; eval sniffs the
        // parameter layout from the checkpoint rather than trusting the config
        REQUIRE(run_cli({"train", "--config", cfg_path, "--data", "cli_pipe/data", "--out",
                         "cli_pipe/run_bi", "--objective", "pw_bipath_only"}) == 0);
        std::string echo_bi = slurp("cli_pipe/run_bi/config.echo");
        CHECK(echo_bi.find("objective = pw_bipath_only\n") != std::string::npos);
        CHECK(echo_bi.find("use_bin = 0\n") != std::string::npos);
        CHECK_FALSE(pwc::checkpoint_uses_bin("cli_pipe/run_bi/checkpoints/step_000002.pwrc"));
        CHECK(pwc::checkpoint_uses_bin("cli_pipe/run/checkpoints/step_000002.pwrc"));
        REQUIRE(run_cli({"eval", "--config", cfg_path, "--checkpoint",
                         "cli_pipe/run_bi/checkpoints/step_000002.pwrc", "--data",
                         "cli_pipe/data", "--split", "test", "--out", "cli_pipe/run_bi"}) == 0);
        std::string metrics_bi = slurp("cli_pipe/run_bi/eval/metrics.csv");
        CHECK(metrics_bi.find("dense_transfer_pck") != std::string::npos);
        CHECK(metrics_bi.find("mean_null_prob_neg") == std::string::npos);
    }

    SECTION("warp previews") {
        REQUIRE(run_cli({"sample_warps", "--config", cfg_path, "--n", "2", "--out",
                         "cli_pipe/warps"}) == 0);
        REQUIRE(fs::exists("cli_pipe/warps/warp_000.pwim"));
        REQUIRE(fs::exists("cli_pipe/warps/warp_001.pwim"));
        REQUIRE(fs::exists("cli_pipe/warps/sample_001.ppm"));
        CHECK(slurp("cli_pipe/warps/sample_000.ppm").rfind("P6\n128 64\n255\n", 0) == 0);
    }

    SECTION("gradcheck command") {
        REQUIRE(run_cli({"gradcheck", "--seed", "1"}) == 0);
    }

    SECTION("exit codes") {
        CHECK(run_cli({"train", "--nope"}) == 1);
        CHECK(run_cli({"no_such_command"}) == 1);
        CHECK(run_cli({"train", "--data", "cli_pipe/data"}) == 1);  // --out missing
        spit("cli_pipe/bad.cfg", "[train]\nlearning_rate = 0.1\n");
        CHECK(run_cli({"make_dataset", "--config", "cli_pipe/bad.cfg", "--out",
                       "cli_pipe/x"}) == 1);
        CHECK(run_cli({"train", "--config", cfg_path, "--data", "cli_pipe/missing", "--out",
                       "cli_pipe/y"}) == 2);
        CHECK(run_cli({"eval", "--config", cfg_path, "--checkpoint", "cli_pipe/nope.pwrc",
                       "--data", "cli_pipe/missing", "--split", "test", "--out",
                       "cli_pipe/z"}) == 2);
        CHECK(run_cli({"--help"}) == 0);
    }

    SECTION("PWCONFIG environment fallback") {
        REQUIRE(setenv("PWCONFIG", cfg_path.c_str(), 1) == 0);
        REQUIRE(run_cli({"make_dataset", "--out", "cli_pipe/data_env", "--seed", "3"}) == 0);
        REQUIRE(run_cli({"make_dataset", "--config", cfg_path, "--out", "cli_pipe/data_cfg",
                         "--seed", "3"}) == 0);
        CHECK(slurp("cli_pipe/data_env/manifest.jsonl") ==
              slurp("cli_pipe/data_cfg/manifest.jsonl"));
        // an explicit flag beats a broken environment value
        spit("cli_pipe/bad.cfg", "[train]\nlearning_rate = 0.1\n");
        REQUIRE(setenv("PWCONFIG", "cli_pipe/bad.cfg", 1) == 0);
        CHECK(run_cli({"make_dataset", "--out", "cli_pipe/data_bad", "--seed", "3"}) == 1);
        CHECK(run_cli({"make_dataset", "--config", cfg_path, "--out", "cli_pipe/data_flag",
                       "--seed", "3"}) == 0);
        REQUIRE(unsetenv("PWCONFIG") == 0);
    }
}
