#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "nappure/pipeline.hpp"
#include "nappure/serialize.hpp"
#include "nappure/tensor_io.hpp"

using namespace nappure;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "nappure_pipeline_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

// Order-independent digest of every regular file under root, excluding
// timing.json (wall clock is not reproducible).
std::uint64_t tree_digest(const std::string& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().filename() == "timing.json") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), root).string()] =
            std::string((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, blob] : files) {
        for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
        for (unsigned char c : blob) h = (h ^ c) * 0x100000001b3ULL;
    }
    return h;
}

// Small configuration for unit-scale runs.
ExperimentConfig tiny_config() {
    ExperimentConfig cfg = default_experiment();
    cfg.dataset.train_per_class = 12;
    cfg.dataset.eval_per_class = 4;
    cfg.dataset.val_per_class = 4;
    cfg.classifier.epochs = 60;
    cfg.threads = 2;

    std::vector<NamedAttack> attacks;
    for (auto& attack : cfg.attacks) {
        if (attack.name != "conv" && attack.name != "additive") continue;
        attack.config.steps = 8;
        attacks.push_back(attack);
    }
    cfg.attacks = attacks;

    for (auto& defense : cfg.defenses) {
        if (defense.mode == DefenseMode::lm) defense.lm_config.iterations = 6;
        if (defense.fixed) defense.fixed->config.iterations = 6;
        for (auto& [name, preset] : defense.per_attack) preset.config.iterations = 6;
    }
    return cfg;
}

}  // namespace

TEST_CASE("gen_dataset writes exact means at zero variance") {
    DatasetConfig dc;
    dc.shape = TensorShape{1, 3, 3};
    dc.classes = 2;
    GmmPrior prior;
    prior.weights = {0.5, 0.5};
    prior.means = {FlatVector(9, 0.25), FlatVector(9, 0.75)};
    prior.s_data = 1e-12;

    const std::string dir = fresh_dir("zero_var");
    const DatasetManifest manifest = gen_dataset(prior, 1, dc.shape, 3, dir, "eval");
    REQUIRE(manifest.entries.size() == 2);
    for (int k = 0; k < 2; ++k) {
        const ImageTensor img = read_tensor(dir + "/" + manifest.entries[k].file);
        for (double v : img.data)
            CHECK(v == doctest::Approx(k == 0 ? 0.25 : 0.75).epsilon(1e-9));
    }
}

TEST_CASE("gen_dataset balances labels and repeats byte-identically") {
    DatasetConfig dc;
    GmmPrior prior = make_prior(dc);
    const std::string dir_a = fresh_dir("gen_a");
    const std::string dir_b = fresh_dir("gen_b");
    const DatasetManifest a = gen_dataset(prior, 128, dc.shape, 7, dir_a, "eval");
    const DatasetManifest b = gen_dataset(prior, 128, dc.shape, 7, dir_b, "eval");
    CHECK(a.entries.size() == 384);
    std::map<int, int> counts;
    for (const auto& e : a.entries) counts[e.label]++;
    for (const auto& [label, count] : counts) {
        (void)label;
        CHECK(count == 128);
    }
    CHECK(tree_digest(dir_a) == tree_digest(dir_b));

    GmmPrior wrong = prior;
    wrong.weights = {0.5, 0.5};
    wrong.means = {prior.means[0], prior.means[1]};
    CHECK_THROWS_AS(gen_dataset(wrong, 1, TensorShape{1, 9, 9}, 7, dir_a, "eval"),
                    std::invalid_argument);
}

TEST_CASE("gen_dataset rejects unwritable directories") {
    DatasetConfig dc;
    GmmPrior prior = make_prior(dc);
    const std::string file_path = fresh_dir("blocker") + "/occupied";
    write_text_file(file_path, "not a directory");
    CHECK_THROWS_AS(gen_dataset(prior, 1, dc.shape, 1, file_path, "eval"),
                    std::runtime_error);
}

TEST_CASE("generated means respect the distance target") {
    DatasetConfig dc;
    const GmmPrior prior = make_prior(dc);
    double dmin = 1e300;
    for (std::size_t a = 0; a < prior.means.size(); ++a)
        for (std::size_t b = a + 1; b < prior.means.size(); ++b)
            dmin = std::min(dmin, std::sqrt(norm2_squared(prior.means[a] - prior.means[b])));
    CHECK(dmin == doctest::Approx(dc.mean_distance).epsilon(1e-9));
    for (const auto& mu : prior.means)
        for (double v : mu.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
}

TEST_CASE("manifest json round-trips") {
    DatasetConfig dc;
    GmmPrior prior = make_prior(dc);
    const std::string dir = fresh_dir("manifest");
    const DatasetManifest manifest = gen_dataset(prior, 2, dc.shape, 5, dir, "train");
    const DatasetManifest back =
        manifest_from_json(read_text_file(dir + "/manifest.json"), dir);
    CHECK(back.classes == manifest.classes);
    CHECK(back.shape == manifest.shape);
    REQUIRE(back.entries.size() == manifest.entries.size());
    CHECK(back.entries[0].file == manifest.entries[0].file);
    CHECK(back.entries[0].split == "train");
    const LabeledDataset loaded = load_dataset(back, "train");
    CHECK(loaded.size() == manifest.entries.size());
    CHECK(load_dataset(back, "eval").size() == 0);
}

TEST_CASE("zero-attack pipeline reports clean accuracy only") {
    ExperimentConfig cfg = tiny_config();
    cfg.attacks.clear();
    const std::string dir = fresh_dir("no_attacks");
    const RunReport report = run_pipeline(cfg, dir);
    CHECK(report.rows.empty());
    CHECK(report.clean_accuracy > 0.0);
    CHECK(report.n_eval == 12);
}

TEST_CASE("report accuracies recompute from persisted tensors") {
    ExperimentConfig cfg = tiny_config();
    const std::string dir = fresh_dir("consistency");
    const RunReport report = run_pipeline(cfg, dir);

    const SoftmaxClassifier clf = classifier_from_json(read_text_file(dir + "/classifier.json"));
    const DatasetManifest eval_manifest =
        manifest_from_json(read_text_file(dir + "/data/eval/manifest.json"), dir + "/data/eval");
    const LabeledDataset eval = load_dataset(eval_manifest, "eval");

    auto load_dir = [&](const std::string& sub) {
        std::vector<ImageTensor> images;
        for (std::size_t i = 0; i < eval.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "img_%04zu.napt", i);
            images.push_back(read_tensor(dir + "/" + sub + "/" + name));
        }
        return images;
    };

    for (const auto& row : report.rows) {
        if (row.defense == "none") {
            const auto adv = load_dir("attacks/" + row.attack);
            CHECK(evaluate(clf, adv, eval.labels) == row.robust_accuracy);
        } else {
            const auto purified = load_dir("purified/" + row.attack + "_" + row.defense);
            CHECK(evaluate(clf, purified, eval.labels) == row.robust_accuracy);
        }
    }
}

TEST_CASE("lm row coincides with zero-weight additive nappure") {
    ExperimentConfig cfg = tiny_config();
    for (auto& attack : cfg.attacks)
        if (attack.name == "conv") cfg.attacks = {attack};
    DefenseConfig lm;
    lm.name = "lm";
    lm.mode = DefenseMode::lm;
    lm.lm_config.iterations = 10;
    DefenseConfig zero;
    zero.name = "nappure-zero";
    zero.mode = DefenseMode::nappure;
    PurifyPreset preset;
    preset.spec = additive_spec();
    preset.config.lambda1 = 0.0;
    preset.config.lambda2 = 0.0;
    preset.config.iterations = 10;
    zero.fixed = preset;
    cfg.defenses = {lm, zero};

    const std::string dir = fresh_dir("degenerate");
    const RunReport report = run_pipeline(cfg, dir);
    const ReportRow* lm_row = report.find("conv", "lm");
    const ReportRow* zero_row = report.find("conv", "nappure-zero");
    REQUIRE(lm_row);
    REQUIRE(zero_row);
    CHECK(lm_row->robust_accuracy == zero_row->robust_accuracy);
    CHECK(lm_row->clean_accuracy == zero_row->clean_accuracy);
}

TEST_CASE("worker count never changes results") {
    ExperimentConfig cfg = tiny_config();
    cfg.threads = 1;
    const std::string dir_a = fresh_dir("threads_one");
    const RunReport a = run_pipeline(cfg, dir_a);
    cfg.threads = 4;
    const std::string dir_b = fresh_dir("threads_four");
    const RunReport b = run_pipeline(cfg, dir_b);
    CHECK(to_json(a) == to_json(b));
    CHECK(tree_digest(dir_a) == tree_digest(dir_b));
}

TEST_CASE("paper-32 preset builds a valid 3x32x32 experiment") {
    const ExperimentConfig cfg = paper32_experiment();
    CHECK(cfg.dataset.shape == TensorShape{3, 32, 32});
    REQUIRE(cfg.attacks.size() == 5);
    for (const auto& attack : cfg.attacks) {
        attack.config.validate(cfg.dataset.shape);
        if (attack.name == "conv") CHECK(attack.config.spec.kernel_size == 5);
        if (attack.name == "patch") CHECK(attack.config.constraint.patch_size == 7);
        if (attack.name == "flow") {
            CHECK(attack.config.constraint.radius == 1.2);
            CHECK(attack.config.smooth_kernel == 9);
            CHECK(attack.config.smooth_stddev == 1.5);
        }
    }
    const ExperimentConfig back = experiment_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));

    const GmmPrior prior = make_prior(cfg.dataset);
    CHECK(prior.dim() == 3 * 32 * 32);
}

TEST_CASE("pipeline is byte-reproducible") {
    ExperimentConfig cfg = tiny_config();
    const std::string dir_a = fresh_dir("repro_a");
    const std::string dir_b = fresh_dir("repro_b");
    const RunReport a = run_pipeline(cfg, dir_a);
    const RunReport b = run_pipeline(cfg, dir_b);
    CHECK(to_json(a) == to_json(b));
    CHECK(tree_digest(dir_a) == tree_digest(dir_b));

    ExperimentConfig other = cfg;
    other.seed = cfg.seed + 1;
    const std::string dir_c = fresh_dir("repro_c");
    run_pipeline(other, dir_c);
    CHECK(tree_digest(dir_a) != tree_digest(dir_c));
}

TEST_CASE("grid search returns the single cell and handles tables") {
    ExperimentConfig cfg = tiny_config();
    const std::string dir = fresh_dir("grid_one");
    const GridResult one = grid_search(cfg, "conv", {0.01}, {3.0}, dir);
    REQUIRE(one.table.size() == 1);
    CHECK(one.best.lambda1 == 0.01);
    CHECK(one.best.lambda2 == 3.0);

    const GridResult nine = grid_search(cfg, "conv", {0.001, 0.01, 0.1}, {1, 5, 10},
                                        fresh_dir("grid_nine"));
    CHECK(nine.table.size() == 9);
    for (const auto& cell : nine.table) {
        CHECK(cell.accuracy >= 0.0);
        CHECK(cell.accuracy <= 1.0);
    }
    CHECK(fs::exists(fs::path(dir) / "grid.csv"));

    CHECK_THROWS_AS(grid_search(cfg, "conv", {}, {1.0}, fresh_dir("grid_err")),
                    std::invalid_argument);
    CHECK_THROWS_AS(grid_search(cfg, "nosuch", {0.1}, {1.0}, fresh_dir("grid_err2")),
                    std::invalid_argument);
}

TEST_CASE("iteration sweep") {
    ExperimentConfig cfg = tiny_config();
    const std::string dir = fresh_dir("sweep");
    const auto rows = iteration_sweep(cfg, "conv", {0, 6}, dir);
    REQUIRE(rows.size() == 2);

    // T = 0 leaves the attacked images untouched.
    const RunReport report = run_pipeline(cfg, fresh_dir("sweep_ref"));
    const ReportRow* none_row = report.find("conv", "none");
    REQUIRE(none_row);
    CHECK(rows[0].robust_accuracy == none_row->robust_accuracy);

    const auto again = iteration_sweep(cfg, "conv", {0, 6}, fresh_dir("sweep_again"));
    for (std::size_t i = 0; i < rows.size(); ++i)
        CHECK(rows[i].robust_accuracy == again[i].robust_accuracy);
    CHECK_THROWS_AS(iteration_sweep(cfg, "conv", {}, dir), std::invalid_argument);
}

TEST_CASE("mismatch evaluation") {
    ExperimentConfig cfg = tiny_config();

    // Defense preset identical to the benchmark conv defense.
    PurifyPreset defense;
    defense.spec = conv_spec(3);
    defense.config.lambda1 = 0.001;
    defense.config.lambda2 = 3.0;
    defense.config.iterations = 6;

    NamedAttack same;
    same.name = "conv";  // same stream key as the benchmark row
    for (const auto& attack : cfg.attacks)
        if (attack.name == "conv") same.config = attack.config;

    const auto rows = mismatch_eval(cfg, defense, {same}, fresh_dir("mismatch"));
    REQUIRE(rows.size() == 1);

    const RunReport report = run_pipeline(cfg, fresh_dir("mismatch_ref"));
    const ReportRow* nappure_row = report.find("conv", "nappure");
    REQUIRE(nappure_row);
    CHECK(rows[0].robust_accuracy == nappure_row->robust_accuracy);

    const auto empty = mismatch_eval(cfg, defense, {}, fresh_dir("mismatch_empty"));
    CHECK(empty.empty());

    NamedAttack bad;
    bad.name = "flow";
    bad.config.spec = flow_spec();
    bad.config.constraint.radius = 0.5;
    CHECK_THROWS_AS(mismatch_eval(cfg, defense, {bad}, fresh_dir("mismatch_bad")),
                    std::invalid_argument);
}

TEST_CASE("mismatched smaller attack kernels stay purifiable") {
    // Benchmark-scale check: against a fixed 5x5 defense, the 3x3 attack must
    // purify at least as well as the 5x5 attack, up to a 0.05 margin.
    ExperimentConfig cfg = default_experiment();
    cfg.attacks.clear();
    cfg.defenses.clear();

    PurifyPreset defense;
    defense.spec = conv_spec(5);
    defense.config.lambda1 = 0.001;
    defense.config.lambda2 = 3.0;
    defense.config.iterations = 500;

    NamedAttack small;
    small.name = "conv";
    small.config.spec = conv_spec(3);
    small.config.constraint.radius = 0.025;
    small.config.step_size = 0.0025;
    NamedAttack large = small;
    large.name = "conv5";
    large.config.spec = conv_spec(5);

    const auto rows = mismatch_eval(cfg, defense, {small, large}, fresh_dir("mismatch_full"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].robust_accuracy >= rows[1].robust_accuracy - 0.05);
}

TEST_CASE("experiment json round-trips") {
    const ExperimentConfig cfg = default_experiment();
    const std::string dumped = to_json(cfg);
    const ExperimentConfig back = experiment_from_json(dumped);
    CHECK(to_json(back) == dumped);
    CHECK(config_hash(back) == config_hash(cfg));

    ExperimentConfig other = cfg;
    other.dataset.mean_seed += 1;
    CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("purify and attack config json round-trips") {
    const ExperimentConfig cfg = default_experiment();
    for (const auto& attack : cfg.attacks) {
        const std::string dumped = to_json(attack.config);
        const AttackConfig back = attack_config_from_json(dumped);
        CHECK(to_json(back) == dumped);
    }
    PurifyConfig pc;
    pc.lambda1 = 0.25;
    pc.stop_gradient = true;
    const PurifyConfig pback = purify_config_from_json(to_json(pc));
    CHECK(pback.lambda1 == 0.25);
    CHECK(pback.stop_gradient);
    const TransformSpec spec = transform_spec_from_json(R"({"kind":"patch","s_max":7})");
    CHECK(spec.patch_max_size == 7);
    CHECK(spec.patch_tau == 0.5);
    CHECK(transform_spec_from_json(R"({"kind":"flow"})").kind == TransformKind::flow);
}

TEST_CASE("prior json with inline and file means") {
    DatasetConfig dc;
    const GmmPrior prior = make_prior(dc);
    const GmmPrior back = gmm_prior_from_json(to_json(prior));
    CHECK(back.component_count() == prior.component_count());
    CHECK(back.means[0].data == prior.means[0].data);

    const std::string dir = fresh_dir("prior_files");
    write_tensor(dir + "/mean0.napt", from_flat(dc.shape, prior.means[0]));
    write_tensor(dir + "/mean1.napt", from_flat(dc.shape, prior.means[1]));
    write_tensor(dir + "/mean2.napt", from_flat(dc.shape, prior.means[2]));
    const std::string json = R"({"weights":[0.5,0.25,0.25],)"
                             R"("means":["mean0.napt","mean1.napt","mean2.napt"],)"
                             R"("s_data":0.05})";
    const GmmPrior from_files = gmm_prior_from_json(json, dir);
    CHECK(from_files.component_count() == 3);
    // File payloads are f32; compare at that precision.
    for (std::size_t i = 0; i < from_files.means[0].size(); ++i)
        CHECK(from_files.means[0][i] ==
              doctest::Approx(prior.means[0][i]).epsilon(1e-6));
}
