#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nappure/parallel.hpp"
#include "nappure/pipeline.hpp"
#include "nappure/serialize.hpp"
#include "nappure/tensor_io.hpp"

using namespace nappure;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const std::string& config_path, const std::string& preset,
                             std::uint64_t seed_override, bool have_seed) {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
        cfg = experiment_from_json(read_text_file(config_path));
    } else if (preset == "paper-32") {
        cfg = paper32_experiment();
    } else if (preset == "desk" || preset.empty()) {
        cfg = default_experiment();
    } else {
        throw std::runtime_error("unknown preset '" + preset + "' (desk, paper-32)");
    }
    if (have_seed) cfg.seed = seed_override;
    return cfg;
}

std::vector<double> parse_doubles(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        out.push_back(std::stod(csv.substr(pos, next - pos)));
        pos = next + 1;
    }
    return out;
}

std::vector<int> parse_ints(const std::string& csv) {
    std::vector<int> out;
    for (double v : parse_doubles(csv)) out.push_back(static_cast<int>(v));
    return out;
}

struct StageData {
    GmmPrior prior;
    SoftmaxClassifier classifier;
    LabeledDataset eval;
    double clean_accuracy = 0.0;
};

// gen + train for the stage subcommands, mirroring the run pipeline's
// seed streams.
StageData prepare_stage(const ExperimentConfig& cfg, const std::string& out_dir) {
    StageData data;
    data.prior = cfg.prior ? *cfg.prior : make_prior(cfg.dataset);
    const auto train_manifest =
        gen_dataset(data.prior, cfg.dataset.train_per_class, cfg.dataset.shape,
                    mix_seed(cfg.seed, "data-train"), out_dir + "/data/train", "train");
    const auto eval_manifest =
        gen_dataset(data.prior, cfg.dataset.eval_per_class, cfg.dataset.shape,
                    mix_seed(cfg.seed, "data-eval"), out_dir + "/data/eval", "eval");
    const LabeledDataset train = load_dataset(train_manifest, "train");
    data.eval = load_dataset(eval_manifest, "eval");
    data.classifier = train_classifier(train, cfg.classifier.epochs, cfg.classifier.lr,
                                       mix_seed(cfg.seed, "clf"))
                          .classifier;
    data.clean_accuracy = evaluate(data.classifier, data.eval.images, data.eval.labels);
    write_text_file(out_dir + "/classifier.json", to_json(data.classifier));
    return data;
}

std::vector<ImageTensor> attack_eval_split(const ExperimentConfig& cfg, const StageData& data,
                                           const NamedAttack& attack) {
    std::vector<ImageTensor> adv(data.eval.size());
    const std::uint64_t stage = mix_seed(cfg.seed, ("attack:" + attack.name).c_str());
    parallel_for(
        data.eval.size(),
        [&](std::size_t i) {
            SeededRng rng(derive_seed(stage, i));
            adv[i] = pgd_attack(data.eval.images[i], data.eval.labels[i], data.classifier,
                                attack.config, rng)
                         .x_adv;
        },
        cfg.threads);
    return adv;
}

void persist_images(const std::vector<ImageTensor>& images, const std::vector<int>& labels,
                    const TensorShape& shape, int classes, const std::string& dir,
                    const std::string& split) {
    fs::create_directories(dir);
    DatasetManifest manifest;
    manifest.root = dir;
    manifest.shape = shape;
    manifest.classes = classes;
    manifest.prior_ref = "derived";
    for (std::size_t i = 0; i < images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%04zu.napt", i);
        write_tensor(dir + "/" + name, images[i]);
        manifest.entries.push_back({name, labels[i], split});
    }
    write_text_file(dir + "/manifest.json", to_json(manifest));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial purification against non-additive perturbations"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "nappure_out";
    std::uint64_t seed = 0;
    bool have_seed = false;
    bool export_ppm_flag = false;
    std::string preset = "desk";
    app.add_option("--config", config_path, "Experiment JSON file (defaults built in)");
    app.add_option("--preset", preset, "Built-in configuration when --config is absent: "
                                       "desk (1x8x8) or paper-32 (3x32x32)");
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--seed", seed, "Run seed override")->each([&](const std::string&) {
        have_seed = true;
    });
    app.add_flag("--export-ppm", export_ppm_flag, "Write PGM/PPM strips of clean/adv/purified");
    int threads = 0;
    app.add_option("--threads", threads, "Worker count (0 = hardware concurrency)");

    auto* cmd_gen = app.add_subcommand("gen-data", "Generate the synthetic dataset splits");
    auto* cmd_train = app.add_subcommand("train-clf", "Train the softmax classifier");
    auto* cmd_attack = app.add_subcommand("attack", "Attack the eval split");
    std::string attack_name;
    cmd_attack->add_option("--attack", attack_name, "Attack name (default: all)");

    auto* cmd_purify = app.add_subcommand("purify", "Purify attacked tensors");
    std::string purify_attack = "flow";
    std::string purify_defense = "nappure";
    std::string purify_input;
    bool purify_trace = false;
    cmd_purify->add_option("--attack", purify_attack, "Attack whose output to purify");
    cmd_purify->add_option("--defense", purify_defense, "Defense name from the config");
    cmd_purify->add_option("--input", purify_input, "Purify a single NAPT file instead");
    cmd_purify->add_flag("--trace", purify_trace, "Write the per-iteration loss trace CSV");

    auto* cmd_eval = app.add_subcommand("eval", "Evaluate a classifier on a manifest");
    std::string eval_clf, eval_data, eval_split;
    cmd_eval->add_option("--clf", eval_clf, "classifier.json path")->required();
    cmd_eval->add_option("--data", eval_data, "Directory containing manifest.json")->required();
    cmd_eval->add_option("--split", eval_split, "Split tag filter (default: all)");

    auto* cmd_run = app.add_subcommand("run", "Full pipeline: gen, train, attack, purify, report");

    auto* cmd_grid = app.add_subcommand("grid", "Grid-search lambda1 x lambda2 on the val split");
    std::string grid_attack = "flow";
    std::string grid_l1 = "0,0.01,0.1";
    std::string grid_l2 = "0,1,5";
    cmd_grid->add_option("--attack", grid_attack, "Attack family to search on");
    cmd_grid->add_option("--l1", grid_l1, "Comma-separated lambda1 grid");
    cmd_grid->add_option("--l2", grid_l2, "Comma-separated lambda2 grid");

    auto* cmd_sweep = app.add_subcommand("sweep-iters", "Robust accuracy vs iteration count");
    std::string sweep_attack = "patch";
    std::string sweep_iters = "100,200,500";
    cmd_sweep->add_option("--attack", sweep_attack, "Attack family");
    cmd_sweep->add_option("--iters", sweep_iters, "Comma-separated iteration counts");

    auto* cmd_mismatch = app.add_subcommand(
        "mismatch", "Fixed defense against attack variants of the same family");
    int mismatch_defense_kernel = 5;
    std::string mismatch_attack_kernels = "3,5";
    cmd_mismatch->add_option("--defense-kernel", mismatch_defense_kernel,
                             "Defense conv kernel size");
    cmd_mismatch->add_option("--attack-kernels", mismatch_attack_kernels,
                             "Comma-separated attack kernel sizes");

    // Global flags may appear after the subcommand name.
    for (CLI::App* sub : app.get_subcommands(
             [](const CLI::App*) { return true; }))
        sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        ExperimentConfig cfg = load_config(config_path, preset, seed, have_seed);
        if (export_ppm_flag) cfg.export_ppm = true;
        if (threads > 0) cfg.threads = threads;
        fs::create_directories(out_dir);

        if (cmd_gen->parsed()) {
            const GmmPrior prior = cfg.prior ? *cfg.prior : make_prior(cfg.dataset);
            write_text_file(out_dir + "/prior.json", to_json(prior));
            gen_dataset(prior, cfg.dataset.train_per_class, cfg.dataset.shape,
                        mix_seed(cfg.seed, "data-train"), out_dir + "/data/train", "train");
            gen_dataset(prior, cfg.dataset.eval_per_class, cfg.dataset.shape,
                        mix_seed(cfg.seed, "data-eval"), out_dir + "/data/eval", "eval");
            gen_dataset(prior, cfg.dataset.val_per_class, cfg.dataset.shape,
                        mix_seed(cfg.seed, "data-val"), out_dir + "/data/val", "val");
            std::printf("wrote dataset splits under %s/data\n", out_dir.c_str());
        } else if (cmd_train->parsed()) {
            const StageData data = prepare_stage(cfg, out_dir);
            std::printf("clean accuracy %.4f (classifier at %s/classifier.json)\n",
                        data.clean_accuracy, out_dir.c_str());
        } else if (cmd_attack->parsed()) {
            const StageData data = prepare_stage(cfg, out_dir);
            for (const auto& attack : cfg.attacks) {
                if (!attack_name.empty() && attack.name != attack_name) continue;
                const auto adv = attack_eval_split(cfg, data, attack);
                persist_images(adv, data.eval.labels, cfg.dataset.shape, cfg.dataset.classes,
                               out_dir + "/attacks/" + attack.name, "eval");
                std::printf("%-10s undefended accuracy %.4f (clean %.4f)\n",
                            attack.name.c_str(),
                            evaluate(data.classifier, adv, data.eval.labels),
                            data.clean_accuracy);
            }
        } else if (cmd_purify->parsed()) {
            const DefenseConfig* defense = nullptr;
            for (const auto& d : cfg.defenses)
                if (d.name == purify_defense) defense = &d;
            if (!defense) throw std::runtime_error("no defense named '" + purify_defense + "'");
            const GmmPrior prior = cfg.prior ? *cfg.prior : make_prior(cfg.dataset);

            if (!purify_input.empty()) {
                const ImageTensor x_adv = read_tensor(purify_input);
                PurifyResult result;
                if (defense->mode == DefenseMode::lm) {
                    PurifyConfig pc = defense->lm_config;
                    pc.seed = cfg.seed;
                    result = lm_purify(x_adv, prior, pc);
                } else if (defense->mode == DefenseMode::nappure) {
                    const PurifyPreset* preset = defense->preset_for(purify_attack);
                    if (!preset)
                        throw std::runtime_error("defense has no preset for '" + purify_attack +
                                                 "'");
                    PurifyConfig pc = preset->config;
                    pc.seed = cfg.seed;
                    result = nappure_purify(x_adv, preset->spec, prior, pc);
                } else {
                    throw std::runtime_error("defense 'none' does not purify");
                }
                write_tensor(out_dir + "/purified.napt", result.x_star);
                if (purify_trace)
                    write_text_file(out_dir + "/trace.csv", trace_to_csv(result.trace));
                std::printf("purified %s -> %s/purified.napt (final loss %.6g)\n",
                            purify_input.c_str(), out_dir.c_str(), result.trace.back().total());
            } else {
                const StageData data = prepare_stage(cfg, out_dir);
                const NamedAttack* attack = nullptr;
                for (const auto& a : cfg.attacks)
                    if (a.name == purify_attack) attack = &a;
                if (!attack) throw std::runtime_error("no attack named '" + purify_attack + "'");
                const auto adv = attack_eval_split(cfg, data, *attack);
                std::vector<ImageTensor> purified(adv.size());
                const std::uint64_t stage =
                    mix_seed(cfg.seed, ("purify:" + attack->name).c_str());
                parallel_for(
                    adv.size(),
                    [&](std::size_t i) {
                        if (defense->mode == DefenseMode::lm) {
                            PurifyConfig pc = defense->lm_config;
                            pc.seed = derive_seed(stage, i);
                            purified[i] = lm_purify(adv[i], prior, pc).x_star;
                        } else {
                            const PurifyPreset* preset = defense->preset_for(attack->name);
                            if (!preset) throw std::runtime_error("no preset for attack");
                            PurifyConfig pc = preset->config;
                            pc.seed = derive_seed(stage, i);
                            purified[i] = nappure_purify(adv[i], preset->spec, prior, pc).x_star;
                        }
                    },
                    cfg.threads);
                persist_images(purified, data.eval.labels, cfg.dataset.shape,
                               cfg.dataset.classes,
                               out_dir + "/purified/" + attack->name + "_" + defense->name,
                               "eval");
                std::printf("%s/%s robust accuracy %.4f (undefended %.4f)\n",
                            attack->name.c_str(), defense->name.c_str(),
                            evaluate(data.classifier, purified, data.eval.labels),
                            evaluate(data.classifier, adv, data.eval.labels));
            }
        } else if (cmd_eval->parsed()) {
            const SoftmaxClassifier clf = classifier_from_json(read_text_file(eval_clf));
            const DatasetManifest manifest =
                manifest_from_json(read_text_file(eval_data + "/manifest.json"), eval_data);
            const LabeledDataset data = load_dataset(manifest, eval_split);
            std::printf("accuracy %.4f on %zu images\n",
                        evaluate(clf, data.images, data.labels), data.images.size());
        } else if (cmd_run->parsed()) {
            const RunReport report = run_pipeline(cfg, out_dir);
            std::printf("clean accuracy %.4f (train %.4f), report at %s/report.json\n",
                        report.clean_accuracy, report.classifier_train_accuracy, out_dir.c_str());
            for (const auto& row : report.rows)
                std::printf("  %-10s %-14s clean %.4f robust %.4f\n", row.attack.c_str(),
                            row.defense.c_str(), row.clean_accuracy, row.robust_accuracy);
        } else if (cmd_grid->parsed()) {
            const GridResult result = grid_search(cfg, grid_attack, parse_doubles(grid_l1),
                                                  parse_doubles(grid_l2), out_dir);
            for (const auto& cell : result.table)
                std::printf("  lambda1=%-8g lambda2=%-8g accuracy %.4f\n", cell.lambda1,
                            cell.lambda2, cell.accuracy);
            std::printf("best: lambda1=%g lambda2=%g accuracy %.4f\n", result.best.lambda1,
                        result.best.lambda2, result.best.accuracy);
        } else if (cmd_sweep->parsed()) {
            const auto rows = iteration_sweep(cfg, sweep_attack, parse_ints(sweep_iters), out_dir);
            for (const auto& row : rows)
                std::printf("  T=%-6d robust accuracy %.4f\n", row.iterations,
                            row.robust_accuracy);
        } else if (cmd_mismatch->parsed()) {
            PurifyPreset defense;
            defense.spec = conv_spec(mismatch_defense_kernel);
            defense.config.lambda1 = 0.001;
            defense.config.lambda2 = 3.0;
            defense.config.iterations = 500;
            std::vector<NamedAttack> variants;
            for (int k : parse_ints(mismatch_attack_kernels)) {
                NamedAttack variant;
                variant.name = k == 3 ? "conv" : "conv" + std::to_string(k);
                variant.config.spec = conv_spec(k);
                variant.config.constraint.radius = 0.025;
                variant.config.step_size = 0.0025;
                variants.push_back(std::move(variant));
            }
            const auto rows = mismatch_eval(cfg, defense, variants, out_dir);
            for (const auto& row : rows)
                std::printf("  %-8s robust accuracy %.4f\n", row.attack.c_str(),
                            row.robust_accuracy);
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error [%s]: %s\n", cmd.c_str(), e.what());
        return 1;
    }
}
