#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nappure/attack.hpp"
#include "nappure/prior.hpp"
#include "nappure/purifier.hpp"
#include "nappure/tensor.hpp"
#include "nappure/transforms.hpp"

namespace nappure {

struct ManifestEntry {
    std::string file;  // relative to the manifest root
    int label = 0;
    std::string split;
};

struct DatasetManifest {
    std::string root;
    TensorShape shape;
    int classes = 0;
    std::uint64_t seed = 0;
    std::string prior_ref;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(const std::string& tag) const;
};

// Synthetic dataset: class k samples clamp01(mu_k + s_data * n). Writes one
// NAPT file per image plus a manifest JSON.
DatasetManifest gen_dataset(const GmmPrior& prior, int per_class, const TensorShape& shape,
                            std::uint64_t seed, const std::string& out_dir,
                            const std::string& split_tag = "eval");

LabeledDataset load_dataset(const DatasetManifest& manifest, const std::string& split_tag);

struct DatasetConfig {
    TensorShape shape{1, 8, 8};
    int classes = 3;
    int train_per_class = 64;
    int eval_per_class = 86;
    int val_per_class = 86;
    double s_data = 0.05;
    std::uint64_t mean_seed = 9001;
    // Band-pass random means around mid-gray, rescaled so the minimum
    // pairwise distance hits this target.
    double mean_distance = 0.95;
};

struct ClassifierConfig {
    int epochs = 400;
    double lr = 0.5;
};

struct NamedAttack {
    std::string name;
    AttackConfig config;
};

enum class DefenseMode { none, lm, nappure };

struct PurifyPreset {
    TransformSpec spec;
    PurifyConfig config;
};

struct DefenseConfig {
    std::string name;
    DefenseMode mode = DefenseMode::none;
    // nappure: preset per attack name, falling back to `fixed` when absent.
    std::optional<PurifyPreset> fixed;
    std::map<std::string, PurifyPreset> per_attack;
    PurifyConfig lm_config;  // lm mode only

    const PurifyPreset* preset_for(const std::string& attack_name) const;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    DatasetConfig dataset;
    std::optional<GmmPrior> prior;  // generated from dataset block when absent
    ClassifierConfig classifier;
    std::vector<NamedAttack> attacks;
    std::vector<DefenseConfig> defenses;
    bool export_ppm = false;
    // Worker count, 0 = hardware concurrency. Runtime knob: results are
    // independent of it and it is not part of the serialized experiment.
    int threads = 0;
};

// The desk-scale benchmark configuration used by the acceptance suite.
ExperimentConfig default_experiment();
// Full-size 3x32x32 variant with the original attack geometries (5x5 kernel,
// 7x7 center patch, flow radius 1.2 smoothed at stddev 1.5 over 9x9,
// additive 24/255). Much heavier than the desk benchmark.
ExperimentConfig paper32_experiment();
GmmPrior make_prior(const DatasetConfig& cfg);

struct ReportRow {
    std::string attack;
    std::string defense;
    double clean_accuracy = 0.0;   // accuracy after purifying clean inputs
    double robust_accuracy = 0.0;  // accuracy after purifying attacked inputs
};

struct RunReport {
    std::string config_hash;
    std::uint64_t seed = 0;
    TensorShape shape;
    int n_eval = 0;
    double clean_accuracy = 0.0;
    double classifier_train_accuracy = 0.0;
    // Accuracy on reference-kernel blurred clean images, per conv-family attack.
    std::map<std::string, double> reference_accuracy;
    std::vector<ReportRow> rows;
    std::map<std::string, double> wall_clock_seconds;  // kept out of report.json

    const ReportRow* find(const std::string& attack, const std::string& defense) const;
};

// Full pipeline: generate data, train the classifier, attack the eval split,
// purify under every defense, evaluate, and persist tensors plus
// report.json/report.csv (timing goes to timing.json so reports stay
// byte-reproducible).
RunReport run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir);

struct GridCell {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double accuracy = 0.0;
};

struct GridResult {
    std::vector<GridCell> table;
    GridCell best;
};

// Purify the attacked validation split at every (lambda1, lambda2) pair and
// score by post-purification accuracy. Ties break toward smaller lambda1,
// then smaller lambda2.
GridResult grid_search(const ExperimentConfig& cfg, const std::string& attack_name,
                       const std::vector<double>& lambda1_grid,
                       const std::vector<double>& lambda2_grid, const std::string& out_dir);

struct SweepRow {
    int iterations = 0;
    double robust_accuracy = 0.0;
};

std::vector<SweepRow> iteration_sweep(const ExperimentConfig& cfg,
                                      const std::string& attack_name,
                                      const std::vector<int>& iteration_list,
                                      const std::string& out_dir);

struct MismatchRow {
    std::string attack;
    double robust_accuracy = 0.0;
};

// Fixed defense preset evaluated against attack variants of the same family
// with different geometry.
std::vector<MismatchRow> mismatch_eval(const ExperimentConfig& cfg,
                                       const PurifyPreset& defense,
                                       const std::vector<NamedAttack>& attack_variants,
                                       const std::string& out_dir);

}  // namespace nappure
