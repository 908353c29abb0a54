#include "nappure/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "nappure/parallel.hpp"
#include "nappure/serialize.hpp"
#include "nappure/tensor_io.hpp"

namespace nappure {

namespace fs = std::filesystem;

namespace {

std::string img_name(std::size_t idx) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%04zu.napt", idx);
    return buf;
}

// Match the f32 narrowing of the on-disk format so every reported accuracy
// can be recomputed exactly from the persisted tensors.
void narrow_f32(ImageTensor& t) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::vector<ManifestEntry> DatasetManifest::split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == tag) out.push_back(e);
    return out;
}

GmmPrior make_prior(const DatasetConfig& cfg) {
    cfg.shape.validate();
    if (cfg.classes < 2) throw std::invalid_argument("make_prior: need at least 2 classes");
    const std::size_t d = cfg.shape.size();
    SeededRng rng(mix_seed(cfg.mean_seed, "gmm-means"));

    // Class means are random fields around mid-gray with the local 3x3
    // average removed, blended with a once-smoothed copy. Blur and warp
    // attacks act on the surviving high/mid-frequency signal; the smoothed
    // share keeps warps invertible by gradient descent.
    const double high_pass_share = 0.6;
    std::vector<FlatVector> means;
    const TransformSpec blur = conv_spec(3);
    const PerturbationParams uniform_kernel{ConvParams{FlatVector(9, 1.0 / 9.0)}};
    for (int k = 0; k < cfg.classes; ++k) {
        FlatVector raw(d);
        for (double& v : raw.data) v = rng.uniform01();
        const ImageTensor raw_img = from_flat(cfg.shape, raw);
        const ImageTensor low = apply(blur, raw_img, uniform_kernel);
        ImageTensor high(cfg.shape);
        for (std::size_t i = 0; i < d; ++i) high.data[i] = raw[i] - low.data[i];
        const ImageTensor band = apply(blur, high, uniform_kernel);
        FlatVector mu(d);
        for (std::size_t i = 0; i < d; ++i)
            mu[i] = high_pass_share * high.data[i] + (1.0 - high_pass_share) * band.data[i];
        means.push_back(std::move(mu));
    }

    double dmin = 1e300;
    for (std::size_t a = 0; a < means.size(); ++a)
        for (std::size_t b = a + 1; b < means.size(); ++b)
            dmin = std::min(dmin, std::sqrt(norm2_squared(means[a] - means[b])));
    const double t = cfg.mean_distance > 0.0 ? cfg.mean_distance / dmin : 1.0;
    for (auto& mu : means) {
        for (std::size_t i = 0; i < d; ++i) mu[i] = 0.5 + t * mu[i];
        clamp_in_place(mu, 0.0, 1.0);
    }

    GmmPrior prior;
    prior.means = std::move(means);
    prior.weights.assign(cfg.classes, 1.0 / cfg.classes);
    double partial = 0.0;
    for (int k = 0; k + 1 < cfg.classes; ++k) partial += prior.weights[k];
    prior.weights.back() = 1.0 - partial;
    prior.s_data = cfg.s_data;
    prior.validate();
    return prior;
}

DatasetManifest gen_dataset(const GmmPrior& prior, int per_class, const TensorShape& shape,
                            std::uint64_t seed, const std::string& out_dir,
                            const std::string& split_tag) {
    prior.validate();
    shape.validate();
    if (per_class <= 0) throw std::invalid_argument("gen_dataset: per_class must be positive");
    if (prior.dim() != shape.size())
        throw std::invalid_argument("gen_dataset: prior dimension does not match shape");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw std::runtime_error("gen_dataset: cannot create directory " + out_dir);

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.shape = shape;
    manifest.classes = static_cast<int>(prior.component_count());
    manifest.seed = seed;
    manifest.prior_ref = "generated";

    const std::uint64_t stage = mix_seed(seed, "gen-sample");
    for (int k = 0; k < manifest.classes; ++k)
        for (int i = 0; i < per_class; ++i) {
            const std::size_t idx = static_cast<std::size_t>(k) * per_class + i;
            SeededRng rng(derive_seed(stage, idx));
            ImageTensor x(shape);
            const FlatVector& mu = prior.means[k];
            for (std::size_t t = 0; t < x.data.size(); ++t)
                x.data[t] = mu[t] + prior.s_data * rng.gaussian();
            clamp_in_place(x, 0.0, 1.0);
            const std::string file = img_name(idx);
            write_tensor((fs::path(out_dir) / file).string(), x);
            manifest.entries.push_back({file, k, split_tag});
        }

    write_text_file((fs::path(out_dir) / "manifest.json").string(), to_json(manifest));
    return manifest;
}

LabeledDataset load_dataset(const DatasetManifest& manifest, const std::string& split_tag) {
    LabeledDataset out;
    for (const auto& e : manifest.entries) {
        if (!split_tag.empty() && e.split != split_tag) continue;
        out.images.push_back(read_tensor((fs::path(manifest.root) / e.file).string()));
        out.labels.push_back(e.label);
    }
    return out;
}

const PurifyPreset* DefenseConfig::preset_for(const std::string& attack_name) const {
    auto it = per_attack.find(attack_name);
    if (it != per_attack.end()) return &it->second;
    if (fixed) return &*fixed;
    return nullptr;
}

namespace {

PurifyConfig preset_purify(double l1, double l2, int iters) {
    PurifyConfig cfg;
    cfg.lambda1 = l1;
    cfg.lambda2 = l2;
    cfg.iterations = iters;
    return cfg;
}

}  // namespace

ExperimentConfig default_experiment() {
    ExperimentConfig cfg;
    cfg.seed = 1;

    const TensorShape shape = cfg.dataset.shape;
    const int h = shape.height, w = shape.width;

    // Attack geometry for the 8x8 benchmark.
    NamedAttack additive{"additive", {}};
    additive.config.spec = additive_spec();
    additive.config.constraint.radius = 24.0 / 255.0;
    additive.config.step_size = additive.config.constraint.radius / 10.0;

    NamedAttack conv{"conv", {}};
    conv.config.spec = conv_spec(3);
    conv.config.constraint.radius = 0.025;
    conv.config.step_size = 0.0025;

    NamedAttack patch{"patch", {}};
    patch.config.spec = patch_spec(3);
    patch.config.constraint.patch_row = (h - 3) / 2;
    patch.config.constraint.patch_col = (w - 3) / 2;
    patch.config.constraint.patch_size = 3;
    patch.config.step_size = 0.1;

    NamedAttack flow{"flow", {}};
    flow.config.spec = flow_spec();
    flow.config.constraint.radius = 0.6;
    flow.config.step_size = 0.1;
    flow.config.smooth_kernel = 3;
    flow.config.smooth_stddev = 1.0;

    // All four families at reduced magnitude, composed in one attack.
    NamedAttack composite{"composite", {}};
    composite.config.spec =
        composite_spec({conv_spec(3), patch_spec(2), flow_spec(), additive_spec()});
    AttackConstraint cc_conv;
    cc_conv.radius = 0.0125;
    AttackConstraint cc_patch;
    cc_patch.patch_row = (h - 2) / 2;
    cc_patch.patch_col = (w - 2) / 2;
    cc_patch.patch_size = 2;
    AttackConstraint cc_flow;
    cc_flow.radius = 0.5;
    AttackConstraint cc_add;
    cc_add.radius = 12.0 / 255.0;
    composite.config.constraint.children = {cc_conv, cc_patch, cc_flow, cc_add};
    composite.config.step_size = 0.05;
    composite.config.smooth_kernel = 3;
    composite.config.smooth_stddev = 1.0;

    cfg.attacks = {additive, conv, patch, flow, composite};

    // Defense presets, fixed by the validated desk benchmark run.
    PurifyPreset p_additive{additive_spec(), preset_purify(1.0, 3.0, 50)};
    PurifyPreset p_conv{conv_spec(3), preset_purify(0.001, 3.0, 500)};
    PurifyPreset p_patch{patch_spec(3), preset_purify(0.01, 5.0, 500)};
    PurifyPreset p_flow{flow_spec(), preset_purify(0.01, 5.0, 500)};
    // Fast parameter tracking makes the warp-magnitude prior effective
    // within the iteration budget.
    p_flow.config.eta2 = 0.3;
    PurifyPreset p_joint{composite_spec({conv_spec(3), patch_spec(3), flow_spec(),
                                         additive_spec()}),
                         preset_purify(0.001, 3.0, 500)};

    DefenseConfig none;
    none.name = "none";
    none.mode = DefenseMode::none;

    DefenseConfig lm;
    lm.name = "lm";
    lm.mode = DefenseMode::lm;
    lm.lm_config = preset_purify(0.0, 0.0, 100);

    DefenseConfig nappure;
    nappure.name = "nappure";
    nappure.mode = DefenseMode::nappure;
    nappure.per_attack["additive"] = p_additive;
    nappure.per_attack["conv"] = p_conv;
    nappure.per_attack["patch"] = p_patch;
    nappure.per_attack["flow"] = p_flow;
    // The type-agnostic row: against the composite attack the single-family
    // purifier runs with the (wrong) additive model.
    nappure.per_attack["composite"] = p_additive;

    DefenseConfig joint;
    joint.name = "nappure-joint";
    joint.mode = DefenseMode::nappure;
    joint.fixed = p_joint;

    cfg.defenses = {none, lm, nappure, joint};
    return cfg;
}

ExperimentConfig paper32_experiment() {
    ExperimentConfig cfg = default_experiment();
    cfg.dataset.shape = TensorShape{3, 32, 32};
    cfg.dataset.mean_distance = 4.0;

    for (auto& attack : cfg.attacks) {
        if (attack.name == "conv") {
            attack.config.spec = conv_spec(5);
        } else if (attack.name == "patch") {
            attack.config.constraint.patch_row = (32 - 7) / 2;
            attack.config.constraint.patch_col = (32 - 7) / 2;
            attack.config.constraint.patch_size = 7;
            attack.config.spec = patch_spec(7);
        } else if (attack.name == "flow") {
            attack.config.constraint.radius = 1.2;
            attack.config.smooth_kernel = 9;
            attack.config.smooth_stddev = 1.5;
            attack.config.step_size = 0.12;
        } else if (attack.name == "composite") {
            attack.config.spec =
                composite_spec({conv_spec(5), patch_spec(4), flow_spec(), additive_spec()});
            attack.config.constraint.children[1].patch_row = (32 - 4) / 2;
            attack.config.constraint.children[1].patch_col = (32 - 4) / 2;
            attack.config.constraint.children[1].patch_size = 4;
            attack.config.constraint.children[2].radius = 0.6;
            attack.config.smooth_kernel = 9;
            attack.config.smooth_stddev = 1.5;
        }
    }

    PurifyPreset p_additive{additive_spec(), preset_purify(0.1, 3.0, 100)};
    PurifyPreset p_conv{conv_spec(5), preset_purify(0.001, 3.0, 500)};
    PurifyPreset p_patch{patch_spec(7), preset_purify(0.01, 5.0, 500)};
    PurifyPreset p_flow{flow_spec(), preset_purify(0.01, 1.0, 500)};
    PurifyPreset p_joint{composite_spec({conv_spec(5), patch_spec(7), flow_spec(),
                                         additive_spec()}),
                         preset_purify(0.001, 3.0, 500)};
    for (auto& defense : cfg.defenses) {
        if (defense.mode != DefenseMode::nappure) continue;
        if (defense.fixed) {
            defense.fixed = p_joint;
        } else {
            defense.per_attack["additive"] = p_additive;
            defense.per_attack["conv"] = p_conv;
            defense.per_attack["patch"] = p_patch;
            defense.per_attack["flow"] = p_flow;
            defense.per_attack["composite"] = p_additive;
        }
    }
    return cfg;
}

namespace {

struct PipelineData {
    GmmPrior prior;
    SoftmaxClassifier classifier;
    double train_accuracy = 0.0;
    LabeledDataset eval;
    LabeledDataset val;
    double clean_accuracy = 0.0;
};

// Generate train/eval(/val) splits, train the classifier, score clean data.
PipelineData prepare_data(const ExperimentConfig& cfg, const std::string& out_dir,
                          bool need_val) {
    PipelineData data;
    data.prior = cfg.prior ? *cfg.prior : make_prior(cfg.dataset);
    if (static_cast<int>(data.prior.component_count()) != cfg.dataset.classes)
        throw std::invalid_argument("pipeline: prior component count != class count");

    const TensorShape shape = cfg.dataset.shape;
    const auto train_manifest =
        gen_dataset(data.prior, cfg.dataset.train_per_class, shape,
                    mix_seed(cfg.seed, "data-train"), (fs::path(out_dir) / "data/train").string(),
                    "train");
    const auto eval_manifest =
        gen_dataset(data.prior, cfg.dataset.eval_per_class, shape,
                    mix_seed(cfg.seed, "data-eval"), (fs::path(out_dir) / "data/eval").string(),
                    "eval");
    const LabeledDataset train = load_dataset(train_manifest, "train");
    data.eval = load_dataset(eval_manifest, "eval");
    if (need_val) {
        const auto val_manifest =
            gen_dataset(data.prior, cfg.dataset.val_per_class, shape,
                        mix_seed(cfg.seed, "data-val"), (fs::path(out_dir) / "data/val").string(),
                        "val");
        data.val = load_dataset(val_manifest, "val");
    }

    TrainResult trained = train_classifier(train, cfg.classifier.epochs, cfg.classifier.lr,
                                           mix_seed(cfg.seed, "clf"));
    data.classifier = std::move(trained.classifier);
    data.train_accuracy = trained.train_accuracy;
    data.clean_accuracy = evaluate(data.classifier, data.eval.images, data.eval.labels);
    write_text_file((fs::path(out_dir) / "classifier.json").string(), to_json(data.classifier));
    return data;
}

std::vector<ImageTensor> attack_set(const ExperimentConfig& cfg, const PipelineData& data,
                                    const NamedAttack& attack,
                                    const std::vector<ImageTensor>& images,
                                    const std::vector<int>& labels,
                                    const std::string& stream_tag) {
    std::vector<ImageTensor> out(images.size());
    const std::uint64_t stage = mix_seed(cfg.seed, stream_tag.c_str());
    parallel_for(
        images.size(),
        [&](std::size_t i) {
            SeededRng rng(derive_seed(stage, i));
            AttackResult res =
                pgd_attack(images[i], labels[i], data.classifier, attack.config, rng);
            narrow_f32(res.x_adv);
            out[i] = std::move(res.x_adv);
        },
        cfg.threads);
    return out;
}

struct ResolvedDefense {
    DefenseMode mode = DefenseMode::none;
    const PurifyPreset* preset = nullptr;  // nappure mode
    PurifyConfig lm_config;                // lm mode
};

ResolvedDefense resolve_defense(const DefenseConfig& defense, const std::string& attack_name) {
    ResolvedDefense out;
    out.mode = defense.mode;
    if (defense.mode == DefenseMode::lm) out.lm_config = defense.lm_config;
    if (defense.mode == DefenseMode::nappure) {
        out.preset = defense.preset_for(attack_name);
        if (!out.preset)
            throw std::invalid_argument("defense '" + defense.name + "' has no preset for attack '" +
                                        attack_name + "'");
    }
    return out;
}

std::vector<ImageTensor> purify_set(const ExperimentConfig& cfg, const PipelineData& data,
                                    const ResolvedDefense& defense,
                                    const std::vector<ImageTensor>& images,
                                    const std::string& stream_tag) {
    std::vector<ImageTensor> out(images.size());
    const std::uint64_t stage = mix_seed(cfg.seed, stream_tag.c_str());
    parallel_for(
        images.size(),
        [&](std::size_t i) {
            ImageTensor purified;
            if (defense.mode == DefenseMode::lm) {
                PurifyConfig pc = defense.lm_config;
                pc.seed = derive_seed(stage, i);
                purified = lm_purify(images[i], data.prior, pc).x_star;
            } else {
                PurifyConfig pc = defense.preset->config;
                pc.seed = derive_seed(stage, i);
                purified = nappure_purify(images[i], defense.preset->spec, data.prior, pc).x_star;
            }
            narrow_f32(purified);
            out[i] = std::move(purified);
        },
        cfg.threads);
    return out;
}

void persist_set(const std::vector<ImageTensor>& images, const std::string& dir) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < images.size(); ++i)
        write_tensor((fs::path(dir) / img_name(i)).string(), images[i]);
}

// Clean/adv/purified triples tiled into one image for eyeballing.
void export_strip(const std::string& path, const std::vector<ImageTensor>& clean,
                  const std::vector<ImageTensor>& adv, const std::vector<ImageTensor>& purified,
                  std::size_t count) {
    count = std::min({count, clean.size(), adv.size(), purified.size()});
    if (count == 0) return;
    const TensorShape tile = clean[0].shape;
    const int gap = 1;
    TensorShape strip{tile.channels, static_cast<int>(count) * (tile.height + gap) - gap,
                      3 * (tile.width + gap) - gap};
    ImageTensor canvas(strip, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        const ImageTensor* cols[3] = {&clean[i], &adv[i], &purified[i]};
        for (int col = 0; col < 3; ++col)
            for (int c = 0; c < tile.channels; ++c)
                for (int y = 0; y < tile.height; ++y)
                    for (int x = 0; x < tile.width; ++x)
                        canvas.at(c, static_cast<int>(i) * (tile.height + gap) + y,
                                  col * (tile.width + gap) + x) = cols[col]->at(c, y, x);
    }
    export_ppm(path, canvas);
}

}  // namespace

const ReportRow* RunReport::find(const std::string& attack, const std::string& defense) const {
    for (const auto& row : rows)
        if (row.attack == attack && row.defense == defense) return &row;
    return nullptr;
}

RunReport run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir) {
    const std::string hash = config_hash(cfg);
    auto stage_guard = [&](const char* stage, auto&& fn) {
        try {
            return fn();
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("pipeline stage '") + stage + "' failed [config " +
                                     hash + "]: " + e.what());
        }
    };

    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "config.json").string(), to_json(cfg));

    RunReport report;
    report.config_hash = hash;
    report.seed = cfg.seed;
    report.shape = cfg.dataset.shape;

    auto t0 = std::chrono::steady_clock::now();
    PipelineData data = stage_guard("prepare", [&] { return prepare_data(cfg, out_dir, false); });
    report.wall_clock_seconds["prepare"] = elapsed_s(t0);
    report.clean_accuracy = data.clean_accuracy;
    report.classifier_train_accuracy = data.train_accuracy;
    report.n_eval = static_cast<int>(data.eval.size());

    // Purified-clean accuracy per resolved defense, shared across attacks when
    // the preset does not depend on the attack.
    std::map<std::string, double> clean_cache;

    for (const auto& attack : cfg.attacks) {
        t0 = std::chrono::steady_clock::now();
        const std::string attack_tag = "attack:" + attack.name;
        std::vector<ImageTensor> adv = stage_guard(attack_tag.c_str(), [&] {
            auto result = attack_set(cfg, data, attack, data.eval.images, data.eval.labels,
                                     attack_tag);
            persist_set(result, (fs::path(out_dir) / "attacks" / attack.name).string());
            return result;
        });
        report.wall_clock_seconds[attack_tag] = elapsed_s(t0);

        if (attack.config.spec.kind == TransformKind::conv) {
            // Accuracy on reference-kernel blurred clean images: the conv
            // constraint is centered on the uniform kernel, so even the
            // zero-strength attack blurs.
            std::vector<ImageTensor> blurred(data.eval.size());
            const PerturbationParams ref = attack_reference_params(
                attack.config.spec, cfg.dataset.shape, attack.config.constraint);
            for (std::size_t i = 0; i < data.eval.size(); ++i) {
                blurred[i] = clamp(apply(attack.config.spec, data.eval.images[i], ref), 0.0, 1.0);
                narrow_f32(blurred[i]);
            }
            report.reference_accuracy[attack.name] =
                evaluate(data.classifier, blurred, data.eval.labels);
        }

        for (const auto& defense : cfg.defenses) {
            t0 = std::chrono::steady_clock::now();
            const std::string row_tag = "purify:" + attack.name + ":" + defense.name;
            ReportRow row;
            row.attack = attack.name;
            row.defense = defense.name;
            if (defense.mode == DefenseMode::none) {
                row.clean_accuracy = data.clean_accuracy;
                row.robust_accuracy = evaluate(data.classifier, adv, data.eval.labels);
            } else {
                stage_guard(row_tag.c_str(), [&] {
                    const ResolvedDefense resolved = resolve_defense(defense, attack.name);
                    // The purify stream is keyed by the attack only, so
                    // defenses that are mathematically equivalent see the same
                    // (sigma, noise) draws.
                    std::vector<ImageTensor> purified = purify_set(
                        cfg, data, resolved, adv, "purify:" + attack.name);
                    persist_set(purified, (fs::path(out_dir) / "purified" /
                                           (attack.name + "_" + defense.name))
                                              .string());
                    row.robust_accuracy = evaluate(data.classifier, purified, data.eval.labels);

                    const bool per_attack_preset =
                        defense.mode == DefenseMode::nappure &&
                        defense.per_attack.count(attack.name) > 0;
                    const std::string clean_key =
                        defense.name + "|" + (per_attack_preset ? attack.name : std::string());
                    auto cached = clean_cache.find(clean_key);
                    if (cached == clean_cache.end()) {
                        std::vector<ImageTensor> purified_clean = purify_set(
                            cfg, data, resolved, data.eval.images,
                            "purify-clean:" + (per_attack_preset ? attack.name : std::string()));
                        persist_set(purified_clean,
                                    (fs::path(out_dir) / "purified_clean" /
                                     (defense.name +
                                      (per_attack_preset ? "_" + attack.name : std::string())))
                                        .string());
                        cached = clean_cache
                                     .emplace(clean_key, evaluate(data.classifier, purified_clean,
                                                                  data.eval.labels))
                                     .first;
                    }
                    row.clean_accuracy = cached->second;
                    if (cfg.export_ppm) {
                        fs::create_directories((fs::path(out_dir) / "strips").string());
                        const char* ext = cfg.dataset.shape.channels == 3 ? ".ppm" : ".pgm";
                        export_strip((fs::path(out_dir) / "strips" /
                                      (attack.name + "_" + defense.name + ext))
                                         .string(),
                                     data.eval.images, adv, purified, 8);
                    }
                    return 0;
                });
            }
            report.rows.push_back(row);
            report.wall_clock_seconds[row_tag] = elapsed_s(t0);
        }
    }

    write_text_file((fs::path(out_dir) / "report.json").string(), to_json(report));
    write_text_file((fs::path(out_dir) / "report.csv").string(), report_to_csv(report));
    std::string timing = "{\n";
    bool first = true;
    for (const auto& [k, v] : report.wall_clock_seconds) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s  \"%s\": %.3f", first ? "" : ",\n", k.c_str(), v);
        timing += buf;
        first = false;
    }
    timing += "\n}\n";
    write_text_file((fs::path(out_dir) / "timing.json").string(), timing);
    return report;
}

GridResult grid_search(const ExperimentConfig& cfg, const std::string& attack_name,
                       const std::vector<double>& lambda1_grid,
                       const std::vector<double>& lambda2_grid, const std::string& out_dir) {
    if (lambda1_grid.empty() || lambda2_grid.empty())
        throw std::invalid_argument("grid_search: grids must be nonempty");
    if (cfg.dataset.val_per_class <= 0)
        throw std::invalid_argument("grid_search: empty validation set");

    const NamedAttack* attack = nullptr;
    for (const auto& a : cfg.attacks)
        if (a.name == attack_name) attack = &a;
    if (!attack) throw std::invalid_argument("grid_search: unknown attack '" + attack_name + "'");

    const PurifyPreset* base = nullptr;
    for (const auto& d : cfg.defenses)
        if (d.mode == DefenseMode::nappure && d.preset_for(attack_name)) {
            base = d.preset_for(attack_name);
            break;
        }
    if (!base)
        throw std::invalid_argument("grid_search: no nappure preset for attack '" + attack_name +
                                    "'");

    fs::create_directories(out_dir);
    PipelineData data = prepare_data(cfg, out_dir, true);
    const std::vector<ImageTensor> adv = attack_set(cfg, data, *attack, data.val.images,
                                                    data.val.labels, "attack-val:" + attack_name);

    GridResult result;
    bool have_best = false;
    for (double l1 : lambda1_grid)
        for (double l2 : lambda2_grid) {
            ResolvedDefense defense;
            defense.mode = DefenseMode::nappure;
            PurifyPreset preset = *base;
            preset.config.lambda1 = l1;
            preset.config.lambda2 = l2;
            defense.preset = &preset;
            // Same stream for every cell, so cells differ only by lambda.
            const std::vector<ImageTensor> purified =
                purify_set(cfg, data, defense, adv, "grid-purify:" + attack_name);
            GridCell cell{l1, l2, evaluate(data.classifier, purified, data.val.labels)};
            result.table.push_back(cell);
            const bool better =
                !have_best || cell.accuracy > result.best.accuracy ||
                (cell.accuracy == result.best.accuracy &&
                 (cell.lambda1 < result.best.lambda1 ||
                  (cell.lambda1 == result.best.lambda1 && cell.lambda2 < result.best.lambda2)));
            if (better) {
                result.best = cell;
                have_best = true;
            }
        }

    std::string csv = "lambda1,lambda2,accuracy\n";
    char buf[96];
    for (const auto& cell : result.table) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.6f\n", cell.lambda1, cell.lambda2,
                      cell.accuracy);
        csv += buf;
    }
    write_text_file((fs::path(out_dir) / "grid.csv").string(), csv);
    return result;
}

std::vector<SweepRow> iteration_sweep(const ExperimentConfig& cfg,
                                      const std::string& attack_name,
                                      const std::vector<int>& iteration_list,
                                      const std::string& out_dir) {
    if (iteration_list.empty())
        throw std::invalid_argument("iteration_sweep: empty iteration list");

    const NamedAttack* attack = nullptr;
    for (const auto& a : cfg.attacks)
        if (a.name == attack_name) attack = &a;
    if (!attack)
        throw std::invalid_argument("iteration_sweep: unknown attack '" + attack_name + "'");

    const PurifyPreset* base = nullptr;
    for (const auto& d : cfg.defenses)
        if (d.mode == DefenseMode::nappure && d.preset_for(attack_name)) {
            base = d.preset_for(attack_name);
            break;
        }
    if (!base)
        throw std::invalid_argument("iteration_sweep: no nappure preset for attack '" +
                                    attack_name + "'");

    fs::create_directories(out_dir);
    PipelineData data = prepare_data(cfg, out_dir, false);
    const std::vector<ImageTensor> adv = attack_set(cfg, data, *attack, data.eval.images,
                                                    data.eval.labels, "attack:" + attack_name);

    std::vector<SweepRow> rows;
    for (int iters : iteration_list) {
        ResolvedDefense defense;
        defense.mode = DefenseMode::nappure;
        PurifyPreset preset = *base;
        preset.config.iterations = iters;
        defense.preset = &preset;
        const std::vector<ImageTensor> purified =
            purify_set(cfg, data, defense, adv, "sweep-purify:" + attack_name);
        rows.push_back({iters, evaluate(data.classifier, purified, data.eval.labels)});
    }

    std::string csv = "iterations,robust_accuracy\n";
    char buf[64];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.6f\n", row.iterations, row.robust_accuracy);
        csv += buf;
    }
    write_text_file((fs::path(out_dir) / "sweep.csv").string(), csv);
    return rows;
}

std::vector<MismatchRow> mismatch_eval(const ExperimentConfig& cfg, const PurifyPreset& defense,
                                       const std::vector<NamedAttack>& attack_variants,
                                       const std::string& out_dir) {
    for (const auto& variant : attack_variants)
        if (variant.config.spec.kind != defense.spec.kind)
            throw std::invalid_argument("mismatch_eval: attack '" + variant.name +
                                        "' family does not match the defense family");

    fs::create_directories(out_dir);
    std::vector<MismatchRow> rows;
    if (attack_variants.empty()) {
        write_text_file((fs::path(out_dir) / "mismatch.csv").string(),
                        "attack,robust_accuracy\n");
        return rows;
    }

    PipelineData data = prepare_data(cfg, out_dir, false);
    for (const auto& variant : attack_variants) {
        const std::vector<ImageTensor> adv = attack_set(
            cfg, data, variant, data.eval.images, data.eval.labels, "attack:" + variant.name);
        ResolvedDefense resolved;
        resolved.mode = DefenseMode::nappure;
        resolved.preset = &defense;
        const std::vector<ImageTensor> purified =
            purify_set(cfg, data, resolved, adv, "purify:" + variant.name);
        rows.push_back({variant.name, evaluate(data.classifier, purified, data.eval.labels)});
    }

    std::string csv = "attack,robust_accuracy\n";
    char buf[96];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.6f\n", row.attack.c_str(), row.robust_accuracy);
        csv += buf;
    }
    write_text_file((fs::path(out_dir) / "mismatch.csv").string(), csv);
    return rows;
}

}  // namespace nappure
