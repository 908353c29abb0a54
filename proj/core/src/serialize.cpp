#include "nappure/serialize.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "nappure/tensor_io.hpp"

namespace nappure {

using nlohmann::json;

namespace {

json spec_to_json_obj(const TransformSpec& spec) {
    json j;
    j["kind"] = kind_name(spec.kind);
    switch (spec.kind) {
        case TransformKind::conv:
            j["kernel_size"] = spec.kernel_size;
            break;
        case TransformKind::patch:
            j["s_max"] = spec.patch_max_size;
            j["tau"] = spec.patch_tau;
            break;
        case TransformKind::composite: {
            json children = json::array();
            for (const auto& child : spec.children) children.push_back(spec_to_json_obj(child));
            j["children"] = std::move(children);
            break;
        }
        default:
            break;
    }
    return j;
}

TransformSpec spec_from_json_obj(const json& j) {
    TransformSpec spec;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "additive") {
        spec.kind = TransformKind::additive;
    } else if (kind == "conv") {
        spec.kind = TransformKind::conv;
        spec.kernel_size = j.at("kernel_size").get<int>();
    } else if (kind == "patch") {
        spec.kind = TransformKind::patch;
        spec.patch_max_size = j.at("s_max").get<int>();
        spec.patch_tau = j.value("tau", 0.5);
    } else if (kind == "flow") {
        spec.kind = TransformKind::flow;
    } else if (kind == "composite") {
        spec.kind = TransformKind::composite;
        for (const auto& child : j.at("children")) spec.children.push_back(spec_from_json_obj(child));
    } else {
        throw std::runtime_error("transform spec: unknown kind '" + kind + "'");
    }
    return spec;
}

json prior_to_json_obj(const GmmPrior& prior) {
    json j;
    j["weights"] = prior.weights;
    json means = json::array();
    for (const auto& mu : prior.means) means.push_back(mu.data);
    j["means"] = std::move(means);
    j["s_data"] = prior.s_data;
    return j;
}

GmmPrior prior_from_json_obj(const json& j, const std::string& base_dir) {
    GmmPrior prior;
    prior.weights = j.at("weights").get<std::vector<double>>();
    prior.s_data = j.at("s_data").get<double>();
    for (const auto& entry : j.at("means")) {
        if (entry.is_string()) {
            const auto path =
                (std::filesystem::path(base_dir) / entry.get<std::string>()).string();
            prior.means.push_back(read_tensor(path).flatten());
        } else {
            prior.means.push_back(FlatVector(entry.get<std::vector<double>>()));
        }
    }
    prior.validate();
    return prior;
}

json purify_to_json_obj(const PurifyConfig& cfg) {
    json j;
    j["lambda1"] = cfg.lambda1;
    j["lambda2"] = cfg.lambda2;
    j["eta1"] = cfg.eta1;
    j["eta2"] = cfg.eta2;
    j["iterations"] = cfg.iterations;
    j["sigma_low"] = cfg.sigma.low;
    j["sigma_high"] = cfg.sigma.high;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["eps_adam"] = cfg.eps_adam;
    j["stop_gradient"] = cfg.stop_gradient;
    j["clamp_x_each_iter"] = cfg.clamp_x_each_iter;
    j["seed"] = cfg.seed;
    j["composite_weight_init"] = cfg.composite_weight_init;
    return j;
}

PurifyConfig purify_from_json_obj(const json& j) {
    PurifyConfig cfg;
    cfg.lambda1 = j.value("lambda1", cfg.lambda1);
    cfg.lambda2 = j.value("lambda2", cfg.lambda2);
    cfg.eta1 = j.value("eta1", cfg.eta1);
    cfg.eta2 = j.value("eta2", cfg.eta2);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.sigma.low = j.value("sigma_low", cfg.sigma.low);
    cfg.sigma.high = j.value("sigma_high", cfg.sigma.high);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.eps_adam = j.value("eps_adam", cfg.eps_adam);
    cfg.stop_gradient = j.value("stop_gradient", cfg.stop_gradient);
    cfg.clamp_x_each_iter = j.value("clamp_x_each_iter", cfg.clamp_x_each_iter);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.composite_weight_init = j.value("composite_weight_init", cfg.composite_weight_init);
    cfg.validate();
    return cfg;
}

json constraint_to_json_obj(const AttackConstraint& c) {
    json j;
    if (!c.children.empty()) {
        json children = json::array();
        for (const auto& child : c.children) children.push_back(constraint_to_json_obj(child));
        j["children"] = std::move(children);
    } else if (c.patch_size > 0) {
        j["row"] = c.patch_row;
        j["col"] = c.patch_col;
        j["size"] = c.patch_size;
    } else {
        j["radius"] = c.radius;
    }
    return j;
}

AttackConstraint constraint_from_json_obj(const json& j) {
    AttackConstraint c;
    if (j.contains("children")) {
        for (const auto& child : j.at("children"))
            c.children.push_back(constraint_from_json_obj(child));
    } else if (j.contains("size")) {
        c.patch_row = j.at("row").get<int>();
        c.patch_col = j.at("col").get<int>();
        c.patch_size = j.at("size").get<int>();
    } else {
        c.radius = j.at("radius").get<double>();
    }
    return c;
}

json attack_to_json_obj(const AttackConfig& cfg) {
    json j;
    j["spec"] = spec_to_json_obj(cfg.spec);
    j["constraint"] = constraint_to_json_obj(cfg.constraint);
    j["steps"] = cfg.steps;
    j["step_size"] = cfg.step_size;
    j["momentum"] = cfg.momentum;
    j["smooth_kernel"] = cfg.smooth_kernel;
    j["smooth_stddev"] = cfg.smooth_stddev;
    j["seed"] = cfg.seed;
    return j;
}

AttackConfig attack_from_json_obj(const json& j) {
    AttackConfig cfg;
    cfg.spec = spec_from_json_obj(j.at("spec"));
    cfg.constraint = constraint_from_json_obj(j.at("constraint"));
    cfg.steps = j.value("steps", cfg.steps);
    cfg.step_size = j.value("step_size", cfg.step_size);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.smooth_kernel = j.value("smooth_kernel", cfg.smooth_kernel);
    cfg.smooth_stddev = j.value("smooth_stddev", cfg.smooth_stddev);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

json dataset_to_json_obj(const DatasetConfig& cfg) {
    json j;
    j["shape"] = {cfg.shape.channels, cfg.shape.height, cfg.shape.width};
    j["classes"] = cfg.classes;
    j["train_per_class"] = cfg.train_per_class;
    j["eval_per_class"] = cfg.eval_per_class;
    j["val_per_class"] = cfg.val_per_class;
    j["s_data"] = cfg.s_data;
    j["mean_seed"] = cfg.mean_seed;
    j["mean_distance"] = cfg.mean_distance;
    return j;
}

DatasetConfig dataset_from_json_obj(const json& j) {
    DatasetConfig cfg;
    if (j.contains("shape")) {
        const auto& s = j.at("shape");
        cfg.shape = TensorShape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    }
    cfg.classes = j.value("classes", cfg.classes);
    cfg.train_per_class = j.value("train_per_class", cfg.train_per_class);
    cfg.eval_per_class = j.value("eval_per_class", cfg.eval_per_class);
    cfg.val_per_class = j.value("val_per_class", cfg.val_per_class);
    cfg.s_data = j.value("s_data", cfg.s_data);
    cfg.mean_seed = j.value("mean_seed", cfg.mean_seed);
    cfg.mean_distance = j.value("mean_distance", cfg.mean_distance);
    return cfg;
}

json preset_to_json_obj(const PurifyPreset& preset) {
    json j;
    j["spec"] = spec_to_json_obj(preset.spec);
    j["purify"] = purify_to_json_obj(preset.config);
    return j;
}

PurifyPreset preset_from_json_obj(const json& j) {
    PurifyPreset preset;
    preset.spec = spec_from_json_obj(j.at("spec"));
    preset.config = purify_from_json_obj(j.at("purify"));
    return preset;
}

json defense_to_json_obj(const DefenseConfig& d) {
    json j;
    j["name"] = d.name;
    switch (d.mode) {
        case DefenseMode::none: j["mode"] = "none"; break;
        case DefenseMode::lm: j["mode"] = "lm"; break;
        case DefenseMode::nappure: j["mode"] = "nappure"; break;
    }
    if (d.mode == DefenseMode::lm) j["purify"] = purify_to_json_obj(d.lm_config);
    if (d.mode == DefenseMode::nappure) {
        if (d.fixed) {
            j["spec"] = spec_to_json_obj(d.fixed->spec);
            j["purify"] = purify_to_json_obj(d.fixed->config);
        }
        if (!d.per_attack.empty()) {
            json per;
            for (const auto& [name, preset] : d.per_attack)
                per[name] = preset_to_json_obj(preset);
            j["per_attack"] = std::move(per);
        }
    }
    return j;
}

DefenseConfig defense_from_json_obj(const json& j) {
    DefenseConfig d;
    d.name = j.at("name").get<std::string>();
    const std::string mode = j.value("mode", "none");
    if (mode == "none") {
        d.mode = DefenseMode::none;
    } else if (mode == "lm") {
        d.mode = DefenseMode::lm;
        if (j.contains("purify")) d.lm_config = purify_from_json_obj(j.at("purify"));
    } else if (mode == "nappure") {
        d.mode = DefenseMode::nappure;
        if (j.contains("spec")) {
            PurifyPreset preset;
            preset.spec = spec_from_json_obj(j.at("spec"));
            preset.config = purify_from_json_obj(j.at("purify"));
            d.fixed = std::move(preset);
        }
        if (j.contains("per_attack"))
            for (const auto& [name, entry] : j.at("per_attack").items())
                d.per_attack[name] = preset_from_json_obj(entry);
    } else {
        throw std::runtime_error("defense '" + d.name + "': unknown mode '" + mode + "'");
    }
    return d;
}

json experiment_to_json_obj(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["export_ppm"] = cfg.export_ppm;
    j["dataset"] = dataset_to_json_obj(cfg.dataset);
    if (cfg.prior) j["prior"] = prior_to_json_obj(*cfg.prior);
    j["classifier"] = {{"epochs", cfg.classifier.epochs}, {"lr", cfg.classifier.lr}};
    json attacks = json::array();
    for (const auto& a : cfg.attacks) {
        json entry = attack_to_json_obj(a.config);
        entry["name"] = a.name;
        attacks.push_back(std::move(entry));
    }
    j["attacks"] = std::move(attacks);
    json defenses = json::array();
    for (const auto& d : cfg.defenses) defenses.push_back(defense_to_json_obj(d));
    j["defenses"] = std::move(defenses);
    return j;
}

}  // namespace

std::string to_json(const TransformSpec& spec) { return spec_to_json_obj(spec).dump(); }

TransformSpec transform_spec_from_json(const std::string& text) {
    return spec_from_json_obj(json::parse(text));
}

std::string to_json(const GmmPrior& prior) { return prior_to_json_obj(prior).dump(); }

GmmPrior gmm_prior_from_json(const std::string& text, const std::string& base_dir) {
    return prior_from_json_obj(json::parse(text), base_dir);
}

std::string to_json(const PurifyConfig& cfg) { return purify_to_json_obj(cfg).dump(); }

PurifyConfig purify_config_from_json(const std::string& text) {
    return purify_from_json_obj(json::parse(text));
}

std::string to_json(const AttackConfig& cfg) { return attack_to_json_obj(cfg).dump(); }

AttackConfig attack_config_from_json(const std::string& text) {
    return attack_from_json_obj(json::parse(text));
}

std::string to_json(const SoftmaxClassifier& clf) {
    json j;
    j["shape"] = {clf.input_shape.channels, clf.input_shape.height, clf.input_shape.width};
    json weights = json::array();
    for (const auto& row : clf.weights) weights.push_back(row.data);
    j["weights"] = std::move(weights);
    j["bias"] = clf.bias.data;
    return j.dump();
}

SoftmaxClassifier classifier_from_json(const std::string& text) {
    const json j = json::parse(text);
    SoftmaxClassifier clf;
    const auto& s = j.at("shape");
    clf.input_shape = TensorShape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    for (const auto& row : j.at("weights"))
        clf.weights.push_back(FlatVector(row.get<std::vector<double>>()));
    clf.bias = FlatVector(j.at("bias").get<std::vector<double>>());
    if (clf.weights.empty() || clf.bias.size() != clf.weights.size())
        throw std::runtime_error("classifier: malformed weights/bias");
    return clf;
}

std::string to_json(const DatasetManifest& manifest) {
    json j;
    j["shape"] = {manifest.shape.channels, manifest.shape.height, manifest.shape.width};
    j["classes"] = manifest.classes;
    j["seed"] = manifest.seed;
    j["prior"] = manifest.prior_ref;
    json entries = json::array();
    for (const auto& e : manifest.entries)
        entries.push_back({{"file", e.file}, {"label", e.label}, {"split", e.split}});
    j["entries"] = std::move(entries);
    return j.dump();
}

DatasetManifest manifest_from_json(const std::string& text, const std::string& root_dir) {
    const json j = json::parse(text);
    DatasetManifest m;
    m.root = root_dir;
    const auto& s = j.at("shape");
    m.shape = TensorShape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    m.classes = j.at("classes").get<int>();
    m.seed = j.value("seed", std::uint64_t{0});
    m.prior_ref = j.value("prior", std::string());
    for (const auto& e : j.at("entries")) {
        ManifestEntry entry;
        entry.file = e.at("file").get<std::string>();
        entry.label = e.at("label").get<int>();
        entry.split = e.value("split", "eval");
        if (entry.label < 0 || entry.label >= m.classes)
            throw std::runtime_error("manifest: label out of range for " + entry.file);
        m.entries.push_back(std::move(entry));
    }
    return m;
}

std::string to_json(const ExperimentConfig& cfg) { return experiment_to_json_obj(cfg).dump(2); }

ExperimentConfig experiment_from_json(const std::string& text) {
    const json j = json::parse(text);
    ExperimentConfig cfg = default_experiment();
    cfg.attacks.clear();
    cfg.defenses.clear();
    cfg.seed = j.value("seed", cfg.seed);
    cfg.export_ppm = j.value("export_ppm", cfg.export_ppm);
    if (j.contains("dataset")) cfg.dataset = dataset_from_json_obj(j.at("dataset"));
    if (j.contains("prior")) cfg.prior = prior_from_json_obj(j.at("prior"), ".");
    if (j.contains("classifier")) {
        cfg.classifier.epochs = j.at("classifier").value("epochs", cfg.classifier.epochs);
        cfg.classifier.lr = j.at("classifier").value("lr", cfg.classifier.lr);
    }
    if (j.contains("attacks")) {
        for (const auto& entry : j.at("attacks")) {
            NamedAttack a;
            a.name = entry.at("name").get<std::string>();
            a.config = attack_from_json_obj(entry);
            cfg.attacks.push_back(std::move(a));
        }
    } else {
        cfg.attacks = default_experiment().attacks;
    }
    if (j.contains("defenses")) {
        for (const auto& entry : j.at("defenses"))
            cfg.defenses.push_back(defense_from_json_obj(entry));
    } else {
        cfg.defenses = default_experiment().defenses;
    }
    return cfg;
}

std::string to_json(const RunReport& report) {
    json j;
    j["config_hash"] = report.config_hash;
    j["seed"] = report.seed;
    j["shape"] = {report.shape.channels, report.shape.height, report.shape.width};
    j["n_eval"] = report.n_eval;
    j["clean_accuracy"] = report.clean_accuracy;
    j["classifier_train_accuracy"] = report.classifier_train_accuracy;
    j["reference_accuracy"] = report.reference_accuracy;
    json rows = json::array();
    for (const auto& row : report.rows)
        rows.push_back({{"attack", row.attack},
                        {"defense", row.defense},
                        {"clean", row.clean_accuracy},
                        {"robust", row.robust_accuracy}});
    j["rows"] = std::move(rows);
    return j.dump(2);
}

std::string report_to_csv(const RunReport& report) {
    std::string out = "attack,defense,clean,robust\n";
    char buf[160];
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f\n", row.attack.c_str(),
                      row.defense.c_str(), row.clean_accuracy, row.robust_accuracy);
        out += buf;
    }
    return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string dump = experiment_to_json_obj(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace nappure
