#pragma once

#include <string>

#include "nappure/attack.hpp"
#include "nappure/pipeline.hpp"
#include "nappure/prior.hpp"
#include "nappure/purifier.hpp"
#include "nappure/transforms.hpp"

namespace nappure {

// JSON round-trips for every configurable type. Parsers accept minimal
// objects and fill defaults; writers emit deterministic (sorted-key) output.

std::string to_json(const TransformSpec& spec);
TransformSpec transform_spec_from_json(const std::string& text);

std::string to_json(const GmmPrior& prior);
// base_dir resolves means given as NAPT file references.
GmmPrior gmm_prior_from_json(const std::string& text, const std::string& base_dir = ".");

std::string to_json(const PurifyConfig& cfg);
PurifyConfig purify_config_from_json(const std::string& text);

std::string to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const std::string& text);

std::string to_json(const SoftmaxClassifier& clf);
SoftmaxClassifier classifier_from_json(const std::string& text);

std::string to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text, const std::string& root_dir);

std::string to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);

std::string to_json(const RunReport& report);  // excludes wall-clock fields
std::string report_to_csv(const RunReport& report);

// FNV-1a over a canonical config dump, as a hex string.
std::string config_hash(const ExperimentConfig& cfg);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace nappure
