#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nappure/rng.hpp"
#include "nappure/tensor.hpp"
#include "nappure/transforms.hpp"

namespace nappure {

// Linear softmax classifier over flattened images.
struct SoftmaxClassifier {
    TensorShape input_shape;
    std::vector<FlatVector> weights;  // one row per class, length C*h*w
    FlatVector bias;

    int classes() const { return static_cast<int>(weights.size()); }
    FlatVector logits(const ImageTensor& x) const;
};

struct LabeledDataset {
    std::vector<ImageTensor> images;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
};

struct TrainResult {
    SoftmaxClassifier classifier;
    double train_accuracy = 0.0;
};

// Full-batch gradient descent on mean cross-entropy from a small seeded
// random init.
TrainResult train_classifier(const LabeledDataset& data, int epochs, double lr,
                             std::uint64_t seed);

struct CrossEntropyEval {
    double loss = 0.0;
    ImageTensor grad_x;
};

CrossEntropyEval cross_entropy_grad(const SoftmaxClassifier& clf, const ImageTensor& x,
                                    int label);

int predict(const SoftmaxClassifier& clf, const ImageTensor& x);

// Fraction of argmax-correct predictions, ties broken toward the lowest class.
double evaluate(const SoftmaxClassifier& clf, const std::vector<ImageTensor>& images,
                const std::vector<int>& labels);

struct AttackConfig {
    TransformSpec spec;
    AttackConstraint constraint;
    int steps = 40;
    double step_size = 0.01;
    double momentum = 0.75;
    // Gaussian smoothing of flow fields, applied before every evaluation and
    // to the final parameters.
    int smooth_kernel = 3;
    double smooth_stddev = 1.0;
    std::uint64_t seed = 0;

    void validate(const TensorShape& shape) const;
};

struct AttackResult {
    PerturbationParams eps;
    ImageTensor x_adv;
};

using AttackStepObserver = std::function<void(int step, const PerturbationParams& eps,
                                              double loss)>;

// Momentum PGD on the perturbation parameters, maximizing classification
// loss. Hard-patch attacks update only the pattern; (row, col, size) stay at
// the configured constants. The adversarial image is clamped to [0,1] once,
// after the final transformation.
AttackResult pgd_attack(const ImageTensor& x, int label, const SoftmaxClassifier& clf,
                        const AttackConfig& cfg, SeededRng& rng,
                        const AttackStepObserver& observer = {});

}  // namespace nappure
