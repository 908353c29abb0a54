#pragma once

#include <cstdint>
#include <vector>

#include "nappure/prior.hpp"
#include "nappure/rng.hpp"
#include "nappure/tensor.hpp"
#include "nappure/transforms.hpp"

namespace nappure {

struct PurifyConfig {
    double lambda1 = 0.01;  // perturbation-prior weight
    double lambda2 = 5.0;   // reconstruction weight
    double eta1 = 0.1;      // image learning rate
    double eta2 = 0.05;     // parameter learning rate
    int iterations = 500;
    SigmaSchedule sigma;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    bool stop_gradient = false;
    bool clamp_x_each_iter = true;
    std::uint64_t seed = 0;
    // Initial mixing weight for composite specs. The all-zero identity is a
    // stationary point of the combined loss (every gradient component of an
    // inactive child vanishes), so joint purification starts the weights here.
    double composite_weight_init = 0.5;

    void validate() const;
};

struct AdamState {
    FlatVector m;
    FlatVector v;
    long step = 0;

    explicit AdamState(std::size_t n = 0) : m(n), v(n) {}
};

// One bias-corrected Adam update, in place.
void adam_step(AdamState& state, FlatVector& param, const FlatVector& grad, double lr,
               double beta1, double beta2, double eps_adam);

struct TraceRow {
    int iter = 0;
    double likelihood = 0.0;
    double prior = 0.0;          // lambda1 * phi(eps)
    double reconstruction = 0.0; // lambda2 * ||x_adv - f(x, eps)||^2
    double total() const { return likelihood + prior + reconstruction; }
};

struct PurifyResult {
    ImageTensor x_star;
    PerturbationParams eps_star;
    std::vector<TraceRow> trace;  // length iterations + 1
    PurifyConfig config;
};

struct TotalLossEval {
    double value = 0.0;
    ImageTensor grad_x;
    PerturbationParams grad_eps;
    TraceRow row;
};

// Combined loss and routed gradients: grad_x carries the likelihood and
// reconstruction terms, grad_eps the perturbation prior and reconstruction
// terms. Consumes one (sigma, n) draw from rng.
TotalLossEval total_loss(const ImageTensor& x, const PerturbationParams& eps,
                         const ImageTensor& x_adv, const TransformSpec& spec,
                         const GmmPrior& prior, const PurifyConfig& cfg, SeededRng& rng);

// Alternating Adam ascent: per iteration the image is updated first, then the
// perturbation parameters at the already-updated image.
PurifyResult nappure_purify(const ImageTensor& x_adv, const TransformSpec& spec,
                            const GmmPrior& prior, const PurifyConfig& cfg);

// Likelihood-only purification. eps_star reports the additive residual
// x_adv - x_star.
PurifyResult lm_purify(const ImageTensor& x_adv, const GmmPrior& prior,
                       const PurifyConfig& cfg);

// Trace export, header "iter,likelihood,prior,reconstruction,total".
std::string trace_to_csv(const std::vector<TraceRow>& trace);

}  // namespace nappure
