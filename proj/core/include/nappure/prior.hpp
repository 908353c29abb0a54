#pragma once

#include <vector>

#include "nappure/rng.hpp"
#include "nappure/tensor.hpp"

namespace nappure {

// Isotropic Gaussian mixture over flattened images: weights sum to one, all
// components share stddev s_data. Exposes the denoiser contract D(y; sigma)
// and its input-Jacobian action in closed form.
struct GmmPrior {
    std::vector<double> weights;
    std::vector<FlatVector> means;
    double s_data = 0.05;

    std::size_t component_count() const { return weights.size(); }
    std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }

    void validate() const;
};

struct SigmaSchedule {
    double low = 0.4;
    double high = 0.6;

    void validate() const;
};

// Posterior responsibilities of y under the sigma-smoothed mixture
// (variance s_data^2 + sigma^2 per coordinate), log-sum-exp stabilized.
std::vector<double> responsibilities(const GmmPrior& prior, const FlatVector& y, double sigma);

// Posterior mean E[x | y] = y + sigma^2 * grad log p_sigma(y).
FlatVector denoise(const GmmPrior& prior, const FlatVector& y, double sigma);

// J^T c where J = dD/dy = (s^2/v) I + sigma^2 Cov_gamma(a), a_k = (mu_k - y)/v.
FlatVector denoise_vjp(const GmmPrior& prior, const FlatVector& y, double sigma,
                       const FlatVector& cotangent);

struct LikelihoodEval {
    double loss = 0.0;
    ImageTensor grad_x;
    double sigma_used = 0.0;
    FlatVector noise_used;
};

// Single-sample likelihood term: draw sigma ~ U(low, high) and n ~ N(0, I),
// set y = x + sigma n, return ||D(y; sigma) - x||^2 and its x-gradient.
// stop_gradient treats D(y; sigma) as a constant.
LikelihoodEval likelihood_loss(const GmmPrior& prior, const ImageTensor& x, SeededRng& rng,
                               const SigmaSchedule& schedule, bool stop_gradient = false);

// Same with (sigma, noise) frozen by the caller.
LikelihoodEval likelihood_loss_at(const GmmPrior& prior, const ImageTensor& x, double sigma,
                                  const FlatVector& noise, bool stop_gradient = false);

}  // namespace nappure
