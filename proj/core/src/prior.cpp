#include "nappure/prior.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nappure {

void GmmPrior::validate() const {
    if (weights.empty() || weights.size() != means.size())
        throw std::invalid_argument("GmmPrior: weights and means must be non-empty and aligned");
    if (s_data <= 0.0) throw std::invalid_argument("GmmPrior: s_data must be positive");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw std::invalid_argument("GmmPrior: weights must be positive");
        sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-12)
        throw std::invalid_argument("GmmPrior: weights must sum to 1");
    const std::size_t d = means[0].size();
    for (const auto& mu : means) {
        if (mu.size() != d) throw std::invalid_argument("GmmPrior: mean dimensions differ");
        for (double v : mu.data)
            if (!std::isfinite(v)) throw std::invalid_argument("GmmPrior: non-finite mean entry");
    }
}

void SigmaSchedule::validate() const {
    if (!(0.0 < low && low < high))
        throw std::invalid_argument("SigmaSchedule: requires 0 < low < high");
}

std::vector<double> responsibilities(const GmmPrior& prior, const FlatVector& y, double sigma) {
    const std::size_t K = prior.component_count();
    const double v = prior.s_data * prior.s_data + sigma * sigma;
    std::vector<double> logw(K);
    double max_logw = -1e300;
    for (std::size_t k = 0; k < K; ++k) {
        double d2 = 0.0;
        const FlatVector& mu = prior.means[k];
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double diff = y[i] - mu[i];
            d2 += diff * diff;
        }
        logw[k] = std::log(prior.weights[k]) - d2 / (2.0 * v);
        max_logw = std::max(max_logw, logw[k]);
    }
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        logw[k] = std::exp(logw[k] - max_logw);
        denom += logw[k];
    }
    for (double& g : logw) g /= denom;
    return logw;
}

FlatVector denoise(const GmmPrior& prior, const FlatVector& y, double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("denoise: sigma must be positive");
    if (y.size() != prior.dim()) throw std::invalid_argument("denoise: dimension mismatch");
    const double v = prior.s_data * prior.s_data + sigma * sigma;
    const double scale = sigma * sigma / v;
    const std::vector<double> gamma = responsibilities(prior, y, sigma);
    FlatVector out = y;
    for (std::size_t k = 0; k < prior.component_count(); ++k) {
        const FlatVector& mu = prior.means[k];
        for (std::size_t i = 0; i < y.size(); ++i)
            out[i] += scale * gamma[k] * (mu[i] - y[i]);
    }
    return out;
}

FlatVector denoise_vjp(const GmmPrior& prior, const FlatVector& y, double sigma,
                       const FlatVector& cotangent) {
    if (sigma <= 0.0) throw std::invalid_argument("denoise_vjp: sigma must be positive");
    if (y.size() != prior.dim() || cotangent.size() != y.size())
        throw std::invalid_argument("denoise_vjp: dimension mismatch");
    const std::size_t K = prior.component_count();
    const std::size_t d = y.size();
    const double s2 = prior.s_data * prior.s_data;
    const double v = s2 + sigma * sigma;
    const std::vector<double> gamma = responsibilities(prior, y, sigma);

    // a_k = (mu_k - y)/v; J = (s^2/v) I + sigma^2 (sum_k gamma_k a_k a_k^T - abar abar^T).
    FlatVector abar(d);
    std::vector<double> a_dot_c(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        const FlatVector& mu = prior.means[k];
        double dc = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double a = (mu[i] - y[i]) / v;
            abar[i] += gamma[k] * a;
            dc += a * cotangent[i];
        }
        a_dot_c[k] = dc;
    }
    double abar_dot_c = 0.0;
    for (std::size_t i = 0; i < d; ++i) abar_dot_c += abar[i] * cotangent[i];

    FlatVector out(d);
    const double sig2 = sigma * sigma;
    for (std::size_t i = 0; i < d; ++i) out[i] = (s2 / v) * cotangent[i];
    for (std::size_t k = 0; k < K; ++k) {
        const FlatVector& mu = prior.means[k];
        const double coeff = sig2 * gamma[k] * a_dot_c[k];
        for (std::size_t i = 0; i < d; ++i) out[i] += coeff * (mu[i] - y[i]) / v;
    }
    for (std::size_t i = 0; i < d; ++i) out[i] -= sig2 * abar_dot_c * abar[i];
    return out;
}

LikelihoodEval likelihood_loss_at(const GmmPrior& prior, const ImageTensor& x, double sigma,
                                  const FlatVector& noise, bool stop_gradient) {
    if (noise.size() != x.size())
        throw std::invalid_argument("likelihood_loss: noise length mismatch");
    FlatVector y = x.flatten();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sigma * noise[i];

    const FlatVector den = denoise(prior, y, sigma);
    FlatVector residual(den.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < den.size(); ++i) {
        residual[i] = den[i] - x.data[i];
        loss += residual[i] * residual[i];
    }

    // d loss / d x = 2 (J_D^T r - r); stop_gradient drops the J_D term.
    FlatVector grad(residual.size());
    if (stop_gradient) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = -2.0 * residual[i];
    } else {
        const FlatVector jt_r = denoise_vjp(prior, y, sigma, residual);
        for (std::size_t i = 0; i < grad.size(); ++i)
            grad[i] = 2.0 * (jt_r[i] - residual[i]);
    }

    LikelihoodEval out;
    out.loss = loss;
    out.grad_x = from_flat(x.shape, grad);
    out.sigma_used = sigma;
    out.noise_used = noise;
    return out;
}

LikelihoodEval likelihood_loss(const GmmPrior& prior, const ImageTensor& x, SeededRng& rng,
                               const SigmaSchedule& schedule, bool stop_gradient) {
    schedule.validate();
    const double sigma = rng.uniform(schedule.low, schedule.high);
    const FlatVector noise = sample_gaussian(rng, x.size());
    return likelihood_loss_at(prior, x, sigma, noise, stop_gradient);
}

}  // namespace nappure
