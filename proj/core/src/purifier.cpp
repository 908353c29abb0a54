#include "nappure/purifier.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace nappure {

void PurifyConfig::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0)
        throw std::invalid_argument("PurifyConfig: lambda weights must be nonnegative");
    if (eta1 <= 0.0 || eta2 <= 0.0)
        throw std::invalid_argument("PurifyConfig: learning rates must be positive");
    if (iterations < 0) throw std::invalid_argument("PurifyConfig: iterations must be >= 0");
    sigma.validate();
    if (composite_weight_init < 0.0 || composite_weight_init > 1.0)
        throw std::invalid_argument("PurifyConfig: composite_weight_init must be in [0,1]");
}

void adam_step(AdamState& state, FlatVector& param, const FlatVector& grad, double lr,
               double beta1, double beta2, double eps_adam) {
    param.check_same_size(grad);
    if (state.m.size() != param.size() || state.v.size() != param.size())
        throw std::invalid_argument("adam_step: state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps_adam);
    }
}

namespace {

struct ReconEval {
    double value = 0.0;        // ||x_adv - f(x, eps)||^2, unweighted
    ImageTensor residual;      // x_adv - f(x, eps)
};

ReconEval recon_value(const ImageTensor& x, const PerturbationParams& eps,
                      const ImageTensor& x_adv, const TransformSpec& spec) {
    ReconEval out;
    ImageTensor fx = apply(spec, x, eps, PatchMode::soft);
    out.residual = ImageTensor(x.shape);
    for (std::size_t i = 0; i < fx.data.size(); ++i) {
        out.residual.data[i] = x_adv.data[i] - fx.data[i];
        out.value += out.residual.data[i] * out.residual.data[i];
    }
    return out;
}

void check_finite(double value, const char* term, int iter) {
    if (!std::isfinite(value) || std::fabs(value) > 1e12) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "purify: %s term diverged (%.3e) at iteration %d", term, value, iter);
        throw std::runtime_error(buf);
    }
}

}  // namespace

TotalLossEval total_loss(const ImageTensor& x, const PerturbationParams& eps,
                         const ImageTensor& x_adv, const TransformSpec& spec,
                         const GmmPrior& prior, const PurifyConfig& cfg, SeededRng& rng) {
    TotalLossEval out;
    LikelihoodEval lik = likelihood_loss(prior, x, rng, cfg.sigma, cfg.stop_gradient);
    out.grad_x = lik.grad_x;

    const double phi = potential(spec, eps);
    double recon = 0.0;
    FlatVector grad_eps_flat(param_count(spec, x.shape));

    if (cfg.lambda2 != 0.0) {
        ReconEval rec = recon_value(x, eps, x_adv, spec);
        recon = rec.value;
        // d/dx lambda2 ||x_adv - f||^2 = -2 lambda2 J_x^T residual, same for eps.
        ApplyVjp vjp = apply_vjp(spec, x, eps, rec.residual, PatchMode::soft);
        for (std::size_t i = 0; i < out.grad_x.data.size(); ++i)
            out.grad_x.data[i] += -2.0 * cfg.lambda2 * vjp.grad_x.data[i];
        FlatVector ge = pack_params(vjp.grad_eps);
        for (std::size_t i = 0; i < grad_eps_flat.size(); ++i)
            grad_eps_flat[i] = -2.0 * cfg.lambda2 * ge[i];
    }
    if (cfg.lambda1 != 0.0) {
        FlatVector gp = pack_params(potential_grad(spec, eps));
        for (std::size_t i = 0; i < grad_eps_flat.size(); ++i)
            grad_eps_flat[i] += cfg.lambda1 * gp[i];
    }

    out.grad_eps = unpack_params(spec, x.shape, grad_eps_flat);
    out.row.likelihood = lik.loss;
    out.row.prior = cfg.lambda1 * phi;
    out.row.reconstruction = cfg.lambda2 * recon;
    out.value = out.row.total();
    return out;
}

PurifyResult nappure_purify(const ImageTensor& x_adv, const TransformSpec& spec,
                            const GmmPrior& prior, const PurifyConfig& cfg) {
    cfg.validate();
    spec.validate(x_adv.shape);
    prior.validate();

    SeededRng rng(cfg.seed);
    ImageTensor x = x_adv;
    PerturbationParams eps = identity_params(spec, x_adv);
    if (spec.kind == TransformKind::composite) {
        auto& cp = std::get<CompositeParams>(eps.value);
        for (double& w : cp.weights) w = cfg.composite_weight_init;
    }

    FlatVector x_flat = x.flatten();
    FlatVector eps_flat = pack_params(eps);
    AdamState adam_x(x_flat.size());
    AdamState adam_eps(eps_flat.size());

    PurifyResult result;
    result.config = cfg;
    result.trace.reserve(cfg.iterations + 1);

    for (int t = 0;; ++t) {
        // One (sigma, n) draw per iteration covers the trace row and, below,
        // the image update.
        const double sigma = rng.uniform(cfg.sigma.low, cfg.sigma.high);
        const FlatVector noise = sample_gaussian(rng, x.size());
        const LikelihoodEval lik =
            likelihood_loss_at(prior, x, sigma, noise, cfg.stop_gradient);

        const double phi = potential(spec, eps);
        ReconEval rec;
        if (cfg.lambda2 != 0.0) rec = recon_value(x, eps, x_adv, spec);

        TraceRow row;
        row.iter = t;
        row.likelihood = lik.loss;
        row.prior = cfg.lambda1 * phi;
        row.reconstruction = cfg.lambda2 * rec.value;
        check_finite(row.likelihood, "likelihood", t);
        check_finite(row.prior, "prior", t);
        check_finite(row.reconstruction, "reconstruction", t);
        result.trace.push_back(row);

        if (t == cfg.iterations) break;

        // Image step: likelihood plus reconstruction chain.
        FlatVector grad_x(lik.grad_x.data);
        if (cfg.lambda2 != 0.0) {
            ApplyVjp vjp = apply_vjp(spec, x, eps, rec.residual, PatchMode::soft);
            for (std::size_t i = 0; i < grad_x.size(); ++i)
                grad_x[i] += -2.0 * cfg.lambda2 * vjp.grad_x.data[i];
        }
        adam_step(adam_x, x_flat, grad_x, cfg.eta1, cfg.beta1, cfg.beta2, cfg.eps_adam);
        if (cfg.clamp_x_each_iter) clamp_in_place(x_flat, 0.0, 1.0);
        x.data = x_flat.data;

        // Parameter step at the already-updated image.
        FlatVector grad_eps(eps_flat.size());
        if (cfg.lambda2 != 0.0) {
            ReconEval rec2 = recon_value(x, eps, x_adv, spec);
            ApplyVjp vjp = apply_vjp(spec, x, eps, rec2.residual, PatchMode::soft);
            FlatVector ge = pack_params(vjp.grad_eps);
            for (std::size_t i = 0; i < grad_eps.size(); ++i)
                grad_eps[i] = -2.0 * cfg.lambda2 * ge[i];
        }
        if (cfg.lambda1 != 0.0) {
            FlatVector gp = pack_params(potential_grad(spec, eps));
            for (std::size_t i = 0; i < grad_eps.size(); ++i)
                grad_eps[i] += cfg.lambda1 * gp[i];
        }
        adam_step(adam_eps, eps_flat, grad_eps, cfg.eta2, cfg.beta1, cfg.beta2, cfg.eps_adam);
        eps = unpack_params(spec, x.shape, eps_flat);
        clamp_param_domains(spec, eps);
        eps_flat = pack_params(eps);
    }

    result.x_star = std::move(x);
    result.eps_star = std::move(eps);
    return result;
}

PurifyResult lm_purify(const ImageTensor& x_adv, const GmmPrior& prior,
                       const PurifyConfig& cfg) {
    cfg.validate();
    prior.validate();

    SeededRng rng(cfg.seed);
    ImageTensor x = x_adv;
    FlatVector x_flat = x.flatten();
    AdamState adam_x(x_flat.size());

    PurifyResult result;
    result.config = cfg;
    result.trace.reserve(cfg.iterations + 1);

    for (int t = 0;; ++t) {
        const double sigma = rng.uniform(cfg.sigma.low, cfg.sigma.high);
        const FlatVector noise = sample_gaussian(rng, x.size());
        const LikelihoodEval lik =
            likelihood_loss_at(prior, x, sigma, noise, cfg.stop_gradient);

        TraceRow row;
        row.iter = t;
        row.likelihood = lik.loss;
        check_finite(row.likelihood, "likelihood", t);
        result.trace.push_back(row);

        if (t == cfg.iterations) break;

        FlatVector grad_x(lik.grad_x.data);
        adam_step(adam_x, x_flat, grad_x, cfg.eta1, cfg.beta1, cfg.beta2, cfg.eps_adam);
        if (cfg.clamp_x_each_iter) clamp_in_place(x_flat, 0.0, 1.0);
        x.data = x_flat.data;
    }

    FlatVector residual(x.size());
    for (std::size_t i = 0; i < residual.size(); ++i)
        residual[i] = x_adv.data[i] - x.data[i];
    result.x_star = std::move(x);
    result.eps_star = PerturbationParams{AdditiveParams{std::move(residual)}};
    return result;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string out = "iter,likelihood,prior,reconstruction,total\n";
    char buf[192];
    for (const TraceRow& row : trace) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", row.iter, row.likelihood,
                      row.prior, row.reconstruction, row.total());
        out += buf;
    }
    return out;
}

}  // namespace nappure
