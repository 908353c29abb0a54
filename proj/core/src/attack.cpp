#include "nappure/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace nappure {

FlatVector SoftmaxClassifier::logits(const ImageTensor& x) const {
    if (!(x.shape == input_shape))
        throw std::invalid_argument("classifier: image shape " + x.shape.str() +
                                    " does not match input shape " + input_shape.str());
    FlatVector out(weights.size());
    for (std::size_t k = 0; k < weights.size(); ++k) {
        double acc = bias[k];
        const FlatVector& w = weights[k];
        for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x.data[i];
        out[k] = acc;
    }
    return out;
}

namespace {

std::vector<double> softmax(const FlatVector& logits) {
    double mx = logits[0];
    for (double v : logits.data) mx = std::max(mx, v);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp(logits[k] - mx);
        sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
}

}  // namespace

TrainResult train_classifier(const LabeledDataset& data, int epochs, double lr,
                             std::uint64_t seed) {
    if (data.images.empty() || data.images.size() != data.labels.size())
        throw std::invalid_argument("train_classifier: empty or misaligned dataset");
    std::set<int> distinct(data.labels.begin(), data.labels.end());
    if (distinct.size() < 2)
        throw std::invalid_argument("train_classifier: degenerate dataset (single class)");
    const int classes = *distinct.rbegin() + 1;
    const TensorShape shape = data.images[0].shape;
    const std::size_t d = shape.size();

    SoftmaxClassifier clf;
    clf.input_shape = shape;
    SeededRng rng(mix_seed(seed, "clf-init"));
    clf.weights.assign(classes, FlatVector(d));
    clf.bias = FlatVector(classes);
    for (auto& row : clf.weights)
        for (double& v : row.data) v = 0.01 * rng.gaussian();

    const double n = static_cast<double>(data.size());
    std::vector<FlatVector> grad_w(classes, FlatVector(d));
    FlatVector grad_b(classes);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (auto& g : grad_w) std::fill(g.data.begin(), g.data.end(), 0.0);
        std::fill(grad_b.data.begin(), grad_b.data.end(), 0.0);
        for (std::size_t s = 0; s < data.size(); ++s) {
            const ImageTensor& x = data.images[s];
            const std::vector<double> p = softmax(clf.logits(x));
            for (int k = 0; k < classes; ++k) {
                const double coef = p[k] - (data.labels[s] == k ? 1.0 : 0.0);
                if (coef == 0.0) continue;
                FlatVector& g = grad_w[k];
                for (std::size_t i = 0; i < d; ++i) g[i] += coef * x.data[i];
                grad_b[k] += coef;
            }
        }
        for (int k = 0; k < classes; ++k) {
            for (std::size_t i = 0; i < d; ++i)
                clf.weights[k][i] -= lr * grad_w[k][i] / n;
            clf.bias[k] -= lr * grad_b[k] / n;
        }
    }

    TrainResult out;
    out.train_accuracy = evaluate(clf, data.images, data.labels);
    out.classifier = std::move(clf);
    return out;
}

CrossEntropyEval cross_entropy_grad(const SoftmaxClassifier& clf, const ImageTensor& x,
                                    int label) {
    if (label < 0 || label >= clf.classes())
        throw std::invalid_argument("cross_entropy_grad: label out of range");
    const FlatVector z = clf.logits(x);
    const std::vector<double> p = softmax(z);

    CrossEntropyEval out;
    out.loss = -std::log(std::max(p[label], 1e-300));
    FlatVector grad(x.size());
    for (int k = 0; k < clf.classes(); ++k) {
        const double coef = p[k] - (k == label ? 1.0 : 0.0);
        const FlatVector& w = clf.weights[k];
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += coef * w[i];
    }
    out.grad_x = from_flat(x.shape, grad);
    return out;
}

int predict(const SoftmaxClassifier& clf, const ImageTensor& x) {
    const FlatVector z = clf.logits(x);
    int best = 0;
    for (std::size_t k = 1; k < z.size(); ++k)
        if (z[k] > z[best]) best = static_cast<int>(k);
    return best;
}

double evaluate(const SoftmaxClassifier& clf, const std::vector<ImageTensor>& images,
                const std::vector<int>& labels) {
    if (images.empty()) throw std::invalid_argument("evaluate: empty set");
    if (images.size() != labels.size())
        throw std::invalid_argument("evaluate: image/label count mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        if (predict(clf, images[i]) == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

void AttackConfig::validate(const TensorShape& shape) const {
    spec.validate(shape);
    if (steps < 0) throw std::invalid_argument("AttackConfig: steps must be >= 0");
    if (step_size <= 0.0) throw std::invalid_argument("AttackConfig: step size must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("AttackConfig: momentum must lie in [0, 1)");
    if (spec.kind == TransformKind::composite &&
        constraint.children.size() != spec.children.size())
        throw std::invalid_argument("AttackConfig: composite constraint arity mismatch");
}

namespace {

bool spec_has_flow(const TransformSpec& spec) {
    if (spec.kind == TransformKind::flow) return true;
    for (const auto& child : spec.children)
        if (child.kind == TransformKind::flow) return true;
    return false;
}

// Flow fields are smoothed before every evaluation; other families pass
// through unchanged.
PerturbationParams smooth_for_eval(const TransformSpec& spec, const PerturbationParams& eps,
                                   const AttackConfig& cfg, const TensorShape& shape) {
    if (!spec_has_flow(spec) || cfg.smooth_kernel <= 1) return eps;
    PerturbationParams out = eps;
    if (spec.kind == TransformKind::flow) {
        auto& p = std::get<FlowParams>(out.value);
        p.field = gaussian_smooth_flow(p.field, cfg.smooth_kernel, cfg.smooth_stddev, shape);
    } else if (spec.kind == TransformKind::composite) {
        auto& p = std::get<CompositeParams>(out.value);
        for (std::size_t i = 0; i < spec.children.size(); ++i)
            if (spec.children[i].kind == TransformKind::flow) {
                auto& f = std::get<FlowParams>(p.children[i].value);
                f.field =
                    gaussian_smooth_flow(f.field, cfg.smooth_kernel, cfg.smooth_stddev, shape);
            }
    }
    return out;
}

struct AttackVjp {
    ImageTensor grad_x;
    FlatVector grad_eps;  // packed layout of the family
};

// Like apply_vjp but with hard-patch support: only the pattern receives
// gradient, through the binary mask.
AttackVjp attack_vjp(const TransformSpec& spec, const ImageTensor& x,
                     const PerturbationParams& eps, const ImageTensor& cot) {
    switch (spec.kind) {
        case TransformKind::patch: {
            const auto& p = std::get<PatchParams>(eps.value);
            const std::vector<double> mask = hard_patch_mask(
                x.shape, static_cast<int>(std::llround(p.row)),
                static_cast<int>(std::llround(p.col)), static_cast<int>(std::llround(p.size)));
            ImageTensor grad_x(x.shape);
            PatchParams grad{ImageTensor(x.shape), 0.0, 0.0, 0.0};
            const int w = x.shape.width;
            for (int c = 0; c < x.shape.channels; ++c)
                for (int j = 0; j < x.shape.height; ++j)
                    for (int kk = 0; kk < w; ++kk) {
                        const double m = mask[static_cast<std::size_t>(j) * w + kk];
                        const double g = cot.at(c, j, kk);
                        grad_x.at(c, j, kk) = g * (1.0 - m);
                        grad.pattern.at(c, j, kk) = g * m;
                    }
            return {std::move(grad_x), pack_params(PerturbationParams{std::move(grad)})};
        }
        case TransformKind::composite: {
            const auto& p = std::get<CompositeParams>(eps.value);
            const std::size_t n = spec.children.size();
            std::vector<ImageTensor> stage_in;
            stage_in.reserve(n);
            std::vector<ImageTensor> stage_fx(n);
            ImageTensor cur = x;
            for (std::size_t i = 0; i < n; ++i) {
                stage_in.push_back(cur);
                stage_fx[i] = apply(spec.children[i], cur, p.children[i], PatchMode::hard);
                for (std::size_t t = 0; t < cur.data.size(); ++t)
                    cur.data[t] = p.weights[i] * stage_fx[i].data[t] +
                                  (1.0 - p.weights[i]) * cur.data[t];
            }
            std::vector<FlatVector> child_grads(n);
            ImageTensor back = cot;
            for (std::size_t i = n; i-- > 0;) {
                AttackVjp child = attack_vjp(spec.children[i], stage_in[i], p.children[i], back);
                child.grad_eps *= p.weights[i];
                child_grads[i] = std::move(child.grad_eps);
                for (std::size_t t = 0; t < back.data.size(); ++t)
                    back.data[t] = p.weights[i] * child.grad_x.data[t] +
                                   (1.0 - p.weights[i]) * back.data[t];
            }
            // Mixing weights stay at the configured value during attacks.
            std::vector<double> flat(n, 0.0);
            for (const FlatVector& g : child_grads)
                flat.insert(flat.end(), g.data.begin(), g.data.end());
            return {std::move(back), FlatVector(std::move(flat))};
        }
        default: {
            ApplyVjp vjp = apply_vjp(spec, x, eps, cot, PatchMode::hard);
            return {std::move(vjp.grad_x), pack_params(vjp.grad_eps)};
        }
    }
}

// Map a gradient w.r.t. the smoothed field back to the raw parameters.
void unsmooth_grad_in_place(const TransformSpec& spec, FlatVector& grad,
                            const AttackConfig& cfg, const TensorShape& shape) {
    if (!spec_has_flow(spec) || cfg.smooth_kernel <= 1) return;
    if (spec.kind == TransformKind::flow) {
        grad = gaussian_smooth_flow_adjoint(grad, cfg.smooth_kernel, cfg.smooth_stddev, shape);
        return;
    }
    if (spec.kind != TransformKind::composite) return;
    std::size_t pos = spec.children.size();
    for (const auto& child : spec.children) {
        const std::size_t len = param_count(child, shape);
        if (child.kind == TransformKind::flow) {
            FlatVector slice(len);
            for (std::size_t i = 0; i < len; ++i) slice[i] = grad[pos + i];
            slice = gaussian_smooth_flow_adjoint(slice, cfg.smooth_kernel, cfg.smooth_stddev,
                                                 shape);
            for (std::size_t i = 0; i < len; ++i) grad[pos + i] = slice[i];
        }
        pos += len;
    }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

AttackResult pgd_attack(const ImageTensor& x, int label, const SoftmaxClassifier& clf,
                        const AttackConfig& cfg, SeededRng& /*rng*/,
                        const AttackStepObserver& observer) {
    cfg.validate(x.shape);
    if (label < 0 || label >= clf.classes())
        throw std::invalid_argument("pgd_attack: label out of range");

    PerturbationParams eps = attack_reference_params(cfg.spec, x.shape, cfg.constraint);
    eps = project_constraints(cfg.spec, eps, cfg.constraint);
    FlatVector velocity(param_count(cfg.spec, x.shape));

    for (int step = 0; step < cfg.steps; ++step) {
        const PerturbationParams eps_eval = smooth_for_eval(cfg.spec, eps, cfg, x.shape);
        const ImageTensor x_t = apply(cfg.spec, x, eps_eval, PatchMode::hard);
        const CrossEntropyEval ce = cross_entropy_grad(clf, x_t, label);
        AttackVjp vjp = attack_vjp(cfg.spec, x, eps_eval, ce.grad_x);
        unsmooth_grad_in_place(cfg.spec, vjp.grad_eps, cfg, x.shape);

        for (std::size_t i = 0; i < velocity.size(); ++i)
            velocity[i] = cfg.momentum * velocity[i] + vjp.grad_eps[i];

        FlatVector eps_flat = pack_params(eps);
        for (std::size_t i = 0; i < eps_flat.size(); ++i)
            eps_flat[i] += cfg.step_size * sign(velocity[i]);
        eps = unpack_params(cfg.spec, x.shape, eps_flat);
        eps = project_constraints(cfg.spec, eps, cfg.constraint);
        if (observer) observer(step, eps, ce.loss);
    }

    AttackResult out;
    out.eps = smooth_for_eval(cfg.spec, eps, cfg, x.shape);
    out.x_adv = clamp(apply(cfg.spec, x, out.eps, PatchMode::hard), 0.0, 1.0);
    return out;
}

}  // namespace nappure
