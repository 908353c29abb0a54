#include "nappure/transforms.hpp"

#include <algorithm>
#include <cmath>

namespace nappure {

namespace {

int clamp_index(int v, int hi) { return std::min(hi, std::max(0, v)); }

double logistic(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Soft occlusion mask factors along one axis. (center, size) in continuous
// pixel coordinates; pixel j has its center at j + 0.5.
double soft_factor(int j, double center, double size, double tau) {
    return logistic((size / 2.0 - std::fabs(j + 0.5 - center)) / tau);
}

double soft_factor_deriv_center(int j, double center, double size, double tau) {
    const double dist = j + 0.5 - center;
    if (dist == 0.0) return 0.0;  // subgradient 0 at the kink
    const double s = soft_factor(j, center, size, tau);
    return s * (1.0 - s) / tau * (dist > 0 ? 1.0 : -1.0);
}

double soft_factor_deriv_size(int j, double center, double size, double tau) {
    const double s = soft_factor(j, center, size, tau);
    return s * (1.0 - s) / (2.0 * tau);
}

void require_kind(const TransformSpec& spec, const PerturbationParams& eps) {
    if (spec.kind != eps.kind())
        throw std::invalid_argument("transform: params are " + kind_name(eps.kind()) +
                                    " but spec is " + kind_name(spec.kind));
}

}  // namespace

std::string kind_name(TransformKind k) {
    switch (k) {
        case TransformKind::additive: return "additive";
        case TransformKind::conv: return "conv";
        case TransformKind::patch: return "patch";
        case TransformKind::flow: return "flow";
        case TransformKind::composite: return "composite";
    }
    return "?";
}

TransformKind PerturbationParams::kind() const {
    struct Visitor {
        TransformKind operator()(const AdditiveParams&) const { return TransformKind::additive; }
        TransformKind operator()(const ConvParams&) const { return TransformKind::conv; }
        TransformKind operator()(const PatchParams&) const { return TransformKind::patch; }
        TransformKind operator()(const FlowParams&) const { return TransformKind::flow; }
        TransformKind operator()(const CompositeParams&) const { return TransformKind::composite; }
    };
    return std::visit(Visitor{}, value);
}

void TransformSpec::validate(const TensorShape& shape) const {
    shape.validate();
    switch (kind) {
        case TransformKind::additive:
            break;
        case TransformKind::conv:
            if (kernel_size < 1 || kernel_size % 2 == 0)
                throw std::invalid_argument("conv: kernel size must be odd and >= 1");
            break;
        case TransformKind::patch:
            if (patch_max_size < 0 ||
                patch_max_size > std::min(shape.height, shape.width))
                throw std::invalid_argument("patch: s_max must lie in [0, min(h, w)]");
            if (patch_tau <= 0.0) throw std::invalid_argument("patch: tau must be positive");
            break;
        case TransformKind::flow:
            break;
        case TransformKind::composite:
            if (children.empty())
                throw std::invalid_argument("composite: needs at least one child");
            for (const auto& child : children) {
                if (child.kind == TransformKind::composite)
                    throw std::invalid_argument("composite: children must be simple families");
                child.validate(shape);
            }
            break;
    }
}

TransformSpec additive_spec() {
    TransformSpec s;
    s.kind = TransformKind::additive;
    return s;
}

TransformSpec conv_spec(int kernel_size) {
    TransformSpec s;
    s.kind = TransformKind::conv;
    s.kernel_size = kernel_size;
    return s;
}

TransformSpec patch_spec(int max_size, double tau) {
    TransformSpec s;
    s.kind = TransformKind::patch;
    s.patch_max_size = max_size;
    s.patch_tau = tau;
    return s;
}

TransformSpec flow_spec() {
    TransformSpec s;
    s.kind = TransformKind::flow;
    return s;
}

TransformSpec composite_spec(std::vector<TransformSpec> children) {
    TransformSpec s;
    s.kind = TransformKind::composite;
    s.children = std::move(children);
    return s;
}

PerturbationParams identity_params(const TransformSpec& spec, const ImageTensor& x_adv) {
    const TensorShape& shape = x_adv.shape;
    spec.validate(shape);
    switch (spec.kind) {
        case TransformKind::additive:
            return {AdditiveParams{FlatVector(shape.size())}};
        case TransformKind::conv: {
            const int k = spec.kernel_size;
            ConvParams p{FlatVector(static_cast<std::size_t>(k) * k)};
            p.kernel[static_cast<std::size_t>(k / 2) * k + k / 2] = 1.0;
            return {std::move(p)};
        }
        case TransformKind::patch:
            return {PatchParams{x_adv, shape.height / 2.0, shape.width / 2.0, 0.0}};
        case TransformKind::flow:
            return {FlowParams{FlatVector(2 * shape.plane())}};
        case TransformKind::composite: {
            CompositeParams p;
            p.weights.assign(spec.children.size(), 0.0);
            for (const auto& child : spec.children)
                p.children.push_back(identity_params(child, x_adv));
            return {std::move(p)};
        }
    }
    throw std::logic_error("identity_params: unreachable");
}

PerturbationParams attack_reference_params(const TransformSpec& spec, const TensorShape& shape,
                                           const AttackConstraint& constraint) {
    spec.validate(shape);
    switch (spec.kind) {
        case TransformKind::additive:
            return {AdditiveParams{FlatVector(shape.size())}};
        case TransformKind::conv: {
            const int k = spec.kernel_size;
            ConvParams p{FlatVector(static_cast<std::size_t>(k) * k,
                                    1.0 / (static_cast<double>(k) * k))};
            return {std::move(p)};
        }
        case TransformKind::patch: {
            PatchParams p{ImageTensor(shape, 0.5), static_cast<double>(constraint.patch_row),
                          static_cast<double>(constraint.patch_col),
                          static_cast<double>(constraint.patch_size)};
            return {std::move(p)};
        }
        case TransformKind::flow:
            return {FlowParams{FlatVector(2 * shape.plane())}};
        case TransformKind::composite: {
            if (constraint.children.size() != spec.children.size())
                throw std::invalid_argument("attack_reference_params: composite constraint arity");
            CompositeParams p;
            p.weights.assign(spec.children.size(), 1.0);
            for (std::size_t i = 0; i < spec.children.size(); ++i)
                p.children.push_back(
                    attack_reference_params(spec.children[i], shape, constraint.children[i]));
            return {std::move(p)};
        }
    }
    throw std::logic_error("attack_reference_params: unreachable");
}

namespace {

ImageTensor apply_conv(const TransformSpec& spec, const ImageTensor& x, const ConvParams& p) {
    const int k = spec.kernel_size;
    if (p.kernel.size() != static_cast<std::size_t>(k) * k)
        throw std::invalid_argument("conv: kernel length does not match spec");
    const int r = k / 2;
    const int h = x.shape.height, w = x.shape.width;
    ImageTensor out(x.shape);
    for (int c = 0; c < x.shape.channels; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int di = -r; di <= r; ++di) {
                    const int si = clamp_index(i + di, h - 1);
                    for (int dj = -r; dj <= r; ++dj) {
                        const int sj = clamp_index(j + dj, w - 1);
                        acc += x.at(c, si, sj) *
                               p.kernel[static_cast<std::size_t>(di + r) * k + (dj + r)];
                    }
                }
                out.at(c, i, j) = acc;
            }
    return out;
}

ImageTensor apply_patch(const TransformSpec& spec, const ImageTensor& x, const PatchParams& p,
                        PatchMode mode) {
    if (!(p.pattern.shape == x.shape))
        throw std::invalid_argument("patch: pattern shape differs from image shape");
    const int h = x.shape.height, w = x.shape.width;
    ImageTensor out(x.shape);
    std::vector<double> mask(x.shape.plane());
    if (mode == PatchMode::hard) {
        const int a = static_cast<int>(std::llround(p.row));
        const int b = static_cast<int>(std::llround(p.col));
        const int s = static_cast<int>(std::llround(p.size));
        mask = hard_patch_mask(x.shape, a, b, s);
    } else {
        for (int j = 0; j < h; ++j) {
            const double mr = soft_factor(j, p.row, p.size, spec.patch_tau);
            for (int kk = 0; kk < w; ++kk)
                mask[static_cast<std::size_t>(j) * w + kk] =
                    mr * soft_factor(kk, p.col, p.size, spec.patch_tau);
        }
    }
    for (int c = 0; c < x.shape.channels; ++c)
        for (int j = 0; j < h; ++j)
            for (int kk = 0; kk < w; ++kk) {
                const double m = mask[static_cast<std::size_t>(j) * w + kk];
                out.at(c, j, kk) = x.at(c, j, kk) * (1.0 - m) + p.pattern.at(c, j, kk) * m;
            }
    return out;
}

ImageTensor apply_flow(const ImageTensor& x, const FlowParams& p) {
    const int h = x.shape.height, w = x.shape.width;
    if (p.field.size() != 2 * x.shape.plane())
        throw std::invalid_argument("flow: field length does not match image shape");
    ImageTensor out(x.shape);
    for (int j = 0; j < h; ++j)
        for (int kk = 0; kk < w; ++kk) {
            const std::size_t idx = static_cast<std::size_t>(j) * w + kk;
            double sr = j + p.field[idx];
            double sc = kk + p.field[x.shape.plane() + idx];
            sr = std::min(static_cast<double>(h - 1), std::max(0.0, sr));
            sc = std::min(static_cast<double>(w - 1), std::max(0.0, sc));
            const int r0 = static_cast<int>(std::floor(sr));
            const int c0 = static_cast<int>(std::floor(sc));
            const int r1 = std::min(r0 + 1, h - 1);
            const int c1 = std::min(c0 + 1, w - 1);
            const double fr = sr - r0;
            const double fc = sc - c0;
            for (int c = 0; c < x.shape.channels; ++c)
                out.at(c, j, kk) = (1.0 - fr) * (1.0 - fc) * x.at(c, r0, c0) +
                                   fr * (1.0 - fc) * x.at(c, r1, c0) +
                                   (1.0 - fr) * fc * x.at(c, r0, c1) +
                                   fr * fc * x.at(c, r1, c1);
        }
    return out;
}

}  // namespace

ImageTensor apply(const TransformSpec& spec, const ImageTensor& x, const PerturbationParams& eps,
                  PatchMode mode) {
    require_kind(spec, eps);
    switch (spec.kind) {
        case TransformKind::additive: {
            const auto& p = std::get<AdditiveParams>(eps.value);
            if (p.delta.size() != x.size())
                throw std::invalid_argument("additive: delta length does not match image");
            ImageTensor out = x;
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += p.delta[i];
            return out;
        }
        case TransformKind::conv:
            return apply_conv(spec, x, std::get<ConvParams>(eps.value));
        case TransformKind::patch:
            return apply_patch(spec, x, std::get<PatchParams>(eps.value), mode);
        case TransformKind::flow:
            return apply_flow(x, std::get<FlowParams>(eps.value));
        case TransformKind::composite: {
            const auto& p = std::get<CompositeParams>(eps.value);
            if (p.weights.size() != spec.children.size() ||
                p.children.size() != spec.children.size())
                throw std::invalid_argument("composite: child count mismatch");
            ImageTensor cur = x;
            for (std::size_t i = 0; i < spec.children.size(); ++i) {
                const double wgt = p.weights[i];
                if (wgt == 0.0) continue;  // interpolation collapses to identity
                ImageTensor fx = apply(spec.children[i], cur, p.children[i], mode);
                for (std::size_t t = 0; t < cur.data.size(); ++t)
                    cur.data[t] = wgt * fx.data[t] + (1.0 - wgt) * cur.data[t];
            }
            return cur;
        }
    }
    throw std::logic_error("apply: unreachable");
}

namespace {

ApplyVjp vjp_additive(const ImageTensor& cot) {
    return {cot, PerturbationParams{AdditiveParams{cot.flatten()}}};
}

ApplyVjp vjp_conv(const TransformSpec& spec, const ImageTensor& x, const ConvParams& p,
                  const ImageTensor& cot) {
    const int k = spec.kernel_size;
    const int r = k / 2;
    const int h = x.shape.height, w = x.shape.width;
    ImageTensor grad_x(x.shape);
    ConvParams grad_k{FlatVector(p.kernel.size())};
    for (int c = 0; c < x.shape.channels; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double g = cot.at(c, i, j);
                if (g == 0.0) continue;
                for (int di = -r; di <= r; ++di) {
                    const int si = clamp_index(i + di, h - 1);
                    for (int dj = -r; dj <= r; ++dj) {
                        const int sj = clamp_index(j + dj, w - 1);
                        const std::size_t tap = static_cast<std::size_t>(di + r) * k + (dj + r);
                        grad_x.at(c, si, sj) += g * p.kernel[tap];
                        grad_k.kernel[tap] += g * x.at(c, si, sj);
                    }
                }
            }
    return {std::move(grad_x), PerturbationParams{std::move(grad_k)}};
}

ApplyVjp vjp_patch_soft(const TransformSpec& spec, const ImageTensor& x, const PatchParams& p,
                        const ImageTensor& cot) {
    const int h = x.shape.height, w = x.shape.width;
    const double tau = spec.patch_tau;

    std::vector<double> mr(h), mc(w), dmr_a(h), dmc_b(w), dmr_s(h), dmc_s(w);
    for (int j = 0; j < h; ++j) {
        mr[j] = soft_factor(j, p.row, p.size, tau);
        dmr_a[j] = soft_factor_deriv_center(j, p.row, p.size, tau);
        dmr_s[j] = soft_factor_deriv_size(j, p.row, p.size, tau);
    }
    for (int kk = 0; kk < w; ++kk) {
        mc[kk] = soft_factor(kk, p.col, p.size, tau);
        dmc_b[kk] = soft_factor_deriv_center(kk, p.col, p.size, tau);
        dmc_s[kk] = soft_factor_deriv_size(kk, p.col, p.size, tau);
    }

    ImageTensor grad_x(x.shape);
    PatchParams grad{ImageTensor(x.shape), 0.0, 0.0, 0.0};
    for (int j = 0; j < h; ++j)
        for (int kk = 0; kk < w; ++kk) {
            const double m = mr[j] * mc[kk];
            double sens = 0.0;  // d out / d m at this pixel, contracted with cot
            for (int c = 0; c < x.shape.channels; ++c) {
                const double g = cot.at(c, j, kk);
                grad_x.at(c, j, kk) = g * (1.0 - m);
                grad.pattern.at(c, j, kk) = g * m;
                sens += g * (p.pattern.at(c, j, kk) - x.at(c, j, kk));
            }
            grad.row += sens * dmr_a[j] * mc[kk];
            grad.col += sens * mr[j] * dmc_b[kk];
            grad.size += sens * (dmr_s[j] * mc[kk] + mr[j] * dmc_s[kk]);
        }
    return {std::move(grad_x), PerturbationParams{std::move(grad)}};
}

ApplyVjp vjp_flow(const ImageTensor& x, const FlowParams& p, const ImageTensor& cot) {
    const int h = x.shape.height, w = x.shape.width;
    const std::size_t plane = x.shape.plane();
    ImageTensor grad_x(x.shape);
    FlowParams grad{FlatVector(2 * plane)};
    for (int j = 0; j < h; ++j)
        for (int kk = 0; kk < w; ++kk) {
            const std::size_t idx = static_cast<std::size_t>(j) * w + kk;
            const double raw_r = j + p.field[idx];
            const double raw_c = kk + p.field[plane + idx];
            const double sr = std::min(static_cast<double>(h - 1), std::max(0.0, raw_r));
            const double sc = std::min(static_cast<double>(w - 1), std::max(0.0, raw_c));
            const bool clamped_r = raw_r != sr;
            const bool clamped_c = raw_c != sc;
            const int r0 = static_cast<int>(std::floor(sr));
            const int c0 = static_cast<int>(std::floor(sc));
            const int r1 = std::min(r0 + 1, h - 1);
            const int c1 = std::min(c0 + 1, w - 1);
            const double fr = sr - r0;
            const double fc = sc - c0;
            double dr = 0.0, dc = 0.0;
            for (int c = 0; c < x.shape.channels; ++c) {
                const double g = cot.at(c, j, kk);
                grad_x.at(c, r0, c0) += g * (1.0 - fr) * (1.0 - fc);
                grad_x.at(c, r1, c0) += g * fr * (1.0 - fc);
                grad_x.at(c, r0, c1) += g * (1.0 - fr) * fc;
                grad_x.at(c, r1, c1) += g * fr * fc;
                // Cell-local derivative of the interpolant; zero in a clamped
                // direction since the source coordinate no longer moves.
                dr += g * ((1.0 - fc) * (x.at(c, r1, c0) - x.at(c, r0, c0)) +
                           fc * (x.at(c, r1, c1) - x.at(c, r0, c1)));
                dc += g * ((1.0 - fr) * (x.at(c, r0, c1) - x.at(c, r0, c0)) +
                           fr * (x.at(c, r1, c1) - x.at(c, r1, c0)));
            }
            grad.field[idx] = clamped_r ? 0.0 : dr;
            grad.field[plane + idx] = clamped_c ? 0.0 : dc;
        }
    return {std::move(grad_x), PerturbationParams{std::move(grad)}};
}

}  // namespace

ApplyVjp apply_vjp(const TransformSpec& spec, const ImageTensor& x, const PerturbationParams& eps,
                   const ImageTensor& cotangent, PatchMode mode) {
    require_kind(spec, eps);
    if (!(cotangent.shape == x.shape))
        throw std::invalid_argument("apply_vjp: cotangent shape differs from image shape");
    switch (spec.kind) {
        case TransformKind::additive:
            return vjp_additive(cotangent);
        case TransformKind::conv:
            return vjp_conv(spec, x, std::get<ConvParams>(eps.value), cotangent);
        case TransformKind::patch:
            if (mode == PatchMode::hard)
                throw std::invalid_argument(
                    "apply_vjp: hard-mode patch is not differentiable in (row, col, size)");
            return vjp_patch_soft(spec, x, std::get<PatchParams>(eps.value), cotangent);
        case TransformKind::flow:
            return vjp_flow(x, std::get<FlowParams>(eps.value), cotangent);
        case TransformKind::composite: {
            const auto& p = std::get<CompositeParams>(eps.value);
            const std::size_t n = spec.children.size();
            // Forward pass storing stage inputs.
            std::vector<ImageTensor> stage_in;
            stage_in.reserve(n);
            std::vector<ImageTensor> stage_fx(n);
            ImageTensor cur = x;
            for (std::size_t i = 0; i < n; ++i) {
                stage_in.push_back(cur);
                stage_fx[i] = apply(spec.children[i], cur, p.children[i], mode);
                for (std::size_t t = 0; t < cur.data.size(); ++t)
                    cur.data[t] = p.weights[i] * stage_fx[i].data[t] +
                                  (1.0 - p.weights[i]) * cur.data[t];
            }
            // Backward pass.
            CompositeParams grad;
            grad.weights.assign(n, 0.0);
            grad.children.resize(n);
            ImageTensor cot = cotangent;
            for (std::size_t i = n; i-- > 0;) {
                double gw = 0.0;
                for (std::size_t t = 0; t < cot.data.size(); ++t)
                    gw += cot.data[t] * (stage_fx[i].data[t] - stage_in[i].data[t]);
                grad.weights[i] = gw;
                ApplyVjp child = apply_vjp(spec.children[i], stage_in[i], p.children[i], cot, mode);
                FlatVector geps = pack_params(child.grad_eps);
                geps *= p.weights[i];
                grad.children[i] = unpack_params(spec.children[i], x.shape, geps);
                for (std::size_t t = 0; t < cot.data.size(); ++t)
                    cot.data[t] = p.weights[i] * child.grad_x.data[t] +
                                  (1.0 - p.weights[i]) * cot.data[t];
            }
            return {std::move(cot), PerturbationParams{std::move(grad)}};
        }
    }
    throw std::logic_error("apply_vjp: unreachable");
}

double potential(const TransformSpec& spec, const PerturbationParams& eps) {
    require_kind(spec, eps);
    switch (spec.kind) {
        case TransformKind::additive:
            return norm2_squared(std::get<AdditiveParams>(eps.value).delta);
        case TransformKind::conv: {
            const auto& kernel = std::get<ConvParams>(eps.value).kernel;
            const int k = spec.kernel_size;
            double acc = 0.0;
            for (std::size_t i = 0; i < kernel.size(); ++i) {
                const double ref =
                    (i == static_cast<std::size_t>(k / 2) * k + k / 2) ? 1.0 : 0.0;
                acc += (kernel[i] - ref) * (kernel[i] - ref);
            }
            return acc;
        }
        case TransformKind::patch:
            return std::fabs(std::get<PatchParams>(eps.value).size);
        case TransformKind::flow:
            return norm2_squared(std::get<FlowParams>(eps.value).field);
        case TransformKind::composite: {
            const auto& p = std::get<CompositeParams>(eps.value);
            double acc = 0.0;
            for (std::size_t i = 0; i < spec.children.size(); ++i) {
                acc += p.weights[i] * p.weights[i];
                acc += potential(spec.children[i], p.children[i]);
            }
            return acc;
        }
    }
    throw std::logic_error("potential: unreachable");
}

PerturbationParams potential_grad(const TransformSpec& spec, const PerturbationParams& eps) {
    require_kind(spec, eps);
    switch (spec.kind) {
        case TransformKind::additive: {
            FlatVector g = std::get<AdditiveParams>(eps.value).delta;
            g *= 2.0;
            return {AdditiveParams{std::move(g)}};
        }
        case TransformKind::conv: {
            const auto& kernel = std::get<ConvParams>(eps.value).kernel;
            const int k = spec.kernel_size;
            FlatVector g(kernel.size());
            for (std::size_t i = 0; i < kernel.size(); ++i) {
                const double ref =
                    (i == static_cast<std::size_t>(k / 2) * k + k / 2) ? 1.0 : 0.0;
                g[i] = 2.0 * (kernel[i] - ref);
            }
            return {ConvParams{std::move(g)}};
        }
        case TransformKind::patch: {
            const auto& p = std::get<PatchParams>(eps.value);
            PatchParams g{ImageTensor(p.pattern.shape), 0.0, 0.0, 0.0};
            g.size = p.size > 0.0 ? 1.0 : (p.size < 0.0 ? -1.0 : 0.0);
            return {std::move(g)};
        }
        case TransformKind::flow: {
            FlatVector g = std::get<FlowParams>(eps.value).field;
            g *= 2.0;
            return {FlowParams{std::move(g)}};
        }
        case TransformKind::composite: {
            const auto& p = std::get<CompositeParams>(eps.value);
            CompositeParams g;
            g.weights.resize(p.weights.size());
            for (std::size_t i = 0; i < p.weights.size(); ++i) g.weights[i] = 2.0 * p.weights[i];
            for (std::size_t i = 0; i < spec.children.size(); ++i)
                g.children.push_back(potential_grad(spec.children[i], p.children[i]));
            return {std::move(g)};
        }
    }
    throw std::logic_error("potential_grad: unreachable");
}

PerturbationParams project_constraints(const TransformSpec& spec, const PerturbationParams& eps,
                                       const AttackConstraint& box) {
    require_kind(spec, eps);
    PerturbationParams out = eps;
    switch (spec.kind) {
        case TransformKind::additive: {
            auto& p = std::get<AdditiveParams>(out.value);
            clamp_in_place(p.delta, -box.radius, box.radius);
            break;
        }
        case TransformKind::conv: {
            auto& p = std::get<ConvParams>(out.value);
            const double ref = 1.0 / static_cast<double>(p.kernel.size());
            for (double& v : p.kernel.data)
                v = std::min(ref + box.radius, std::max(ref - box.radius, v));
            break;
        }
        case TransformKind::patch: {
            auto& p = std::get<PatchParams>(out.value);
            p.row = box.patch_row;
            p.col = box.patch_col;
            p.size = box.patch_size;
            clamp_in_place(p.pattern, 0.0, 1.0);
            break;
        }
        case TransformKind::flow: {
            auto& p = std::get<FlowParams>(out.value);
            clamp_in_place(p.field, -box.radius, box.radius);
            break;
        }
        case TransformKind::composite: {
            auto& p = std::get<CompositeParams>(out.value);
            if (box.children.size() != spec.children.size())
                throw std::invalid_argument("project_constraints: composite constraint arity");
            for (std::size_t i = 0; i < spec.children.size(); ++i) {
                p.weights[i] = 1.0;  // attack composes children at full strength
                p.children[i] =
                    project_constraints(spec.children[i], p.children[i], box.children[i]);
            }
            break;
        }
    }
    return out;
}

FlatVector gaussian_smooth_flow(const FlatVector& flow, int kernel_size, double stddev,
                                const TensorShape& shape) {
    if (kernel_size % 2 == 0 || kernel_size < 1)
        throw std::invalid_argument("gaussian_smooth_flow: kernel size must be odd");
    if (stddev <= 0.0) throw std::invalid_argument("gaussian_smooth_flow: stddev must be > 0");
    const std::size_t plane = shape.plane();
    if (flow.size() != 2 * plane)
        throw std::invalid_argument("gaussian_smooth_flow: flow length mismatch");

    const int r = kernel_size / 2;
    std::vector<double> kernel(static_cast<std::size_t>(kernel_size) * kernel_size);
    double sum = 0.0;
    for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) {
            const double v = std::exp(-(di * di + dj * dj) / (2.0 * stddev * stddev));
            kernel[static_cast<std::size_t>(di + r) * kernel_size + (dj + r)] = v;
            sum += v;
        }
    for (double& v : kernel) v /= sum;

    const int h = shape.height, w = shape.width;
    FlatVector out(2 * plane);
    for (int pl = 0; pl < 2; ++pl)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int di = -r; di <= r; ++di) {
                    const int si = clamp_index(i + di, h - 1);
                    for (int dj = -r; dj <= r; ++dj) {
                        const int sj = clamp_index(j + dj, w - 1);
                        acc += flow[static_cast<std::size_t>(pl) * plane + si * w + sj] *
                               kernel[static_cast<std::size_t>(di + r) * kernel_size + (dj + r)];
                    }
                }
                out[static_cast<std::size_t>(pl) * plane + i * w + j] = acc;
            }
    return out;
}

FlatVector gaussian_smooth_flow_adjoint(const FlatVector& cotangent, int kernel_size,
                                        double stddev, const TensorShape& shape) {
    if (kernel_size % 2 == 0 || kernel_size < 1)
        throw std::invalid_argument("gaussian_smooth_flow_adjoint: kernel size must be odd");
    const std::size_t plane = shape.plane();
    if (cotangent.size() != 2 * plane)
        throw std::invalid_argument("gaussian_smooth_flow_adjoint: length mismatch");

    const int r = kernel_size / 2;
    std::vector<double> kernel(static_cast<std::size_t>(kernel_size) * kernel_size);
    double sum = 0.0;
    for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) {
            const double v = std::exp(-(di * di + dj * dj) / (2.0 * stddev * stddev));
            kernel[static_cast<std::size_t>(di + r) * kernel_size + (dj + r)] = v;
            sum += v;
        }
    for (double& v : kernel) v /= sum;

    const int h = shape.height, w = shape.width;
    FlatVector out(2 * plane);
    for (int pl = 0; pl < 2; ++pl)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double g = cotangent[static_cast<std::size_t>(pl) * plane + i * w + j];
                if (g == 0.0) continue;
                for (int di = -r; di <= r; ++di) {
                    const int si = clamp_index(i + di, h - 1);
                    for (int dj = -r; dj <= r; ++dj) {
                        const int sj = clamp_index(j + dj, w - 1);
                        out[static_cast<std::size_t>(pl) * plane + si * w + sj] +=
                            g * kernel[static_cast<std::size_t>(di + r) * kernel_size + (dj + r)];
                    }
                }
            }
    return out;
}

std::size_t param_count(const TransformSpec& spec, const TensorShape& shape) {
    switch (spec.kind) {
        case TransformKind::additive: return shape.size();
        case TransformKind::conv:
            return static_cast<std::size_t>(spec.kernel_size) * spec.kernel_size;
        case TransformKind::patch: return shape.size() + 3;
        case TransformKind::flow: return 2 * shape.plane();
        case TransformKind::composite: {
            std::size_t n = spec.children.size();
            for (const auto& child : spec.children) n += param_count(child, shape);
            return n;
        }
    }
    throw std::logic_error("param_count: unreachable");
}

namespace {

void pack_into(const PerturbationParams& eps, std::vector<double>& out) {
    struct Visitor {
        std::vector<double>& out;
        void operator()(const AdditiveParams& p) const {
            out.insert(out.end(), p.delta.data.begin(), p.delta.data.end());
        }
        void operator()(const ConvParams& p) const {
            out.insert(out.end(), p.kernel.data.begin(), p.kernel.data.end());
        }
        void operator()(const PatchParams& p) const {
            out.insert(out.end(), p.pattern.data.begin(), p.pattern.data.end());
            out.push_back(p.row);
            out.push_back(p.col);
            out.push_back(p.size);
        }
        void operator()(const FlowParams& p) const {
            out.insert(out.end(), p.field.data.begin(), p.field.data.end());
        }
        void operator()(const CompositeParams& p) const {
            out.insert(out.end(), p.weights.begin(), p.weights.end());
            for (const auto& child : p.children) pack_into(child, out);
        }
    };
    std::visit(Visitor{out}, eps.value);
}

}  // namespace

FlatVector pack_params(const PerturbationParams& eps) {
    std::vector<double> out;
    pack_into(eps, out);
    return FlatVector(std::move(out));
}

namespace {

PerturbationParams unpack_from(const TransformSpec& spec, const TensorShape& shape,
                               const FlatVector& flat, std::size_t& pos) {
    switch (spec.kind) {
        case TransformKind::additive: {
            FlatVector d(shape.size());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = flat[pos++];
            return {AdditiveParams{std::move(d)}};
        }
        case TransformKind::conv: {
            FlatVector kern(static_cast<std::size_t>(spec.kernel_size) * spec.kernel_size);
            for (std::size_t i = 0; i < kern.size(); ++i) kern[i] = flat[pos++];
            return {ConvParams{std::move(kern)}};
        }
        case TransformKind::patch: {
            PatchParams p{ImageTensor(shape), 0.0, 0.0, 0.0};
            for (std::size_t i = 0; i < p.pattern.data.size(); ++i)
                p.pattern.data[i] = flat[pos++];
            p.row = flat[pos++];
            p.col = flat[pos++];
            p.size = flat[pos++];
            return {std::move(p)};
        }
        case TransformKind::flow: {
            FlatVector f(2 * shape.plane());
            for (std::size_t i = 0; i < f.size(); ++i) f[i] = flat[pos++];
            return {FlowParams{std::move(f)}};
        }
        case TransformKind::composite: {
            CompositeParams p;
            p.weights.resize(spec.children.size());
            for (double& w : p.weights) w = flat[pos++];
            for (const auto& child : spec.children)
                p.children.push_back(unpack_from(child, shape, flat, pos));
            return {std::move(p)};
        }
    }
    throw std::logic_error("unpack_params: unreachable");
}

}  // namespace

PerturbationParams unpack_params(const TransformSpec& spec, const TensorShape& shape,
                                 const FlatVector& flat) {
    if (flat.size() != param_count(spec, shape))
        throw std::invalid_argument("unpack_params: length mismatch");
    std::size_t pos = 0;
    return unpack_from(spec, shape, flat, pos);
}

void clamp_param_domains(const TransformSpec& spec, PerturbationParams& eps) {
    require_kind(spec, eps);
    switch (spec.kind) {
        case TransformKind::patch: {
            auto& p = std::get<PatchParams>(eps.value);
            p.size = std::min(static_cast<double>(spec.patch_max_size), std::max(0.0, p.size));
            clamp_in_place(p.pattern, 0.0, 1.0);
            break;
        }
        case TransformKind::composite: {
            auto& p = std::get<CompositeParams>(eps.value);
            for (double& w : p.weights) w = std::min(1.0, std::max(0.0, w));
            for (std::size_t i = 0; i < spec.children.size(); ++i)
                clamp_param_domains(spec.children[i], p.children[i]);
            break;
        }
        default:
            break;
    }
}

std::vector<double> hard_patch_mask(const TensorShape& shape, int row, int col, int size) {
    std::vector<double> mask(shape.plane(), 0.0);
    for (int j = std::max(0, row); j < std::min(shape.height, row + size); ++j)
        for (int kk = std::max(0, col); kk < std::min(shape.width, col + size); ++kk)
            mask[static_cast<std::size_t>(j) * shape.width + kk] = 1.0;
    return mask;
}

}  // namespace nappure
