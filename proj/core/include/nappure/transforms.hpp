#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "nappure/tensor.hpp"

namespace nappure {

enum class TransformKind { additive, conv, patch, flow, composite };

std::string kind_name(TransformKind k);

// Declarative description of one transformation family.
//   conv:      kernel_size k (odd, >= 1), shared across channels
//   patch:     patch_max_size s_max, soft-mask temperature tau (pixels)
//   flow:      no geometry; per-pixel (row, col) offset field
//   composite: ordered children, one level deep
struct TransformSpec {
    TransformKind kind = TransformKind::additive;
    int kernel_size = 3;
    int patch_max_size = 3;
    double patch_tau = 0.5;
    std::vector<TransformSpec> children;

    void validate(const TensorShape& shape) const;
};

TransformSpec additive_spec();
TransformSpec conv_spec(int kernel_size);
TransformSpec patch_spec(int max_size, double tau = 0.5);
TransformSpec flow_spec();
TransformSpec composite_spec(std::vector<TransformSpec> children);

struct AdditiveParams {
    FlatVector delta;  // length C*h*w
};

struct ConvParams {
    FlatVector kernel;  // length k*k, row-major
};

// row/col/size are continuous. Soft (defense) mode reads row/col as the patch
// center; hard (attack) mode reads them as the top-left corner with integer
// values, matching the attack's fixed placement.
struct PatchParams {
    ImageTensor pattern;
    double row = 0.0;
    double col = 0.0;
    double size = 0.0;
};

struct FlowParams {
    FlatVector field;  // length 2*h*w: row-offset plane then col-offset plane
};

struct PerturbationParams;

struct CompositeParams {
    std::vector<double> weights;  // one per child, clamped to [0,1]
    std::vector<PerturbationParams> children;
};

struct PerturbationParams {
    std::variant<AdditiveParams, ConvParams, PatchParams, FlowParams, CompositeParams> value;

    TransformKind kind() const;
};

enum class PatchMode { soft, hard };

// Attack-side constraint set. additive/conv/flow use an l-inf box of the given
// radius around the family's reference point (zero, the uniform kernel, zero).
// patch pins (row, col, size) to the fixed attack geometry and clips the
// pattern to [0,1]. composite carries one constraint per child.
struct AttackConstraint {
    double radius = 0.0;
    int patch_row = 0;
    int patch_col = 0;
    int patch_size = 0;
    std::vector<AttackConstraint> children;
};

// epsilon_0 with f(x, epsilon_0) = x: zero field (additive/flow), center-spike
// kernel (conv), (x_adv, h/2, w/2, 0) for patch, all-zero weights plus child
// identities for composite.
PerturbationParams identity_params(const TransformSpec& spec, const ImageTensor& x_adv);

// Reference point of the attack constraint box: uniform kernel for conv,
// mid-gray pattern at the fixed geometry for patch, zero otherwise.
PerturbationParams attack_reference_params(const TransformSpec& spec,
                                           const TensorShape& shape,
                                           const AttackConstraint& constraint);

ImageTensor apply(const TransformSpec& spec, const ImageTensor& x,
                  const PerturbationParams& eps, PatchMode mode = PatchMode::soft);

struct ApplyVjp {
    ImageTensor grad_x;
    PerturbationParams grad_eps;
};

// Exact vector-Jacobian products of apply. Patch must be in soft mode; the
// hard mask is not differentiable in (row, col, size).
ApplyVjp apply_vjp(const TransformSpec& spec, const ImageTensor& x,
                   const PerturbationParams& eps, const ImageTensor& cotangent,
                   PatchMode mode = PatchMode::soft);

// Energy of the perturbation prior, minimal (zero) at the identity element.
double potential(const TransformSpec& spec, const PerturbationParams& eps);
PerturbationParams potential_grad(const TransformSpec& spec, const PerturbationParams& eps);

// Project eps into the attack constraint set. Idempotent.
PerturbationParams project_constraints(const TransformSpec& spec, const PerturbationParams& eps,
                                       const AttackConstraint& box);

// Convolve both offset planes with a normalized 2-D Gaussian kernel under
// replicate padding.
FlatVector gaussian_smooth_flow(const FlatVector& flow, int kernel_size, double stddev,
                                const TensorShape& shape);
// Adjoint of gaussian_smooth_flow (exact transpose of the padded convolution).
FlatVector gaussian_smooth_flow_adjoint(const FlatVector& cotangent, int kernel_size,
                                        double stddev, const TensorShape& shape);

// Flatten parameters to a single coefficient vector and back; layout is
// family-specific and stable (composite: weights, then children in order).
std::size_t param_count(const TransformSpec& spec, const TensorShape& shape);
FlatVector pack_params(const PerturbationParams& eps);
PerturbationParams unpack_params(const TransformSpec& spec, const TensorShape& shape,
                                 const FlatVector& flat);

// Domain clamps applied between optimizer steps: patch size into [0, s_max],
// patch pattern into [0,1], composite weights into [0,1].
void clamp_param_domains(const TransformSpec& spec, PerturbationParams& eps);

// Hard occlusion mask as an image plane (1 inside the patch, 0 outside).
std::vector<double> hard_patch_mask(const TensorShape& shape, int row, int col, int size);

}  // namespace nappure
