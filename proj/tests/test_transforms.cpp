#include <doctest.h>

#include <cmath>

#include "nappure/transforms.hpp"
#include "testutil.hpp"

using namespace nappure;
using testutil::finite_difference_gradient;
using testutil::random_image;
using testutil::relative_error;

namespace {

const TensorShape kShape{2, 6, 6};

// Random parameters in the smooth interior of each family: flow offsets keep
// fractional parts away from 0, patch size away from 0.
PerturbationParams random_params(SeededRng& rng, const TransformSpec& spec,
                                 const TensorShape& shape) {
    switch (spec.kind) {
        case TransformKind::additive: {
            FlatVector d(shape.size());
            for (double& v : d.data) v = rng.uniform(-0.2, 0.2);
            return {AdditiveParams{std::move(d)}};
        }
        case TransformKind::conv: {
            FlatVector kern(static_cast<std::size_t>(spec.kernel_size) * spec.kernel_size);
            for (double& v : kern.data) v = rng.uniform(0.0, 0.3);
            return {ConvParams{std::move(kern)}};
        }
        case TransformKind::patch: {
            PatchParams p{random_image(rng, shape), rng.uniform(1.3, shape.height - 1.3),
                          rng.uniform(1.3, shape.width - 1.3), rng.uniform(0.7, 2.5)};
            return {std::move(p)};
        }
        case TransformKind::flow: {
            FlatVector f(2 * shape.plane());
            for (double& v : f.data) {
                const double mag = rng.uniform(0.05, 0.45);
                v = rng.uniform01() < 0.5 ? -mag : mag;
            }
            return {FlowParams{std::move(f)}};
        }
        case TransformKind::composite: {
            CompositeParams p;
            for (const auto& child : spec.children) {
                p.weights.push_back(rng.uniform(0.2, 0.8));
                p.children.push_back(random_params(rng, child, shape));
            }
            return {std::move(p)};
        }
    }
    throw std::logic_error("random_params");
}

std::vector<TransformSpec> all_specs() {
    return {additive_spec(), conv_spec(3), patch_spec(3, 0.5), flow_spec(),
            composite_spec({conv_spec(3), patch_spec(3, 0.5), flow_spec(), additive_spec()})};
}

}  // namespace

TEST_CASE("identity parameters reproduce the image exactly") {
    SeededRng rng(11);
    for (const auto& spec : all_specs()) {
        for (int trial = 0; trial < 20; ++trial) {
            ImageTensor x = random_image(rng, kShape);
            PerturbationParams eps0 = identity_params(spec, x);
            CHECK(max_abs_diff(apply(spec, x, eps0), x) < 1e-12);
            if (spec.kind == TransformKind::patch)
                CHECK(max_abs_diff(apply(spec, x, eps0, PatchMode::hard), x) == 0.0);
        }
    }
}

TEST_CASE("identity element values") {
    ImageTensor x = ImageTensor(TensorShape{1, 2, 2}, std::vector<double>{0.1, 0.2, 0.3, 0.4});

    const auto conv_id = identity_params(conv_spec(3), x);
    const auto& kernel = std::get<ConvParams>(conv_id.value).kernel;
    CHECK(kernel.data == std::vector<double>{0, 0, 0, 0, 1, 0, 0, 0, 0});

    const auto flow_id = identity_params(flow_spec(), x);
    CHECK(std::get<FlowParams>(flow_id.value).field.data == std::vector<double>(8, 0.0));

    const auto patch_id = identity_params(patch_spec(2), x);
    const auto& pp = std::get<PatchParams>(patch_id.value);
    CHECK(pp.pattern.data == x.data);
    CHECK(pp.row == 1.0);
    CHECK(pp.col == 1.0);
    CHECK(pp.size == 0.0);
}

TEST_CASE("conv keeps constants under an averaging kernel") {
    ImageTensor x(TensorShape{1, 5, 5}, 0.5);
    ConvParams kernel{FlatVector(9, 1.0 / 9.0)};
    ImageTensor out = apply(conv_spec(3), x, {kernel});
    CHECK(max_abs_diff(out, x) < 1e-15);
}

TEST_CASE("conv correlation against a hand-computed case") {
    // Center spike through a uniform 3x3 kernel: every output pixel sees the
    // spike exactly once under replicate padding.
    ImageTensor x(TensorShape{1, 3, 3});
    x.at(0, 1, 1) = 1.0;
    ImageTensor out = apply(conv_spec(3), x, {ConvParams{FlatVector(9, 1.0 / 9.0)}});
    for (double v : out.data) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("hard patch places the block exactly") {
    ImageTensor x(TensorShape{1, 4, 4});
    PatchParams p{ImageTensor(TensorShape{1, 4, 4}, 1.0), 1.0, 1.0, 2.0};
    ImageTensor out = apply(patch_spec(4), x, {p}, PatchMode::hard);
    for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 4; ++k) {
            const bool inside = j >= 1 && j < 3 && k >= 1 && k < 3;
            CHECK(out.at(0, j, k) == (inside ? 1.0 : 0.0));
        }
}

TEST_CASE("flow bilinear sampling against the ramp oracle") {
    ImageTensor x(TensorShape{1, 1, 4},
                  std::vector<double>{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0});
    FlowParams f{FlatVector(8)};
    for (std::size_t i = 4; i < 8; ++i) f.field[i] = 0.5;  // column offsets only
    ImageTensor out = apply(flow_spec(), x, {f});
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.5 / 3.0).epsilon(1e-12));
    CHECK(out.at(0, 0, 1) == doctest::Approx(1.5 / 3.0).epsilon(1e-12));
    CHECK(out.at(0, 0, 2) == doctest::Approx(2.5 / 3.0).epsilon(1e-12));
    CHECK(out.at(0, 0, 3) == doctest::Approx(1.0).epsilon(1e-12));  // clamped at the edge
}

TEST_CASE("flow output stays within the neighbor hull") {
    SeededRng rng(21);
    const TransformSpec spec = flow_spec();
    for (int trial = 0; trial < 20; ++trial) {
        ImageTensor x = random_image(rng, kShape);
        PerturbationParams eps = random_params(rng, spec, kShape);
        const auto& field = std::get<FlowParams>(eps.value).field;
        ImageTensor out = apply(spec, x, eps);
        const int h = kShape.height, w = kShape.width;
        for (int c = 0; c < kShape.channels; ++c)
            for (int j = 0; j < h; ++j)
                for (int k = 0; k < w; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(j) * w + k;
                    double sr = std::min<double>(h - 1, std::max(0.0, j + field[idx]));
                    double sc = std::min<double>(
                        w - 1, std::max(0.0, k + field[kShape.plane() + idx]));
                    const int r0 = static_cast<int>(std::floor(sr));
                    const int c0 = static_cast<int>(std::floor(sc));
                    const int r1 = std::min(r0 + 1, h - 1);
                    const int c1 = std::min(c0 + 1, w - 1);
                    const double lo = std::min({x.at(c, r0, c0), x.at(c, r1, c0),
                                                x.at(c, r0, c1), x.at(c, r1, c1)});
                    const double hi = std::max({x.at(c, r0, c0), x.at(c, r1, c0),
                                                x.at(c, r0, c1), x.at(c, r1, c1)});
                    CHECK(out.at(c, j, k) >= lo - 1e-12);
                    CHECK(out.at(c, j, k) <= hi + 1e-12);
                }
        // Partition of unity: any flow maps a constant image to itself.
        ImageTensor constant(kShape, 0.37);
        CHECK(max_abs_diff(apply(spec, constant, eps), constant) < 1e-12);
    }
}

TEST_CASE("composite collapses to identity at zero weights") {
    SeededRng rng(31);
    const TransformSpec spec =
        composite_spec({conv_spec(3), patch_spec(3, 0.5), flow_spec(), additive_spec()});
    ImageTensor x = random_image(rng, kShape);
    PerturbationParams eps = random_params(rng, spec, kShape);
    std::get<CompositeParams>(eps.value).weights.assign(4, 0.0);
    CHECK(max_abs_diff(apply(spec, x, eps), x) == 0.0);
}

TEST_CASE("composite with one full-weight child equals the child") {
    SeededRng rng(32);
    const TransformSpec child = conv_spec(3);
    const TransformSpec spec = composite_spec({child});
    ImageTensor x = random_image(rng, kShape);
    PerturbationParams child_eps = random_params(rng, child, kShape);
    CompositeParams comp;
    comp.weights = {1.0};
    comp.children = {child_eps};
    CHECK(max_abs_diff(apply(spec, x, {comp}), apply(child, x, child_eps)) == 0.0);
}

TEST_CASE("apply_vjp matches finite differences for every family") {
    SeededRng rng(41);
    for (const auto& spec : all_specs()) {
        CAPTURE(kind_name(spec.kind));
        for (int trial = 0; trial < 50; ++trial) {
            ImageTensor x = random_image(rng, kShape);
            PerturbationParams eps = random_params(rng, spec, kShape);
            ImageTensor cot = random_image(rng, kShape, -1.0, 1.0);

            ApplyVjp vjp = apply_vjp(spec, x, eps, cot);

            auto loss_of_eps = [&](const FlatVector& theta) {
                ImageTensor out = apply(spec, x, unpack_params(spec, kShape, theta));
                double acc = 0.0;
                for (std::size_t i = 0; i < out.data.size(); ++i)
                    acc += out.data[i] * cot.data[i];
                return acc;
            };
            const FlatVector fd_eps = finite_difference_gradient(loss_of_eps, pack_params(eps));
            REQUIRE(relative_error(pack_params(vjp.grad_eps), fd_eps) < 1e-4);

            auto loss_of_x = [&](const FlatVector& xflat) {
                ImageTensor out = apply(spec, from_flat(kShape, xflat), eps);
                double acc = 0.0;
                for (std::size_t i = 0; i < out.data.size(); ++i)
                    acc += out.data[i] * cot.data[i];
                return acc;
            };
            const FlatVector fd_x = finite_difference_gradient(loss_of_x, x.flatten());
            REQUIRE(relative_error(vjp.grad_x.flatten(), fd_x) < 1e-4);
        }
    }
}

TEST_CASE("additive vjp is the identity pair") {
    SeededRng rng(42);
    ImageTensor x = random_image(rng, kShape);
    PerturbationParams eps = identity_params(additive_spec(), x);
    ImageTensor cot = random_image(rng, kShape, -1.0, 1.0);
    ApplyVjp vjp = apply_vjp(additive_spec(), x, eps, cot);
    CHECK(vjp.grad_x.data == cot.data);
    CHECK(std::get<AdditiveParams>(vjp.grad_eps.value).delta.data == cot.data);
}

TEST_CASE("zero-weight composite child receives zero gradient") {
    SeededRng rng(43);
    const TransformSpec spec = composite_spec({conv_spec(3), additive_spec()});
    ImageTensor x = random_image(rng, kShape);
    PerturbationParams eps = random_params(rng, spec, kShape);
    std::get<CompositeParams>(eps.value).weights[0] = 0.0;
    ImageTensor cot = random_image(rng, kShape, -1.0, 1.0);
    ApplyVjp vjp = apply_vjp(spec, x, eps, cot);
    const auto& grads = std::get<CompositeParams>(vjp.grad_eps.value);
    for (double g : std::get<ConvParams>(grads.children[0].value).kernel.data) CHECK(g == 0.0);
}

TEST_CASE("shape mismatches are rejected") {
    SeededRng rng(45);
    ImageTensor x = random_image(rng, kShape);
    CHECK_THROWS_AS(apply(additive_spec(), x, {AdditiveParams{FlatVector(3)}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(apply(conv_spec(3), x, {ConvParams{FlatVector(4)}}),
                    std::invalid_argument);
    PatchParams wrong_pattern{ImageTensor(TensorShape{1, 2, 2}), 1.0, 1.0, 1.0};
    CHECK_THROWS_AS(apply(patch_spec(3), x, {wrong_pattern}), std::invalid_argument);
    CHECK_THROWS_AS(apply(flow_spec(), x, {FlowParams{FlatVector(5)}}),
                    std::invalid_argument);
}

TEST_CASE("hard patch vjp is rejected") {
    SeededRng rng(44);
    ImageTensor x = random_image(rng, kShape);
    PerturbationParams eps = random_params(rng, patch_spec(3, 0.5), kShape);
    CHECK_THROWS_AS(apply_vjp(patch_spec(3, 0.5), x, eps, x, PatchMode::hard),
                    std::invalid_argument);
}

TEST_CASE("potential values") {
    SeededRng rng(51);
    ImageTensor x = random_image(rng, kShape);
    for (const auto& spec : all_specs())
        CHECK(potential(spec, identity_params(spec, x)) == 0.0);

    CHECK(potential(additive_spec(),
                    {AdditiveParams{FlatVector(std::vector<double>{0.3, -0.4})}}) ==
          doctest::Approx(0.25).epsilon(1e-12));

    PatchParams p{ImageTensor(kShape), 2.0, 2.0, 5.0};
    CHECK(potential(patch_spec(6, 0.5), {p}) == 5.0);
}

TEST_CASE("potential gradient matches finite differences") {
    SeededRng rng(52);
    for (const auto& spec : all_specs()) {
        CAPTURE(kind_name(spec.kind));
        for (int trial = 0; trial < 50; ++trial) {
            PerturbationParams eps = random_params(rng, spec, kShape);
            auto phi = [&](const FlatVector& theta) {
                return potential(spec, unpack_params(spec, kShape, theta));
            };
            const FlatVector fd = finite_difference_gradient(phi, pack_params(eps));
            REQUIRE(relative_error(pack_params(potential_grad(spec, eps)), fd) < 1e-4);
        }
    }
    // Subgradient at the patch identity size.
    PatchParams at_zero{ImageTensor(kShape), 3.0, 3.0, 0.0};
    const auto g = potential_grad(patch_spec(3, 0.5), {at_zero});
    CHECK(std::get<PatchParams>(g.value).size == 0.0);
}

TEST_CASE("soft mask converges to the hard mask as tau shrinks") {
    const TensorShape shape{1, 6, 6};
    const int corner_row = 1, corner_col = 2, size = 2;
    const std::vector<double> hard = hard_patch_mask(shape, corner_row, corner_col, size);

    // Soft mode reads (row, col) as the center: corner + size/2.
    TransformSpec spec = patch_spec(4, 0.01);
    ImageTensor zeros(shape);
    PatchParams p{ImageTensor(shape, 1.0), corner_row + size / 2.0, corner_col + size / 2.0,
                  static_cast<double>(size)};
    ImageTensor soft = apply(spec, zeros, {p});  // zeros + pattern*mask = mask
    double max_gap = 0.0;
    for (std::size_t i = 0; i < hard.size(); ++i)
        max_gap = std::max(max_gap, std::fabs(soft.data[i] - hard[i]));
    CHECK(max_gap < 1e-3);
}

TEST_CASE("constraint projection") {
    SUBCASE("additive clamp to the ball") {
        AttackConstraint box;
        box.radius = 24.0 / 255.0;
        PerturbationParams eps{AdditiveParams{FlatVector(std::vector<double>{0.2, -0.01})}};
        auto proj = project_constraints(additive_spec(), eps, box);
        const auto& d = std::get<AdditiveParams>(proj.value).delta;
        CHECK(d[0] == doctest::Approx(24.0 / 255.0).epsilon(1e-12));
        CHECK(d[1] == -0.01);
    }
    SUBCASE("conv box sits around the uniform kernel") {
        AttackConstraint box;
        box.radius = 0.025;
        FlatVector kern(25, 1.0 / 25.0);
        kern[7] = 1.0 / 25.0 + 0.1;
        auto proj = project_constraints(conv_spec(5), {ConvParams{kern}}, box);
        CHECK(std::get<ConvParams>(proj.value).kernel[7] ==
              doctest::Approx(1.0 / 25.0 + 0.025).epsilon(1e-12));
    }
    SUBCASE("idempotence and non-expansion") {
        SeededRng rng(61);
        AttackConstraint box;
        box.radius = 0.1;
        for (int trial = 0; trial < 20; ++trial) {
            FlatVector f(2 * kShape.plane());
            for (double& v : f.data) v = rng.uniform(-0.5, 0.5);
            PerturbationParams eps{FlowParams{f}};
            auto once = project_constraints(flow_spec(), eps, box);
            auto twice = project_constraints(flow_spec(), once, box);
            CHECK(std::get<FlowParams>(once.value).field.data ==
                  std::get<FlowParams>(twice.value).field.data);
            CHECK(norm_inf(std::get<FlowParams>(once.value).field) <= box.radius + 1e-15);
        }
    }
    SUBCASE("inside the box is untouched") {
        AttackConstraint box;
        box.radius = 0.3;
        PerturbationParams eps{AdditiveParams{FlatVector(std::vector<double>{0.1, -0.2})}};
        auto proj = project_constraints(additive_spec(), eps, box);
        CHECK(std::get<AdditiveParams>(proj.value).delta.data ==
              std::vector<double>{0.1, -0.2});
    }
    SUBCASE("patch snaps geometry and clips the pattern") {
        AttackConstraint box;
        box.patch_row = 2;
        box.patch_col = 3;
        box.patch_size = 2;
        PatchParams p{ImageTensor(kShape, 1.7), 0.0, 0.0, 5.0};
        auto proj = project_constraints(patch_spec(3), {p}, box);
        const auto& q = std::get<PatchParams>(proj.value);
        CHECK(q.row == 2.0);
        CHECK(q.col == 3.0);
        CHECK(q.size == 2.0);
        CHECK(q.pattern.at(0, 0, 0) == 1.0);
    }
    SUBCASE("projection never increases distance to the reference") {
        SeededRng rng(62);
        AttackConstraint box;
        box.radius = 0.025;
        const double ref = 1.0 / 9.0;
        for (int trial = 0; trial < 20; ++trial) {
            FlatVector kern(9);
            for (double& v : kern.data) v = rng.uniform(-0.5, 0.7);
            auto proj = project_constraints(conv_spec(3), {ConvParams{kern}}, box);
            const auto& q = std::get<ConvParams>(proj.value).kernel;
            for (std::size_t i = 0; i < 9; ++i)
                CHECK(std::fabs(q[i] - ref) <= std::fabs(kern[i] - ref) + 1e-15);
        }
    }
    SUBCASE("kind mismatch is an error") {
        AttackConstraint box;
        box.radius = 0.1;
        PerturbationParams eps{AdditiveParams{FlatVector(4)}};
        CHECK_THROWS_AS(project_constraints(flow_spec(), eps, box), std::invalid_argument);
    }
}

TEST_CASE("flow smoothing") {
    const TensorShape shape{1, 9, 9};

    SUBCASE("constants pass through") {
        FlatVector flow(2 * shape.plane(), 0.7);
        FlatVector out = gaussian_smooth_flow(flow, 3, 1.0, shape);
        for (double v : out.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
    }
    SUBCASE("zero maps to zero") {
        FlatVector flow(2 * shape.plane());
        FlatVector out = gaussian_smooth_flow(flow, 9, 1.5, shape);
        for (double v : out.data) CHECK(v == 0.0);
    }
    SUBCASE("spike keeps exactly the center weight") {
        FlatVector flow(2 * shape.plane());
        flow[4 * 9 + 4] = 1.0;
        FlatVector out = gaussian_smooth_flow(flow, 9, 1.5, shape);
        double sum = 0.0;
        for (int di = -4; di <= 4; ++di)
            for (int dj = -4; dj <= 4; ++dj)
                sum += std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
        CHECK(out[4 * 9 + 4] == doctest::Approx(1.0 / sum).epsilon(1e-12));
    }
    SUBCASE("even kernel is rejected") {
        FlatVector flow(2 * shape.plane());
        CHECK_THROWS_AS(gaussian_smooth_flow(flow, 4, 1.0, shape), std::invalid_argument);
    }
    SUBCASE("adjoint is the true transpose") {
        SeededRng rng(71);
        FlatVector a = testutil::random_vector(rng, 2 * shape.plane(), -1.0, 1.0);
        FlatVector b = testutil::random_vector(rng, 2 * shape.plane(), -1.0, 1.0);
        const double lhs = dot(gaussian_smooth_flow(a, 3, 1.0, shape), b);
        const double rhs = dot(a, gaussian_smooth_flow_adjoint(b, 3, 1.0, shape));
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("param packing round-trips") {
    SeededRng rng(81);
    for (const auto& spec : all_specs()) {
        PerturbationParams eps = random_params(rng, spec, kShape);
        FlatVector flat = pack_params(eps);
        CHECK(flat.size() == param_count(spec, kShape));
        PerturbationParams back = unpack_params(spec, kShape, flat);
        CHECK(pack_params(back).data == flat.data);
    }
}

TEST_CASE("domain clamps") {
    TransformSpec spec = patch_spec(3, 0.5);
    PerturbationParams eps{PatchParams{ImageTensor(kShape, 1.5), 2.0, 2.0, 9.0}};
    clamp_param_domains(spec, eps);
    const auto& p = std::get<PatchParams>(eps.value);
    CHECK(p.size == 3.0);
    CHECK(p.pattern.at(0, 0, 0) == 1.0);

    TransformSpec comp = composite_spec({additive_spec()});
    CompositeParams cp;
    cp.weights = {1.7};
    cp.children = {PerturbationParams{AdditiveParams{FlatVector(kShape.size())}}};
    PerturbationParams ceps{cp};
    clamp_param_domains(comp, ceps);
    CHECK(std::get<CompositeParams>(ceps.value).weights[0] == 1.0);
}
