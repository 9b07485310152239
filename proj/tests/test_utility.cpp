// Utility measures: counterfactual oracles against brute force, Taylor
// approximations on quadratic cases, trace bias correction, scaling, the
// backward utility recursion, and rank correlation.

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"
#include "upgd/backprop.hpp"
#include "upgd/utility.hpp"

using namespace upgd;

namespace {

Network small_net(Rng& rng, Act hidden, Loss lk, size_t in, std::vector<size_t> widths) {
    std::vector<LayerSpec> spec;
    for (size_t i = 0; i + 1 < widths.size(); ++i) spec.push_back({widths[i], hidden});
    spec.push_back(
        {widths.back(), lk == Loss::CrossEntropy ? Act::SoftmaxOutput : Act::Identity});
    return build_network(spec, in, lk, rng.next_u64());
}

// Brute-force counterfactual: copy the net, zero one weight, re-measure.
double brute_weight_utility(const Network& net, const std::vector<double>& x,
                            const std::vector<double>& y, size_t l, size_t i, size_t j) {
    Network copy = net;
    copy.layers[l].W(i, j) = 0.0;
    return ref::loss_at(copy, x, y) - ref::loss_at(net, x, y);
}

double brute_feature_utility(const Network& net, const std::vector<double>& x,
                             const std::vector<double>& y, size_t l, size_t j) {
    // Zeroing feature j of layer l equals zeroing column j of layer l+1.
    Network copy = net;
    for (size_t k = 0; k < copy.layers[l + 1].W.rows(); ++k) copy.layers[l + 1].W(k, j) = 0.0;
    return ref::loss_at(copy, x, y) - ref::loss_at(net, x, y);
}

} // namespace

TEST_CASE("counterfactual weight utility matches brute force and leaves the net intact",
          "[utility]") {
    Rng rng(11);
    for (int rep = 0; rep < 8; ++rep) {
        Act hidden = rep % 2 == 0 ? Act::Tanh : Act::ReLU;
        Loss lk = rep % 2 == 0 ? Loss::SquaredError : Loss::CrossEntropy;
        Network net = small_net(rng, hidden, lk, 3, {4, 3});
        Network before = net;
        std::vector<double> x = ref::random_x(rng, 3);
        std::vector<double> y =
            lk == Loss::CrossEntropy ? ref::one_hot(size_t(rng.next_below(3)), 3)
                                     : ref::random_x(rng, 3);
        std::vector<Matrix> u = true_weight_utility(net, x, y);
        for (size_t l = 0; l < net.depth(); ++l)
            for (size_t i = 0; i < u[l].rows(); ++i)
                for (size_t j = 0; j < u[l].cols(); ++j)
                    CHECK(ref::close_rel(u[l](i, j), brute_weight_utility(net, x, y, l, i, j),
                                         1e-9, 1e-10));
        for (size_t l = 0; l < net.depth(); ++l) CHECK(net.layers[l].W == before.layers[l].W);
    }
}

TEST_CASE("counterfactual feature utility matches brute force", "[utility]") {
    Rng rng(12);
    Network net = small_net(rng, Act::Tanh, Loss::SquaredError, 4, {5, 3, 2});
    std::vector<double> x = ref::random_x(rng, 4);
    std::vector<double> y = ref::random_x(rng, 2);
    auto u = true_feature_utility(net, x, y);
    REQUIRE(u.size() == 2);  // hidden layers only
    for (size_t l = 0; l < u.size(); ++l)
        for (size_t j = 0; j < u[l].size(); ++j)
            CHECK(ref::close_rel(u[l][j], brute_feature_utility(net, x, y, l, j), 1e-9, 1e-10));
}

TEST_CASE("hand-computed utilities of a single linear unit", "[utility]") {
    // One weight w=2, input 1, target 1: loss 0.5, gradient 1, curvature 1.
    Network net = build_network({{1, Act::Identity}}, 1, Loss::SquaredError, 1);
    net.layers[0].W(0, 0) = 2.0;
    std::vector<double> x = {1.0}, y = {1.0};
    ForwardCache cache;
    forward(net, x.data(), cache);
    DerivativeBundle b;
    backward(net, cache, y, b, true);
    CHECK(b.F[0](0, 0) == 1.0);
    CHECK(b.S[0](0, 0) == 1.0);
    CHECK(approx_weight_utility(b, net, UtilityOrder::First)[0](0, 0) == -2.0);
    // w(S w/2 - F) = 2(1 - 1) = 0, and zeroing the weight truly changes nothing
    CHECK(approx_weight_utility(b, net, UtilityOrder::Second)[0](0, 0) == 0.0);
    CHECK(true_weight_utility(net, x, y)[0](0, 0) == 0.0);
}

TEST_CASE("second-order utility is exact where the loss is quadratic", "[utility]") {
    Rng rng(13);
    SECTION("single linear layer") {
        for (int rep = 0; rep < 200; ++rep) {
            Network net = small_net(rng, Act::Identity, Loss::SquaredError, 4, {3});
            std::vector<double> x = ref::random_x(rng, 4);
            std::vector<double> y = ref::random_x(rng, 3);
            ForwardCache cache;
            forward(net, x.data(), cache);
            DerivativeBundle b;
            backward(net, cache, y, b, true);
            auto approx = approx_weight_utility(b, net, UtilityOrder::Second);
            auto truth = true_weight_utility(net, x, y);
            for (size_t i = 0; i < 3; ++i)
                for (size_t j = 0; j < 4; ++j)
                    CHECK(std::fabs(approx[0](i, j) - truth[0](i, j)) < 1e-8);
        }
    }
    SECTION("last two layers of a deep linear net") {
        for (int rep = 0; rep < 50; ++rep) {
            Network net = small_net(rng, Act::Identity, Loss::SquaredError, 3, {4, 3, 2});
            std::vector<double> x = ref::random_x(rng, 3);
            std::vector<double> y = ref::random_x(rng, 2);
            ForwardCache cache;
            forward(net, x.data(), cache);
            DerivativeBundle b;
            backward(net, cache, y, b, true);
            auto approx = approx_weight_utility(b, net, UtilityOrder::Second);
            auto truth = true_weight_utility(net, x, y);
            for (size_t l = net.depth() - 2; l < net.depth(); ++l)
                for (size_t i = 0; i < approx[l].rows(); ++i)
                    for (size_t j = 0; j < approx[l].cols(); ++j)
                        CHECK(std::fabs(approx[l](i, j) - truth[l](i, j)) < 1e-8);
        }
    }
}

TEST_CASE("feature utility equals the column sum of weight utilities", "[utility]") {
    // Exact algebraic identity: sum over outgoing weight utilities of a
    // feature = -f + s/2 for that feature.
    Rng rng(14);
    Network net = small_net(rng, Act::Tanh, Loss::CrossEntropy, 4, {5, 3});
    std::vector<double> x = ref::random_x(rng, 4);
    std::vector<double> y = ref::one_hot(1, 3);
    ForwardCache cache;
    forward(net, x.data(), cache);
    DerivativeBundle b;
    gate_backward(net, cache, y, b);
    auto wu = approx_weight_utility(b, net, UtilityOrder::Second);
    auto fu = approx_feature_utility(b, UtilityOrder::Second);
    for (size_t j = 0; j < 5; ++j) {
        double col = 0.0;
        for (size_t k = 0; k < 3; ++k) col += wu[1](k, j);
        CHECK(fu[0][j] == Catch::Approx(col).margin(1e-12));
    }
}

TEST_CASE("utility traces apply bias correction", "[utility]") {
    Rng rng(15);
    Network net = small_net(rng, Act::Identity, Loss::SquaredError, 2, {2});
    CHECK_THROWS_AS(UtilityTrace(net, 1.0), std::invalid_argument);
    UtilityTrace tr(net, 0.9);
    CHECK_THROWS_AS(tr.corrected(), std::logic_error);
    std::vector<Matrix> inst{Matrix(2, 2)};
    inst[0].fill(4.0);
    tr.update(inst);
    CHECK(tr.U[0](0, 0) == Catch::Approx(0.4).epsilon(1e-15));
    CHECK(tr.corrected()[0](0, 0) == Catch::Approx(4.0).epsilon(1e-12));
    inst[0].fill(2.0);
    tr.update(inst);
    // trace 0.9*0.4 + 0.1*2 = 0.56; corrected by 1 - 0.81
    CHECK(tr.corrected()[0](1, 1) == Catch::Approx(0.56 / 0.19).epsilon(1e-12));
}

TEST_CASE("global scaling squashes by the maximum with a guarded floor", "[utility]") {
    std::vector<Matrix> uhat{Matrix(1, 2)};
    std::vector<Matrix> ubar;
    uhat[0](0, 0) = 2.0;
    uhat[0](0, 1) = 1.0;
    ScaleInfo info = scale_global(uhat, ubar);
    CHECK_FALSE(info.guard_fired);
    CHECK(info.eta == 2.0);
    CHECK(ubar[0](0, 0) == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(ubar[0](0, 1) == Catch::Approx(0.6224593312018546).epsilon(1e-12));

    uhat[0](0, 0) = -5.0;
    uhat[0](0, 1) = -10.0;
    info = scale_global(uhat, ubar);
    CHECK(info.guard_fired);
    CHECK(info.eta == 10.0);
    CHECK(ubar[0](0, 0) == Catch::Approx(0.3775406687981454).epsilon(1e-12));
    CHECK(ubar[0](0, 1) == Catch::Approx(0.2689414213699951).epsilon(1e-12));

    uhat[0].fill(0.0);
    info = scale_global(uhat, ubar);
    CHECK(info.guard_fired);
    CHECK(info.eta == 1e-12);
    CHECK(ubar[0](0, 0) == 0.5);

    std::vector<Matrix> empty;
    CHECK_THROWS_AS(scale_global(empty, ubar), std::invalid_argument);
}

TEST_CASE("local scaling normalizes rows independently", "[utility]") {
    Matrix uhat(2, 2), ubar;
    uhat(0, 0) = 3.0;
    uhat(0, 1) = 4.0;  // norm 5
    uhat(1, 0) = 0.0;
    uhat(1, 1) = 0.0;  // vanishing norm: passes through
    scale_local_weight(uhat, ubar);
    CHECK(ubar(0, 0) == Catch::Approx(0.6456563062257954).epsilon(1e-12));
    CHECK(ubar(0, 1) == Catch::Approx(0.6899744811276125).epsilon(1e-12));
    CHECK(ubar(1, 0) == 0.5);
    CHECK(ubar(1, 1) == 0.5);

    std::vector<double> fu = {3.0, 4.0}, fo;
    scale_local_feature(fu, fo);
    CHECK(fo[0] == Catch::Approx(0.6456563062257954).epsilon(1e-12));
}

TEST_CASE("backward utility recursion reproduces the direct second-order utility", "[utility]") {
    Rng rng(16);
    for (int rep = 0; rep < 25; ++rep) {
        Act hidden = rep % 2 == 0 ? Act::Tanh : Act::Identity;
        Network net = small_net(rng, hidden, Loss::SquaredError, 3, {4, 3, 2});
        std::vector<double> x;
        // keep activations away from zero so the recursion's divisions are tame
        int tries = 0;
        bool ok = false;
        ForwardCache cache;
        while (!ok && tries++ < 200) {
            x = ref::random_x(rng, 3);
            forward(net, x.data(), cache);
            ok = true;
            for (size_t l = 0; l + 1 < net.depth(); ++l)
                for (double h : cache.h[l])
                    if (std::fabs(h) < 1e-3) ok = false;
        }
        if (!ok) continue;
        std::vector<double> y = ref::random_x(rng, 2);
        PropagatedUtility pu = propagate_utility(net, cache, y);
        DerivativeBundle b;
        backward(net, cache, y, b, true);
        auto direct = approx_weight_utility(b, net, UtilityOrder::Second);
        for (size_t l = 0; l < net.depth(); ++l)
            for (size_t i = 0; i < direct[l].rows(); ++i)
                for (size_t j = 0; j < direct[l].cols(); ++j)
                    CHECK(std::fabs(pu.f[l](i, j) + pu.s[l](i, j) - direct[l](i, j)) < 1e-8);
    }
}

TEST_CASE("backward utility recursion rejects unsupported nets", "[utility]") {
    Rng rng(17);
    Network relu = small_net(rng, Act::ReLU, Loss::SquaredError, 3, {4, 2});
    std::vector<double> x = ref::random_x(rng, 3);
    ForwardCache cache;
    forward(relu, x.data(), cache);
    CHECK_THROWS_AS(propagate_utility(relu, cache, {0.0, 0.0}), std::invalid_argument);

    Network lin = small_net(rng, Act::Identity, Loss::SquaredError, 2, {2, 1});
    std::vector<double> zero = {0.0, 0.0};
    forward(lin, zero.data(), cache);
    CHECK_THROWS_AS(propagate_utility(lin, cache, {0.0}), std::domain_error);
}

TEST_CASE("conservation residual is the literal flow imbalance", "[utility]") {
    // 2-in -> 1 -> 1 linear chain, all weights 1, x = (1,1), y = 0:
    // incoming utilities sum to -3, the outgoing one is -2, residual 1.
    Network net = build_network({{1, Act::Identity}, {1, Act::Identity}}, 2,
                                Loss::SquaredError, 1);
    net.layers[0].W(0, 0) = 1.0;
    net.layers[0].W(0, 1) = 1.0;
    net.layers[1].W(0, 0) = 1.0;
    std::vector<double> x = {1.0, 1.0}, y = {0.0};
    ForwardCache cache;
    forward(net, x.data(), cache);
    auto residual = conservation_check(net, cache, y);
    REQUIRE(residual.size() == 1);
    REQUIRE(residual[0].size() == 1);
    CHECK(residual[0][0] == Catch::Approx(1.0).margin(1e-12));

    // width-1 chains conserve exactly: no cross terms exist to drop
    Network chain = build_network({{1, Act::Identity}, {1, Act::Identity}}, 1,
                                  Loss::SquaredError, 2);
    chain.layers[0].W(0, 0) = 1.0;
    chain.layers[1].W(0, 0) = 2.0;
    std::vector<double> cx = {1.0}, cy = {0.0};
    forward(chain, cx.data(), cache);
    auto r2 = conservation_check(chain, cache, cy);
    CHECK(r2[0][0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("rank correlation handles ties and rejects degenerate input", "[utility]") {
    CHECK(spearman({1.0, 2.0, 3.0}, {10.0, 20.0, 30.0}) == Catch::Approx(1.0).margin(1e-14));
    CHECK(spearman({1.0, 2.0, 3.0}, {3.0, 2.0, 1.0}) == Catch::Approx(-1.0).margin(1e-14));
    CHECK(spearman({1.0, 2.0, 3.0}, {2.0, 1.0, 3.0}) == Catch::Approx(0.5).epsilon(1e-12));
    // tie handling frozen against an established statistics library
    CHECK(spearman({1.0, 2.0, 2.0, 3.0}, {4.0, 1.0, 3.0, 2.0}) ==
          Catch::Approx(-0.632455532033676).epsilon(1e-12));
    CHECK(spearman({0.5, 0.5, 1.0, 2.0, 2.0}, {1.0, 2.0, 3.0, 4.0, 5.0}) ==
          Catch::Approx(0.9486832980505137).epsilon(1e-12));
    CHECK_THROWS_AS(spearman({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), std::domain_error);
    CHECK_THROWS_AS(spearman({1.0, 2.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(spearman({1.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("approximate utilities demand the fields they consume", "[utility]") {
    Rng rng(18);
    Network net = small_net(rng, Act::Tanh, Loss::SquaredError, 3, {4, 2});
    std::vector<double> x = ref::random_x(rng, 3);
    ForwardCache cache;
    forward(net, x.data(), cache);
    DerivativeBundle b;
    backward(net, cache, {0.1, 0.2}, b);  // first-order only
    CHECK_THROWS_AS(approx_weight_utility(b, net, UtilityOrder::Second), std::invalid_argument);
    CHECK_THROWS_AS(approx_feature_utility(b, UtilityOrder::First), std::invalid_argument);
    CHECK_NOTHROW(approx_weight_utility(b, net, UtilityOrder::First));
}
