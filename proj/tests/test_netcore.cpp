// Network engine: forward agreement with a naive reference, loss values,
// finite-difference gradient and curvature oracles, construction contracts.

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"
#include "upgd/backprop.hpp"
#include "upgd/network.hpp"

using namespace upgd;

namespace {

Network random_net(Rng& rng, Act hidden, Loss loss_kind, size_t in, std::vector<size_t> widths,
                   bool bias = false) {
    std::vector<LayerSpec> spec;
    for (size_t i = 0; i + 1 < widths.size(); ++i) spec.push_back({widths[i], hidden});
    spec.push_back({widths.back(),
                    loss_kind == Loss::CrossEntropy ? Act::SoftmaxOutput : Act::Identity});
    return build_network(spec, in, loss_kind, rng.next_u64(), bias);
}

} // namespace

TEST_CASE("losses match hand-computed values", "[netcore]") {
    CHECK(loss({2.0}, {1.0}, Loss::SquaredError) == 0.5);
    CHECK(loss({1.0, -1.0}, {0.0, 1.0}, Loss::SquaredError) == 2.5);
    CHECK(loss({0.5, 0.5}, {1.0, 0.0}, Loss::CrossEntropy) ==
          Catch::Approx(0.6931471805599453).epsilon(1e-14));
    CHECK(std::isinf(loss({0.0, 1.0}, {1.0, 0.0}, Loss::CrossEntropy)));
    // probabilities floor at 1e-15 before the log
    CHECK(loss({1e-18, 1.0}, {1.0, 0.0}, Loss::CrossEntropy) ==
          Catch::Approx(34.538776394910684).epsilon(1e-13));
    CHECK(loss({1.0, 0.0}, {1.0, 0.0}, Loss::CrossEntropy) == 0.0);
    CHECK_THROWS_AS(loss({1.0}, {1.0, 2.0}, Loss::SquaredError), std::invalid_argument);
}

TEST_CASE("forward pass agrees with the naive reference", "[netcore]") {
    Rng rng(101);
    for (int rep = 0; rep < 30; ++rep) {
        Act hidden = std::vector<Act>{Act::Identity, Act::ReLU, Act::LeakyReLU,
                                      Act::Tanh}[size_t(rng.next_below(4))];
        Loss lk = rng.next_below(2) == 0 ? Loss::SquaredError : Loss::CrossEntropy;
        size_t in = 2 + size_t(rng.next_below(6));
        std::vector<size_t> widths;
        size_t depth = 1 + size_t(rng.next_below(3));
        for (size_t d = 0; d < depth; ++d) widths.push_back(2 + size_t(rng.next_below(6)));
        bool bias = rng.next_below(2) == 0;
        Network net = random_net(rng, hidden, lk, in, widths, bias);

        std::vector<double> x = ref::random_x(rng, in);
        ForwardCache cache;
        forward(net, x.data(), cache);
        std::vector<double> want = ref::forward_naive(net, x);
        REQUIRE(cache.yhat().size() == want.size());
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(ref::close_rel(cache.yhat()[i], want[i], 1e-12, 1e-14));
    }
}

TEST_CASE("validating forward rejects bad input", "[netcore]") {
    Rng rng(7);
    Network net = random_net(rng, Act::Tanh, Loss::SquaredError, 3, {4, 2});
    CHECK_THROWS_AS(forward(net, std::vector<double>{1.0, 2.0}), std::invalid_argument);
    std::vector<double> bad = {1.0, std::numeric_limits<double>::quiet_NaN(), 0.0};
    CHECK_THROWS_AS(forward(net, bad), std::invalid_argument);
    std::vector<double> ok = {1.0, -1.0, 0.5};
    CHECK(forward(net, ok).yhat().size() == 2);
}

TEST_CASE("gradients match central finite differences", "[netcore]") {
    Rng rng(202);
    int checked = 0;
    for (int rep = 0; rep < 40; ++rep) {
        Act hidden = std::vector<Act>{Act::Identity, Act::ReLU, Act::LeakyReLU,
                                      Act::Tanh}[size_t(rep % 4)];
        Loss lk = rep % 2 == 0 ? Loss::SquaredError : Loss::CrossEntropy;
        size_t in = 2 + size_t(rng.next_below(4));
        std::vector<size_t> widths = {3 + size_t(rng.next_below(4)), 2 + size_t(rng.next_below(3))};
        bool bias = rep % 3 == 0;
        Network net = random_net(rng, hidden, lk, in, widths, bias);

        std::vector<double> x;
        int tries = 0;
        do {
            x = ref::random_x(rng, in);
        } while (ref::near_kink(net, x) && ++tries < 50);
        if (ref::near_kink(net, x)) continue;

        std::vector<double> y =
            lk == Loss::CrossEntropy
                ? ref::one_hot(size_t(rng.next_below(widths.back())), widths.back())
                : ref::random_x(rng, widths.back());

        ForwardCache cache;
        forward(net, x.data(), cache);
        DerivativeBundle b;
        backward(net, cache, y, b);
        for (size_t l = 0; l < net.depth(); ++l)
            for (size_t i = 0; i < b.F[l].rows(); ++i)
                for (size_t j = 0; j < b.F[l].cols(); ++j) {
                    double fd = ref::fd_gradient(net, x, y, l, i, j);
                    CHECK(ref::close_rel(b.F[l](i, j), fd, 1e-4));
                    ++checked;
                }
    }
    CHECK(checked > 1000);
}

TEST_CASE("final-layer curvature seeds match their closed forms", "[netcore]") {
    Rng rng(303);
    SECTION("softmax with cross entropy") {
        Network net = random_net(rng, Act::Tanh, Loss::CrossEntropy, 4, {5, 3});
        std::vector<double> x = ref::random_x(rng, 4);
        std::vector<double> y = ref::one_hot(1, 3);
        ForwardCache cache;
        forward(net, x.data(), cache);
        DerivativeBundle b;
        backward(net, cache, y, b, true);
        const std::vector<double>& q = cache.yhat();
        size_t L = net.depth() - 1;
        for (size_t i = 0; i < 3; ++i) {
            CHECK(b.ga[L][i] == Catch::Approx(q[i] - y[i]).margin(1e-12));
            CHECK(b.sa[L][i] == Catch::Approx(q[i] - q[i] * q[i]).margin(1e-12));
        }
    }
    SECTION("identity output with squared error") {
        Network net = random_net(rng, Act::Tanh, Loss::SquaredError, 4, {5, 2});
        std::vector<double> x = ref::random_x(rng, 4);
        std::vector<double> y = {0.3, -0.2};
        ForwardCache cache;
        forward(net, x.data(), cache);
        DerivativeBundle b;
        backward(net, cache, y, b, true);
        size_t L = net.depth() - 1;
        for (size_t i = 0; i < 2; ++i) {
            CHECK(b.ga[L][i] == Catch::Approx(cache.yhat()[i] - y[i]).margin(1e-12));
            CHECK(b.sa[L][i] == 1.0);
        }
    }
}

TEST_CASE("curvature estimates are exact where the loss is quadratic", "[netcore]") {
    // For fully linear nets with squared error the loss is quadratic in each
    // weight of the last two layers, so the estimate's dropped terms vanish.
    Rng rng(404);
    for (int rep = 0; rep < 10; ++rep) {
        Network net = random_net(rng, Act::Identity, Loss::SquaredError, 3, {4, 3, 2});
        std::vector<double> x = ref::random_x(rng, 3);
        std::vector<double> y = ref::random_x(rng, 2);
        ForwardCache cache;
        forward(net, x.data(), cache);
        DerivativeBundle b;
        backward(net, cache, y, b, true);
        for (size_t l = net.depth() - 2; l < net.depth(); ++l)
            for (size_t i = 0; i < b.S[l].rows(); ++i)
                for (size_t j = 0; j < b.S[l].cols(); ++j) {
                    double fd = ref::fd_second(net, x, y, l, i, j);
                    CHECK(ref::close_rel(b.S[l](i, j), fd, 1e-6, 1e-9));
                }
    }
}

TEST_CASE("network construction validates its specification", "[netcore]") {
    CHECK_THROWS_AS(build_network({}, 3, Loss::SquaredError, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_network({{0, Act::ReLU}, {1, Act::Identity}}, 3, Loss::SquaredError, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_network({{4, Act::Identity}}, 0, Loss::SquaredError, 1),
                    std::invalid_argument);
    // softmax only as the final layer, and only with cross entropy
    CHECK_THROWS_AS(
        build_network({{4, Act::SoftmaxOutput}, {2, Act::Identity}}, 3, Loss::CrossEntropy, 1),
        std::invalid_argument);
    CHECK_THROWS_AS(build_network({{4, Act::SoftmaxOutput}}, 3, Loss::SquaredError, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_network({{4, Act::Identity}}, 3, Loss::CrossEntropy, 1),
                    std::invalid_argument);

    Network a = build_network({{4, Act::ReLU}, {2, Act::Identity}}, 3, Loss::SquaredError, 42);
    Network b = build_network({{4, Act::ReLU}, {2, Act::Identity}}, 3, Loss::SquaredError, 42);
    Network c = build_network({{4, Act::ReLU}, {2, Act::Identity}}, 3, Loss::SquaredError, 43);
    CHECK(a.layers[0].W == b.layers[0].W);
    CHECK(a.layers[1].W == b.layers[1].W);
    CHECK_FALSE(a.layers[0].W == c.layers[0].W);
    CHECK(a.weight_count() == 4 * 3 + 2 * 4);
}

TEST_CASE("bias columns start at zero and receive gradients", "[netcore]") {
    Rng rng(505);
    Network net =
        build_network({{4, Act::Tanh}, {2, Act::Identity}}, 3, Loss::SquaredError, 9, true);
    CHECK(net.layers[0].W.cols() == 4);  // 3 inputs + bias
    for (size_t i = 0; i < 4; ++i) CHECK(net.layers[0].W(i, 3) == 0.0);
    std::vector<double> x = ref::random_x(rng, 3);
    std::vector<double> y = {0.1, 0.2};
    ForwardCache cache;
    forward(net, x.data(), cache);
    DerivativeBundle b;
    backward(net, cache, y, b);
    for (size_t i = 0; i < 4; ++i) {
        double fd = ref::fd_gradient(net, x, y, 0, i, 3);
        CHECK(ref::close_rel(b.F[0](i, 3), fd, 1e-4));
    }
}

TEST_CASE("activation derivative conventions", "[netcore]") {
    CHECK(act_deriv(Act::ReLU, 0.0, 0.0, 0.0) == 0.0);  // subgradient at the kink
    CHECK(act_deriv(Act::ReLU, 0.0, 1.5, 1.5) == 1.0);
    CHECK(act_deriv(Act::LeakyReLU, 0.01, -2.0, -0.02) == 0.01);
    double h = std::tanh(0.7);
    CHECK(act_deriv(Act::Tanh, 0.0, 0.7, h) == Catch::Approx(1.0 - h * h).epsilon(1e-15));
    CHECK(act_second_deriv(Act::Tanh, 0.0, 0.7, h) ==
          Catch::Approx(-2.0 * h * (1.0 - h * h)).epsilon(1e-15));
    CHECK(act_second_deriv(Act::ReLU, 0.0, 0.3, 0.3) == 0.0);
    CHECK(act_second_deriv(Act::Identity, 0.0, 0.3, 0.3) == 0.0);
}

TEST_CASE("backward rejects a stale cache", "[netcore]") {
    Rng rng(606);
    Network net = random_net(rng, Act::Tanh, Loss::SquaredError, 3, {4, 2});
    Network other = random_net(rng, Act::Tanh, Loss::SquaredError, 5, {4, 2});
    std::vector<double> x = ref::random_x(rng, 5);
    ForwardCache cache;
    forward(other, x.data(), cache);
    DerivativeBundle b;
    CHECK_THROWS_AS(backward(net, cache, {0.0, 0.0}, b), std::invalid_argument);
}
