#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "downscale/tensor.hpp"
#include "testutil.hpp"

using namespace downscale;
using testutil::central_diff;
using testutil::conv2d_oracle;
using testutil::max_fd_error;
using testutil::random_tensor;
using testutil::rel_close;

TEST_CASE("tensor basics") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
    Tensor s = Tensor::scalar(7.0);
    CHECK(s.value() == 7.0);
    CHECK_THROWS_AS(t.value(), ShapeError);
}

TEST_CASE("conv2d scaling identity") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::from({1, 1, 1, 1}, {2.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == std::vector<int>{1, 1, 3, 3});
    for (double v : y.values()) CHECK(v == 2.0);
}

TEST_CASE("conv2d hand-summed 2x2") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.numel() == 1);
    CHECK(y.values()[0] == 5.0);
}

TEST_CASE("conv2d matches nested-loop oracle") {
    Rng rng(42);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y = conv2d(x, w, b, 2, 1);
    Tensor ref = conv2d_oracle(x, w, b, 2, 1);
    REQUIRE(y.shape() == ref.shape());
    for (std::size_t i = 0; i < y.values().size(); ++i)
        CHECK(std::fabs(y.values()[i] - ref.values()[i]) < 1e-10);

    // a stride-1 padded case as well
    Tensor y1 = conv2d(x, w, b, 1, 1);
    Tensor ref1 = conv2d_oracle(x, w, b, 1, 1);
    REQUIRE(y1.shape() == ref1.shape());
    for (std::size_t i = 0; i < y1.values().size(); ++i)
        CHECK(std::fabs(y1.values()[i] - ref1.values()[i]) < 1e-10);
}

TEST_CASE("conv2d error paths") {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    Tensor w = Tensor::zeros({2, 2, 3, 3}); // Cin mismatch
    Tensor b = Tensor::zeros({2});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
    Tensor w2 = Tensor::zeros({2, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w2, b, 3, 1), ConfigError);
    CHECK_THROWS_AS(conv2d(x, w2, Tensor::zeros({5}), 1, 1), ShapeError);
    Tensor wbig = Tensor::zeros({2, 3, 9, 9});
    CHECK_THROWS_AS(conv2d(x, wbig, b, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(7);
    Tensor x = random_tensor({2, 2, 5, 5}, rng, -2, 2, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = random_tensor({3}, rng, -1, 1, true);
    auto loss_value = [&] {
        Tensor y = conv2d(x, w, b, 2, 1);
        return mean(y * y).value();
    };
    {
        Tape tape;
        Tensor y = conv2d(x, w, b, 2, 1);
        Tensor loss = mean(y * y);
        tape.backward(loss);
    }
    Rng pick(1);
    CHECK(max_fd_error({x, w, b}, loss_value, pick, 40) < 1e-4);
}

TEST_CASE("batchnorm2d constant channel gives shift") {
    Tensor x = Tensor::full({2, 1, 3, 3}, 5.0);
    Tensor scale = Tensor::full({1}, 2.0), shift = Tensor::full({1}, 0.75);
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("batchnorm2d identity on standardized data") {
    // one channel, values with exact mean 0 and biased variance 1
    Tensor x = Tensor::from({1, 1, 2, 2}, {-1, 1, -1, 1});
    Tensor scale = Tensor::full({1}, 1.0), shift = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-9);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(y.values()[i] - x.values()[i]) < 1e-6);
}

TEST_CASE("batchnorm2d statistics match two-pass oracle") {
    Rng rng(3);
    Tensor x = random_tensor({4, 2, 5, 5}, rng);
    Tensor scale = Tensor::full({2}, 1.0), shift = Tensor::zeros({2});
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    const double eps = 1e-5;
    Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, eps);

    std::vector<double> in_mean, in_var, out_mean, out_var;
    testutil::channel_stats_oracle(x, in_mean, in_var);
    testutil::channel_stats_oracle(y, out_mean, out_var);
    for (int c = 0; c < 2; ++c) {
        CHECK(std::fabs(out_mean[c]) < 1e-9);
        const double expected = in_var[c] / (in_var[c] + eps);
        CHECK(std::fabs(out_var[c] - expected) < 1e-6);
    }
}

TEST_CASE("batchnorm2d running stats and eval mode") {
    Rng rng(4);
    Tensor x = random_tensor({3, 2, 4, 4}, rng);
    Tensor scale = Tensor::full({2}, 1.5), shift = Tensor::full({2}, -0.5);
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 1.0, 1e-5); // momentum 1: copy batch stats
    std::vector<double> mean, var;
    testutil::channel_stats_oracle(x, mean, var);
    for (int c = 0; c < 2; ++c) {
        CHECK(rm.values()[c] == doctest::Approx(mean[c]).epsilon(1e-12));
        CHECK(rv.values()[c] == doctest::Approx(var[c]).epsilon(1e-12));
    }
    // eval on the same batch now reproduces train-mode output
    Tensor ye = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Eval, 0.1, 1e-5);
    Tensor rm2 = rm.clone(), rv2 = rv.clone();
    Tensor yt = batchnorm2d(x, scale, shift, rm2, rv2, BatchNormMode::Train, 0.1, 1e-5);
    for (std::size_t i = 0; i < ye.values().size(); ++i)
        CHECK(ye.values()[i] == doctest::Approx(yt.values()[i]).epsilon(1e-10));
}

TEST_CASE("batchnorm2d degenerate statistics error") {
    Tensor x = Tensor::zeros({1, 2, 1, 1});
    Tensor scale = Tensor::full({2}, 1.0), shift = Tensor::zeros({2});
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    CHECK_THROWS_AS(batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5), DataError);
    // eval mode is fine with a single element
    CHECK_NOTHROW(batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Eval, 0.1, 1e-5));
}

TEST_CASE("batchnorm2d gradient matches finite differences") {
    Rng rng(9);
    Tensor x = random_tensor({2, 2, 3, 3}, rng, -2, 2, true);
    Tensor scale = random_tensor({2}, rng, 0.5, 1.5, true);
    Tensor shift = random_tensor({2}, rng, -0.5, 0.5, true);
    auto loss_value = [&] {
        Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
        Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5);
        return mean(y * y).value();
    };
    {
        Tape tape;
        Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
        Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5);
        tape.backward(mean(y * y));
    }
    Rng pick(2);
    CHECK(max_fd_error({x, scale, shift}, loss_value, pick, 36) < 1e-4);
}

TEST_CASE("relu definition and gradients") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.values() == std::vector<double>{0, 0, 2});

    Tensor neg = Tensor::from({4}, {-3, -1, -0.5, -2}, true);
    {
        Tape tape;
        Tensor z = relu(neg);
        tape.backward(sum(z));
    }
    Tensor zeroed = relu(neg);
    for (double v : zeroed.values()) CHECK(v == 0.0);
    for (double g : neg.grad()) CHECK(g == 0.0);

    Rng rng(5);
    Tensor r = random_tensor({2, 7}, rng);
    Tensor rr = relu(r);
    for (std::size_t i = 0; i < r.values().size(); ++i)
        CHECK(rr.values()[i] == (r.values()[i] > 0 ? r.values()[i] : 0.0));
}

TEST_CASE("upsample_nearest2x replication and backward") {
    Tensor one = Tensor::from({1, 1, 1, 1}, {5});
    Tensor up = upsample_nearest2x(one);
    CHECK(up.shape() == std::vector<int>{1, 1, 2, 2});
    for (double v : up.values()) CHECK(v == 5.0);

    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = upsample_nearest2x(x);
    CHECK(y.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});

    Tensor xg = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    {
        Tape tape;
        Tensor z = upsample_nearest2x(xg);
        tape.backward(sum(z)); // upstream gradient of all ones
    }
    for (double g : xg.grad()) CHECK(g == 4.0);
}

TEST_CASE("upsample gradient mass conservation") {
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 4, 5}, rng, -2, 2, true);
    Tensor weights = random_tensor({2, 3, 8, 10}, rng);
    {
        Tape tape;
        Tensor y = upsample_nearest2x(x);
        tape.backward(sum(y * weights));
    }
    double up_sum = 0.0;
    for (double v : weights.values()) up_sum += v;
    double in_sum = 0.0;
    for (double g : x.grad()) in_sum += g;
    CHECK(in_sum == doctest::Approx(up_sum).epsilon(1e-12));
}

TEST_CASE("concat_channels shapes, slice inverse, gradient split") {
    Rng rng(13);
    Tensor a = random_tensor({1, 2, 4, 4}, rng);
    Tensor b = random_tensor({1, 3, 4, 4}, rng);
    Tensor c = concat_channels(a, b);
    CHECK(c.shape() == std::vector<int>{1, 5, 4, 4});

    Tensor back_a = slice_channels(c, 0, 2);
    Tensor back_b = slice_channels(c, 2, 5);
    CHECK(back_a.values() == a.values());
    CHECK(back_b.values() == b.values());

    Tensor ag = a.clone(), bg = b.clone();
    ag.set_requires_grad(true);
    bg.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum(concat_channels(ag, bg)));
    }
    for (double g : ag.grad()) CHECK(g == 1.0);
    for (double g : bg.grad()) CHECK(g == 1.0);

    auto loss_value = [&] { return sum(concat_channels(ag, bg)).value(); };
    Rng pick(3);
    CHECK(max_fd_error({ag, bg}, loss_value, pick, 16) < 1e-4);

    Tensor mismatch = Tensor::zeros({1, 1, 3, 4});
    CHECK_THROWS_AS(concat_channels(a, mismatch), ShapeError);
}

TEST_CASE("elementwise ops") {
    Rng rng(17);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor zero = Tensor::zeros({3, 4});
    Tensor sum_a = add(a, zero);
    CHECK(sum_a.values() == a.values());

    Tensor diff = sub(a, a);
    for (double v : diff.values()) CHECK(v == 0.0);

    Tensor b = random_tensor({3, 4}, rng);
    Tensor prod = mul(a, b);
    for (std::size_t i = 0; i < prod.values().size(); ++i)
        CHECK(prod.values()[i] == a.values()[i] * b.values()[i]);

    Tensor scaled = scalar_mul(a, -2.5);
    for (std::size_t i = 0; i < scaled.values().size(); ++i)
        CHECK(scaled.values()[i] == -2.5 * a.values()[i]);

    CHECK_THROWS_AS(add(a, Tensor::zeros({4, 3})), ShapeError);
}

TEST_CASE("elementwise gradients vs finite differences") {
    Rng rng(19);
    Tensor a = random_tensor({2, 3}, rng, -2, 2, true);
    Tensor b = random_tensor({2, 3}, rng, -2, 2, true);
    auto loss_value = [&] {
        Tensor y = add(mul(a, b), scalar_mul(sub(a, b), 0.5));
        return mean(y * y).value();
    };
    {
        Tape tape;
        Tensor y = add(mul(a, b), scalar_mul(sub(a, b), 0.5));
        tape.backward(mean(y * y));
    }
    Rng pick(5);
    CHECK(max_fd_error({a, b}, loss_value, pick) < 1e-4);
}

TEST_CASE("signed_pow values") {
    Tensor x = Tensor::from({3}, {8, -8, 0});
    Tensor e = Tensor::scalar(1.0 / 3.0);
    Tensor y = signed_pow(x, e);
    CHECK(y.values()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(y.values()[2] == 0.0);

    CHECK_THROWS_AS(signed_pow(x, Tensor::scalar(0.0)), DomainError);
    CHECK_THROWS_AS(signed_pow(x, Tensor::scalar(-1.0)), DomainError);
}

TEST_CASE("signed_pow identity at e=1") {
    Rng rng(23);
    Tensor x = random_tensor({40}, rng, -2, 2, true);
    Tensor e = Tensor::scalar(1.0);
    Tensor y = signed_pow(x, e);
    for (std::size_t i = 0; i < x.values().size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-14));
    {
        Tape tape;
        Tensor z = signed_pow(x, e);
        tape.backward(sum(z));
    }
    for (std::size_t i = 0; i < x.values().size(); ++i) {
        if (x.values()[i] != 0.0) CHECK(x.grad()[i] == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("signed_pow exponent gradient matches finite differences") {
    Tensor x = Tensor::from({1}, {5.0});
    Tensor e = Tensor::scalar(0.5, true);
    {
        Tape tape;
        Tensor y = signed_pow(x, e);
        tape.backward(sum(y));
    }
    auto loss_value = [&] { return sum(signed_pow(x, e)).value(); };
    const double fd = central_diff(e.values()[0], loss_value, 1e-6);
    CHECK(rel_close(e.grad()[0], fd, 1e-5));
    // analytic: 5^0.5 * ln 5
    CHECK(e.grad()[0] == doctest::Approx(std::sqrt(5.0) * std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("signed_pow odd symmetry is exact") {
    Rng rng(29);
    Tensor e = Tensor::scalar(0.7);
    for (int trial = 0; trial < 200; ++trial) {
        const double v = rng.uniform(-50, 50);
        Tensor pos = Tensor::from({1}, {v});
        Tensor neg = Tensor::from({1}, {-v});
        CHECK(signed_pow(pos, e).values()[0] == -signed_pow(neg, e).values()[0]);
    }
}

TEST_CASE("signed_pow zero input has zero gradients") {
    Tensor x = Tensor::from({2}, {0.0, 3.0}, true);
    Tensor e = Tensor::scalar(0.5, true);
    {
        Tape tape;
        tape.backward(sum(signed_pow(x, e)));
    }
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] != 0.0);
}

TEST_CASE("exp op") {
    Tensor x = Tensor::from({2}, {0.0, 1.0}, true);
    Tensor y = exp(x);
    CHECK(y.values()[0] == 1.0);
    CHECK(y.values()[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-14));
    {
        Tape tape;
        tape.backward(sum(exp(x)));
    }
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("backward linear case: grad of sum(w*x) is x") {
    Tensor w = Tensor::from({3}, {1, 2, 3}, true);
    Tensor x = Tensor::from({3}, {4, -5, 6});
    {
        Tape tape;
        tape.backward(sum(mul(w, x)));
    }
    CHECK(w.grad() == std::vector<double>{4, -5, 6});
}

TEST_CASE("backward through conv-bn-relu chain matches finite differences") {
    Rng rng(31);
    Tensor x = random_tensor({2, 2, 6, 6}, rng, -2, 2, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.8, 0.8, true);
    Tensor b = random_tensor({3}, rng, -0.5, 0.5, true);
    Tensor scale = random_tensor({3}, rng, 0.5, 1.5, true);
    Tensor shift = random_tensor({3}, rng, -0.5, 0.5, true);
    auto loss_value = [&] {
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
        Tensor y = relu(batchnorm2d(conv2d(x, w, b, 2, 1), scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5));
        return mean(y * y).value();
    };
    {
        Tape tape;
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
        Tensor y = relu(batchnorm2d(conv2d(x, w, b, 2, 1), scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5));
        tape.backward(mean(y * y));
    }
    Rng pick(7);
    CHECK(max_fd_error({x, w, b, scale, shift}, loss_value, pick, 48) < 1e-4);
}

TEST_CASE("tensor used twice accumulates both paths") {
    Rng rng(37);
    Tensor x = random_tensor({1, 2, 4, 4}, rng, -2, 2, true);
    Tensor w = random_tensor({2, 4, 3, 3}, rng, -1, 1, true);
    Tensor b = random_tensor({2}, rng, -1, 1, true);
    // skip-link style reuse: x feeds both halves of a concat
    auto loss_value = [&] {
        Tensor y = conv2d(concat_channels(x, x), w, b, 1, 1);
        return mean(y * y).value();
    };
    {
        Tape tape;
        Tensor y = conv2d(concat_channels(x, x), w, b, 1, 1);
        tape.backward(mean(y * y));
    }
    Rng pick(9);
    CHECK(max_fd_error({x, w, b}, loss_value, pick, 32) < 1e-4);
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);          // non-scalar
    Tensor stray = Tensor::scalar(1.0, true);
    CHECK_THROWS_AS(tape.backward(stray), ShapeError);      // not on the tape
}

TEST_CASE("leaves involved in the graph always end with populated grads") {
    Tensor used = Tensor::from({2}, {1, 2}, true);
    Tensor gated = Tensor::from({2}, {-1, -2}, true); // relu kills its gradient
    {
        Tape tape;
        Tensor loss = sum(add(mul(used, used), relu(gated)));
        tape.backward(loss);
    }
    CHECK(used.has_grad());
    CHECK(gated.has_grad());
    for (double g : gated.grad()) CHECK(g == 0.0);
}

TEST_CASE("forward and gradients are deterministic across runs") {
    auto run = [] {
        Rng rng(123);
        Tensor x = random_tensor({2, 2, 6, 6}, rng, -2, 2, true);
        Tensor w = random_tensor({2, 2, 3, 3}, rng, -1, 1, true);
        Tensor b = random_tensor({2}, rng, -1, 1, true);
        Tape tape;
        Tensor y = relu(conv2d(x, w, b, 1, 1));
        tape.backward(mean(y * y));
        return std::make_pair(y.values(), w.grad());
    };
    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("no recording happens without an active tape") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = add(x, x);
    CHECK_FALSE(y.requires_grad());
    Tape tape;
    {
        NoRecord pause;
        Tensor z = add(x, x);
        CHECK_FALSE(z.requires_grad());
    }
    Tensor z = add(x, x);
    CHECK(z.requires_grad());
    CHECK(tape.node_count() == 1);
    tape.backward(sum(z)); // keep the tape consistent before destruction
}

TEST_CASE("gradient correctness across all differentiable ops (randomized)") {
    Rng rng(41);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor x = random_tensor({1, 2, 4, 4}, rng, -2, 2, true);
        // keep |x| away from 0 for signed_pow's finite-difference neighbourhood
        for (auto& v : x.values())
            if (std::fabs(v) < 1e-3) v = 0.5;
        Tensor e = Tensor::scalar(rng.uniform(0.4, 1.8), true);
        Tensor w = random_tensor({2, 2, 3, 3}, rng, -1, 1, true);
        Tensor b = random_tensor({2}, rng, -1, 1, true);
        auto forward = [&] {
            Tensor sp = signed_pow(x, e);
            Tensor up = upsample_nearest2x(sp);
            Tensor c = conv2d(up, w, b, 2, 1);
            Tensor r = relu(c);
            return mean(mul(r, r));
        };
        {
            Tape tape;
            tape.backward(forward());
        }
        auto loss_value = [&] { return forward().value(); };
        Rng pick(100 + static_cast<std::uint64_t>(trial));
        CHECK(max_fd_error({x, e, w, b}, loss_value, pick, 24) < 1e-4);
    }
}
