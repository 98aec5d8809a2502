#include "downscale/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "downscale/losses.hpp"
#include "downscale/preprocess.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"
#include "downscale/unet.hpp"

namespace downscale {

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

double central_diff(double& slot, const std::function<double()>& f, double h) {
    const double x0 = slot;
    slot = x0 + h;
    const double fp = f();
    slot = x0 - h;
    const double fm = f();
    slot = x0;
    return (fp - fm) / (2.0 * h);
}

// worst relative FD error over every element of the given leaves
double fd_worst(std::vector<Tensor> leaves, const std::function<double()>& loss_value, double h = 1e-5) {
    double worst = 0.0;
    for (Tensor& leaf : leaves) {
        for (std::size_t i = 0; i < leaf.values().size(); ++i) {
            const double fd = central_diff(leaf.values()[i], loss_value, h);
            const double an = leaf.grad()[i];
            const double m = std::max(std::fabs(fd), std::fabs(an));
            if (m < 1e-5) continue; // below FD resolution
            worst = std::max(worst, std::fabs(fd - an) / m);
        }
    }
    return worst;
}

struct Suite {
    std::vector<CheckResult> results;

    void run(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        r.name = name;
        try {
            auto [ok, detail] = body();
            r.passed = ok;
            r.detail = detail;
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        const auto t1 = std::chrono::steady_clock::now();
        r.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        results.push_back(std::move(r));
    }
};

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

} // namespace

std::vector<CheckResult> run_self_checks(const SelfCheckHooks& hooks) {
    Suite suite;

    suite.run("conv_forward_oracle", [] {
        Rng rng(101);
        Tensor x = random_tensor({2, 3, 8, 8}, rng, -2, 2);
        Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1);
        Tensor b = random_tensor({4}, rng, -1, 1);
        Tensor fast = conv2d(x, w, b, 2, 1);
        // direct nested-loop evaluation
        double worst = 0.0;
        for (int n = 0; n < 2; ++n)
            for (int oc = 0; oc < 4; ++oc)
                for (int oh = 0; oh < 4; ++oh)
                    for (int ow = 0; ow < 4; ++ow) {
                        double acc = b.values()[static_cast<std::size_t>(oc)];
                        for (int ic = 0; ic < 3; ++ic)
                            for (int ki = 0; ki < 3; ++ki)
                                for (int kj = 0; kj < 3; ++kj) {
                                    const int ih = oh * 2 - 1 + ki, iw = ow * 2 - 1 + kj;
                                    if (ih < 0 || ih >= 8 || iw < 0 || iw >= 8) continue;
                                    acc += x.at4(n, ic, ih, iw) * w.at4(oc, ic, ki, kj);
                                }
                        worst = std::max(worst, std::fabs(acc - fast.at4(n, oc, oh, ow)));
                    }
        return std::make_pair(worst < 1e-10, "max abs diff " + fmt(worst));
    });

    suite.run("conv_gradient_check", [&hooks] {
        testhooks::conv_grad_weight_scale = hooks.conv_grad_weight_scale;
        Rng rng(102);
        Tensor x = random_tensor({1, 2, 6, 6}, rng, -2, 2, true);
        Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
        Tensor b = random_tensor({3}, rng, -1, 1, true);
        auto loss_value = [&] {
            Tensor y = conv2d(x, w, b, 1, 1);
            return mean(y * y).value();
        };
        {
            Tape tape;
            Tensor y = conv2d(x, w, b, 1, 1);
            tape.backward(mean(y * y));
        }
        const double worst = fd_worst({x, w, b}, loss_value);
        testhooks::conv_grad_weight_scale = 1.0;
        return std::make_pair(worst < 1e-4, "max rel err " + fmt(worst));
    });

    suite.run("batchnorm_statistics", [] {
        Rng rng(103);
        Tensor x = random_tensor({4, 3, 6, 6}, rng, -3, 3);
        Tensor scale = Tensor::full({3}, 1.0), shift = Tensor::zeros({3});
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
        Tensor y = batchnorm2d(x, scale, shift, rm, rv, BatchNormMode::Train, 0.1, 1e-5);
        double worst = 0.0;
        const std::size_t hw = 36;
        for (int c = 0; c < 3; ++c) {
            double s = 0.0;
            for (int n = 0; n < 4; ++n) {
                const double* p = y.data() + (static_cast<std::size_t>(n) * 3 + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            worst = std::max(worst, std::fabs(s / (4.0 * hw)));
        }
        return std::make_pair(worst < 1e-9, "max channel mean " + fmt(worst));
    });

    suite.run("batchnorm_gradient_check", [] {
        Rng rng(104);
        Tensor x = random_tensor({2, 2, 4, 4}, rng, -2, 2, true);
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
        const double worst = fd_worst({x, scale, shift}, loss_value);
        return std::make_pair(worst < 1e-4, "max rel err " + fmt(worst));
    });

    suite.run("gamma_roundtrip", [] {
        Rng rng(105);
        double worst = 0.0;
        for (int i = 0; i < 500; ++i) {
            const double g = rng.uniform(0.3, 4.0);
            GammaTransform t = GammaTransform::fixed(g, {0});
            const double mag = std::pow(10.0, rng.uniform(-6.0, 6.0));
            const double x = rng.uniform() < 0.5 ? -mag : mag;
            Tensor back = gamma_inverse(gamma_forward(Tensor::from({1, 1, 1}, {x}), t), t);
            worst = std::max(worst, std::fabs(back.values()[0] - x) / std::fabs(x));
        }
        return std::make_pair(worst < 1e-9, "max rel err " + fmt(worst));
    });

    suite.run("gamma_exponent_gradient", [] {
        GammaTransform t = GammaTransform::learnable({0});
        Tensor x = Tensor::from({1, 3, 1}, {2.0, 5.0, 0.5});
        auto loss_value = [&] { return sum(gamma_forward(x, t)).value(); };
        {
            Tape tape;
            tape.backward(sum(gamma_forward(x, t)));
        }
        const double fd = central_diff(t.theta().values()[0], loss_value, 1e-6);
        const double an = t.theta().grad()[0];
        const double rel = std::fabs(fd - an) / std::max(std::fabs(fd), std::fabs(an));
        return std::make_pair(rel < 1e-5, "rel err " + fmt(rel));
    });

    suite.run("signed_pow_odd_symmetry", [] {
        Rng rng(106);
        Tensor e = Tensor::scalar(0.4545454545454545);
        for (int i = 0; i < 300; ++i) {
            const double v = rng.uniform(-100.0, 100.0);
            Tensor a = signed_pow(Tensor::from({1}, {v}), e);
            Tensor b = signed_pow(Tensor::from({1}, {-v}), e);
            if (a.values()[0] != -b.values()[0]) return std::make_pair(false, "asymmetry at x=" + fmt(v));
        }
        return std::make_pair(true, std::string("exact over 300 samples"));
    });

    suite.run("upsample_mass_conservation", [] {
        Rng rng(107);
        Tensor x = random_tensor({1, 2, 5, 7}, rng, -2, 2, true);
        Tensor weights = random_tensor({1, 2, 10, 14}, rng, -1, 1);
        {
            Tape tape;
            tape.backward(sum(upsample_nearest2x(x) * weights));
        }
        double upstream = 0.0, into = 0.0;
        for (double v : weights.values()) upstream += v;
        for (double g : x.grad()) into += g;
        const double err = std::fabs(upstream - into) / std::max(1.0, std::fabs(upstream));
        return std::make_pair(err < 1e-12, "rel mass err " + fmt(err));
    });

    suite.run("unet_end_to_end_gradient", [] {
        UNetConfig cfg = UNetConfig::desk(3);
        cfg.base_width = 4;
        Model m = build_unet(cfg, 55);
        Rng rng(108);
        Tensor x = random_tensor({2, 3, 8, 8}, rng, -2, 2);
        Tensor target = random_tensor({2, 1, 8, 8}, rng, -1, 1);
        auto loss_value = [&] {
            Model fresh = m;
            for (ConvBlock& b : fresh.blocks)
                if (b.has_bn) {
                    b.bn_running_mean = Tensor::zeros({b.bn_running_mean.dim(0)});
                    b.bn_running_var = Tensor::full({b.bn_running_var.dim(0)}, 1.0);
                }
            Tensor y = unet_forward(fresh, x, BatchNormMode::Train);
            return l2_loss(y, target).value();
        };
        {
            Tape tape;
            Tensor y = unet_forward(m, x, BatchNormMode::Train);
            tape.backward(l2_loss(y, target));
        }
        const double worst = fd_worst({m.blocks[0].weight, m.blocks[11].weight, m.blocks[11].bias}, loss_value);
        return std::make_pair(worst < 1e-4, "max rel err " + fmt(worst));
    });

    suite.run("determinism", [] {
        auto run = [] {
            Rng rng(109);
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
        const bool ok = v1 == v2 && g1 == g2;
        return std::make_pair(ok, std::string(ok ? "bit-identical" : "MISMATCH"));
    });

    return suite.results;
}

} // namespace downscale
