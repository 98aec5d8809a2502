#include "downscale/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace downscale {

namespace testhooks {
double conv_grad_weight_scale = 1.0;
} // namespace testhooks

namespace {

thread_local Tape* g_active_tape = nullptr;

std::int64_t product(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapCRM = Eigen::Map<const RowMat>;

// C[M x N] = or += A[M x K] * B[K x N], all row-major contiguous
void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate) {
    MapCRM a(A, M, K), b(B, K, N);
    MapRM c(C, M, N);
    if (accumulate)
        c.noalias() += a * b;
    else
        c.noalias() = a * b;
}

// C[M x N] += A^T * B where A is [K x M]
void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate) {
    MapCRM a(A, K, M), b(B, K, N);
    MapRM c(C, M, N);
    if (accumulate)
        c.noalias() += a.transpose() * b;
    else
        c.noalias() = a.transpose() * b;
}

// C[M x N] += A * B^T where B is [N x K]
void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate) {
    MapCRM a(A, M, K), b(B, N, K);
    MapRM c(C, M, N);
    if (accumulate)
        c.noalias() += a * b.transpose();
    else
        c.noalias() = a * b.transpose();
}

// Scatter one sample's input patches into a [Cin*Kh*Kw x OH*OW] column matrix.
void im2col(const double* src, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW,
            double* col) {
    const int ohw = OH * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = col + (static_cast<std::size_t>((c * kh + ki) * kw + kj)) * ohw;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill(row + oh * OW, row + (oh + 1) * OW, 0.0);
                        continue;
                    }
                    const double* srow = src + (static_cast<std::size_t>(c) * H + ih) * W;
                    const int base = -pad + kj;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride + base;
                        row[oh * OW + ow] = (iw >= 0 && iw < W) ? srow[iw] : 0.0;
                    }
                }
            }
        }
    }
}

// Accumulate a column matrix back into one sample's input gradient.
void col2im(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW,
            double* dst) {
    const int ohw = OH * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = col + (static_cast<std::size_t>((c * kh + ki) * kw + kj)) * ohw;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    double* drow = dst + (static_cast<std::size_t>(c) * H + ih) * W;
                    const int base = -pad + kj;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride + base;
                        if (iw >= 0 && iw < W) drow[iw] += row[oh * OW + ow];
                    }
                }
            }
        }
    }
}

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Reusable per-thread conv workspaces; column buffers are fully overwritten
// by im2col / gemm before use, so stale contents never leak.
std::vector<double>& conv_workspace(int which, std::size_t n) {
    static thread_local std::vector<double> ws[2];
    if (ws[which].size() < n) ws[which].resize(n);
    return ws[which];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace

// ---- Tensor ----

Tensor Tensor::make(std::vector<int> shape, bool requires_grad) {
    for (int d : shape)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->numel = product(t.d_->shape);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    t.d_->v.assign(static_cast<std::size_t>(t.d_->numel), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    t.d_->v.assign(static_cast<std::size_t>(t.d_->numel), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(values.size()) != t.d_->numel)
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(t.d_->shape));
    t.d_->v = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->numel = 1;
    t.d_->v = {value};
    t.d_->requires_grad = requires_grad;
    return t;
}

double Tensor::value() const {
    if (d_->numel != 1) throw ShapeError("value() requires a single-element tensor, got " + shape_str(d_->shape));
    return d_->v[0];
}

double& Tensor::at4(int n, int c, int h, int w) {
    const auto& s = d_->shape;
    return d_->v[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
}

double Tensor::at4(int n, int c, int h, int w) const {
    const auto& s = d_->shape;
    return d_->v[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
}

std::vector<double>& Tensor::grad() {
    if (d_->g.empty()) d_->g.assign(static_cast<std::size_t>(d_->numel), 0.0);
    return d_->g;
}

const std::vector<double>& Tensor::grad() const {
    if (d_->g.empty()) throw ShapeError("grad accessed before backward populated it");
    return d_->g;
}

void Tensor::zero_grad() {
    if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor t = make(d_->shape, false);
    t.d_->v = d_->v;
    return t;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

// ---- Tape ----

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& scalar_loss) {
    if (!scalar_loss.defined() || scalar_loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss, got " +
                         (scalar_loss.defined() ? shape_str(scalar_loss.shape()) : std::string("undefined")));
    bool on_tape = false;
    for (const Node& n : nodes_)
        if (n.output.id() == scalar_loss.id()) on_tape = true;
    if (!on_tape) throw ShapeError("loss tensor was not produced on this tape");

    Tensor loss = scalar_loss;
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
    }
    // Every requires_grad participant ends with a populated (possibly zero) buffer.
    for (Node& n : nodes_) {
        for (Tensor& in : n.inputs)
            if (in.requires_grad() && !in.has_grad()) in.grad();
    }
}

NoRecord::NoRecord() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoRecord::~NoRecord() { g_active_tape = saved_; }

// ---- ops ----

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    if (input.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
    if (weight.rank() != 4) throw ShapeError("conv2d: weight must be (Cout,Cin,Kh,Kw), got " + shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
        throw ShapeError("conv2d: bias must be (Cout)=" + std::to_string(weight.dim(0)) + ", got " +
                         shape_str(bias.shape()));
    if (input.dim(1) != weight.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(input.dim(1)) +
                         " != weight Cin " + std::to_string(weight.dim(1)));
    if (stride != 1 && stride != 2)
        throw ConfigError("conv2d: unsupported stride " + std::to_string(stride) + " (must be 1 or 2)");
    if (padding < 0) throw ConfigError("conv2d: negative padding");

    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int OH = (H + 2 * padding - kh) / stride + 1;
    const int OW = (W + 2 * padding - kw) / stride + 1;
    if (H + 2 * padding < kh || W + 2 * padding < kw || OH < 1 || OW < 1)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " does not fit input " + shape_str(input.shape()) + " with padding " +
                         std::to_string(padding));

    const int K = C * kh * kw;
    const int ohw = OH * OW;
    // im2col+GEMM pays off only with enough output rows; the final one-channel
    // conv runs as direct loops instead
    const bool direct = Cout <= 2;
    Tensor out = Tensor::zeros({N, Cout, OH, OW});
    if (direct) {
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < Cout; ++oc)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        double acc = bias.data()[oc];
                        for (int ic = 0; ic < C; ++ic) {
                            const double* xp = input.data() + ((static_cast<std::size_t>(n) * C + ic) * H) * W;
                            const double* wp = weight.data() + ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw;
                            for (int ki = 0; ki < kh; ++ki) {
                                const int ih = oh * stride - padding + ki;
                                if (ih < 0 || ih >= H) continue;
                                for (int kj = 0; kj < kw; ++kj) {
                                    const int iw = ow * stride - padding + kj;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xp[ih * W + iw] * wp[ki * kw + kj];
                                }
                            }
                        }
                        out.at4(n, oc, oh, ow) = acc;
                    }
    } else {
        std::vector<double>& col = conv_workspace(0, static_cast<std::size_t>(K) * ohw);
        for (int n = 0; n < N; ++n) {
            im2col(input.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride, padding,
                   OH, OW, col.data());
            double* o = out.data() + static_cast<std::size_t>(n) * Cout * ohw;
            gemm_nn(Cout, ohw, K, weight.data(), col.data(), o, false);
            for (int oc = 0; oc < Cout; ++oc) {
                const double b = bias.data()[oc];
                double* row = o + static_cast<std::size_t>(oc) * ohw;
                for (int i = 0; i < ohw; ++i) row[i] += b;
            }
        }
    }

    if (recording({&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor in = input, w = weight, b = bias, y = out;
        Tape::active()->record({input, weight, bias}, out, [in, w, b, y, direct, stride, padding, N, C, H,
                                                            W, Cout, kh, kw, OH, OW, K, ohw]() mutable {
            const double* gy = y.grad().data();
            const bool need_gx = in.requires_grad();
            const bool need_gw = w.requires_grad();
            const bool need_gb = b.requires_grad();
            double* gw = need_gw ? w.grad().data() : nullptr;
            double* gx = need_gx ? in.grad().data() : nullptr;
            if (direct) {
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc)
                        for (int oh = 0; oh < OH; ++oh)
                            for (int ow = 0; ow < OW; ++ow) {
                                const double g = gy[((static_cast<std::size_t>(n) * Cout + oc) * OH + oh) * OW + ow];
                                if (g == 0.0) continue;
                                for (int ic = 0; ic < C; ++ic)
                                    for (int ki = 0; ki < kh; ++ki) {
                                        const int ih = oh * stride - padding + ki;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int kj = 0; kj < kw; ++kj) {
                                            const int iw = ow * stride - padding + kj;
                                            if (iw < 0 || iw >= W) continue;
                                            const std::size_t xoff =
                                                ((static_cast<std::size_t>(n) * C + ic) * H + ih) * W + iw;
                                            const std::size_t woff =
                                                ((static_cast<std::size_t>(oc) * C + ic) * kh + ki) * kw + kj;
                                            if (gw) gw[woff] += g * in.data()[xoff];
                                            if (gx) gx[xoff] += g * w.data()[woff];
                                        }
                                    }
                            }
            } else {
                std::vector<double>& col = conv_workspace(0, static_cast<std::size_t>(K) * ohw);
                std::vector<double>& colg = conv_workspace(1, static_cast<std::size_t>(K) * ohw);
                for (int n = 0; n < N; ++n) {
                    const double* gyn = gy + static_cast<std::size_t>(n) * Cout * ohw;
                    if (need_gw) {
                        im2col(in.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride,
                               padding, OH, OW, col.data());
                        gemm_nt(Cout, K, ohw, gyn, col.data(), gw, true);
                    }
                    if (need_gx) {
                        gemm_tn(K, ohw, Cout, w.data(), gyn, colg.data(), false);
                        col2im(colg.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                               gx + static_cast<std::size_t>(n) * C * H * W);
                    }
                }
            }
            if (need_gb) {
                double* gb = b.grad().data();
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc) {
                        const double* row = gy + (static_cast<std::size_t>(n) * Cout + oc) * ohw;
                        double s = 0.0;
                        for (int i = 0; i < ohw; ++i) s += row[i];
                        gb[oc] += s;
                    }
            }
            if (need_gw && testhooks::conv_grad_weight_scale != 1.0) {
                // test hook: see testhooks declaration
                const double k = testhooks::conv_grad_weight_scale;
                for (auto& g : w.grad()) g *= k;
            }
        });
    }
    return out;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift, Tensor running_mean,
                   Tensor running_var, BatchNormMode mode, double momentum, double epsilon) {
    if (input.rank() != 4) throw ShapeError("batchnorm2d: input must be NCHW, got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    for (const Tensor* t : std::initializer_list<const Tensor*>{&scale, &shift, &running_mean, &running_var})
        if (t->rank() != 1 || t->dim(0) != C)
            throw ShapeError("batchnorm2d: per-channel tensor must be (" + std::to_string(C) + "), got " +
                             shape_str(t->shape()));
    if (epsilon <= 0) throw DomainError("batchnorm2d: epsilon must be positive");
    const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
    if (mode == BatchNormMode::Train && m < 2)
        throw DataError("batchnorm2d: train mode needs at least 2 elements per channel, got " +
                        std::to_string(m));

    Tensor out = Tensor::zeros(input.shape());
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::vector<double> mu(C), inv(C);

    if (mode == BatchNormMode::Train) {
        // two-pass batch statistics, biased variance
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = input.data() + (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            const double mean = s / static_cast<double>(m);
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = input.data() + (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mean;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(m);
            mu[c] = mean;
            inv[c] = 1.0 / std::sqrt(var + epsilon);
            running_mean.values()[c] = (1.0 - momentum) * running_mean.values()[c] + momentum * mean;
            running_var.values()[c] = (1.0 - momentum) * running_var.values()[c] + momentum * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[c] = running_mean.values()[c];
            inv[c] = 1.0 / std::sqrt(running_var.values()[c] + epsilon);
        }
    }

    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* p = input.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            double* q = out.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            const double g = scale.values()[c], b = shift.values()[c], mc = mu[c], ic = inv[c];
            for (std::size_t i = 0; i < hw; ++i) q[i] = g * (p[i] - mc) * ic + b;
        }
    }

    if (recording({&input, &scale, &shift})) {
        out.set_requires_grad(true);
        Tensor in = input, ga = scale, be = shift, y = out;
        const bool train = mode == BatchNormMode::Train;
        Tape::active()->record({input, scale, shift}, out, [in, ga, be, y, mu, inv, N, C, hw, m, train]() mutable {
            const double* gy = y.grad().data();
            const double mm = static_cast<double>(m);
            for (int c = 0; c < C; ++c) {
                const double mc = mu[c], ic = inv[c], sc = ga.values()[c];
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                    const double* gp = gy + off;
                    const double* xp = in.data() + off;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_gy += gp[i];
                        sum_gyx += gp[i] * (xp[i] - mc) * ic;
                    }
                }
                if (ga.requires_grad()) ga.grad()[c] += sum_gyx;
                if (be.requires_grad()) be.grad()[c] += sum_gy;
                if (in.requires_grad()) {
                    double* gxall = in.grad().data();
                    for (int n = 0; n < N; ++n) {
                        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                        const double* gp = gy + off;
                        const double* xp = in.data() + off;
                        double* gx = gxall + off;
                        if (train) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                const double xhat = (xp[i] - mc) * ic;
                                gx[i] += sc * ic * (gp[i] - sum_gy / mm - xhat * sum_gyx / mm);
                            }
                        } else {
                            for (std::size_t i = 0; i < hw; ++i) gx[i] += sc * ic * gp[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& input) {
    Tensor out = Tensor::zeros(input.shape());
    const std::size_t n = input.values().size();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = input.values()[i] > 0.0 ? input.values()[i] : 0.0;
    if (recording({&input})) {
        out.set_requires_grad(true);
        Tensor in = input, y = out;
        Tape::active()->record({input}, out, [in, y]() mutable {
            const double* gy = y.grad().data();
            double* gx = in.grad().data();
            const double* x = in.data();
            const std::size_t n = in.values().size();
            for (std::size_t i = 0; i < n; ++i)
                if (x[i] > 0.0) gx[i] += gy[i];
        });
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& input) {
    if (input.rank() != 4) throw ShapeError("upsample_nearest2x: input must be NCHW");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = input.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            double* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double v = src[h * W + w];
                    double* d = dst + (2 * h) * (2 * W) + 2 * w;
                    d[0] = v;
                    d[1] = v;
                    d[2 * W] = v;
                    d[2 * W + 1] = v;
                }
        }
    if (recording({&input})) {
        out.set_requires_grad(true);
        Tensor in = input, y = out;
        Tape::active()->record({input}, out, [in, y, N, C, H, W]() mutable {
            const double* gy = y.grad().data();
            double* gx = in.grad().data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* g = gy + (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
                    double* d = gx + (static_cast<std::size_t>(n) * C + c) * H * W;
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            const double* s = g + (2 * h) * (2 * W) + 2 * w;
                            d[h * W + w] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                        }
                }
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels: inputs must be NCHW");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: mismatched dims " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out = Tensor::zeros({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data() + static_cast<std::size_t>(n) * Ca * hw, Ca * hw,
                    out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * hw);
        std::copy_n(b.data() + static_cast<std::size_t>(n) * Cb * hw, Cb * hw,
                    out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    if (recording({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b, y = out;
        Tape::active()->record({a, b}, out, [ta, tb, y, N, Ca, Cb, hw]() mutable {
            const double* gy = y.grad().data();
            for (int n = 0; n < N; ++n) {
                const double* src = gy + static_cast<std::size_t>(n) * (Ca + Cb) * hw;
                if (ta.requires_grad()) {
                    double* g = ta.grad().data() + static_cast<std::size_t>(n) * Ca * hw;
                    for (std::size_t i = 0; i < Ca * hw; ++i) g[i] += src[i];
                }
                if (tb.requires_grad()) {
                    double* g = tb.grad().data() + static_cast<std::size_t>(n) * Cb * hw;
                    for (std::size_t i = 0; i < Cb * hw; ++i) g[i] += src[Ca * hw + i];
                }
            }
        });
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.values().size();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = fwd(a.values()[i], b.values()[i]);
    if (recording({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b, y = out;
        Tape::active()->record({a, b}, out, [ta, tb, y, bwd]() mutable {
            const double* gy = y.grad().data();
            const std::size_t n = ta.values().size();
            double* ga = ta.requires_grad() ? ta.grad().data() : nullptr;
            double* gb = tb.requires_grad() ? tb.grad().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i) bwd(i, gy[i], ta, tb, ga, gb);
        });
    }
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](std::size_t i, double g, const Tensor&, const Tensor&, double* ga, double* gb) {
            if (ga) ga[i] += g;
            if (gb) gb[i] += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](std::size_t i, double g, const Tensor&, const Tensor&, double* ga, double* gb) {
            if (ga) ga[i] += g;
            if (gb) gb[i] -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](std::size_t i, double g, const Tensor& ta, const Tensor& tb, double* ga, double* gb) {
            if (ga) ga[i] += g * tb.values()[i];
            if (gb) gb[i] += g * ta.values()[i];
        });
}

Tensor scalar_mul(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.values().size();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = s * a.values()[i];
    if (recording({&a})) {
        out.set_requires_grad(true);
        Tensor ta = a, y = out;
        Tape::active()->record({a}, out, [ta, y, s]() mutable {
            const double* gy = y.grad().data();
            double* ga = ta.grad().data();
            const std::size_t n = ta.values().size();
            for (std::size_t i = 0; i < n; ++i) ga[i] += s * gy[i];
        });
    }
    return out;
}

Tensor signed_pow(const Tensor& input, const Tensor& exponent) {
    if (exponent.numel() != 1)
        throw ShapeError("signed_pow: exponent must be a scalar, got " + shape_str(exponent.shape()));
    const double e = exponent.value();
    if (e <= 0.0) throw DomainError("signed_pow: exponent must be positive, got " + std::to_string(e));

    Tensor out = Tensor::zeros(input.shape());
    const std::size_t n = input.values().size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = input.values()[i];
        out.values()[i] = x == 0.0 ? 0.0 : std::copysign(std::pow(std::fabs(x), e), x);
    }
    if (recording({&input, &exponent})) {
        out.set_requires_grad(true);
        Tensor tx = input, te = exponent, y = out;
        Tape::active()->record({input, exponent}, out, [tx, te, y, e]() mutable {
            const double* gy = y.grad().data();
            const double* x = tx.data();
            const double* f = y.data();
            const std::size_t n = tx.values().size();
            double* gx = tx.requires_grad() ? tx.grad().data() : nullptr;
            if (gx) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (x[i] == 0.0) continue; // both partials defined as 0 at x=0
                    gx[i] += gy[i] * e * std::pow(std::fabs(x[i]), e - 1.0);
                }
            }
            if (te.requires_grad()) {
                double ge = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (x[i] == 0.0) continue;
                    ge += gy[i] * f[i] * std::log(std::fabs(x[i]));
                }
                te.grad()[0] += ge;
            }
        });
    }
    return out;
}

Tensor exp(const Tensor& input) {
    Tensor out = Tensor::zeros(input.shape());
    const std::size_t n = input.values().size();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::exp(input.values()[i]);
    if (recording({&input})) {
        out.set_requires_grad(true);
        Tensor tx = input, y = out;
        Tape::active()->record({input}, out, [tx, y]() mutable {
            const double* gy = y.grad().data();
            const double* f = y.data();
            double* gx = tx.grad().data();
            const std::size_t n = tx.values().size();
            for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * f[i];
        });
    }
    return out;
}

Tensor sum(const Tensor& input) {
    double s = 0.0;
    for (double x : input.values()) s += x;
    Tensor out = Tensor::scalar(s);
    if (recording({&input})) {
        out.set_requires_grad(true);
        Tensor tx = input, y = out;
        Tape::active()->record({input}, out, [tx, y]() mutable {
            const double g = y.grad()[0];
            double* gx = tx.grad().data();
            const std::size_t n = tx.values().size();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& input) {
    double s = 0.0;
    for (double x : input.values()) s += x;
    const double n = static_cast<double>(input.numel());
    Tensor out = Tensor::scalar(s / n);
    if (recording({&input})) {
        out.set_requires_grad(true);
        Tensor tx = input, y = out;
        Tape::active()->record({input}, out, [tx, y, n]() mutable {
            const double g = y.grad()[0] / n;
            double* gx = tx.grad().data();
            const std::size_t m = tx.values().size();
            for (std::size_t i = 0; i < m; ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor slice_channels(const Tensor& x, int begin, int end) {
    if (x.rank() != 4) throw ShapeError("slice_channels: input must be NCHW");
    if (begin < 0 || end > x.dim(1) || begin >= end)
        throw ShapeError("slice_channels: invalid range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out = Tensor::zeros({N, end - begin, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(x.data() + (static_cast<std::size_t>(n) * C + begin) * hw,
                    static_cast<std::size_t>(end - begin) * hw,
                    out.data() + static_cast<std::size_t>(n) * (end - begin) * hw);
    return out;
}

} // namespace downscale
