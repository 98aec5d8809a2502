#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "downscale/error.hpp"

namespace downscale {

/// Dense 64-bit real tensor with reverse-mode differentiation.
///
/// A Tensor is a cheap shared handle. Leaves are created through the factory
/// functions; everything else is produced by the ops below, which record
/// backward rules on the thread's active Tape. Values of op outputs are
/// treated as immutable once produced.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false); // shape ()

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int>& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int axis) const { return d_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return d_->numel; }

    std::vector<double>& values() { return d_->v; }
    const std::vector<double>& values() const { return d_->v; }
    double* data() { return d_->v.data(); }
    const double* data() const { return d_->v.data(); }

    /// Scalar extraction; requires numel()==1.
    double value() const;

    // NCHW convenience indexing (rank-4 only, unchecked bounds)
    double& at4(int n, int c, int h, int w);
    double at4(int n, int c, int h, int w) const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool r) { d_->requires_grad = r; }

    /// Gradient buffer, allocated (zero-filled) on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return !d_->g.empty(); }
    void zero_grad();

    /// Identity of the underlying storage (graph bookkeeping, tests).
    const void* id() const { return d_.get(); }

    /// Deep copy of values (detached leaf, no grad history).
    Tensor clone() const;

private:
    struct Data {
        std::vector<int> shape;
        std::int64_t numel = 0;
        std::vector<double> v;
        std::vector<double> g;
        bool requires_grad = false;
    };
    std::shared_ptr<Data> d_;
    static Tensor make(std::vector<int> shape, bool requires_grad);
    friend class Tape;
};

/// Wengert-list tape. Constructing a Tape makes it the active recorder for the
/// current thread (previous one is restored on destruction). Ops record nodes
/// in creation order, which is topological by construction; backward() runs
/// the recorded rules in reverse and accumulates gradients into every
/// requires_grad tensor reachable from the loss. One tape per thread; distinct
/// tapes on distinct threads share no state.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// Record one operation node. `backward` must read output.grad() and
    /// accumulate into the inputs' grad buffers. Open to other modules
    /// (preprocessing, losses) so they can define their own differentiable ops.
    void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);

    /// Reverse sweep from a scalar loss recorded on this tape. Gradients
    /// accumulate (sum) across multiple uses of a tensor; after the sweep every
    /// requires_grad input of every node has a populated grad buffer.
    void backward(const Tensor& scalar_loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
};

/// RAII scope that suspends recording on the active tape (eval-style forward
/// inside a training step).
class NoRecord {
public:
    NoRecord();
    ~NoRecord();
    NoRecord(const NoRecord&) = delete;

private:
    Tape* saved_;
};

enum class BatchNormMode { Train, Eval };

// ---- operations ----

/// 2-D cross-correlation, NCHW input, (Cout,Cin,Kh,Kw) weight, (Cout) bias.
/// stride must be 1 or 2.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Batch normalization over (N,H,W) per channel. Train mode uses batch
/// statistics (biased variance) and updates the running buffers in place;
/// eval mode uses the running buffers. Gradient flows through the batch
/// statistics in train mode.
Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift, Tensor running_mean,
                   Tensor running_var, BatchNormMode mode, double momentum, double epsilon);

Tensor relu(const Tensor& input);

/// Nearest-neighbour 2x upsampling; backward sums each 2x2 block.
Tensor upsample_nearest2x(const Tensor& input);

/// Channel-axis concatenation of two NCHW tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);

/// Elementwise sign(x)*|x|^e with f(0)=0, exponent a positive differentiable
/// scalar. Both partials are defined as 0 at x=0.
Tensor signed_pow(const Tensor& input, const Tensor& exponent);

/// Elementwise exp.
Tensor exp(const Tensor& input);

/// Reduce to scalar.
Tensor sum(const Tensor& input);
Tensor mean(const Tensor& input);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scalar_mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scalar_mul(a, s); }

// ---- non-differentiable utilities ----

/// Copy channels [begin, end) of an NCHW tensor into a new leaf.
Tensor slice_channels(const Tensor& x, int begin, int end);

std::string shape_str(const std::vector<int>& shape);

namespace testhooks {
/// Scales the weight-gradient contribution of conv2d's backward rule.
/// Production value is 1.0; only mutation tests (cmd check plumbing) touch it.
extern double conv_grad_weight_scale;
} // namespace testhooks

} // namespace downscale
