#pragma once

#include "rope/common.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace rope {

/// Raised when a forward pass produces NaN or Inf.
class NumericalFault : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2 };

struct DenseLayer {
    Matrix weight;   // out x in
    Vector bias;     // out
    Activation activation = Activation::identity;

    int in_dim() const noexcept { return static_cast<int>(weight.cols()); }
    int out_dim() const noexcept { return static_cast<int>(weight.rows()); }
};

/// Parameter-shaped gradient buffer.
struct Gradients {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;

    Gradients& operator+=(const Gradients& o) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
            weight[i] += o.weight[i];
            bias[i] += o.bias[i];
        }
        return *this;
    }
    Gradients& operator*=(double k) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
            weight[i] *= k;
            bias[i] *= k;
        }
        return *this;
    }
    double squared_norm() const {
        double s = 0.0;
        for (std::size_t i = 0; i < weight.size(); ++i) s += weight[i].squaredNorm() + bias[i].squaredNorm();
        return s;
    }
    Vector flat() const {
        Eigen::Index n = 0;
        for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
        Vector out(n);
        Eigen::Index k = 0;
        for (std::size_t i = 0; i < weight.size(); ++i) {
            out.segment(k, weight[i].size()) = weight[i].reshaped<Eigen::RowMajor>();
            k += weight[i].size();
            out.segment(k, bias[i].size()) = bias[i];
            k += bias[i].size();
        }
        return out;
    }
};

/**
 * Feed-forward network: affine + activation per layer. With layer_norm_head,
 * the last layer's pre-activation is normalized per sample (zero mean, unit
 * variance, no affine) before its activation is applied.
 *
 * Batches are column-major: inputs are (in_dim x batch).
 */
class DenseNet {
public:
    static constexpr double kLayerNormEps = 1e-10;

    /// Intermediate values kept by forward() for backward().
    struct Tape {
        std::vector<Matrix> inputs;   // input to each layer
        std::vector<Matrix> outputs;  // post-activation output of each layer
        Matrix normalized;            // layer-norm head output, pre-activation
        Eigen::RowVectorXd inv_std;
    };

    DenseNet() = default;
    DenseNet(std::vector<DenseLayer> layers, bool layer_norm_head)
        : layers_(std::move(layers)), layer_norm_head_(layer_norm_head) {
        require(!layers_.empty(), "network needs at least one layer");
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            require(layers_[i].bias.size() == layers_[i].out_dim(), "bias size does not match layer output");
            if (i > 0)
                require(layers_[i].in_dim() == layers_[i - 1].out_dim(), "layer dimensions do not chain");
        }
    }

    /**
     * Fully connected net input -> hidden... -> output with ReLU hidden units.
     * Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
     */
    static DenseNet mlp(int input_dim, const std::vector<int>& hidden, int output_dim, Activation output_activation,
                        bool layer_norm_head, Rng& rng) {
        require(input_dim >= 1 && output_dim >= 1, "network dimensions must be positive");
        std::vector<DenseLayer> layers;
        int fan_in = input_dim;
        auto make = [&](int out, Activation act) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            DenseLayer l;
            l.weight.resize(out, fan_in);
            l.bias.resize(out);
            for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = bound * (2.0 * uniform01(rng) - 1.0);
            for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = bound * (2.0 * uniform01(rng) - 1.0);
            l.activation = act;
            layers.push_back(std::move(l));
            fan_in = out;
        };
        for (int h : hidden) {
            require(h >= 1, "hidden width must be positive");
            make(h, Activation::relu);
        }
        make(output_dim, output_activation);
        return DenseNet(std::move(layers), layer_norm_head);
    }

    int input_dim() const { return layers_.front().in_dim(); }
    int output_dim() const { return layers_.back().out_dim(); }
    bool layer_norm_head() const noexcept { return layer_norm_head_; }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }

    Eigen::Index parameter_count() const {
        Eigen::Index n = 0;
        for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
        return n;
    }

    bool same_shape(const DenseNet& o) const {
        if (layers_.size() != o.layers_.size() || layer_norm_head_ != o.layer_norm_head_) return false;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].weight.rows() != o.layers_[i].weight.rows() ||
                layers_[i].weight.cols() != o.layers_[i].weight.cols() ||
                layers_[i].activation != o.layers_[i].activation)
                return false;
        return true;
    }

    bool finite() const {
        for (const auto& l : layers_)
            if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
        return true;
    }

    Matrix forward(const Matrix& inputs) const {
        Tape tape;
        return forward(inputs, tape, false);
    }

    Vector forward(const Vector& x) const {
        const Matrix out = forward(Matrix(x));
        return out.col(0);
    }

    Matrix forward(const Matrix& inputs, Tape& tape, bool record = true) const {
        if (inputs.rows() != input_dim())
            throw ValidationError("input has dimension " + std::to_string(inputs.rows()) + ", network expects " +
                                  std::to_string(input_dim()));
        if (record) {
            tape.inputs.clear();
            tape.outputs.clear();
        }
        Matrix h = inputs;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const DenseLayer& l = layers_[i];
            Matrix z = l.weight * h;
            z.colwise() += l.bias;
            const bool head = layer_norm_head_ && i + 1 == layers_.size();
            if (head) {
                const Eigen::RowVectorXd mean = z.colwise().mean();
                z.rowwise() -= mean;
                const Eigen::RowVectorXd var = z.array().square().colwise().mean();
                const Eigen::RowVectorXd inv_std = (var.array() + kLayerNormEps).rsqrt();
                z.array().rowwise() *= inv_std.array();
                if (record) {
                    tape.normalized = z;
                    tape.inv_std = inv_std;
                }
            }
            apply_activation(z, l.activation);
            if (record) {
                tape.inputs.push_back(std::move(h));
                tape.outputs.push_back(z);
            }
            h = std::move(z);
        }
        if (!h.allFinite()) throw NumericalFault("network output is not finite");
        return h;
    }

    /// Reverse-mode gradients of sum(grad_output .* output) with respect to all parameters.
    Gradients backward(const Tape& tape, const Matrix& grad_output, Matrix* grad_input = nullptr) const {
        require(tape.outputs.size() == layers_.size(), "tape does not belong to this forward pass");
        Gradients g;
        g.weight.resize(layers_.size());
        g.bias.resize(layers_.size());
        Matrix delta = grad_output;
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const DenseLayer& l = layers_[k];
            const Matrix& y = tape.outputs[k];
            switch (l.activation) {
                case Activation::identity: break;
                case Activation::relu: delta.array() *= (y.array() > 0.0).cast<double>(); break;
                case Activation::tanh: delta.array() *= 1.0 - y.array().square(); break;
            }
            if (layer_norm_head_ && k + 1 == layers_.size()) {
                const Matrix& xhat = tape.normalized;
                const Eigen::RowVectorXd mean_g = delta.colwise().mean();
                const Eigen::RowVectorXd mean_gx = (delta.array() * xhat.array()).colwise().mean();
                Matrix dz = delta;
                dz.rowwise() -= mean_g;
                dz.array() -= xhat.array().rowwise() * mean_gx.array();
                dz.array().rowwise() *= tape.inv_std.array();
                delta = std::move(dz);
            }
            g.weight[k].noalias() = delta * tape.inputs[k].transpose();
            g.bias[k] = delta.rowwise().sum();
            if (k > 0 || grad_input) {
                Matrix next = l.weight.transpose() * delta;
                delta = std::move(next);
            }
        }
        if (grad_input) *grad_input = std::move(delta);
        return g;
    }

    Gradients zero_gradients() const {
        Gradients g;
        for (const auto& l : layers_) {
            g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
            g.bias.push_back(Vector::Zero(l.bias.size()));
        }
        return g;
    }

    /// Parameters flattened layer by layer: weight (row-major) then bias.
    Vector flat_parameters() const {
        Vector out(parameter_count());
        Eigen::Index k = 0;
        for (const auto& l : layers_) {
            out.segment(k, l.weight.size()) = l.weight.reshaped<Eigen::RowMajor>();
            k += l.weight.size();
            out.segment(k, l.bias.size()) = l.bias;
            k += l.bias.size();
        }
        return out;
    }

    void set_flat_parameters(const Vector& flat) {
        require(flat.size() == parameter_count(), "parameter vector has wrong length");
        Eigen::Index k = 0;
        for (auto& l : layers_) {
            l.weight.reshaped<Eigen::RowMajor>() = flat.segment(k, l.weight.size());
            k += l.weight.size();
            l.bias = flat.segment(k, l.bias.size());
            k += l.bias.size();
        }
    }

private:
    static void apply_activation(Matrix& z, Activation act) {
        switch (act) {
            case Activation::identity: break;
            case Activation::relu: z = z.cwiseMax(0.0); break;
            case Activation::tanh: z = z.array().tanh().matrix(); break;
        }
    }

    std::vector<DenseLayer> layers_;
    bool layer_norm_head_ = false;
};

// ---------------------------------------------------------------------------
// Losses

inline double huber(double residual, double delta) {
    const double a = std::abs(residual);
    return a <= delta ? 0.5 * residual * residual : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double residual, double delta) {
    return std::abs(residual) <= delta ? residual : (residual > 0.0 ? delta : -delta);
}

/// Penalty (decay / 2) * ||params||^2; its gradient is decay * params.
inline double weight_decay_penalty(const DenseNet& net, double decay) {
    return 0.5 * decay * net.flat_parameters().squaredNorm();
}

inline Gradients weight_decay_gradient(const DenseNet& net, double decay) {
    Gradients g;
    for (const auto& l : net.layers()) {
        g.weight.push_back(decay * l.weight);
        g.bias.push_back(decay * l.bias);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ValidationError("unknown optimizer: " + s);
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 3e-4;
    double weight_decay = 1e-4;   // decoupled
    double grad_clip_norm = 10.0; // <= 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Gradient step with global-norm clipping and decoupled weight decay.
class Optimizer {
public:
    Optimizer(const DenseNet& net, OptimizerConfig config) : config_(config) {
        require(config.learning_rate > 0.0, "learning rate must be positive");
        require(config.weight_decay >= 0.0, "weight decay must be nonnegative");
        if (config_.kind == OptimizerKind::adam) {
            m_ = net.zero_gradients();
            v_ = net.zero_gradients();
        }
    }

    const OptimizerConfig& config() const noexcept { return config_; }

    void step(DenseNet& net, Gradients grads) {
        if (config_.grad_clip_norm > 0.0) {
            const double norm = std::sqrt(grads.squared_norm());
            if (norm > config_.grad_clip_norm) grads *= config_.grad_clip_norm / norm;
        }
        ++t_;
        const double lr = config_.learning_rate;
        const double decay = 1.0 - lr * config_.weight_decay;
        auto& layers = net.layers();
        if (config_.kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                layers[i].weight = decay * layers[i].weight - lr * grads.weight[i];
                layers[i].bias = decay * layers[i].bias - lr * grads.bias[i];
            }
            return;
        }
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
            m = config_.beta1 * m + (1.0 - config_.beta1) * g;
            v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
            param = decay * param -
                    (lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps)).matrix();
        };
        for (std::size_t i = 0; i < layers.size(); ++i) {
            update(layers[i].weight, m_.weight[i], v_.weight[i], grads.weight[i]);
            update(layers[i].bias, m_.bias[i], v_.bias[i], grads.bias[i]);
        }
    }

private:
    OptimizerConfig config_;
    Gradients m_;
    Gradients v_;
    long t_ = 0;
};

/// target <- (1 - tau) * target + tau * online, per parameter.
inline void ema_update(DenseNet& target, const DenseNet& online, double tau) {
    require(target.same_shape(online), "target and online networks differ in shape");
    require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
    auto& t = target.layers();
    const auto& o = online.layers();
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i].weight = (1.0 - tau) * t[i].weight + tau * o[i].weight;
        t[i].bias = (1.0 - tau) * t[i].bias + tau * o[i].bias;
    }
}

/// FNV-1a over the raw parameter bytes; used to assert frozen networks stay frozen.
inline std::uint64_t parameter_checksum(const DenseNet& net) {
    const Vector flat = net.flat_parameters();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(flat.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(flat.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers and floats little-endian):
//   8 bytes  magic "ROPENET\0"
//   u32      schema version
//   u32      layer count
//   u8       flags (bit 0: layer-norm head)
//   per layer: u32 in_dim, u32 out_dim, u8 activation
//   f64[]    parameters, layer by layer: weight row-major, then bias

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ValidationError("truncated checkpoint");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}
} // namespace detail

inline void write_checkpoint(std::ostream& os, const DenseNet& net) {
    os.write("ROPENET\0", 8);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.layers().size()));
    detail::write_le<std::uint8_t>(os, net.layer_norm_head() ? 1 : 0);
    for (const auto& l : net.layers()) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.in_dim()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out_dim()));
        detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.activation));
    }
    const Vector flat = net.flat_parameters();
    for (Eigen::Index i = 0; i < flat.size(); ++i) detail::write_le<double>(os, flat(i));
}

inline DenseNet read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "ROPENET\0", 8) != 0) throw ValidationError("not a network checkpoint");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    const auto n_layers = detail::read_le<std::uint32_t>(is);
    const auto flags = detail::read_le<std::uint8_t>(is);
    require(n_layers >= 1 && n_layers < 1024, "implausible layer count in checkpoint");
    std::vector<DenseLayer> layers(n_layers);
    for (auto& l : layers) {
        const auto in = detail::read_le<std::uint32_t>(is);
        const auto out = detail::read_le<std::uint32_t>(is);
        const auto act = detail::read_le<std::uint8_t>(is);
        require(act <= 2, "unknown activation tag in checkpoint");
        l.weight.resize(out, in);
        l.bias.resize(out);
        l.activation = static_cast<Activation>(act);
    }
    DenseNet net(std::move(layers), (flags & 1U) != 0);
    Vector flat(net.parameter_count());
    for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = detail::read_le<double>(is);
    net.set_flat_parameters(flat);
    return net;
}

inline void save_checkpoint(const std::string& path, const DenseNet& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot open " + path + " for writing");
    write_checkpoint(os, net);
}

inline DenseNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path);
    return read_checkpoint(is);
}

} // namespace rope
