#pragma once

// Slimmable MLP Q-network: one parameter set evaluated either at full width or at a narrow
// width that uses only the leading slice of every layer. All math is Eigen, templated on scalar.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace sds {

enum class Width { Narrow, Full };

struct MlpShape {
    Eigen::Index inputs = 7;
    Eigen::Index hidden = 128;
    Eigen::Index outputs = 16;
    /// Narrow path: leading `narrow_inputs` features and `narrow_ratio`·hidden units per hidden layer.
    Eigen::Index narrow_inputs = 6;
    double narrow_ratio = 0.75;

    Eigen::Index narrow_hidden() const {
        const double h = narrow_ratio * static_cast<double>(hidden);
        const auto n = static_cast<Eigen::Index>(std::llround(h));
        if (std::abs(h - static_cast<double>(n)) > 1e-9 || n <= 0) {
            throw std::invalid_argument("narrow_ratio * hidden must be a positive integer");
        }
        return n;
    }

    bool operator==(const MlpShape&) const = default;
};

/// Rows and columns of each layer that are live at a given width.
struct ActiveSlice {
    Eigen::Index inputs;
    Eigen::Index hidden;
    Eigen::Index outputs;
};

inline ActiveSlice active_slice(const MlpShape& shape, Width width) {
    if (width == Width::Full) return {shape.inputs, shape.hidden, shape.outputs};
    return {shape.narrow_inputs, shape.narrow_hidden(), shape.outputs};
}

inline constexpr std::size_t kLayers = 4;

/// Four dense layers, ReLU on the three hidden ones, linear output. weights[l] is (out x in).
template <typename Scalar>
struct SlimmableMlp {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    MlpShape shape;
    std::array<Matrix, kLayers> weights;
    std::array<Vector, kLayers> biases;

    /// Zero-initialized network of the given shape.
    static SlimmableMlp zeros(const MlpShape& s) {
        s.narrow_hidden();
        if (s.narrow_inputs <= 0 || s.narrow_inputs > s.inputs || s.outputs <= 0) {
            throw std::invalid_argument("invalid MLP shape");
        }
        SlimmableMlp net;
        net.shape = s;
        const std::array<Eigen::Index, kLayers + 1> dims{s.inputs, s.hidden, s.hidden, s.hidden, s.outputs};
        for (std::size_t l = 0; l < kLayers; ++l) {
            net.weights[l] = Matrix::Zero(dims[l + 1], dims[l]);
            net.biases[l] = Vector::Zero(dims[l + 1]);
        }
        return net;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < kLayers; ++l) n += weights[l].size() + biases[l].size();
        return n;
    }

    /// Flat view used by optimizers, gradient checks and checkpoints: layer by layer, weights
    /// (column-major) then bias.
    Scalar& flat(std::size_t k) { return const_cast<Scalar&>(std::as_const(*this).flat(k)); }
    const Scalar& flat(std::size_t k) const {
        for (std::size_t l = 0; l < kLayers; ++l) {
            const auto nw = static_cast<std::size_t>(weights[l].size());
            if (k < nw) return weights[l].data()[k];
            k -= nw;
            const auto nb = static_cast<std::size_t>(biases[l].size());
            if (k < nb) return biases[l].data()[k];
            k -= nb;
        }
        throw std::out_of_range("parameter index out of range");
    }

    bool operator==(const SlimmableMlp& o) const {
        if (!(shape == o.shape)) return false;
        for (std::size_t l = 0; l < kLayers; ++l) {
            if (weights[l] != o.weights[l] || biases[l] != o.biases[l]) return false;
        }
        return true;
    }
};

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
template <typename Scalar>
SlimmableMlp<Scalar> kaiming_uniform(const MlpShape& shape, std::uint64_t seed) {
    auto net = SlimmableMlp<Scalar>::zeros(shape);
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < kLayers; ++l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(net.weights[l].cols()));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index k = 0; k < net.weights[l].size(); ++k) net.weights[l].data()[k] = static_cast<Scalar>(u(rng));
    }
    return net;
}

/// True when parameter (row, col) of weight layer `layer` takes part in the forward pass at `width`.
/// col < 0 addresses the bias.
inline bool is_active(const MlpShape& shape, std::size_t layer, Eigen::Index row, Eigen::Index col, Width width) {
    const ActiveSlice a = active_slice(shape, width);
    const Eigen::Index rows = layer + 1 == kLayers ? a.outputs : a.hidden;
    const Eigen::Index cols = layer == 0 ? a.inputs : a.hidden;
    return row < rows && col < cols;
}

/// Q-values for a batch of inputs (one column per sample). At Narrow width only the leading
/// slices of each layer are read.
template <typename Scalar, typename Derived>
typename SlimmableMlp<Scalar>::Matrix forward(const SlimmableMlp<Scalar>& net, const Eigen::MatrixBase<Derived>& inputs,
                                              Width width) {
    const ActiveSlice a = active_slice(net.shape, width);
    if (inputs.rows() != net.shape.inputs) throw std::invalid_argument("input dimension mismatch");
    using Matrix = typename SlimmableMlp<Scalar>::Matrix;

    Matrix h = ((net.weights[0].topLeftCorner(a.hidden, a.inputs) * inputs.topRows(a.inputs)).colwise() +
                net.biases[0].head(a.hidden))
                   .cwiseMax(Scalar(0));
    for (std::size_t l = 1; l + 1 < kLayers; ++l) {
        h = ((net.weights[l].topLeftCorner(a.hidden, a.hidden) * h).colwise() + net.biases[l].head(a.hidden))
                .cwiseMax(Scalar(0));
    }
    return (net.weights[kLayers - 1].leftCols(a.hidden) * h).colwise() + net.biases[kLayers - 1];
}

/// Single-sample convenience overload.
template <typename Scalar>
typename SlimmableMlp<Scalar>::Vector forward(const SlimmableMlp<Scalar>& net,
                                              const typename SlimmableMlp<Scalar>::Vector& input, Width width) {
    return forward(net, input.replicate(1, 1), width).col(0);
}

/// Regression targets for the Q-value of the taken action in each column of `inputs`.
template <typename Scalar>
struct TdBatch {
    typename SlimmableMlp<Scalar>::Matrix inputs;
    std::vector<Eigen::Index> actions;
    typename SlimmableMlp<Scalar>::Vector targets;

    Eigen::Index size() const { return inputs.cols(); }
};

template <typename Scalar>
struct LossAndGradient {
    Scalar loss;
    SlimmableMlp<Scalar> gradient;  // zero outside the active slice
};

/// Mean squared TD error on the taken actions and its gradient at `width`.
template <typename Scalar>
Scalar td_loss(const SlimmableMlp<Scalar>& net, const TdBatch<Scalar>& batch, Width width) {
    const auto q = forward(net, batch.inputs, width);
    Scalar loss(0);
    for (Eigen::Index b = 0; b < batch.size(); ++b) {
        const Scalar e = q(batch.actions[b], b) - batch.targets(b);
        loss += e * e;
    }
    return loss / static_cast<Scalar>(batch.size());
}

template <typename Scalar>
LossAndGradient<Scalar> backward(const SlimmableMlp<Scalar>& net, const TdBatch<Scalar>& batch, Width width) {
    using Matrix = typename SlimmableMlp<Scalar>::Matrix;
    if (batch.size() == 0) throw std::invalid_argument("empty training batch");
    if (static_cast<Eigen::Index>(batch.actions.size()) != batch.size() || batch.targets.size() != batch.size()) {
        throw std::invalid_argument("batch fields disagree in length");
    }
    const ActiveSlice a = active_slice(net.shape, width);
    const auto n = static_cast<Scalar>(batch.size());

    // Forward pass keeping pre-activations.
    std::array<Matrix, kLayers> pre;
    std::array<Matrix, kLayers> act;  // act[l] is the input to layer l
    act[0] = batch.inputs.topRows(a.inputs);
    pre[0] = (net.weights[0].topLeftCorner(a.hidden, a.inputs) * act[0]).colwise() + net.biases[0].head(a.hidden);
    for (std::size_t l = 1; l < kLayers; ++l) {
        act[l] = pre[l - 1].cwiseMax(Scalar(0));
        if (l + 1 < kLayers) {
            pre[l] = (net.weights[l].topLeftCorner(a.hidden, a.hidden) * act[l]).colwise() + net.biases[l].head(a.hidden);
        } else {
            pre[l] = (net.weights[l].leftCols(a.hidden) * act[l]).colwise() + net.biases[l];
        }
    }

    LossAndGradient<Scalar> out{Scalar(0), SlimmableMlp<Scalar>::zeros(net.shape)};
    Matrix delta = Matrix::Zero(a.outputs, batch.size());
    for (Eigen::Index b = 0; b < batch.size(); ++b) {
        const Scalar e = pre[kLayers - 1](batch.actions[b], b) - batch.targets(b);
        out.loss += e * e;
        delta(batch.actions[b], b) = Scalar(2) * e / n;
    }
    out.loss /= n;

    auto& g = out.gradient;
    for (std::size_t l = kLayers; l-- > 0;) {
        const Eigen::Index rows = delta.rows();
        const Eigen::Index cols = act[l].rows();
        g.weights[l].topLeftCorner(rows, cols).noalias() = delta * act[l].transpose();
        g.biases[l].head(rows) = delta.rowwise().sum();
        if (l == 0) break;
        Matrix back = net.weights[l].topLeftCorner(rows, cols).transpose() * delta;
        delta = back.cwiseProduct((pre[l - 1].array() > Scalar(0)).matrix().template cast<Scalar>());
    }
    return out;
}

/// Adam with bias correction and cosine learning-rate decay over `total_steps`.
template <typename Scalar>
struct AdamState {
    SlimmableMlp<Scalar> first_moment;
    SlimmableMlp<Scalar> second_moment;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double base_lr = 0.01;
    double epsilon = 1e-8;
    std::int64_t total_steps = 10000;

    static AdamState for_network(const SlimmableMlp<Scalar>& net, std::int64_t total_steps = 10000) {
        AdamState s{SlimmableMlp<Scalar>::zeros(net.shape), SlimmableMlp<Scalar>::zeros(net.shape)};
        s.total_steps = total_steps;
        return s;
    }

    bool operator==(const AdamState&) const = default;
};

/// base_lr · ½(1 + cos(π·t/T)), held at zero past T.
inline double cosine_lr(double base_lr, std::int64_t t, std::int64_t total) {
    if (total <= 0) return base_lr;
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename Scalar>
double learning_rate(const AdamState<Scalar>& opt) {
    return cosine_lr(opt.base_lr, opt.step, opt.total_steps);
}

/// One Adam update restricted to the slice active at `width`; parameters and moments outside it
/// are left untouched.
template <typename Scalar>
void adam_step(SlimmableMlp<Scalar>& net, const SlimmableMlp<Scalar>& grad, AdamState<Scalar>& opt, Width width) {
    const ActiveSlice a = active_slice(net.shape, width);
    const double lr = learning_rate(opt);
    ++opt.step;
    const auto t = static_cast<double>(opt.step);
    const Scalar c1 = Scalar(1.0 - std::pow(opt.beta1, t));
    const Scalar c2 = Scalar(1.0 - std::pow(opt.beta2, t));
    const Scalar b1 = Scalar(opt.beta1);
    const Scalar b2 = Scalar(opt.beta2);
    const Scalar eps = Scalar(opt.epsilon);
    const Scalar rate = Scalar(lr);

    const auto update = [&](auto param, auto m, auto v, auto g) {
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
        param.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    for (std::size_t l = 0; l < kLayers; ++l) {
        const Eigen::Index rows = l + 1 == kLayers ? a.outputs : a.hidden;
        const Eigen::Index cols = l == 0 ? a.inputs : a.hidden;
        update(net.weights[l].topLeftCorner(rows, cols), opt.first_moment.weights[l].topLeftCorner(rows, cols),
               opt.second_moment.weights[l].topLeftCorner(rows, cols), grad.weights[l].topLeftCorner(rows, cols));
        update(net.biases[l].head(rows), opt.first_moment.biases[l].head(rows),
               opt.second_moment.biases[l].head(rows), grad.biases[l].head(rows));
    }
}

/// Copies every parameter of `online` into `target`.
template <typename Scalar>
void hard_update(SlimmableMlp<Scalar>& target, const SlimmableMlp<Scalar>& online) {
    target = online;
}

/// Order-sensitive checksum over the parameters selected by `keep(layer, row, col)` (col < 0: bias).
template <typename Scalar, typename Pred>
std::uint64_t checksum(const SlimmableMlp<Scalar>& net, Pred keep) {
    std::uint64_t h = 1469598103934665603ull;
    const auto mix = [&](Scalar v) {
        const double d = static_cast<double>(v);
        std::uint64_t bits = 0;
        std::memcpy(&bits, &d, sizeof bits);
        h = (h ^ bits) * 1099511628211ull;
    };
    for (std::size_t l = 0; l < kLayers; ++l) {
        for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c) {
            for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
                if (keep(l, r, c)) mix(net.weights[l](r, c));
            }
        }
        for (Eigen::Index r = 0; r < net.biases[l].size(); ++r) {
            if (keep(l, r, Eigen::Index(-1))) mix(net.biases[l](r));
        }
    }
    return h;
}

template <typename Scalar>
nlohmann::json to_json(const SlimmableMlp<Scalar>& net) {
    nlohmann::json j;
    j["shape"] = {{"inputs", net.shape.inputs},
                  {"hidden", net.shape.hidden},
                  {"outputs", net.shape.outputs},
                  {"narrow_inputs", net.shape.narrow_inputs},
                  {"narrow_ratio", net.shape.narrow_ratio}};
    auto& tensors = j["tensors"];
    for (std::size_t l = 0; l < kLayers; ++l) {
        const auto& w = net.weights[l];
        tensors["w" + std::to_string(l + 1)] = {
            {"rows", w.rows()}, {"cols", w.cols()}, {"data", std::vector<double>(w.data(), w.data() + w.size())}};
        const auto& b = net.biases[l];
        tensors["b" + std::to_string(l + 1)] = {
            {"rows", b.rows()}, {"cols", 1}, {"data", std::vector<double>(b.data(), b.data() + b.size())}};
    }
    return j;
}

template <typename Scalar>
SlimmableMlp<Scalar> mlp_from_json(const nlohmann::json& j) {
    const auto& s = j.at("shape");
    MlpShape shape{s.at("inputs").get<Eigen::Index>(), s.at("hidden").get<Eigen::Index>(),
                   s.at("outputs").get<Eigen::Index>(), s.at("narrow_inputs").get<Eigen::Index>(),
                   s.at("narrow_ratio").get<double>()};
    auto net = SlimmableMlp<Scalar>::zeros(shape);
    const auto load = [&](auto& dst, const nlohmann::json& t) {
        const auto data = t.at("data").get<std::vector<double>>();
        if (t.at("rows").get<Eigen::Index>() != dst.rows() || t.at("cols").get<Eigen::Index>() != dst.cols() ||
            static_cast<Eigen::Index>(data.size()) != dst.size()) {
            throw std::invalid_argument("tensor dimensions do not match the network shape");
        }
        for (Eigen::Index k = 0; k < dst.size(); ++k) dst.data()[k] = static_cast<Scalar>(data[k]);
    };
    const auto& tensors = j.at("tensors");
    for (std::size_t l = 0; l < kLayers; ++l) {
        load(net.weights[l], tensors.at("w" + std::to_string(l + 1)));
        load(net.biases[l], tensors.at("b" + std::to_string(l + 1)));
    }
    return net;
}

}  // namespace sds
