#pragma once

// Function approximators over state encodings: a lookup table and a ReLU MLP
// with hand-written reverse mode, plus Adam and parameter checkpoints.

#include <Eigen/Dense>

#include <bit>
#include <cstring>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dae/mdp.hpp"
#include "dae/rng.hpp"

namespace dae {

/// Named slice of a flat parameter vector; matrices are stored column-major.
struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 1;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const Segment&) const = default;
};

struct ParamVector {
    Vector values;
    std::vector<Segment> layout;

    std::size_t size() const noexcept { return static_cast<std::size_t>(values.size()); }

    const Segment& segment(const std::string& name) const {
        for (const auto& seg : layout)
            if (seg.name == name) return seg;
        throw std::out_of_range("ParamVector: no segment named '" + name + "'");
    }
    Eigen::Map<Matrix> block(const Segment& seg) {
        return {values.data() + seg.offset, static_cast<Eigen::Index>(seg.rows), static_cast<Eigen::Index>(seg.cols)};
    }
    Eigen::Map<const Matrix> block(const Segment& seg) const {
        return {values.data() + seg.offset, static_cast<Eigen::Index>(seg.rows), static_cast<Eigen::Index>(seg.cols)};
    }
    Eigen::Map<Matrix> block(const std::string& name) { return block(segment(name)); }
    Eigen::Map<const Matrix> block(const std::string& name) const { return block(segment(name)); }

    ParamVector zeros_like() const { return {Vector::Zero(values.size()), layout}; }
};

inline ParamVector make_params(std::vector<Segment> layout) {
    std::size_t offset = 0;
    for (auto& seg : layout) {
        seg.offset = offset;
        offset += seg.size();
    }
    return {Vector::Zero(static_cast<Eigen::Index>(offset)), std::move(layout)};
}

/// One-hot encodings of the given states, one column each.
inline Matrix one_hot(std::size_t n_states, const std::vector<std::size_t>& states) {
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(states.size()));
    for (std::size_t j = 0; j < states.size(); ++j) x(static_cast<Eigen::Index>(states[j]), static_cast<Eigen::Index>(j)) = 1.0;
    return x;
}

/// One-hot encodings of every state, i.e. the identity.
inline Matrix all_states(std::size_t n_states) {
    return Matrix::Identity(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_states));
}

/// Semi-orthogonal rows x cols matrix scaled by `gain`.
inline Matrix orthogonal_matrix(std::size_t rows, std::size_t cols, double gain, CounterRng& rng) {
    const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
    Matrix g(static_cast<Eigen::Index>(big), static_cast<Eigen::Index>(small));
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(g.rows(), g.cols());
    const Matrix r = qr.matrixQR().topRows(g.cols()).template triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    return gain * (rows >= cols ? q : Matrix(q.transpose()));
}

/// Lookup table: output = W x with W of shape (outputs x states). With a
/// one-hot x this returns the row of the table for that state.
class TabularModel {
public:
    TabularModel(std::size_t n_states, std::size_t n_outputs) : n_states_(n_states), n_outputs_(n_outputs) {}

    std::size_t input_dim() const noexcept { return n_states_; }
    std::size_t output_dim() const noexcept { return n_outputs_; }

    ParamVector init_params() const { return make_params({{"table", 0, n_outputs_, n_states_}}); }

    Matrix forward_batch(const ParamVector& params, const Matrix& inputs) const {
        check(params, inputs);
        return params.block("table") * inputs;
    }
    Vector forward(const ParamVector& params, const Vector& input) const { return forward_batch(params, input); }

    /// Gradient of sum_j <output_grads.col(j), forward(inputs.col(j))>.
    ParamVector backward_batch(const ParamVector& params, const Matrix& inputs, const Matrix& output_grads) const {
        check(params, inputs);
        if (output_grads.rows() != static_cast<Eigen::Index>(n_outputs_) || output_grads.cols() != inputs.cols())
            throw std::invalid_argument("TabularModel: output gradient shape mismatch");
        ParamVector grad = params.zeros_like();
        grad.block("table") = output_grads * inputs.transpose();
        return grad;
    }
    ParamVector backward(const ParamVector& params, const Vector& input, const Vector& output_grad) const {
        return backward_batch(params, input, output_grad);
    }

private:
    void check(const ParamVector& params, const Matrix& inputs) const {
        if (params.size() != n_states_ * n_outputs_)
            throw std::invalid_argument("TabularModel: parameter vector has wrong size");
        if (inputs.rows() != static_cast<Eigen::Index>(n_states_))
            throw std::invalid_argument("TabularModel: input dimension mismatch");
    }

    std::size_t n_states_;
    std::size_t n_outputs_;
};

struct DenseNetSpec {
    std::size_t input_dim = 1;
    std::size_t output_dim = 1;
    std::vector<std::size_t> hidden;
};

/// Multi-layer perceptron with ReLU hidden layers and a linear output layer.
class DenseNet {
public:
    explicit DenseNet(DenseNetSpec spec) : spec_(std::move(spec)) {
        if (spec_.input_dim < 1 || spec_.output_dim < 1)
            throw std::invalid_argument("DenseNet: input/output widths must be >= 1");
        for (auto w : spec_.hidden)
            if (w < 1) throw std::invalid_argument("DenseNet: hidden widths must be >= 1");
        widths_.push_back(spec_.input_dim);
        widths_.insert(widths_.end(), spec_.hidden.begin(), spec_.hidden.end());
        widths_.push_back(spec_.output_dim);
        std::vector<Segment> layout;
        for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
            layout.push_back({"W" + std::to_string(l), 0, widths_[l + 1], widths_[l]});
            layout.push_back({"b" + std::to_string(l), 0, widths_[l + 1], 1});
        }
        prototype_ = make_params(std::move(layout));
    }

    const DenseNetSpec& spec() const noexcept { return spec_; }
    std::size_t input_dim() const noexcept { return spec_.input_dim; }
    std::size_t output_dim() const noexcept { return spec_.output_dim; }
    std::size_t n_layers() const noexcept { return widths_.size() - 1; }
    std::size_t param_count() const noexcept { return prototype_.size(); }

    /// All-zero parameters.
    ParamVector init_params() const { return prototype_; }

    /// Orthogonal weights, zero biases. `output_gains` assigns a gain per
    /// contiguous block of output rows (e.g. one per head); a single entry
    /// applies to the whole output layer.
    ParamVector init_orthogonal(std::uint64_t seed, double hidden_gain = std::sqrt(2.0),
                                const std::vector<std::pair<std::size_t, double>>& output_gains = {}) const {
        ParamVector p = prototype_;
        CounterRng rng(stream_key(seed, {0x696e6974ULL}));
        for (std::size_t l = 0; l < n_layers(); ++l) {
            auto w = p.block("W" + std::to_string(l));
            const bool last = l + 1 == n_layers();
            if (!last || output_gains.empty()) {
                w = orthogonal_matrix(widths_[l + 1], widths_[l], last ? 1.0 : hidden_gain, rng);
                continue;
            }
            Eigen::Index row = 0;
            for (const auto& [count, gain] : output_gains) {
                w.middleRows(row, static_cast<Eigen::Index>(count)) = orthogonal_matrix(count, widths_[l], gain, rng);
                row += static_cast<Eigen::Index>(count);
            }
            if (row != w.rows()) throw std::invalid_argument("DenseNet: output gains do not cover the output layer");
        }
        return p;
    }

    Matrix forward_batch(const ParamVector& params, const Matrix& inputs) const {
        check(params, inputs);
        Matrix h = inputs;
        for (std::size_t l = 0; l < n_layers(); ++l) {
            Matrix z = params.block("W" + std::to_string(l)) * h;
            z.colwise() += Vector(params.block("b" + std::to_string(l)));
            if (l + 1 < n_layers()) z = z.cwiseMax(0.0);
            h.swap(z);
        }
        return h;
    }
    Vector forward(const ParamVector& params, const Vector& input) const { return forward_batch(params, input); }

    /// Gradient of sum_j <output_grads.col(j), forward(inputs.col(j))>.
    ParamVector backward_batch(const ParamVector& params, const Matrix& inputs, const Matrix& output_grads) const {
        check(params, inputs);
        if (output_grads.rows() != static_cast<Eigen::Index>(spec_.output_dim) || output_grads.cols() != inputs.cols())
            throw std::invalid_argument("DenseNet: output gradient shape mismatch");
        std::vector<Matrix> acts;  // post-activation outputs of each layer, acts[0] = input
        acts.reserve(n_layers() + 1);
        acts.push_back(inputs);
        for (std::size_t l = 0; l < n_layers(); ++l) {
            Matrix z = params.block("W" + std::to_string(l)) * acts.back();
            z.colwise() += Vector(params.block("b" + std::to_string(l)));
            if (l + 1 < n_layers()) z = z.cwiseMax(0.0);
            acts.push_back(std::move(z));
        }
        ParamVector grad = params.zeros_like();
        Matrix delta = output_grads;
        for (std::size_t l = n_layers(); l-- > 0;) {
            if (l + 1 < n_layers()) delta = delta.cwiseProduct((acts[l + 1].array() > 0.0).cast<double>().matrix());
            grad.block("W" + std::to_string(l)) = delta * acts[l].transpose();
            grad.block("b" + std::to_string(l)) = delta.rowwise().sum();
            if (l > 0) delta = params.block("W" + std::to_string(l)).transpose() * delta;
        }
        return grad;
    }
    ParamVector backward(const ParamVector& params, const Vector& input, const Vector& output_grad) const {
        return backward_batch(params, input, output_grad);
    }

private:
    void check(const ParamVector& params, const Matrix& inputs) const {
        if (params.size() != param_count() || params.layout.size() != prototype_.layout.size())
            throw std::invalid_argument("DenseNet: parameter vector does not match the architecture");
        if (inputs.rows() != static_cast<Eigen::Index>(spec_.input_dim))
            throw std::invalid_argument("DenseNet: input dimension mismatch (expected " +
                                        std::to_string(spec_.input_dim) + ", got " + std::to_string(inputs.rows()) + ")");
    }

    DenseNetSpec spec_;
    std::vector<std::size_t> widths_;
    ParamVector prototype_;
};

struct AdamState {
    std::size_t step = 0;
    Vector first_moment;
    Vector second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;

    static AdamState for_params(const ParamVector& p, double lr, double eps, double beta1 = 0.9, double beta2 = 0.999) {
        return {0, Vector::Zero(p.values.size()), Vector::Zero(p.values.size()), beta1, beta2, eps, lr};
    }
};

/// One bias-corrected Adam descent step on `params` along `grad`.
inline void adam_step(AdamState& state, ParamVector& params, const ParamVector& grad) {
    if (grad.values.size() != params.values.size() || state.first_moment.size() != params.values.size() ||
        state.second_moment.size() != params.values.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    ++state.step;
    const double t = static_cast<double>(state.step);
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad.values;
    state.second_moment =
        state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.values.cwiseProduct(grad.values);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    params.values.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                             ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

/// Central finite-difference gradient of a scalar function of the parameters.
inline Vector numerical_gradient(const std::function<double(const ParamVector&)>& f, const ParamVector& at,
                                 double h = 1e-5) {
    Vector g(at.values.size());
    ParamVector probe = at;
    for (Eigen::Index i = 0; i < at.values.size(); ++i) {
        const double x = at.values[i];
        probe.values[i] = x + h;
        const double up = f(probe);
        probe.values[i] = x - h;
        const double down = f(probe);
        probe.values[i] = x;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_relative_error(const Vector& a, const Vector& b, double floor = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

// Checkpoint format: one ASCII line
//   dae-params <count> <name>:<rows>x<cols> ...
// followed by <count> IEEE-754 doubles, little-endian.

inline void write_params(std::ostream& os, const ParamVector& p) {
    os << "dae-params " << p.size();
    for (const auto& seg : p.layout) os << ' ' << seg.name << ':' << seg.rows << 'x' << seg.cols;
    os << '\n';
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(p.values[i]);
        char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffU);
        os.write(bytes, 8);
    }
}

inline ParamVector read_params(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_params: missing layout line");
    std::istringstream header(line);
    std::string magic;
    std::size_t count = 0;
    if (!(header >> magic >> count) || magic != "dae-params")
        throw std::runtime_error("read_params: bad layout line");
    std::vector<Segment> layout;
    std::string item;
    while (header >> item) {
        const auto colon = item.rfind(':');
        const auto x = item.rfind('x');
        if (colon == std::string::npos || x == std::string::npos || x < colon)
            throw std::runtime_error("read_params: bad segment '" + item + "'");
        layout.push_back({item.substr(0, colon), 0, std::stoul(item.substr(colon + 1, x - colon - 1)),
                          std::stoul(item.substr(x + 1))});
    }
    ParamVector p = make_params(std::move(layout));
    if (p.size() != count) throw std::runtime_error("read_params: layout does not match value count");
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char bytes[8];
        if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("read_params: truncated data");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
        p.values[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(bits);
    }
    return p;
}

}  // namespace dae
