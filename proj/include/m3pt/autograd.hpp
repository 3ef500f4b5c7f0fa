#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A forward pass builds a graph of Nodes; backward() walks it in
// reverse topological order. Parameters are long-lived leaf nodes whose grad
// accumulates across graphs until zero_grad().

#include "m3pt/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace m3pt {
class AttentionMask;
class Rng;
}  // namespace m3pt

namespace m3pt::ag {

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const { return node_->value(0, 0); }
    void zero_grad() { node_->grad.resize(0, 0); }

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

// While alive on a thread, ops on that thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
Var parameter(Matrix value);

// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates.
void backward(const Var& root);

Var detach(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast a 1 x C row over a's rows
Var relu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const int> indices);
// out.row(r) = a.row(r - shift) for r >= shift, zero otherwise.
Var shift_rows(const Var& a, Eigen::Index shift);
// Replaces rows listed in `rows` with the matching row of `replacement`
// (same shape as a); gradient is routed accordingly.
Var select_rows(const Var& a, const Var& replacement, std::span<const int> rows);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var dropout(const Var& a, double p, Rng& rng);

// Mean of squared differences over all elements.
Var mse(const Var& a, const Var& b);

// Mean over rows of weight_n * BCE(logit_n, target_n), computed stably.
Var weighted_bce_with_logits(const Var& logits, std::span<const double> targets, std::span<const double> weights);

// 1-D convolution over sequences packed as rows: x is (B * seq_len) x Cin,
// weight is (kernel * Cin) x Cout with tap j occupying rows [j*Cin, (j+1)*Cin),
// bias is 1 x Cout. Zero "same" padding per sequence, odd kernel.
Var conv1d(const Var& x, const Var& weight, const Var& bias, int seq_len, int kernel);
// Stride-1 transposed convolution (the adjoint of conv1d's input map) with
// the same weight layout.
Var conv_transpose1d(const Var& x, const Var& weight, const Var& bias, int seq_len, int kernel);

struct AttentionRecord {
    std::vector<Matrix> weights;  // one L x L post-softmax matrix per head
};

struct AttentionOptions {
    AttentionRecord* record = nullptr;
    bool zero_output = false;  // diagnostic: force the attention output to zero
    // Query row r uses mask row query_offset + r; keys are mask columns
    // [0, k.rows()). Lets a block of queries attend over a cached prefix.
    std::size_t query_offset = 0;
};

// Multi-head scaled dot-product attention with a boolean allow mask. Weights
// on disallowed keys are exactly zero; a query row with no allowed key gets
// an all-zero weight row and a zero context vector.
Var masked_attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, int heads,
                     const AttentionOptions& options = {});

// Named parameter collection shared by the tokenizer and the transformer.
class ParamSet {
public:
    Var& add(const std::string& name, Matrix value);
    Var& get(const std::string& name);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    void zero_grad();
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    std::vector<std::pair<std::string, Var>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, Var>> entries_;
};

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double gain = 1.0);

}  // namespace m3pt::ag
