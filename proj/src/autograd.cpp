#include "m3pt/autograd.hpp"

#include "m3pt/block_mask.hpp"
#include "m3pt/rng.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <unordered_set>

namespace m3pt::ag {

namespace {

using NodePtr = std::shared_ptr<Node>;

thread_local bool g_grad_enabled = true;

Var make(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    if (g_grad_enabled)
        for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(fn);
    }
    return Var(std::move(n));
}

void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InvalidArgument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
}

// im2col for packed sequences. Column block j holds the input at offset
// (j - pad) for conv1d, or (pad - j) for the transposed direction.
Matrix im2col(const Matrix& x, int seq_len, int kernel, bool transposed) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index cin = x.cols();
    const int pad = (kernel - 1) / 2;
    Matrix col = Matrix::Zero(rows, cin * kernel);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index base = r - r % seq_len;
        const int s = static_cast<int>(r % seq_len);
        for (int j = 0; j < kernel; ++j) {
            const int src = transposed ? s + pad - j : s + j - pad;
            if (src < 0 || src >= seq_len) continue;
            col.block(r, j * cin, 1, cin) = x.row(base + src);
        }
    }
    return col;
}

Matrix col2im(const Matrix& col, Eigen::Index cin, int seq_len, int kernel, bool transposed) {
    const Eigen::Index rows = col.rows();
    const int pad = (kernel - 1) / 2;
    Matrix x = Matrix::Zero(rows, cin);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index base = r - r % seq_len;
        const int s = static_cast<int>(r % seq_len);
        for (int j = 0; j < kernel; ++j) {
            const int src = transposed ? s + pad - j : s + j - pad;
            if (src < 0 || src >= seq_len) continue;
            x.row(base + src) += col.block(r, j * cin, 1, cin);
        }
    }
    return x;
}

Var conv_impl(const Var& x, const Var& weight, const Var& bias, int seq_len, int kernel, bool transposed) {
    require(kernel >= 1 && kernel % 2 == 1, "convolution kernel must be odd");
    require(seq_len >= 1 && x.rows() % seq_len == 0, "convolution input rows must be a multiple of seq_len");
    require(weight.rows() == kernel * x.cols(), "convolution weight rows must equal kernel * Cin");
    require(bias.rows() == 1 && bias.cols() == weight.cols(), "convolution bias must be 1 x Cout");
    Matrix col = im2col(x.value(), seq_len, kernel, transposed);
    Matrix out = col * weight.value();
    out.rowwise() += bias.value().row(0);
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    const Eigen::Index cin = x.cols();
    return make(std::move(out), {xn, wn, bn},
                [xn, wn, bn, col = std::move(col), cin, seq_len, kernel, transposed](Node& self) {
                    if (wn->requires_grad) wn->accumulate(col.transpose() * self.grad);
                    if (bn->requires_grad) bn->accumulate(self.grad.colwise().sum());
                    if (xn->requires_grad) {
                        Matrix dcol = self.grad * wn->value.transpose();
                        xn->accumulate(col2im(dcol, cin, seq_len, kernel, transposed));
                    }
                });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0)
        grad = g;
    else
        grad += g;
}

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

void backward(const Var& root) {
    require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

Var detach(const Var& a) { return constant(a.value()); }

Var add(const Var& a, const Var& b) {
    same_shape(a, b, "add");
    auto an = a.node();
    auto bn = b.node();
    return make(a.value() + b.value(), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    same_shape(a, b, "sub");
    auto an = a.node();
    auto bn = b.node();
    return make(a.value() - b.value(), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(-self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    same_shape(a, b, "mul");
    auto an = a.node();
    auto bn = b.node();
    return make(a.value().cwiseProduct(b.value()), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad.cwiseProduct(bn->value));
        if (bn->requires_grad) bn->accumulate(self.grad.cwiseProduct(an->value));
    });
}

Var scale(const Var& a, double s) {
    auto an = a.node();
    return make(a.value() * s, {an}, [an, s](Node& self) { an->accumulate(self.grad * s); });
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows())
        throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()) + ")");
    auto an = a.node();
    auto bn = b.node();
    return make(a.value() * b.value(), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad * bn->value.transpose());
        if (bn->requires_grad) bn->accumulate(an->value.transpose() * self.grad);
    });
}

Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    auto an = a.node();
    auto rn = row.node();
    return make(std::move(out), {an, rn}, [an, rn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (rn->requires_grad) rn->accumulate(self.grad.colwise().sum());
    });
}

Var relu(const Var& a) {
    auto an = a.node();
    return make(a.value().cwiseMax(0.0), {an}, [an](Node& self) {
        an->accumulate(self.grad.cwiseProduct((an->value.array() > 0.0).cast<double>().matrix()));
    });
}

Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& self) {
        an->accumulate(Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    require(n > 0, "mean of an empty matrix");
    return scale(sum(a), 1.0 / n);
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
    require(rows * cols == a.value().size(), "reshape: element count differs");
    // Row-major storage makes reshape a reinterpretation.
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& self) {
        an->accumulate(Eigen::Map<const Matrix>(self.grad.data(), an->value.rows(), an->value.cols()));
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: range out of bounds");
    auto an = a.node();
    return make(a.value().middleRows(start, count), {an}, [an, start, count](Node& self) {
        Matrix g = Matrix::Zero(an->value.rows(), an->value.cols());
        g.middleRows(start, count) = self.grad;
        an->accumulate(g);
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: nothing to concatenate");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) {
        require(p.cols() == cols, "concat_rows: column counts differ");
        rows += p.rows();
        nodes.push_back(p.node());
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    auto captured = nodes;
    return make(std::move(out), std::move(nodes), [captured](Node& self) {
        Eigen::Index offset = 0;
        for (const auto& n : captured) {
            const Eigen::Index r = n->value.rows();
            if (n->requires_grad) n->accumulate(self.grad.middleRows(offset, r));
            offset += r;
        }
    });
}

Var gather_rows(const Var& table, std::span<const int> indices) {
    Matrix out(static_cast<Eigen::Index>(indices.size()), table.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        require(indices[r] >= 0 && indices[r] < table.rows(), "gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(r)) = table.value().row(indices[r]);
    }
    auto tn = table.node();
    std::vector<int> idx(indices.begin(), indices.end());
    return make(std::move(out), {tn}, [tn, idx = std::move(idx)](Node& self) {
        Matrix g = Matrix::Zero(tn->value.rows(), tn->value.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += self.grad.row(static_cast<Eigen::Index>(r));
        tn->accumulate(g);
    });
}

Var shift_rows(const Var& a, Eigen::Index shift) {
    require(shift >= 0, "shift_rows: shift must be nonnegative");
    const Eigen::Index n = a.rows();
    Matrix out = Matrix::Zero(n, a.cols());
    if (shift < n) out.bottomRows(n - shift) = a.value().topRows(n - shift);
    auto an = a.node();
    return make(std::move(out), {an}, [an, shift](Node& self) {
        const Eigen::Index rows = an->value.rows();
        Matrix g = Matrix::Zero(rows, an->value.cols());
        if (shift < rows) g.topRows(rows - shift) = self.grad.bottomRows(rows - shift);
        an->accumulate(g);
    });
}

Var select_rows(const Var& a, const Var& replacement, std::span<const int> rows) {
    same_shape(a, replacement, "select_rows");
    Matrix out = a.value();
    std::vector<std::uint8_t> replaced(static_cast<std::size_t>(a.rows()), 0);
    for (int r : rows) {
        require(r >= 0 && r < a.rows(), "select_rows: row out of range");
        out.row(r) = replacement.value().row(r);
        replaced[r] = 1;
    }
    auto an = a.node();
    auto rn = replacement.node();
    return make(std::move(out), {an, rn}, [an, rn, replaced = std::move(replaced)](Node& self) {
        Matrix ga = self.grad;
        Matrix gr = Matrix::Zero(self.grad.rows(), self.grad.cols());
        for (std::size_t r = 0; r < replaced.size(); ++r) {
            if (!replaced[r]) continue;
            gr.row(static_cast<Eigen::Index>(r)) = self.grad.row(static_cast<Eigen::Index>(r));
            ga.row(static_cast<Eigen::Index>(r)).setZero();
        }
        if (an->requires_grad) an->accumulate(ga);
        if (rn->requires_grad) rn->accumulate(gr);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
            "layer_norm: gamma/beta must be 1 x cols");
    Matrix xhat(n, d);
    Vector inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat;
    out.array().rowwise() *= gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make(std::move(out), {xn, gn, bn},
                [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                    const Matrix& dy = self.grad;
                    if (gn->requires_grad) gn->accumulate(dy.cwiseProduct(xhat).colwise().sum());
                    if (bn->requires_grad) bn->accumulate(dy.colwise().sum());
                    if (!xn->requires_grad) return;
                    Matrix dxhat = dy;
                    dxhat.array().rowwise() *= gn->value.row(0).array();
                    Matrix dx(dy.rows(), dy.cols());
                    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                        const double m1 = dxhat.row(r).mean();
                        const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                    }
                    xn->accumulate(dx);
                });
}

Var dropout(const Var& a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    require(p < 1.0, "dropout probability must be < 1");
    Matrix keep(a.rows(), a.cols());
    const double s = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.bernoulli(1.0 - p) ? s : 0.0;
    Matrix out = a.value().cwiseProduct(keep);
    auto an = a.node();
    return make(std::move(out), {an}, [an, keep = std::move(keep)](Node& self) {
        an->accumulate(self.grad.cwiseProduct(keep));
    });
}

Var mse(const Var& a, const Var& b) {
    same_shape(a, b, "mse");
    const Var d = sub(a, b);
    return mean(mul(d, d));
}

Var weighted_bce_with_logits(const Var& logits, std::span<const double> targets, std::span<const double> weights) {
    const auto n = static_cast<std::size_t>(logits.rows());
    require(logits.cols() == 1, "bce: logits must be a column");
    require(targets.size() == n && weights.size() == n, "bce: targets/weights length mismatch");
    require(n > 0, "bce: empty batch");
    double total = 0.0;
    Matrix g(static_cast<Eigen::Index>(n), 1);
    for (std::size_t r = 0; r < n; ++r) {
        const double x = logits.value()(static_cast<Eigen::Index>(r), 0);
        const double y = targets[r];
        total += weights[r] * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
        const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        g(static_cast<Eigen::Index>(r), 0) = weights[r] * (sig - y) / static_cast<double>(n);
    }
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(n);
    auto ln = logits.node();
    return make(std::move(out), {ln}, [ln, g = std::move(g)](Node& self) { ln->accumulate(g * self.grad(0, 0)); });
}

Var conv1d(const Var& x, const Var& weight, const Var& bias, int seq_len, int kernel) {
    return conv_impl(x, weight, bias, seq_len, kernel, false);
}

Var conv_transpose1d(const Var& x, const Var& weight, const Var& bias, int seq_len, int kernel) {
    return conv_impl(x, weight, bias, seq_len, kernel, true);
}

Var masked_attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, int heads,
                     const AttentionOptions& options) {
    same_shape(k, v, "attention");
    require(q.cols() == k.cols(), "attention: query and key widths differ");
    const Eigen::Index Lq = q.rows();
    const Eigen::Index Lk = k.rows();
    const Eigen::Index d = q.cols();
    const std::size_t off = options.query_offset;
    require(off + static_cast<std::size_t>(Lq) <= mask.length() && static_cast<std::size_t>(Lk) <= mask.length(),
            "attention: query/key rows fall outside the mask");
    require(heads >= 1 && d % heads == 0, "attention: width must be divisible by the head count");
    const Eigen::Index dh = d / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Matrix> weights(static_cast<std::size_t>(heads));
    Matrix out = Matrix::Zero(Lq, d);
    for (int h = 0; h < heads; ++h) {
        const auto qh = q.value().middleCols(h * dh, dh);
        const auto kh = k.value().middleCols(h * dh, dh);
        Matrix scores = (qh * kh.transpose()) * scale_factor;
        Matrix& a = weights[static_cast<std::size_t>(h)];
        a = Matrix::Zero(Lq, Lk);
        for (Eigen::Index r = 0; r < Lq; ++r) {
            const std::uint8_t* allow = mask.row(off + static_cast<std::size_t>(r));
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < Lk; ++c)
                if (allow[c]) mx = std::max(mx, scores(r, c));
            if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
            double z = 0.0;
            for (Eigen::Index c = 0; c < Lk; ++c) {
                if (!allow[c]) continue;
                const double e = std::exp(scores(r, c) - mx);
                a(r, c) = e;
                z += e;
            }
            a.row(r) /= z;
        }
        if (!options.zero_output) out.middleCols(h * dh, dh) = a * v.value().middleCols(h * dh, dh);
    }
    if (options.record) options.record->weights = weights;
    if (options.zero_output) return constant(std::move(out));

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return make(std::move(out), {qn, kn, vn},
                [qn, kn, vn, weights = std::move(weights), heads, dh, scale_factor](Node& self) {
                    const Eigen::Index Lq = self.grad.rows();
                    const Eigen::Index d = self.grad.cols();
                    const Eigen::Index Lk = kn->value.rows();
                    Matrix dq = Matrix::Zero(Lq, d);
                    Matrix dk = Matrix::Zero(Lk, d);
                    Matrix dv = Matrix::Zero(Lk, d);
                    for (int h = 0; h < heads; ++h) {
                        const Matrix& a = weights[static_cast<std::size_t>(h)];
                        const auto go = self.grad.middleCols(h * dh, dh);
                        dv.middleCols(h * dh, dh) = a.transpose() * go;
                        Matrix da = go * vn->value.middleCols(h * dh, dh).transpose();
                        Matrix ds = a.cwiseProduct(da);
                        const Vector row_dot = ds.rowwise().sum();
                        ds -= a.cwiseProduct(row_dot.replicate(1, Lk));
                        dq.middleCols(h * dh, dh) = (ds * kn->value.middleCols(h * dh, dh)) * scale_factor;
                        dk.middleCols(h * dh, dh) = (ds.transpose() * qn->value.middleCols(h * dh, dh)) * scale_factor;
                    }
                    if (qn->requires_grad) qn->accumulate(dq);
                    if (kn->requires_grad) kn->accumulate(dk);
                    if (vn->requires_grad) vn->accumulate(dv);
                });
}

Var& ParamSet::add(const std::string& name, Matrix value) {
    require(!contains(name), "duplicate parameter '" + name + "'");
    entries_.emplace_back(name, parameter(std::move(value)));
    return entries_.back().second;
}

Var& ParamSet::get(const std::string& name) {
    for (auto& [n, v] : entries_)
        if (n == name) return v;
    throw InvalidArgument("no parameter named '" + name + "'");
}

const Var& ParamSet::get(const std::string& name) const {
    for (const auto& [n, v] : entries_)
        if (n == name) return v;
    throw InvalidArgument("no parameter named '" + name + "'");
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.first == name) return true;
    return false;
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.second.value().size());
    return n;
}

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double gain) {
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
    return m;
}

}  // namespace m3pt::ag
