#include "m3pt/optim.hpp"

#include <cmath>

namespace m3pt {

double Adam::step(ag::ParamSet& params) {
    auto& entries = params.entries();
    if (m_.empty()) {
        for (const auto& e : entries) {
            m_.push_back(Matrix::Zero(e.second.rows(), e.second.cols()));
            v_.push_back(Matrix::Zero(e.second.rows(), e.second.cols()));
        }
    }
    require(m_.size() == entries.size(), "Adam: parameter set changed between steps");

    double sq = 0.0;
    for (const auto& e : entries)
        if (e.second.has_grad()) sq += e.second.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm in optimizer step");
    const double clip = (settings_.clip_norm > 0.0 && norm > settings_.clip_norm) ? settings_.clip_norm / norm : 1.0;

    ++t_;
    const double b1 = settings_.beta1;
    const double b2 = settings_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t p = 0; p < entries.size(); ++p) {
        auto& var = entries[p].second;
        if (!var.has_grad()) continue;
        const Matrix g = var.grad() * clip;
        m_[p] = b1 * m_[p] + (1.0 - b1) * g;
        v_[p] = b2 * v_[p] + (1.0 - b2) * g.cwiseProduct(g);
        var.mutable_value().array() -=
            settings_.learning_rate * (m_[p].array() / c1) / ((v_[p].array() / c2).sqrt() + settings_.epsilon);
    }
    params.zero_grad();
    return norm;
}

}  // namespace m3pt
