#pragma once

#include "geoformer/error.hpp"
#include "geoformer/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace geoformer {

struct TrainConfig {
    double lr_max = 5e-4;
    std::int64_t warmup_steps = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-5;
    double clip_norm = 5.0;
    double weight_decay = 0.01;
    int epochs = 5;
    int batch_size = 8;
    /// Length of the cosine horizon. 0 means epochs * ceil(windows / batch).
    std::int64_t total_steps = 0;
    /// Hard stop; 0 runs the whole schedule.
    std::int64_t max_steps = 0;
    std::int64_t eval_interval = 200;
    /// Cap on validation windows scored per evaluation; 0 scores all.
    int eval_windows = 0;
    /// Restrict the loss to the target day (after <|sep|>).
    bool target_only_loss = false;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warm-up from 0 to lr_max, then a cosine decay to 0 at total_steps.
double lr_at(std::int64_t step, const TrainConfig& tc);

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm measured before clipping.
template <typename S>
double clip_gradients(std::vector<NamedParam<S>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params)
        for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > max_norm) {
        const S factor = static_cast<S>(max_norm / norm);
        for (auto& p : params)
            for (auto& g : p.tensor.grad()) g *= factor;
    }
    return norm;
}

/// AdamW with bias correction and decoupled weight decay, applied only to
/// parameters flagged `decay`.
template <typename S>
class AdamW {
  public:
    AdamW() = default;
    explicit AdamW(const std::vector<NamedParam<S>>& params) { reset(params); }

    void reset(const std::vector<NamedParam<S>>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.numel(), S(0));
            v_.emplace_back(p.tensor.numel(), S(0));
        }
        t_ = 0;
    }

    std::int64_t steps_taken() const { return t_; }
    void set_steps_taken(std::int64_t t) { t_ = t; }
    std::vector<std::vector<S>>& first_moments() { return m_; }
    std::vector<std::vector<S>>& second_moments() { return v_; }
    const std::vector<std::vector<S>>& first_moments() const { return m_; }
    const std::vector<std::vector<S>>& second_moments() const { return v_; }

    void step(std::vector<NamedParam<S>>& params, const TrainConfig& tc, double lr) {
        if (params.size() != m_.size()) throw ShapeError("AdamW: parameter list changed since reset");
        for (auto& p : params)
            for (auto g : p.tensor.grad())
                if (!std::isfinite(static_cast<double>(g)))
                    throw NumericError("non-finite gradient in parameter '" + p.name + "' at step " +
                                       std::to_string(t_ + 1));
        ++t_;
        const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(t_));
        const S b1 = static_cast<S>(tc.beta1), b2 = static_cast<S>(tc.beta2);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].tensor.data();
            auto g = params[i].tensor.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            const S decay = params[i].decay ? static_cast<S>(1.0 - lr * tc.weight_decay) : S(1);
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = b1 * m[k] + (S(1) - b1) * g[k];
                v[k] = b2 * v[k] + (S(1) - b2) * g[k] * g[k];
                const double mhat = static_cast<double>(m[k]) / bc1;
                const double vhat = static_cast<double>(v[k]) / bc2;
                w[k] = static_cast<S>(static_cast<double>(w[k] * decay) - lr * mhat / (std::sqrt(vhat) + tc.eps));
            }
        }
    }

  private:
    std::vector<std::vector<S>> m_, v_;
    std::int64_t t_ = 0;
};

} // namespace geoformer
