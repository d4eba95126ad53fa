#include "geoformer/optim.hpp"

namespace geoformer {

void TrainConfig::validate() const {
    if (!(lr_max >= 0.0)) throw ConfigError("lr_max must be non-negative");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (total_steps < 0 || max_steps < 0) throw ConfigError("step counts must be non-negative");
    if (total_steps > 0 && warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (eval_interval < 1) throw ConfigError("eval_interval must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr_max", c.lr_max},
                       {"warmup_steps", c.warmup_steps},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps", c.eps},
                       {"clip_norm", c.clip_norm},
                       {"weight_decay", c.weight_decay},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"total_steps", c.total_steps},
                       {"max_steps", c.max_steps},
                       {"eval_interval", c.eval_interval},
                       {"eval_windows", c.eval_windows},
                       {"target_only_loss", c.target_only_loss},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.lr_max = j.value("lr_max", d.lr_max);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.total_steps = j.value("total_steps", d.total_steps);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.eval_interval = j.value("eval_interval", d.eval_interval);
    c.eval_windows = j.value("eval_windows", d.eval_windows);
    c.target_only_loss = j.value("target_only_loss", d.target_only_loss);
    c.seed = j.value("seed", d.seed);
}

double lr_at(std::int64_t step, const TrainConfig& tc) {
    if (step < 0) throw RangeError("negative step");
    if (step < tc.warmup_steps)
        return tc.lr_max * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
    if (tc.total_steps <= tc.warmup_steps || step >= tc.total_steps) return step == tc.warmup_steps ? tc.lr_max : 0.0;
    const double progress = static_cast<double>(step - tc.warmup_steps) /
                            static_cast<double>(tc.total_steps - tc.warmup_steps);
    return tc.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace geoformer
