#pragma once

#include "geoformer/autograd.hpp"
#include "geoformer/linearizer.hpp"
#include "geoformer/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace geoformer {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 128;
    double dropout_rate = 0.1;
    int vocab_size = tok::kVocabSize;
    int context_len = kContextLen;
    std::uint64_t seed = 0;

    /// Throws ConfigError when the configuration cannot describe a model.
    void validate() const;
    int head_dim() const { return d_model / n_heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename S>
struct NamedParam {
    std::string name;
    ag::Tensor<S> tensor;
    /// Matrices that are not embeddings receive weight decay.
    bool decay = false;
};

/// Decoder-only transformer with learned positional embeddings, pre-norm
/// blocks, GELU MLPs, and an output projection tied to the token embedding.
template <typename S>
class GptModel {
  public:
    struct Block {
        ag::Tensor<S> ln1_g, ln1_b;
        ag::Tensor<S> w_q, b_q, w_k, b_k, w_v, b_v;
        ag::Tensor<S> w_attn_proj, b_attn_proj;
        ag::Tensor<S> ln2_g, ln2_b;
        ag::Tensor<S> w_fc, b_fc, w_mlp_proj, b_mlp_proj;
    };

    explicit GptModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedParam<S>>& params() { return params_; }
    const std::vector<NamedParam<S>>& params() const { return params_; }
    std::size_t param_count() const;

    const ag::Tensor<S>& token_embedding() const { return wte_; }
    const ag::Tensor<S>& position_embedding() const { return wpe_; }
    const ag::Tensor<S>& final_gain() const { return lnf_g_; }
    const ag::Tensor<S>& final_bias() const { return lnf_b_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    void zero_grad();

    /// Logits [batch * seq_len, vocab] for token ids laid out row-major as
    /// [batch, seq_len]. Dropout is applied only when `training` is set.
    ag::Tensor<S> forward(ag::Tape<S>* tape, std::span<const TokenId> ids, std::size_t batch,
                          std::size_t seq_len, bool training = false, Rng* rng = nullptr) const;

    /// Copies parameter values from another model of the same configuration.
    template <typename U>
    void copy_values_from(const GptModel<U>& other);

  private:
    void register_params();

    ModelConfig cfg_;
    ag::Tensor<S> wte_, wpe_, lnf_g_, lnf_b_;
    std::vector<Block> blocks_;
    std::vector<NamedParam<S>> params_;
};

/// Next-token targets for a padded batch: target[b, t] = ids[b, t + 1] while
/// t + 1 < lengths[b], otherwise ag::kIgnoreTarget. When `from` is given,
/// positions before from[b] are ignored as well.
std::vector<int> next_token_targets(std::span<const TokenId> ids, std::size_t batch, std::size_t seq_len,
                                    std::span<const std::size_t> lengths,
                                    std::span<const std::size_t> from = {});

template <typename S>
ag::Tensor<S> next_token_loss(ag::Tape<S>* tape, const ag::Tensor<S>& logits, std::span<const int> targets) {
    return ag::cross_entropy(tape, logits, targets);
}

/// Incremental inference over one sequence with cached keys and values.
/// Produces the same logits as GptModel::forward up to float rounding.
class InferenceSession {
  public:
    explicit InferenceSession(const GptModel<float>& model);

    std::size_t length() const { return length_; }
    void reset();

    /// Feeds `ids` and returns the logits after the last of them.
    std::vector<float> append(std::span<const TokenId> ids);

    /// Feeds `ids` and returns logits for every one of them, [n, vocab].
    std::vector<float> append_all(std::span<const TokenId> ids);

  private:
    void run(std::span<const TokenId> ids, bool all_logits, std::vector<float>& out);

    const GptModel<float>& model_;
    std::size_t length_ = 0;
    std::vector<std::vector<float>> keys_, values_;
};

extern template class GptModel<float>;
extern template class GptModel<double>;

template <typename S>
template <typename U>
void GptModel<S>::copy_values_from(const GptModel<U>& other) {
    if (!(other.config() == cfg_)) throw ConfigError("copy_values_from: configuration mismatch");
    const auto& src = other.params();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto dst = params_[i].tensor.data();
        auto sv = src[i].tensor.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<S>(sv[k]);
    }
}

} // namespace geoformer
