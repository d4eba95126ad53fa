#include "geoformer/model.hpp"

#include "geoformer/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace geoformer {

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
    if (n_heads < 1) throw ConfigError("n_heads must be at least 1");
    if (d_model < 1) throw ConfigError("d_model must be at least 1");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
    if (vocab_size != tok::kVocabSize) throw ConfigError("vocab_size must be " + std::to_string(tok::kVocabSize));
    if (context_len < 1) throw ConfigError("context_len must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
                       {"d_model", c.d_model},           {"dropout_rate", c.dropout_rate},
                       {"vocab_size", c.vocab_size},     {"context_len", c.context_len},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_model = j.value("d_model", d.d_model);
    c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.context_len = j.value("context_len", d.context_len);
    c.seed = j.value("seed", d.seed);
}

namespace {

template <typename S>
ag::Tensor<S> normal_tensor(Rng& rng, ag::Shape shape, double stddev) {
    std::vector<S> v(ag::numel_of(shape));
    for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
    return ag::Tensor<S>(std::move(shape), std::move(v), true);
}

template <typename S>
ag::Tensor<S> filled(ag::Shape shape, S value) {
    const auto n = ag::numel_of(shape);
    return ag::Tensor<S>(std::move(shape), std::vector<S>(n, value), true);
}

} // namespace

template <typename S>
GptModel<S>::GptModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    constexpr double kStd = 0.02;
    const double residual_std = kStd / std::sqrt(2.0 * cfg_.n_layers);
    const std::size_t C = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t V = static_cast<std::size_t>(cfg_.vocab_size);

    Rng rng(cfg_.seed);
    wte_ = normal_tensor<S>(rng, {V, C}, kStd);
    wpe_ = normal_tensor<S>(rng, {static_cast<std::size_t>(cfg_.context_len), C}, kStd);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        Block b;
        b.ln1_g = filled<S>({C}, S(1));
        b.ln1_b = filled<S>({C}, S(0));
        b.w_q = normal_tensor<S>(rng, {C, C}, kStd);
        b.b_q = filled<S>({C}, S(0));
        b.w_k = normal_tensor<S>(rng, {C, C}, kStd);
        b.b_k = filled<S>({C}, S(0));
        b.w_v = normal_tensor<S>(rng, {C, C}, kStd);
        b.b_v = filled<S>({C}, S(0));
        b.w_attn_proj = normal_tensor<S>(rng, {C, C}, residual_std);
        b.b_attn_proj = filled<S>({C}, S(0));
        b.ln2_g = filled<S>({C}, S(1));
        b.ln2_b = filled<S>({C}, S(0));
        b.w_fc = normal_tensor<S>(rng, {C, 4 * C}, kStd);
        b.b_fc = filled<S>({4 * C}, S(0));
        b.w_mlp_proj = normal_tensor<S>(rng, {4 * C, C}, residual_std);
        b.b_mlp_proj = filled<S>({C}, S(0));
        blocks_.push_back(std::move(b));
    }
    lnf_g_ = filled<S>({C}, S(1));
    lnf_b_ = filled<S>({C}, S(0));
    register_params();
}

template <typename S>
void GptModel<S>::register_params() {
    params_.push_back({"wte", wte_, false});
    params_.push_back({"wpe", wpe_, false});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = "h" + std::to_string(l) + ".";
        auto& b = blocks_[l];
        params_.push_back({p + "ln1.g", b.ln1_g, false});
        params_.push_back({p + "ln1.b", b.ln1_b, false});
        params_.push_back({p + "attn.w_q", b.w_q, true});
        params_.push_back({p + "attn.b_q", b.b_q, false});
        params_.push_back({p + "attn.w_k", b.w_k, true});
        params_.push_back({p + "attn.b_k", b.b_k, false});
        params_.push_back({p + "attn.w_v", b.w_v, true});
        params_.push_back({p + "attn.b_v", b.b_v, false});
        params_.push_back({p + "attn.w_proj", b.w_attn_proj, true});
        params_.push_back({p + "attn.b_proj", b.b_attn_proj, false});
        params_.push_back({p + "ln2.g", b.ln2_g, false});
        params_.push_back({p + "ln2.b", b.ln2_b, false});
        params_.push_back({p + "mlp.w_fc", b.w_fc, true});
        params_.push_back({p + "mlp.b_fc", b.b_fc, false});
        params_.push_back({p + "mlp.w_proj", b.w_mlp_proj, true});
        params_.push_back({p + "mlp.b_proj", b.b_mlp_proj, false});
    }
    params_.push_back({"ln_f.g", lnf_g_, false});
    params_.push_back({"ln_f.b", lnf_b_, false});
}

template <typename S>
std::size_t GptModel<S>::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

template <typename S>
void GptModel<S>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

template <typename S>
ag::Tensor<S> GptModel<S>::forward(ag::Tape<S>* tape, std::span<const TokenId> ids, std::size_t batch,
                                   std::size_t seq_len, bool training, Rng* rng) const {
    using namespace ag;
    if (batch == 0 || seq_len == 0) throw ShapeError("forward: empty batch");
    if (ids.size() != batch * seq_len)
        throw ShapeError("forward: " + std::to_string(ids.size()) + " ids for a [" + std::to_string(batch) + ", " +
                         std::to_string(seq_len) + "] batch");
    if (seq_len > static_cast<std::size_t>(cfg_.context_len))
        throw RangeError("sequence of " + std::to_string(seq_len) + " tokens exceeds the context of " +
                         std::to_string(cfg_.context_len));

    const std::size_t B = batch, T = seq_len, N = B * T;
    const std::size_t C = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t H = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t hd = C / H;
    const double p_drop = cfg_.dropout_rate;

    std::vector<int> positions(N);
    for (std::size_t i = 0; i < N; ++i) positions[i] = static_cast<int>(i % T);

    Tensor<S> x = add(tape, embedding(tape, wte_, ids), embedding(tape, wpe_, std::span<const int>(positions)));
    x = dropout(tape, x, p_drop, rng, training);

    auto heads = [&](const Tensor<S>& t) {
        return reshape(tape, permute_0213(tape, reshape(tape, t, {B, T, H, hd})), {B * H, T, hd});
    };
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));

    for (const auto& b : blocks_) {
        Tensor<S> h = layer_norm(tape, x, b.ln1_g, b.ln1_b);
        Tensor<S> q = heads(add_bias(tape, matmul(tape, h, b.w_q), b.b_q));
        Tensor<S> k = heads(add_bias(tape, matmul(tape, h, b.w_k), b.b_k));
        Tensor<S> v = heads(add_bias(tape, matmul(tape, h, b.w_v), b.b_v));

        Tensor<S> att = causal_attention(tape, q, k, v, inv_sqrt_hd, p_drop, rng, training);
        att = reshape(tape, permute_0213(tape, reshape(tape, att, {B, H, T, hd})), {N, C});

        Tensor<S> proj = add_bias(tape, matmul(tape, att, b.w_attn_proj), b.b_attn_proj);
        x = add(tape, x, dropout(tape, proj, p_drop, rng, training));

        Tensor<S> h2 = layer_norm(tape, x, b.ln2_g, b.ln2_b);
        Tensor<S> m = gelu(tape, add_bias(tape, matmul(tape, h2, b.w_fc), b.b_fc));
        m = add_bias(tape, matmul(tape, m, b.w_mlp_proj), b.b_mlp_proj);
        x = add(tape, x, dropout(tape, m, p_drop, rng, training));
    }
    x = layer_norm(tape, x, lnf_g_, lnf_b_);
    return matmul(tape, x, transpose(tape, wte_));
}

template class GptModel<float>;
template class GptModel<double>;

std::vector<int> next_token_targets(std::span<const TokenId> ids, std::size_t batch, std::size_t seq_len,
                                    std::span<const std::size_t> lengths, std::span<const std::size_t> from) {
    if (ids.size() != batch * seq_len || lengths.size() != batch || (!from.empty() && from.size() != batch))
        throw ShapeError("next_token_targets: inconsistent batch description");
    std::vector<int> targets(batch * seq_len, ag::kIgnoreTarget);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t start = from.empty() ? 0 : from[b];
        for (std::size_t t = start; t + 1 < lengths[b] && t + 1 < seq_len; ++t)
            targets[b * seq_len + t] = ids[b * seq_len + t + 1];
    }
    return targets;
}

// ---------------------------------------------------------------------------

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<const Eigen::RowVectorXf>;

void layer_norm_rows(Mat& x, std::span<const float> g, std::span<const float> b, Mat& out) {
    const auto C = x.cols();
    out.resize(x.rows(), C);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float* row = x.row(r).data();
        float mean = 0;
        for (Eigen::Index c = 0; c < C; ++c) mean += row[c];
        mean /= static_cast<float>(C);
        float var = 0;
        for (Eigen::Index c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<float>(C);
        const float rstd = 1.0f / std::sqrt(var + 1e-5f);
        for (Eigen::Index c = 0; c < C; ++c) out(r, c) = (row[c] - mean) * rstd * g[c] + b[c];
    }
}

Mat affine(const Mat& x, const ag::Tensor<float>& w, const ag::Tensor<float>& b) {
    const auto in = static_cast<Eigen::Index>(w.dim(0));
    const auto outd = static_cast<Eigen::Index>(w.dim(1));
    Mat y = x * CMap(w.data().data(), in, outd);
    y.rowwise() += VecMap(b.data().data(), outd);
    return y;
}

} // namespace

InferenceSession::InferenceSession(const GptModel<float>& model)
    : model_(model), keys_(model.blocks().size()), values_(model.blocks().size()) {}

void InferenceSession::reset() {
    length_ = 0;
    for (auto& k : keys_) k.clear();
    for (auto& v : values_) v.clear();
}

std::vector<float> InferenceSession::append(std::span<const TokenId> ids) {
    std::vector<float> out;
    run(ids, false, out);
    return out;
}

std::vector<float> InferenceSession::append_all(std::span<const TokenId> ids) {
    std::vector<float> out;
    run(ids, true, out);
    return out;
}

void InferenceSession::run(std::span<const TokenId> ids, bool all_logits, std::vector<float>& out) {
    const auto& cfg = model_.config();
    if (ids.empty()) throw ShapeError("append: no tokens");
    if (length_ + ids.size() > static_cast<std::size_t>(cfg.context_len))
        throw RangeError("context overflow: " + std::to_string(length_ + ids.size()) + " tokens exceed " +
                         std::to_string(cfg.context_len));

    const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index C = cfg.d_model;
    const Eigen::Index H = cfg.n_heads;
    const Eigen::Index hd = C / H;
    const Eigen::Index V = cfg.vocab_size;
    const Eigen::Index p0 = static_cast<Eigen::Index>(length_);
    const Eigen::Index total = p0 + n;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    const auto wte = model_.token_embedding().data();
    const auto wpe = model_.position_embedding().data();
    Mat x(n, C);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= V) throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
        for (Eigen::Index c = 0; c < C; ++c)
            x(i, c) = wte[static_cast<std::size_t>(id * C + c)] + wpe[static_cast<std::size_t>((p0 + i) * C + c)];
    }

    Mat h, att(n, C), scores;
    for (std::size_t l = 0; l < model_.blocks().size(); ++l) {
        const auto& b = model_.blocks()[l];
        layer_norm_rows(x, b.ln1_g.data(), b.ln1_b.data(), h);
        Mat q = affine(h, b.w_q, b.b_q);
        Mat k = affine(h, b.w_k, b.b_k);
        Mat v = affine(h, b.w_v, b.b_v);
        keys_[l].insert(keys_[l].end(), k.data(), k.data() + k.size());
        values_[l].insert(values_[l].end(), v.data(), v.data() + v.size());
        CMap K(keys_[l].data(), total, C);
        CMap Vc(values_[l].data(), total, C);

        for (Eigen::Index hh = 0; hh < H; ++hh) {
            scores = (q.middleCols(hh * hd, hd) * K.middleCols(hh * hd, hd).transpose()) * inv_sqrt_hd;
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index visible = p0 + i + 1;
                float* row = scores.row(i).data();
                const float mx = *std::max_element(row, row + visible);
                float z = 0;
                for (Eigen::Index j = 0; j < visible; ++j) z += row[j] = std::exp(row[j] - mx);
                for (Eigen::Index j = 0; j < visible; ++j) row[j] /= z;
                for (Eigen::Index j = visible; j < total; ++j) row[j] = 0.0f;
            }
            att.middleCols(hh * hd, hd).noalias() = scores * Vc.middleCols(hh * hd, hd);
        }
        x += affine(att, b.w_attn_proj, b.b_attn_proj);

        layer_norm_rows(x, b.ln2_g.data(), b.ln2_b.data(), h);
        Mat m = affine(h, b.w_fc, b.b_fc);
        ag::detail::gelu_values(m.data(), m.data(), m.size());
        x += affine(m, b.w_mlp_proj, b.b_mlp_proj);
    }
    length_ = static_cast<std::size_t>(total);

    CMap wte_map(wte.data(), V, C);
    if (all_logits) {
        layer_norm_rows(x, model_.final_gain().data(), model_.final_bias().data(), h);
        out.resize(static_cast<std::size_t>(n * V));
        Eigen::Map<Mat>(out.data(), n, V).noalias() = h * wte_map.transpose();
    } else {
        Mat last = x.bottomRows(1);
        layer_norm_rows(last, model_.final_gain().data(), model_.final_bias().data(), h);
        out.resize(static_cast<std::size_t>(V));
        Eigen::Map<Mat>(out.data(), 1, V).noalias() = h * wte_map.transpose();
    }
}

} // namespace geoformer
