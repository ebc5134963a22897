#include "counterprobe/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace counterprobe::model {

using nn::Tensor;

void TransformerConfig::validate() const {
    if (d_model <= 0 || d_ffn <= 0 || n_layers <= 0 || n_heads <= 0 || vocab <= 0 || max_len <= 0)
        throw std::invalid_argument("transformer config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("transformer config: d_model must be divisible by n_heads");
    if (dropout < 0.0f || dropout >= 1.0f)
        throw std::invalid_argument("transformer config: dropout must be in [0,1)");
    if (batch <= 0 || epochs < 0) throw std::invalid_argument("transformer config: bad schedule");
}

TransformerModel::TransformerModel(TransformerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix64(cfg_.seed, 0x6d6f64656cULL));  // "model"
    const int d = cfg_.d_model;
    embed_ = nn::xavier_uniform({cfg_.vocab, d}, rng);
    pos_ = cfg_.positional == Positional::learned
               ? nn::xavier_uniform({cfg_.max_len, d}, rng)
               : nn::sinusoidal_positions(cfg_.max_len, d);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (auto& l : layers_) {
        l.wq = nn::xavier_uniform({d, d}, rng);
        l.bq = Tensor::zeros({d}, true);
        l.wk = nn::xavier_uniform({d, d}, rng);
        l.bk = Tensor::zeros({d}, true);
        l.wv = nn::xavier_uniform({d, d}, rng);
        l.bv = Tensor::zeros({d}, true);
        l.wo = nn::xavier_uniform({d, d}, rng);
        l.bo = Tensor::zeros({d}, true);
        l.w1 = nn::xavier_uniform({d, cfg_.d_ffn}, rng);
        l.b1 = Tensor::zeros({cfg_.d_ffn}, true);
        l.w2 = nn::xavier_uniform({cfg_.d_ffn, d}, rng);
        l.b2 = Tensor::zeros({d}, true);
        l.ln1_g = Tensor::from_data({d}, std::vector<float>(static_cast<std::size_t>(d), 1.0f), true);
        l.ln1_b = Tensor::zeros({d}, true);
        l.ln2_g = Tensor::from_data({d}, std::vector<float>(static_cast<std::size_t>(d), 1.0f), true);
        l.ln2_b = Tensor::zeros({d}, true);
    }
    w_out_ = nn::xavier_uniform({cfg_.vocab, d}, rng, d, cfg_.vocab);  // applied as H * W^T
    b_out_ = Tensor::zeros({cfg_.vocab}, true);
}

TransformerModel::Output TransformerModel::forward(std::span<const int> tokens, bool train,
                                                   Rng* dropout_rng) {
    const int t_len = static_cast<int>(tokens.size());
    if (t_len == 0) throw std::invalid_argument("forward: empty sequence");
    if (t_len > cfg_.max_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(t_len) +
                                    " exceeds max length " + std::to_string(cfg_.max_len));
    const bool use_dropout = train && cfg_.dropout > 0.0f;
    if (use_dropout && dropout_rng == nullptr)
        throw std::invalid_argument("forward: dropout requires an rng in training mode");

    Tensor x = nn::add(nn::embedding(embed_, tokens), nn::row_slice(pos_, 0, t_len));
    const Tensor mask = nn::causal_mask(t_len);
    const int hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    for (auto& l : layers_) {
        const Tensor q = nn::add_rowvec(nn::matmul(x, l.wq), l.bq);
        const Tensor k = nn::add_rowvec(nn::matmul(x, l.wk), l.bk);
        const Tensor v = nn::add_rowvec(nn::matmul(x, l.wv), l.bv);
        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
        for (int h = 0; h < cfg_.n_heads; ++h) {
            const int c0 = h * hd, c1 = (h + 1) * hd;
            const Tensor qh = nn::col_slice(q, c0, c1);
            const Tensor kh = nn::col_slice(k, c0, c1);
            const Tensor vh = nn::col_slice(v, c0, c1);
            const Tensor scores = nn::scale(nn::matmul(qh, nn::transpose(kh)), inv_sqrt_hd);
            const Tensor attn = nn::softmax_masked(scores, mask);
            heads.push_back(nn::matmul(attn, vh));
        }
        Tensor attn_out = nn::add_rowvec(nn::matmul(nn::concat_cols(heads), l.wo), l.bo);
        if (use_dropout) attn_out = nn::dropout(attn_out, cfg_.dropout, true, *dropout_rng);
        x = nn::layer_norm(nn::add(x, attn_out), l.ln1_g, l.ln1_b);

        Tensor ffn = nn::add_rowvec(
            nn::matmul(nn::relu(nn::add_rowvec(nn::matmul(x, l.w1), l.b1)), l.w2), l.b2);
        if (use_dropout) ffn = nn::dropout(ffn, cfg_.dropout, true, *dropout_rng);
        x = nn::layer_norm(nn::add(x, ffn), l.ln2_g, l.ln2_b);
    }
    Output out;
    out.hidden = x;
    out.probs = nn::sigmoid(nn::add_rowvec(nn::matmul(x, nn::transpose(w_out_)), b_out_));
    return out;
}

std::vector<Tensor> TransformerModel::parameters() {
    std::vector<Tensor> ps;
    for (auto& np : named_parameters()) ps.push_back(np.tensor);
    return ps;
}

std::vector<nn::NamedParam> TransformerModel::named_parameters() {
    std::vector<nn::NamedParam> ps;
    ps.push_back({"embed", embed_});
    if (cfg_.positional == Positional::learned) ps.push_back({"pos", pos_});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& l = layers_[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        ps.push_back({p + "wq", l.wq});
        ps.push_back({p + "bq", l.bq});
        ps.push_back({p + "wk", l.wk});
        ps.push_back({p + "bk", l.bk});
        ps.push_back({p + "wv", l.wv});
        ps.push_back({p + "bv", l.bv});
        ps.push_back({p + "wo", l.wo});
        ps.push_back({p + "bo", l.bo});
        ps.push_back({p + "w1", l.w1});
        ps.push_back({p + "b1", l.b1});
        ps.push_back({p + "w2", l.w2});
        ps.push_back({p + "b2", l.b2});
        ps.push_back({p + "ln1_g", l.ln1_g});
        ps.push_back({p + "ln1_b", l.ln1_b});
        ps.push_back({p + "ln2_g", l.ln2_g});
        ps.push_back({p + "ln2_b", l.ln2_b});
    }
    ps.push_back({"w_out", w_out_});
    ps.push_back({"b_out", b_out_});
    return ps;
}

void TransformerModel::save(const std::filesystem::path& path) const {
    auto params = const_cast<TransformerModel*>(this)->named_parameters();
    nn::save_checkpoint(path, params);
}

void TransformerModel::load(const std::filesystem::path& path) {
    auto params = named_parameters();
    nn::load_checkpoint(path, params);
}

namespace {

// Sum of squared errors against the k-hot rows plus exact-match counts, for
// one sequence's sigmoid outputs.
struct SeqEval {
    int positions_correct = 0;
    bool sequence_correct = true;
};

SeqEval eval_sequence(std::span<const float> probs, std::span<const std::uint8_t> labels,
                      int t_len, int vocab) {
    SeqEval e;
    for (int t = 0; t < t_len; ++t) {
        bool ok = true;
        for (int v = 0; v < vocab; ++v) {
            const std::size_t idx = static_cast<std::size_t>(t) * vocab + v;
            const int pred = probs[idx] > 0.5f ? 1 : 0;
            if (pred != labels[idx]) {
                ok = false;
                break;
            }
        }
        if (ok)
            ++e.positions_correct;
        else
            e.sequence_correct = false;
    }
    return e;
}

}  // namespace

TrainLog train_lm(TransformerModel& model, const data::Corpus& corpus,
                  std::span<const std::size_t> indices) {
    const TransformerConfig& cfg = model.config();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    if (idx.empty()) {
        idx.resize(corpus.samples.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    if (idx.empty()) throw std::invalid_argument("train_lm: empty corpus");
    for (std::size_t i : idx)
        if (!corpus.samples.at(i).labeled())
            throw std::invalid_argument("train_lm: corpus labels not attached");

    auto params = model.parameters();
    nn::RmsProp opt(params, cfg.lr, cfg.rmsprop_rho);
    Rng dropout_rng(mix64(cfg.seed, 0x64726f70ULL));  // "drop"

    TrainLog log;
    const int vocab = cfg.vocab;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(mix64(cfg.seed, 0x6f72646572ULL, static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> order = idx;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.below(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0, tokens_total = 0, tokens_correct = 0, seqs_correct = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
            Tensor batch_sse;
            std::size_t batch_entries = 0;
            for (std::size_t bi = b0; bi < b1; ++bi) {
                const data::Sample& s = corpus.samples[order[bi]];
                auto out = model.forward(s.tokens, true, &dropout_rng);
                std::vector<float> target(s.labels.begin(), s.labels.end());
                const Tensor sse = nn::squared_error_sum(out.probs, target);
                batch_sse = batch_sse.defined() ? nn::add(batch_sse, sse) : sse;
                batch_entries += target.size();

                const auto ev = eval_sequence(out.probs.data(), s.labels, s.length(), vocab);
                tokens_total += static_cast<std::size_t>(s.length());
                tokens_correct += static_cast<std::size_t>(ev.positions_correct);
                seqs_correct += ev.sequence_correct ? 1 : 0;
            }
            const Tensor loss = nn::scale(batch_sse, 1.0f / static_cast<float>(batch_entries));
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        EpochStats stats;
        stats.epoch = epoch + 1;
        stats.loss = loss_sum / static_cast<double>(batches);
        stats.token_acc = static_cast<double>(tokens_correct) / static_cast<double>(tokens_total);
        stats.seq_acc = static_cast<double>(seqs_correct) / static_cast<double>(order.size());
        log.epochs.push_back(stats);
    }
    return log;
}

bool recognition_match(std::span<const float> probs, std::span<const std::uint8_t> labels) {
    if (probs.size() != labels.size())
        throw std::invalid_argument("recognition_match: size mismatch");
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const int pred = probs[i] > 0.5f ? 1 : 0;
        if (pred != labels[i]) return false;
    }
    return true;
}

bool recognize(TransformerModel& model, const lang::CounterMachine& machine,
               std::span<const int> tokens) {
    const int vocab = machine.alphabet.size();
    const lang::DepthTrace trace = lang::depth_trace(machine, tokens);
    std::vector<std::uint8_t> labels(tokens.size() * static_cast<std::size_t>(vocab), 0);
    for (int t = 0; t < trace.rows; ++t) {
        std::uint8_t* row = labels.data() + static_cast<std::size_t>(t) * vocab;
        for (int pair = 0; pair < machine.counter_count; ++pair) {
            row[lang::Alphabet::open_token(pair)] = 1;
            if (trace.at(t, pair) > 0) row[lang::Alphabet::close_token(pair)] = 1;
        }
    }
    nn::NoGradGuard guard;
    auto out = model.forward(tokens, false, nullptr);
    return recognition_match(out.probs.data(), labels);
}

double recognition_rate(TransformerModel& model, const data::Corpus& corpus,
                        std::span<const std::size_t> indices) {
    if (indices.empty()) return 0.0;
    nn::NoGradGuard guard;
    std::size_t correct = 0;
    for (std::size_t i : indices) {
        const data::Sample& s = corpus.samples.at(i);
        auto out = model.forward(s.tokens, false, nullptr);
        if (recognition_match(out.probs.data(), s.labels)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

data::EmbeddingMatrix extract_embeddings(TransformerModel& model, const data::Corpus& corpus) {
    nn::NoGradGuard guard;
    data::EmbeddingMatrix m;
    m.cols = model.config().d_model;
    m.rows = static_cast<int>(corpus.total_tokens());
    m.values.reserve(static_cast<std::size_t>(m.rows) * m.cols);
    for (const auto& s : corpus.samples) {
        auto out = model.forward(s.tokens, false, nullptr);
        const auto h = out.hidden.data();
        m.values.insert(m.values.end(), h.begin(), h.end());
    }
    return m;
}

data::EmbeddingMatrix positional_matrix(const TransformerConfig& cfg, const data::Corpus& corpus) {
    // The baseline encodes position and nothing else; the fixed sinusoidal
    // table serves regardless of what the model itself used.
    const nn::Tensor table = nn::sinusoidal_positions(cfg.max_len, cfg.d_model);
    data::EmbeddingMatrix m;
    m.cols = cfg.d_model;
    m.rows = static_cast<int>(corpus.total_tokens());
    m.values.reserve(static_cast<std::size_t>(m.rows) * m.cols);
    const auto tv = table.data();
    for (const auto& s : corpus.samples)
        for (int t = 0; t < s.length(); ++t) {
            const float* row = tv.data() + static_cast<std::size_t>(t) * cfg.d_model;
            m.values.insert(m.values.end(), row, row + cfg.d_model);
        }
    return m;
}

std::string positional_name(Positional p) {
    return p == Positional::sinusoidal ? "sinusoidal" : "learned";
}

Positional parse_positional(std::string_view name) {
    if (name == "sinusoidal") return Positional::sinusoidal;
    if (name == "learned") return Positional::learned;
    throw std::invalid_argument("unknown positional encoding '" + std::string(name) + "'");
}

}  // namespace counterprobe::model
