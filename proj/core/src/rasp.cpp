#include "counterprobe/rasp.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace counterprobe::rasp {

bool cmp_apply(Cmp cmp, double a, double b) {
    switch (cmp) {
        case Cmp::lt: return a < b - kCmpTolerance;
        case Cmp::leq: return a <= b + kCmpTolerance;
        case Cmp::eq: return std::abs(a - b) <= kCmpTolerance;
        case Cmp::geq: return a >= b - kCmpTolerance;
        case Cmp::gt: return a > b + kCmpTolerance;
    }
    return false;
}

int RaspProgram::sop_index(std::string_view name) const {
    for (std::size_t i = 0; i < sops.size(); ++i)
        if (sops[i].name == name) return static_cast<int>(i);
    throw std::invalid_argument("no s-op named '" + std::string(name) + "'");
}

RaspProgram RaspProgram::dyck1() {
    RaspProgram p;
    auto push = [&p](SOp op) {
        p.sops.push_back(std::move(op));
        return static_cast<int>(p.sops.size() - 1);
    };
    const int indices = push({SOp::Kind::indices, "indices"});
    const int is_open = push({SOp::Kind::token_indicator, "is_open", '('});
    const int is_close = push({SOp::Kind::token_indicator, "is_close", ')'});

    p.selectors.push_back({indices, indices, Cmp::leq});  // causal: key idx <= query idx
    const int prevs = 0;

    SOp agg_open{SOp::Kind::aggregate, "mean_opens"};
    agg_open.a = is_open;
    agg_open.selector = prevs;
    const int mean_opens = push(agg_open);

    SOp plus1{SOp::Kind::add_const, "indices_plus1"};
    plus1.a = indices;
    plus1.constant = 1.0;
    const int indices_plus1 = push(plus1);

    SOp nopens{SOp::Kind::mul, "n_opens"};
    nopens.a = indices_plus1;
    nopens.b = mean_opens;
    const int n_opens = push(nopens);

    SOp agg_close{SOp::Kind::aggregate, "mean_closes"};
    agg_close.a = is_close;
    agg_close.selector = prevs;
    const int mean_closes = push(agg_close);

    SOp ncloses{SOp::Kind::mul, "n_closes"};
    ncloses.a = indices_plus1;
    ncloses.b = mean_closes;
    const int n_closes = push(ncloses);

    SOp bal{SOp::Kind::sub, "balance"};
    bal.a = n_opens;
    bal.b = n_closes;
    const int balance = push(bal);

    SOp neg{SOp::Kind::cmp_const, "is_negative"};
    neg.a = balance;
    neg.cmp = Cmp::lt;
    neg.constant = 0.0;
    const int is_negative = push(neg);

    SOp agg_neg{SOp::Kind::aggregate, "mean_negatives"};
    agg_neg.a = is_negative;
    agg_neg.selector = prevs;
    const int mean_negatives = push(agg_neg);

    SOp imb{SOp::Kind::mul, "prev_imbalances"};
    imb.a = indices_plus1;
    imb.b = mean_negatives;
    const int prev_imbalances = push(imb);

    SOp verdict{SOp::Kind::branch3, "dyck1"};
    verdict.a = prev_imbalances;  // F when > 0 (once negative, forever F)
    verdict.b = balance;          // T when == 0, else P
    p.output = push(verdict);
    return p;
}

namespace {

char branch3_char(double f_operand, double t_operand) {
    if (cmp_apply(Cmp::gt, f_operand, 0.0)) return 'F';
    return cmp_apply(Cmp::eq, t_operand, 0.0) ? 'T' : 'P';
}

double branch3_code(char c) { return c == 'T' ? 0.0 : c == 'P' ? 1.0 : 2.0; }

}  // namespace

EvalTable eval_program(const RaspProgram& program, std::string_view tokens) {
    const int t_len = static_cast<int>(tokens.size());
    EvalTable table;
    table.values.resize(program.sops.size());
    for (const auto& sop : program.sops) table.names.push_back(sop.name);

    for (std::size_t si = 0; si < program.sops.size(); ++si) {
        const SOp& op = program.sops[si];
        auto& out = table.values[si];
        out.resize(static_cast<std::size_t>(t_len));
        switch (op.kind) {
            case SOp::Kind::indices:
                for (int t = 0; t < t_len; ++t) out[static_cast<std::size_t>(t)] = t;
                break;
            case SOp::Kind::token_indicator:
                for (int t = 0; t < t_len; ++t)
                    out[static_cast<std::size_t>(t)] =
                        tokens[static_cast<std::size_t>(t)] == op.symbol ? 1.0 : 0.0;
                break;
            case SOp::Kind::aggregate: {
                const Selector& sel = program.selectors.at(static_cast<std::size_t>(op.selector));
                const auto& keys = table.values.at(static_cast<std::size_t>(sel.keys));
                const auto& queries = table.values.at(static_cast<std::size_t>(sel.queries));
                const auto& vals = table.values.at(static_cast<std::size_t>(op.a));
                for (int q = 0; q < t_len; ++q) {
                    double sum = 0.0;
                    int count = 0;
                    for (int j = 0; j < t_len; ++j) {
                        if (cmp_apply(sel.pred, keys[static_cast<std::size_t>(j)],
                                      queries[static_cast<std::size_t>(q)])) {
                            sum += vals[static_cast<std::size_t>(j)];
                            ++count;
                        }
                    }
                    out[static_cast<std::size_t>(q)] = count == 0 ? 0.0 : sum / count;
                }
                break;
            }
            case SOp::Kind::add_const: {
                const auto& a = table.values.at(static_cast<std::size_t>(op.a));
                for (int t = 0; t < t_len; ++t)
                    out[static_cast<std::size_t>(t)] = a[static_cast<std::size_t>(t)] + op.constant;
                break;
            }
            case SOp::Kind::mul: {
                const auto& a = table.values.at(static_cast<std::size_t>(op.a));
                const auto& b = table.values.at(static_cast<std::size_t>(op.b));
                for (int t = 0; t < t_len; ++t)
                    out[static_cast<std::size_t>(t)] =
                        a[static_cast<std::size_t>(t)] * b[static_cast<std::size_t>(t)];
                break;
            }
            case SOp::Kind::sub: {
                const auto& a = table.values.at(static_cast<std::size_t>(op.a));
                const auto& b = table.values.at(static_cast<std::size_t>(op.b));
                for (int t = 0; t < t_len; ++t)
                    out[static_cast<std::size_t>(t)] =
                        a[static_cast<std::size_t>(t)] - b[static_cast<std::size_t>(t)];
                break;
            }
            case SOp::Kind::cmp_const: {
                const auto& a = table.values.at(static_cast<std::size_t>(op.a));
                for (int t = 0; t < t_len; ++t)
                    out[static_cast<std::size_t>(t)] =
                        cmp_apply(op.cmp, a[static_cast<std::size_t>(t)], op.constant) ? 1.0 : 0.0;
                break;
            }
            case SOp::Kind::branch3: {
                const auto& a = table.values.at(static_cast<std::size_t>(op.a));
                const auto& b = table.values.at(static_cast<std::size_t>(op.b));
                for (int t = 0; t < t_len; ++t) {
                    const char c = branch3_char(a[static_cast<std::size_t>(t)],
                                                b[static_cast<std::size_t>(t)]);
                    out[static_cast<std::size_t>(t)] = branch3_code(c);
                    if (static_cast<int>(si) == program.output) table.verdicts.push_back(c);
                }
                break;
            }
        }
    }
    return table;
}

const std::vector<double>& EvalTable::by_name(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return values[i];
    throw std::invalid_argument("no s-op named '" + std::string(name) + "'");
}

CompiledStream::CompiledStream(RaspProgram program) : program_(std::move(program)) {
    // Collect the token alphabet from indicator s-ops.
    for (const auto& op : program_.sops)
        if (op.kind == SOp::Kind::token_indicator &&
            alphabet_.find(op.symbol) == std::string::npos)
            alphabet_.push_back(op.symbol);

    onehot_ = {0, static_cast<int>(alphabet_.size())};
    width_ = onehot_.width;
    ranges_.resize(program_.sops.size());
    for (std::size_t i = 0; i < program_.sops.size(); ++i) {
        const int w = program_.sops[i].kind == SOp::Kind::branch3 ? 3 : 1;
        ranges_[i] = {width_, w};
        width_ += w;
    }

    // Input block, then one attention block per aggregate and feedforward
    // blocks for maximal runs of elementwise ops.
    blocks_.push_back({Block::Kind::input, {}});
    for (std::size_t i = 0; i < program_.sops.size(); ++i) {
        if (program_.sops[i].kind == SOp::Kind::aggregate) {
            blocks_.push_back({Block::Kind::attention, {static_cast<int>(i)}});
        } else {
            if (blocks_.back().kind != Block::Kind::feedforward)
                blocks_.push_back({Block::Kind::feedforward, {}});
            blocks_.back().sops.push_back(static_cast<int>(i));
        }
    }
}

DimRange CompiledStream::sop_range(std::string_view name) const {
    return ranges_[static_cast<std::size_t>(program_.sop_index(name))];
}

StreamActivations CompiledStream::run(std::string_view tokens) const {
    const int t_len = static_cast<int>(tokens.size());
    StreamActivations act;
    act.rows = t_len;
    act.cols = width_;
    act.values.assign(static_cast<std::size_t>(t_len) * width_, 0.0);

    auto cell = [&](int t, int dim) -> double& {
        return act.values[static_cast<std::size_t>(t) * width_ + dim];
    };
    auto read = [&](int t, int sop) {
        return act.values[static_cast<std::size_t>(t) * width_ + ranges_[static_cast<std::size_t>(sop)].offset];
    };

    for (const auto& block : blocks_) {
        switch (block.kind) {
            case Block::Kind::input:
                for (int t = 0; t < t_len; ++t) {
                    const auto pos = alphabet_.find(tokens[static_cast<std::size_t>(t)]);
                    if (pos == std::string::npos)
                        throw std::invalid_argument("token '" +
                                                    std::string(1, tokens[static_cast<std::size_t>(t)]) +
                                                    "' not in the compiled alphabet");
                    cell(t, onehot_.offset + static_cast<int>(pos)) = 1.0;
                }
                break;
            case Block::Kind::attention: {
                const int si = block.sops.front();
                const SOp& op = program_.sops[static_cast<std::size_t>(si)];
                const Selector& sel = program_.selectors.at(static_cast<std::size_t>(op.selector));
                const int out_dim = ranges_[static_cast<std::size_t>(si)].offset;
                for (int q = 0; q < t_len; ++q) {
                    double sum = 0.0;
                    int count = 0;
                    for (int j = 0; j < t_len; ++j) {
                        if (cmp_apply(sel.pred, read(j, sel.keys), read(q, sel.queries))) {
                            sum += read(j, op.a);
                            ++count;
                        }
                    }
                    cell(q, out_dim) = count == 0 ? 0.0 : sum / count;
                }
                break;
            }
            case Block::Kind::feedforward:
                for (const int si : block.sops) {
                    const SOp& op = program_.sops[static_cast<std::size_t>(si)];
                    const DimRange range = ranges_[static_cast<std::size_t>(si)];
                    for (int t = 0; t < t_len; ++t) {
                        switch (op.kind) {
                            case SOp::Kind::indices:
                                cell(t, range.offset) = t;
                                break;
                            case SOp::Kind::token_indicator: {
                                const auto pos = alphabet_.find(op.symbol);
                                cell(t, range.offset) =
                                    cell(t, onehot_.offset + static_cast<int>(pos));
                                break;
                            }
                            case SOp::Kind::add_const:
                                cell(t, range.offset) = read(t, op.a) + op.constant;
                                break;
                            case SOp::Kind::mul:
                                cell(t, range.offset) = read(t, op.a) * read(t, op.b);
                                break;
                            case SOp::Kind::sub:
                                cell(t, range.offset) = read(t, op.a) - read(t, op.b);
                                break;
                            case SOp::Kind::cmp_const:
                                cell(t, range.offset) =
                                    cmp_apply(op.cmp, read(t, op.a), op.constant) ? 1.0 : 0.0;
                                break;
                            case SOp::Kind::branch3: {
                                const char c = branch3_char(read(t, op.a), read(t, op.b));
                                cell(t, range.offset + (c == 'T' ? 0 : c == 'P' ? 1 : 2)) = 1.0;
                                break;
                            }
                            case SOp::Kind::aggregate:
                                throw std::logic_error("aggregate outside attention block");
                        }
                    }
                }
                break;
        }
    }
    return act;
}

data::EmbeddingMatrix CompiledStream::embed_corpus(const data::Corpus& corpus) const {
    data::EmbeddingMatrix m;
    m.cols = width_;
    m.rows = static_cast<int>(corpus.total_tokens());
    m.values.reserve(static_cast<std::size_t>(m.rows) * width_);
    const auto [kind, k] = lang::parse_language_id(corpus.language);
    const lang::Alphabet alphabet = lang::Alphabet::brackets(k);
    for (const auto& s : corpus.samples) {
        const StreamActivations act = run(alphabet.detokenize(s.tokens));
        for (double v : act.values) m.values.push_back(static_cast<float>(v));
    }
    return m;
}

std::string CompiledStream::layout_dump() const {
    std::ostringstream out;
    out << "stream width: " << width_ << "\n";
    out << "dims [" << onehot_.offset << "," << onehot_.offset + onehot_.width
        << "): token one-hot over \"" << alphabet_ << "\"\n";
    for (std::size_t i = 0; i < program_.sops.size(); ++i) {
        const auto& r = ranges_[i];
        out << "dims [" << r.offset << "," << r.offset + r.width << "): " << program_.sops[i].name
            << "\n";
    }
    out << "blocks:\n";
    int bi = 0;
    for (const auto& block : blocks_) {
        out << "  " << bi++ << ": ";
        switch (block.kind) {
            case Block::Kind::input:
                out << "input (token one-hot)";
                break;
            case Block::Kind::attention:
                out << "attention -> " << program_.sops[static_cast<std::size_t>(block.sops[0])].name;
                break;
            case Block::Kind::feedforward: {
                out << "feedforward ->";
                for (int si : block.sops) out << " " << program_.sops[static_cast<std::size_t>(si)].name;
                break;
            }
        }
        out << "\n";
    }
    return out.str();
}

RaspProbeReport probe_compiled(const CompiledStream& compiled, const data::Corpus& corpus,
                               const probe::SuiteConfig& cfg, std::uint64_t seed) {
    const auto [kind, k] = lang::parse_language_id(corpus.language);
    if (compiled.program().sops.empty() || k != 1)
        throw std::invalid_argument("probe_compiled expects a dyck1 corpus");

    auto embeddings = std::make_shared<data::EmbeddingMatrix>(compiled.embed_corpus(corpus));
    const data::SequenceSplit split =
        data::split_sequences(corpus.samples.size(), 0.8, mix64(seed, 0x73706c69ULL));

    RaspProbeReport report;
    report.classification = probe::run_suite(embeddings, corpus, split, cfg, seed);

    const data::ProbeDataset ds =
        data::build_probe_dataset(embeddings, corpus, 0, split, mix64(seed, 0x72656773ULL));
    for (int layers : cfg.arch_layers) {
        probe::ProbeArch arch{layers, cfg.hidden_width, cfg.dropout};
        probe::ProbeRegressor reg(embeddings->cols, arch,
                                  mix64(seed, 0x726567ULL, static_cast<std::uint64_t>(layers)));
        probe::train_regressor(reg, *embeddings, ds.train, cfg.train,
                               mix64(seed, 0x726567745eULL, static_cast<std::uint64_t>(layers)));
        report.regression.push_back(
            {layers, probe::evaluate_regressor(reg, *embeddings, ds.val)});
    }
    return report;
}

}  // namespace counterprobe::rasp
