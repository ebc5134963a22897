#include "counterprobe/lang.hpp"

#include <algorithm>
#include <map>

namespace counterprobe::lang {

namespace {

// ( ) [ ] { } < > a b x y, then letter pairs that do not collide with a/b/x/y.
constexpr std::pair<char, char> kPairTable[] = {
    {'(', ')'}, {'[', ']'}, {'{', '}'}, {'<', '>'}, {'a', 'b'}, {'x', 'y'},
    {'c', 'd'}, {'e', 'f'}, {'g', 'h'}, {'i', 'j'}, {'k', 'l'}, {'m', 'n'},
    {'o', 'p'}, {'q', 'r'}, {'s', 't'}, {'u', 'v'}, {'w', 'z'},
};
constexpr int kMaxPairs = static_cast<int>(std::size(kPairTable));

}  // namespace

Alphabet Alphabet::brackets(int k) {
    if (k < 1) throw std::invalid_argument("bracket pair count must be >= 1, got " + std::to_string(k));
    if (k > kMaxPairs)
        throw std::invalid_argument("bracket pair table has " + std::to_string(kMaxPairs) +
                                    " entries, requested " + std::to_string(k));
    Alphabet a;
    std::fill(std::begin(a.token_of_char_), std::end(a.token_of_char_), -1);
    for (int i = 0; i < k; ++i) {
        auto [open, close] = kPairTable[i];
        a.pairs_.emplace_back(open, close);
        a.token_of_char_[static_cast<unsigned char>(open)] = static_cast<int>(a.symbols_.size());
        a.symbols_.push_back(open);
        a.token_of_char_[static_cast<unsigned char>(close)] = static_cast<int>(a.symbols_.size());
        a.symbols_.push_back(close);
    }
    return a;
}

TokenId Alphabet::token_of(char symbol) const {
    const int id = token_of_char_[static_cast<unsigned char>(symbol)];
    if (id < 0)
        throw UnknownSymbolError(std::string("symbol '") + symbol + "' is not in the alphabet");
    return id;
}

char Alphabet::symbol_of(TokenId id) const {
    if (id < 0 || id >= size())
        throw UnknownSymbolError("token id " + std::to_string(id) + " out of range");
    return symbols_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Alphabet::tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(token_of(c));
    return out;
}

std::string Alphabet::detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) out.push_back(symbol_of(t));
    return out;
}

std::vector<std::uint8_t> zero_check(std::span<const int> counters) {
    std::vector<std::uint8_t> bits(counters.size());
    for (std::size_t i = 0; i < counters.size(); ++i) bits[i] = counters[i] == 0 ? 0 : 1;
    return bits;
}

std::uint32_t zero_mask_bits(std::span<const int> counters) {
    std::uint32_t mask = 0;
    for (std::size_t i = 0; i < counters.size(); ++i)
        if (counters[i] != 0) mask |= 1u << i;
    return mask;
}

MachineConfig step(const CounterMachine& m, const MachineConfig& config, TokenId token) {
    if (token < 0 || token >= m.alphabet.size())
        throw UnknownSymbolError("token id " + std::to_string(token) + " out of range");
    const std::uint32_t z = zero_mask_bits(config.counters);
    MachineConfig next;
    next.state = m.transition(token, config.state, z);
    const std::vector<CounterOp> ops = m.update(token, config.state, z);
    next.counters.resize(config.counters.size());
    for (std::size_t i = 0; i < config.counters.size(); ++i)
        next.counters[i] = ops[i].apply(config.counters[i]);
    return next;
}

MachineConfig step(const CounterMachine& m, const MachineConfig& config, char symbol) {
    return step(m, config, m.alphabet.token_of(symbol));
}

bool is_member(const CounterMachine& m, std::span<const TokenId> tokens) {
    MachineConfig config = m.initial();
    for (TokenId t : tokens) config = step(m, config, t);
    return m.accept.contains({config.state, zero_mask_bits(config.counters)});
}

bool is_member(const CounterMachine& m, std::string_view text) {
    return is_member(m, m.alphabet.tokenize(text));
}

DepthTrace depth_trace(const CounterMachine& m, std::span<const TokenId> tokens) {
    DepthTrace trace;
    trace.rows = static_cast<int>(tokens.size());
    trace.k = m.counter_count;
    trace.values.reserve(tokens.size() * static_cast<std::size_t>(m.counter_count));
    MachineConfig config = m.initial();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        config = step(m, config, tokens[t]);
        for (int c : config.counters) {
            if (c < 0)
                throw InvalidPrefixError("counter went negative at position " + std::to_string(t));
            trace.values.push_back(c);
        }
    }
    return trace;
}

DepthTrace depth_trace(const CounterMachine& m, std::string_view text) {
    return depth_trace(m, m.alphabet.tokenize(text));
}

std::vector<TokenId> valid_next_tokens(const CounterMachine& m, std::span<const TokenId> prefix) {
    if (!m.pair_counter_aligned)
        throw std::logic_error("valid_next_tokens requires a pair/counter aligned machine");
    std::vector<int> counters(static_cast<std::size_t>(m.counter_count), 0);
    MachineConfig config = m.initial();
    for (std::size_t t = 0; t < prefix.size(); ++t) {
        config = step(m, config, prefix[t]);
        for (int c : config.counters)
            if (c < 0)
                throw InvalidPrefixError("prefix invalid at position " + std::to_string(t));
    }
    std::vector<TokenId> out;
    for (int pair = 0; pair < m.alphabet.pair_count(); ++pair) {
        out.push_back(Alphabet::open_token(pair));
        if (config.counters[static_cast<std::size_t>(pair)] > 0)
            out.push_back(Alphabet::close_token(pair));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::set<char> valid_next_set(const CounterMachine& m, std::string_view prefix) {
    std::set<char> out;
    for (TokenId t : valid_next_tokens(m, m.alphabet.tokenize(prefix)))
        out.insert(m.alphabet.symbol_of(t));
    return out;
}

std::set<std::string> shuffle(const std::string& u, const std::string& v) {
    if (u.empty()) return {v};
    if (v.empty()) return {u};
    std::map<std::pair<std::string, std::string>, std::set<std::string>> memo;
    std::function<const std::set<std::string>&(const std::string&, const std::string&)> go =
        [&](const std::string& a, const std::string& b) -> const std::set<std::string>& {
        auto key = std::make_pair(a, b);
        auto it = memo.find(key);
        if (it != memo.end()) return it->second;
        std::set<std::string> result;
        if (a.empty()) {
            result.insert(b);
        } else if (b.empty()) {
            result.insert(a);
        } else {
            for (const std::string& rest : go(a.substr(1), b)) result.insert(a[0] + rest);
            for (const std::string& rest : go(a, b.substr(1))) result.insert(b[0] + rest);
        }
        return memo.emplace(std::move(key), std::move(result)).first->second;
    };
    return go(u, v);
}

CounterMachine make_language(LanguageKind kind, int k) {
    if (kind == LanguageKind::dyck1 && k != 1)
        throw std::invalid_argument("dyck1 is the k = 1 machine");
    if (k < 1) throw std::invalid_argument("counter count must be >= 1");

    // Three states: qOpen (initial; start or just opened), qClose (just closed
    // successfully), qDead (attempted to close an empty counter). The qDead
    // self-loop freezes the counters; elsewhere open_i is +1 and close_i is -1
    // on counter i, including the doomed close-at-zero transition.
    constexpr int qOpen = 0, qClose = 1, qDead = 2;

    CounterMachine m;
    m.alphabet = Alphabet::brackets(k);
    m.counter_count = k;
    m.state_count = 3;
    m.initial_state = qOpen;
    m.state_names = {"q0", "q1", "q2"};
    m.pair_counter_aligned = true;

    m.update = [k](TokenId token, int state, std::uint32_t) {
        std::vector<CounterOp> ops(static_cast<std::size_t>(k), CounterOp::add(0));
        if (state != qDead)
            ops[static_cast<std::size_t>(Alphabet::pair_of(token))] =
                CounterOp::add(Alphabet::is_open(token) ? +1 : -1);
        return ops;
    };
    m.transition = [](TokenId token, int state, std::uint32_t z) {
        if (state == qDead) return qDead;
        if (Alphabet::is_open(token)) return qOpen;
        const int pair = Alphabet::pair_of(token);
        return ((z >> pair) & 1u) ? qClose : qDead;
    };
    // Balanced nonempty strings end in qClose with all counters zero; the
    // empty string is accepted from the initial configuration.
    m.accept = {{qClose, 0u}, {qOpen, 0u}};
    return m;
}

std::string language_id(LanguageKind kind, int k) {
    if (kind == LanguageKind::dyck1) return "dyck1";
    return "shuffle" + std::to_string(k);
}

std::pair<LanguageKind, int> parse_language_id(std::string_view id) {
    if (id == "dyck1") return {LanguageKind::dyck1, 1};
    constexpr std::string_view prefix = "shuffle";
    if (id.starts_with(prefix)) {
        const std::string num(id.substr(prefix.size()));
        if (!num.empty() && std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            const int k = std::stoi(num);
            if (k >= 1) return {LanguageKind::shuffle, k};
        }
    }
    throw std::invalid_argument("unknown language id '" + std::string(id) +
                                "' (expected dyck1 or shuffle<k>)");
}

}  // namespace counterprobe::lang
