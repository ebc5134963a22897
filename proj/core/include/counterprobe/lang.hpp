#pragma once

// Counter languages: Dyck-1 and its k-fold shuffles, expressed as real-time
// deterministic k-counter machines. A machine is a DFA whose counters support
// +m / reset updates and are observed only through a per-counter zero check.
//
// All types are immutable after construction and all operations are pure, so
// everything here is safe for concurrent use.

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace counterprobe::lang {

using TokenId = int;

class UnknownSymbolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidPrefixError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Ordered bracket pairs with disjoint single-character vocabularies.
// Token ids are assigned in flat order, so opens have even ids and the
// bracket pair owning token t is t/2.
class Alphabet {
public:
    // First k entries of the fixed pair table: ( ) [ ] { } < > a b x y,
    // then remaining latin letter pairs. Throws for k < 1 or k beyond the table.
    static Alphabet brackets(int k);

    int size() const { return static_cast<int>(symbols_.size()); }
    int pair_count() const { return static_cast<int>(pairs_.size()); }
    const std::vector<std::pair<char, char>>& pairs() const { return pairs_; }
    const std::vector<char>& symbols() const { return symbols_; }

    TokenId token_of(char symbol) const;  // throws UnknownSymbolError
    char symbol_of(TokenId id) const;

    static bool is_open(TokenId id) { return (id & 1) == 0; }
    static int pair_of(TokenId id) { return id / 2; }
    static TokenId open_token(int pair) { return 2 * pair; }
    static TokenId close_token(int pair) { return 2 * pair + 1; }

    std::vector<TokenId> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const TokenId> tokens) const;

private:
    std::vector<std::pair<char, char>> pairs_;
    std::vector<char> symbols_;
    int token_of_char_[256];
};

// Per-counter update: x -> x + m, or x -> 0.
struct CounterOp {
    enum class Kind : std::uint8_t { add, set_zero };
    Kind kind = Kind::add;
    int delta = 0;

    static CounterOp add(int m) { return {Kind::add, m}; }
    static CounterOp reset() { return {Kind::set_zero, 0}; }
    int apply(int x) const { return kind == Kind::add ? x + delta : 0; }
};

// Bit i is 0 iff counters[i] == 0, else 1.
std::vector<std::uint8_t> zero_check(std::span<const int> counters);
std::uint32_t zero_mask_bits(std::span<const int> counters);

struct MachineConfig {
    int state = 0;
    std::vector<int> counters;
};

// ⟨Σ, Q, q0, u, δ, F⟩ with query-by-closure update and transition functions.
// Both functions must be total over Σ × Q × {0,1}^k.
struct CounterMachine {
    using UpdateFn = std::function<std::vector<CounterOp>(TokenId, int, std::uint32_t)>;
    using TransitionFn = std::function<int(TokenId, int, std::uint32_t)>;

    Alphabet alphabet;
    int counter_count = 0;
    int state_count = 0;
    int initial_state = 0;
    UpdateFn update;
    TransitionFn transition;
    std::set<std::pair<int, std::uint32_t>> accept;  // (state, zero-mask) pairs
    std::vector<std::string> state_names;

    // True for machines built by make_language: bracket pair i drives counter i.
    bool pair_counter_aligned = false;

    MachineConfig initial() const {
        return {initial_state, std::vector<int>(static_cast<std::size_t>(counter_count), 0)};
    }
};

// One transition ⟨q,c⟩ → ⟨δ(x,q,z(c)), u(x,q,z(c))(c)⟩.
MachineConfig step(const CounterMachine& m, const MachineConfig& config, TokenId token);
MachineConfig step(const CounterMachine& m, const MachineConfig& config, char symbol);

// Real-time acceptance: run the (deterministic) machine and test the final
// (state, zero-mask) against F. The empty string tests the initial config.
bool is_member(const CounterMachine& m, std::span<const TokenId> tokens);
bool is_member(const CounterMachine& m, std::string_view text);

// Row t = counter vector after consuming token t; T rows by k columns.
struct DepthTrace {
    int rows = 0;
    int k = 0;
    std::vector<int> values;  // row-major

    int at(int t, int i) const { return values[static_cast<std::size_t>(t * k + i)]; }
    std::span<const int> row(int t) const {
        return std::span<const int>(values).subspan(static_cast<std::size_t>(t * k),
                                                    static_cast<std::size_t>(k));
    }
};

// Throws InvalidPrefixError as soon as a counter would go negative.
DepthTrace depth_trace(const CounterMachine& m, std::span<const TokenId> tokens);
DepthTrace depth_trace(const CounterMachine& m, std::string_view text);

// Set of symbols that can extend a valid prefix: every open symbol, plus
// close_i whenever counter i is positive. Requires a pair/counter aligned
// machine (make_language output).
std::vector<TokenId> valid_next_tokens(const CounterMachine& m, std::span<const TokenId> prefix);
std::set<char> valid_next_set(const CounterMachine& m, std::string_view prefix);

// All interleavings of u and v, by the inductive closure of
//   u ⊙ ε = ε ⊙ u = {u}
//   αu ⊙ βv = α(u ⊙ βv) ∪ β(αu ⊙ v)
std::set<std::string> shuffle(const std::string& u, const std::string& v);

enum class LanguageKind { dyck1, shuffle };

// Deterministic k-counter machine accepting Shuffle-k (Dyck-1 when k = 1).
CounterMachine make_language(LanguageKind kind, int k);

// "dyck1" / "shuffle<k>" naming used by files and the CLI.
std::string language_id(LanguageKind kind, int k);
std::pair<LanguageKind, int> parse_language_id(std::string_view id);

}  // namespace counterprobe::lang
