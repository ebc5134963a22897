#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "counterprobe/lang.hpp"

using namespace counterprobe;
using lang::Alphabet;
using lang::CounterMachine;
using lang::LanguageKind;

namespace {

// Independent Dyck-1 decision procedure: cancel adjacent "xy" bracket pairs
// until nothing changes; the string is a member iff everything cancels.
bool dyck_member_oracle(const std::string& s, char open = '(', char close = ')') {
    std::string cur = s;
    for (;;) {
        std::string next;
        next.reserve(cur.size());
        bool changed = false;
        for (std::size_t i = 0; i < cur.size(); ++i) {
            if (!next.empty() && next.back() == open && cur[i] == close) {
                next.pop_back();
                changed = true;
            } else {
                next.push_back(cur[i]);
            }
        }
        cur = std::move(next);
        if (!changed) break;
    }
    return cur.empty();
}

// Test-local interleaver, independent of lang::shuffle.
void interleave_into(const std::string& u, const std::string& v, std::string& acc,
                     std::set<std::string>& out) {
    if (u.empty() && v.empty()) {
        out.insert(acc);
        return;
    }
    if (!u.empty()) {
        acc.push_back(u[0]);
        interleave_into(u.substr(1), v, acc, out);
        acc.pop_back();
    }
    if (!v.empty()) {
        acc.push_back(v[0]);
        interleave_into(u, v.substr(1), acc, out);
        acc.pop_back();
    }
}

std::set<std::string> interleave_oracle(const std::string& u, const std::string& v) {
    std::set<std::string> out;
    std::string acc;
    interleave_into(u, v, acc, out);
    return out;
}

std::vector<std::string> all_strings(const std::string& symbols, int max_len) {
    std::vector<std::string> out = {""};
    std::vector<std::string> frontier = {""};
    for (int l = 0; l < max_len; ++l) {
        std::vector<std::string> next;
        for (const auto& s : frontier)
            for (char c : symbols) {
                next.push_back(s + c);
                out.push_back(s + c);
            }
        frontier = std::move(next);
    }
    return out;
}

// Every Shuffle-2 member up to max_len, by enumerating the component members
// and all their interleavings.
std::unordered_set<std::string> shuffle2_member_oracle(int max_len) {
    std::vector<std::string> paren_members, bracket_members;
    for (const auto& s : all_strings("()", max_len))
        if (dyck_member_oracle(s, '(', ')')) paren_members.push_back(s);
    for (const auto& s : all_strings("[]", max_len))
        if (dyck_member_oracle(s, '[', ']')) bracket_members.push_back(s);
    std::unordered_set<std::string> members;
    for (const auto& u : paren_members)
        for (const auto& v : bracket_members) {
            if (static_cast<int>(u.size() + v.size()) > max_len) continue;
            for (const auto& w : interleave_oracle(u, v)) members.insert(w);
        }
    return members;
}

unsigned long long binomial(int n, int k) {
    unsigned long long r = 1;
    for (int i = 1; i <= k; ++i) r = r * static_cast<unsigned long long>(n - k + i) / i;
    return r;
}

}  // namespace

TEST_CASE("alphabet construction and token ids") {
    const Alphabet a = Alphabet::brackets(2);
    CHECK(a.size() == 4);
    CHECK(a.symbols() == std::vector<char>{'(', ')', '[', ']'});
    CHECK(a.token_of('(') == 0);
    CHECK(a.token_of(']') == 3);
    CHECK(a.symbol_of(2) == '[');
    CHECK(Alphabet::is_open(0));
    CHECK(!Alphabet::is_open(3));
    CHECK(Alphabet::pair_of(3) == 1);
    CHECK_THROWS_AS((void)a.token_of('z'), lang::UnknownSymbolError);
    CHECK_THROWS_AS((void)Alphabet::brackets(0), std::invalid_argument);

    // token ids form a bijection onto 0..|symbols|-1
    for (int k : {1, 2, 4, 6}) {
        const Alphabet b = Alphabet::brackets(k);
        std::set<int> ids;
        for (char c : b.symbols()) ids.insert(b.token_of(c));
        CHECK(static_cast<int>(ids.size()) == b.size());
        CHECK(*ids.begin() == 0);
        CHECK(*ids.rbegin() == b.size() - 1);
    }
}

TEST_CASE("zero_check") {
    CHECK(lang::zero_check(std::vector<int>{0, 0}) == std::vector<std::uint8_t>{0, 0});
    CHECK(lang::zero_check(std::vector<int>{0, 3}) == std::vector<std::uint8_t>{0, 1});
    CHECK(lang::zero_check(std::vector<int>{-2, 1, 0}) == std::vector<std::uint8_t>{1, 1, 0});
}

TEST_CASE("single transitions on the dyck1 machine") {
    const CounterMachine m = lang::make_language(LanguageKind::dyck1, 1);
    const auto c0 = m.initial();
    CHECK(c0.state == 0);
    CHECK(c0.counters == std::vector<int>{0});

    const auto after_open = lang::step(m, c0, '(');
    CHECK(after_open.state == 0);  // q0
    CHECK(after_open.counters == std::vector<int>{1});

    const auto dead = lang::step(m, c0, ')');
    CHECK(dead.state == 2);  // q2: closing an empty counter
    CHECK(dead.counters == std::vector<int>{-1});

    // dead state freezes the counters
    const auto still_dead = lang::step(m, dead, '(');
    CHECK(still_dead.state == 2);
    CHECK(still_dead.counters == std::vector<int>{-1});

    const auto closed = lang::step(m, after_open, ')');
    CHECK(closed.state == 1);  // q1
    CHECK(closed.counters == std::vector<int>{0});
}

TEST_CASE("shuffle-2 close on empty counter goes dead") {
    const CounterMachine m = lang::make_language(LanguageKind::shuffle, 2);
    lang::MachineConfig cfg{0, {1, 0}};
    const auto next = lang::step(m, cfg, ']');
    CHECK(next.state == 2);
}

TEST_CASE("membership on the worked examples") {
    const CounterMachine dyck = lang::make_language(LanguageKind::dyck1, 1);
    CHECK(lang::is_member(dyck, "(())"));
    CHECK(!lang::is_member(dyck, "(()("));
    CHECK(lang::is_member(dyck, ""));

    const CounterMachine sh2 = lang::make_language(LanguageKind::shuffle, 2);
    CHECK(lang::is_member(sh2, "([)]"));
    CHECK(lang::is_member(sh2, "[(])"));
    CHECK(!lang::is_member(sh2, "])[("));
    CHECK(lang::is_member(sh2, ""));
}

TEST_CASE("depth traces") {
    const CounterMachine dyck = lang::make_language(LanguageKind::dyck1, 1);
    const auto trace = lang::depth_trace(dyck, "(())");
    REQUIRE(trace.rows == 4);
    CHECK(trace.values == std::vector<int>{1, 2, 1, 0});

    const auto single = lang::depth_trace(dyck, "(");
    CHECK(single.values == std::vector<int>{1});

    const CounterMachine sh2 = lang::make_language(LanguageKind::shuffle, 2);
    const auto t2 = lang::depth_trace(sh2, "([)]");
    CHECK(t2.values == std::vector<int>{1, 0, 1, 1, 0, 1, 0, 0});

    CHECK_THROWS_AS((void)lang::depth_trace(dyck, ")"), lang::InvalidPrefixError);
    CHECK_THROWS_AS((void)lang::depth_trace(sh2, "(]"), lang::InvalidPrefixError);
}

TEST_CASE("valid next symbols") {
    const CounterMachine dyck = lang::make_language(LanguageKind::dyck1, 1);
    CHECK(lang::valid_next_set(dyck, "") == std::set<char>{'('});
    CHECK(lang::valid_next_set(dyck, "(") == std::set<char>{'(', ')'});

    const CounterMachine sh2 = lang::make_language(LanguageKind::shuffle, 2);
    CHECK(lang::valid_next_set(sh2, "([") == std::set<char>{'(', ')', '[', ']'});
    CHECK_THROWS_AS((void)lang::valid_next_set(sh2, "]"), lang::InvalidPrefixError);
}

TEST_CASE("shuffle op matches inductive definition") {
    CHECK(lang::shuffle("ab", "") == std::set<std::string>{"ab"});
    CHECK(lang::shuffle("", "ab") == std::set<std::string>{"ab"});
    CHECK(lang::shuffle("a", "b") == std::set<std::string>{"ab", "ba"});
    CHECK(lang::shuffle("ab", "cd") ==
          std::set<std::string>{"abcd", "acbd", "acdb", "cabd", "cadb", "cdab"});

    // against the independent interleaver, plus the disjoint-alphabet count
    const std::vector<std::pair<std::string, std::string>> cases = {
        {"ab", "cde"}, {"abc", "de"}, {"abcd", "xyzw"}, {"a", "bcdef"}, {"abcde", "fghij"}};
    for (const auto& [u, v] : cases) {
        const auto got = lang::shuffle(u, v);
        CHECK(got == interleave_oracle(u, v));
        CHECK(got.size() == binomial(static_cast<int>(u.size() + v.size()),
                                     static_cast<int>(u.size())));
    }
}

TEST_CASE("make_language shapes") {
    CHECK(lang::make_language(LanguageKind::dyck1, 1).alphabet.size() == 2);
    CHECK(lang::make_language(LanguageKind::shuffle, 2).alphabet.size() == 4);
    const auto sh6 = lang::make_language(LanguageKind::shuffle, 6);
    CHECK(sh6.alphabet.size() == 12);
    CHECK(sh6.counter_count == 6);
    CHECK_THROWS_AS((void)lang::make_language(LanguageKind::shuffle, 0), std::invalid_argument);
}

TEST_CASE("language ids round-trip") {
    CHECK(lang::language_id(LanguageKind::dyck1, 1) == "dyck1");
    CHECK(lang::language_id(LanguageKind::shuffle, 4) == "shuffle4");
    CHECK(lang::parse_language_id("dyck1") == std::make_pair(LanguageKind::dyck1, 1));
    CHECK(lang::parse_language_id("shuffle6") == std::make_pair(LanguageKind::shuffle, 6));
    CHECK_THROWS_AS((void)lang::parse_language_id("dyck2"), std::invalid_argument);
}

TEST_CASE("dyck1 membership equals brute force up to length 10") {
    const CounterMachine dyck = lang::make_language(LanguageKind::dyck1, 1);
    for (const auto& s : all_strings("()", 10))
        CHECK(lang::is_member(dyck, s) == dyck_member_oracle(s));
}

TEST_CASE("shuffle-2 membership equals shuffle enumeration up to length 6") {
    const CounterMachine sh2 = lang::make_language(LanguageKind::shuffle, 2);
    const auto members = shuffle2_member_oracle(6);
    for (const auto& s : all_strings("()[]", 6))
        CHECK(lang::is_member(sh2, s) == (members.count(s) > 0));
}

TEST_CASE("final trace row is zero iff member, and members are prefix-closed") {
    for (int k : {1, 2}) {
        const CounterMachine m =
            lang::make_language(k == 1 ? LanguageKind::dyck1 : LanguageKind::shuffle, k);
        std::string symbols;
        for (char c : m.alphabet.symbols()) symbols.push_back(c);
        for (const auto& s : all_strings(symbols, k == 1 ? 8 : 6)) {
            bool valid_prefix = true;
            lang::DepthTrace trace;
            try {
                trace = lang::depth_trace(m, s);
            } catch (const lang::InvalidPrefixError&) {
                valid_prefix = false;
            }
            if (!valid_prefix) {
                CHECK(!lang::is_member(m, s));
                continue;
            }
            if (s.empty()) continue;
            bool final_zero = true;
            for (int i = 0; i < trace.k; ++i) final_zero = final_zero && trace.at(trace.rows - 1, i) == 0;
            CHECK(final_zero == lang::is_member(m, s));
            // every prefix of a valid prefix has a trace
            for (std::size_t cut = 1; cut < s.size(); ++cut)
                CHECK_NOTHROW((void)lang::depth_trace(m, s.substr(0, cut)));
        }
    }
}

TEST_CASE("valid_next_set equals bounded-extension brute force") {
    // sigma is valid after p iff p+sigma extends to a member within the
    // counter-sum budget; suffixes enumerated exhaustively.
    const CounterMachine sh2 = lang::make_language(LanguageKind::shuffle, 2);
    const auto members = shuffle2_member_oracle(12);
    for (const auto& p : all_strings("()[]", 5)) {
        bool valid_prefix = true;
        try {
            (void)lang::depth_trace(sh2, p);
        } catch (const lang::InvalidPrefixError&) {
            valid_prefix = false;
        }
        if (!valid_prefix) continue;
        const auto got = lang::valid_next_set(sh2, p);
        for (char sigma : {'(', ')', '[', ']'}) {
            const std::string q = p + sigma;
            bool extendable = false;
            for (const auto& suffix : all_strings("()[]", 6)) {
                if (members.count(q + suffix)) {
                    extendable = true;
                    break;
                }
            }
            CHECK(got.count(sigma) == (extendable ? 1u : 0u));
        }
    }
}

TEST_CASE("reset updates are part of the machine formalism") {
    // A toy 1-counter machine where the close symbol resets instead of
    // decrementing; no shipped language uses reset, the formalism supports it.
    CounterMachine m;
    m.alphabet = Alphabet::brackets(1);
    m.counter_count = 1;
    m.state_count = 1;
    m.initial_state = 0;
    m.update = [](lang::TokenId token, int, std::uint32_t) {
        return std::vector<lang::CounterOp>{Alphabet::is_open(token) ? lang::CounterOp::add(1)
                                                                     : lang::CounterOp::reset()};
    };
    m.transition = [](lang::TokenId, int, std::uint32_t) { return 0; };
    m.accept = {{0, 0u}};

    lang::MachineConfig cfg = m.initial();
    cfg = lang::step(m, cfg, '(');
    cfg = lang::step(m, cfg, '(');
    cfg = lang::step(m, cfg, '(');
    CHECK(cfg.counters == std::vector<int>{3});
    cfg = lang::step(m, cfg, ')');
    CHECK(cfg.counters == std::vector<int>{0});
}
