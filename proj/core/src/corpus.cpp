#include "counterprobe/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "counterprobe/ioutil.hpp"
#include "counterprobe/rng.hpp"

namespace counterprobe::data {

using nlohmann::json;

namespace {

std::vector<int> even_lengths(LengthRange range) {
    std::vector<int> out;
    for (int l = std::max(2, range.min_len); l <= range.max_len; ++l)
        if (l % 2 == 0) out.push_back(l);
    return out;
}

std::vector<lang::TokenId> sample_member(const lang::CounterMachine& machine, int target_len,
                                         Rng& rng) {
    const int k = machine.counter_count;
    std::vector<int> counters(static_cast<std::size_t>(k), 0);
    std::vector<lang::TokenId> tokens;
    tokens.reserve(static_cast<std::size_t>(target_len));
    int open_sum = 0;
    for (int t = 0; t < target_len; ++t) {
        const int remaining = target_len - t;
        bool open;
        if (open_sum == 0) {
            open = true;
        } else if (remaining == open_sum) {
            open = false;
        } else {
            const double p = std::max(0.0, static_cast<double>(remaining - open_sum) /
                                               (2.0 * remaining));
            open = rng.real01() < p;
        }
        if (open) {
            const int pair = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
            tokens.push_back(lang::Alphabet::open_token(pair));
            ++counters[static_cast<std::size_t>(pair)];
            ++open_sum;
        } else {
            std::vector<int> closable;
            for (int i = 0; i < k; ++i)
                if (counters[static_cast<std::size_t>(i)] > 0) closable.push_back(i);
            const int pair = closable[rng.below(closable.size())];
            tokens.push_back(lang::Alphabet::close_token(pair));
            --counters[static_cast<std::size_t>(pair)];
            --open_sum;
        }
    }
    return tokens;
}

}  // namespace

Corpus sample_corpus(const lang::CounterMachine& machine, int n, LengthRange range,
                     std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_corpus: n must be >= 1");
    if (range.min_len < 2 || range.max_len < range.min_len)
        throw std::invalid_argument("sample_corpus: infeasible length range [" +
                                    std::to_string(range.min_len) + "," +
                                    std::to_string(range.max_len) + "]");
    const std::vector<int> lengths = even_lengths(range);
    if (lengths.empty())
        throw std::invalid_argument("sample_corpus: no even length in range [" +
                                    std::to_string(range.min_len) + "," +
                                    std::to_string(range.max_len) + "]");
    Corpus corpus;
    corpus.language = language_id(machine.counter_count == 1 ? lang::LanguageKind::dyck1
                                                             : lang::LanguageKind::shuffle,
                                  machine.counter_count);
    corpus.seed = seed;
    corpus.samples.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix64(seed, static_cast<std::uint64_t>(i)));
        const int len = lengths[rng.below(lengths.size())];
        corpus.samples[static_cast<std::size_t>(i)].tokens = sample_member(machine, len, rng);
    }
    return corpus;
}

Corpus attach_labels(const lang::CounterMachine& machine, Corpus corpus) {
    const int vocab = machine.alphabet.size();
    const int k = machine.counter_count;
    for (std::size_t si = 0; si < corpus.samples.size(); ++si) {
        Sample& s = corpus.samples[si];
        if (!lang::is_member(machine, s.tokens))
            throw NonMemberError("sequence " + std::to_string(si) + " is not a member");
        s.depths = lang::depth_trace(machine, s.tokens);
        const int t_len = s.length();
        s.labels.assign(static_cast<std::size_t>(t_len) * vocab, 0);
        for (int t = 0; t < t_len; ++t) {
            std::uint8_t* row = s.labels.data() + static_cast<std::size_t>(t) * vocab;
            for (int pair = 0; pair < k; ++pair) {
                row[lang::Alphabet::open_token(pair)] = 1;
                if (s.depths.at(t, pair) > 0) row[lang::Alphabet::close_token(pair)] = 1;
            }
        }
    }
    return corpus;
}

SequenceSplit split_sequences(std::size_t n, double ratio, std::uint64_t seed) {
    if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("split ratio must be in (0,1)");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(mix64(seed, 0x73706c6974ULL));  // "split"
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n_train = static_cast<std::size_t>(ratio * static_cast<double>(n));
    SequenceSplit split;
    split.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    return split;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    atomic_write(path, [&](std::ostream& out) {
        const lang::Alphabet alphabet =
            lang::make_language(lang::parse_language_id(corpus.language).first,
                                lang::parse_language_id(corpus.language).second)
                .alphabet;
        json header = {
            {"format", "counterprobe-corpus"},
            {"version", 1},
            {"language", corpus.language},
            {"seed", corpus.seed},
            {"sequences", corpus.samples.size()},
            {"total_tokens", corpus.total_tokens()},
        };
        out << header.dump() << "\n";
        for (const auto& s : corpus.samples) {
            json rec;
            rec["tokens"] = alphabet.detokenize(s.tokens);
            json labels = json::array();
            const int vocab = alphabet.size();
            for (int t = 0; t < s.length(); ++t) {
                json row = json::array();
                for (int v = 0; v < vocab; ++v)
                    row.push_back(s.labeled()
                                      ? static_cast<int>(
                                            s.labels[static_cast<std::size_t>(t) * vocab + v])
                                      : 0);
                labels.push_back(std::move(row));
            }
            rec["labels"] = std::move(labels);
            json depths = json::array();
            for (int t = 0; t < s.depths.rows; ++t) {
                json row = json::array();
                for (int i = 0; i < s.depths.k; ++i) row.push_back(s.depths.at(t, i));
                depths.push_back(std::move(row));
            }
            rec["depths"] = std::move(depths);
            out << rec.dump() << "\n";
        }
    });
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    std::size_t byte_offset = 0;

    auto parse_line = [&](const std::string& text) -> json {
        try {
            return json::parse(text);
        } catch (const json::parse_error& e) {
            throw CorpusFormatError("corpus parse error at line " + std::to_string(line_no) +
                                    ", byte offset " + std::to_string(byte_offset + e.byte - 1) +
                                    ": " + e.what());
        }
    };

    if (!std::getline(in, line))
        throw CorpusFormatError("corpus parse error at byte offset 0: empty file");
    ++line_no;
    const json header = parse_line(line);
    if (!header.contains("format") || header["format"] != "counterprobe-corpus")
        throw CorpusFormatError("not a counterprobe corpus file");
    if (header.at("version").get<int>() != 1)
        throw CorpusFormatError("unsupported corpus version");

    Corpus corpus;
    corpus.language = header.at("language").get<std::string>();
    corpus.seed = header.at("seed").get<std::uint64_t>();
    const auto expected_sequences = header.at("sequences").get<std::size_t>();
    const auto expected_tokens = header.at("total_tokens").get<std::size_t>();

    const auto [kind, k] = lang::parse_language_id(corpus.language);
    const lang::Alphabet alphabet = lang::Alphabet::brackets(k);
    const int vocab = alphabet.size();

    byte_offset += line.size() + 1;
    while (std::getline(in, line)) {
        ++line_no;
        const json rec = parse_line(line);
        Sample s;
        s.tokens = alphabet.tokenize(rec.at("tokens").get<std::string>());
        const int t_len = s.length();
        const auto& labels = rec.at("labels");
        const auto& depths = rec.at("depths");
        if (static_cast<int>(labels.size()) != t_len || static_cast<int>(depths.size()) != t_len)
            throw CorpusFormatError("row count mismatch at line " + std::to_string(line_no));
        s.labels.reserve(static_cast<std::size_t>(t_len) * vocab);
        for (const auto& row : labels) {
            if (static_cast<int>(row.size()) != vocab)
                throw CorpusFormatError("label width mismatch at line " + std::to_string(line_no));
            for (const auto& v : row) s.labels.push_back(v.get<std::uint8_t>());
        }
        s.depths.rows = t_len;
        s.depths.k = k;
        s.depths.values.reserve(static_cast<std::size_t>(t_len) * k);
        for (const auto& row : depths) {
            if (static_cast<int>(row.size()) != k)
                throw CorpusFormatError("depth width mismatch at line " + std::to_string(line_no));
            for (const auto& v : row) s.depths.values.push_back(v.get<int>());
        }
        corpus.samples.push_back(std::move(s));
        byte_offset += line.size() + 1;
    }
    if (corpus.samples.size() != expected_sequences)
        throw CorpusFormatError("header declares " + std::to_string(expected_sequences) +
                                " sequences, file holds " + std::to_string(corpus.samples.size()));
    if (corpus.total_tokens() != expected_tokens)
        throw CorpusFormatError("header declares " + std::to_string(expected_tokens) +
                                " tokens, file holds " + std::to_string(corpus.total_tokens()));
    return corpus;
}

}  // namespace counterprobe::data
