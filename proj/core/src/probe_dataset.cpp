#include "counterprobe/probe_dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "counterprobe/ioutil.hpp"
#include "counterprobe/rng.hpp"

namespace counterprobe::data {

namespace {

std::vector<std::size_t> row_offsets(const Corpus& corpus) {
    std::vector<std::size_t> offsets(corpus.samples.size() + 1, 0);
    for (std::size_t i = 0; i < corpus.samples.size(); ++i)
        offsets[i + 1] = offsets[i] + corpus.samples[i].tokens.size();
    return offsets;
}

}  // namespace

ProbeDataset build_probe_dataset(std::shared_ptr<const EmbeddingMatrix> embeddings,
                                 const Corpus& corpus, int stack, const SequenceSplit& split,
                                 std::uint64_t seed) {
    if (!embeddings) throw std::invalid_argument("build_probe_dataset: null embeddings");
    const auto offsets = row_offsets(corpus);
    if (static_cast<std::size_t>(embeddings->rows) != offsets.back())
        throw std::invalid_argument("build_probe_dataset: embedding row count " +
                                    std::to_string(embeddings->rows) + " != corpus token count " +
                                    std::to_string(offsets.back()));
    if (corpus.samples.empty()) throw std::invalid_argument("build_probe_dataset: empty corpus");
    if (stack < 0 || stack >= corpus.samples.front().depths.k)
        throw std::invalid_argument("build_probe_dataset: stack index out of range");

    ProbeDataset ds;
    ds.language = corpus.language;
    ds.stack = stack;
    ds.seed = seed;
    ds.embeddings = std::move(embeddings);

    auto explode = [&](const std::vector<std::size_t>& seqs, ProbeSplit& out) {
        for (std::size_t si : seqs) {
            const Sample& s = corpus.samples.at(si);
            for (int t = 0; t < s.length(); ++t) {
                out.row_index.push_back(static_cast<std::uint32_t>(offsets[si] + t));
                out.labels.push_back(s.depths.at(t, stack));
                out.token_ids.push_back(s.tokens[static_cast<std::size_t>(t)]);
            }
        }
    };
    explode(split.train, ds.train);
    explode(split.val, ds.val);

    int max_depth = 0;
    for (int d : ds.train.labels) max_depth = std::max(max_depth, d);
    ds.num_classes = max_depth + 1;

    // Drop validation records the training split has no class for.
    ProbeSplit kept;
    for (std::size_t i = 0; i < ds.val.size(); ++i) {
        if (ds.val.labels[i] >= ds.num_classes) {
            ++ds.excluded_out_of_range;
            continue;
        }
        kept.row_index.push_back(ds.val.row_index[i]);
        kept.labels.push_back(ds.val.labels[i]);
        kept.token_ids.push_back(ds.val.token_ids[i]);
    }
    ds.val = std::move(kept);
    return ds;
}

ProbeDataset build_probe_dataset(std::shared_ptr<const EmbeddingMatrix> embeddings,
                                 const Corpus& corpus, int stack, double split_ratio,
                                 std::uint64_t seed) {
    const SequenceSplit split = split_sequences(corpus.samples.size(), split_ratio, seed);
    return build_probe_dataset(std::move(embeddings), corpus, stack, split, seed);
}

ProbeDataset randomize_controls(const ProbeDataset& dataset, std::uint64_t seed,
                                ControlMode mode) {
    if (dataset.control) throw std::logic_error("dataset is already a control");
    ProbeDataset out = dataset;
    out.control = true;
    out.seed = seed;
    const auto d = static_cast<std::uint64_t>(dataset.num_classes);
    if (mode == ControlMode::per_record) {
        // One draw per record, fixed by (seed, global record position).
        std::uint64_t pos = 0;
        for (auto* split : {&out.train, &out.val})
            for (auto& label : split->labels) {
                Rng rng(mix64(seed, pos++));
                label = static_cast<int>(rng.below(d));
            }
    } else {
        std::map<int, int> type_label;
        for (auto* split : {&out.train, &out.val})
            for (std::size_t i = 0; i < split->labels.size(); ++i) {
                const int tok = split->token_ids.at(i);
                auto it = type_label.find(tok);
                if (it == type_label.end()) {
                    Rng rng(mix64(seed, static_cast<std::uint64_t>(tok)));
                    it = type_label.emplace(tok, static_cast<int>(rng.below(d))).first;
                }
                split->labels[i] = it->second;
            }
    }
    return out;
}

namespace {
constexpr std::uint32_t kProbeVersion = 1;
}

void save_probe_split(const std::filesystem::path& path, const ProbeDataset& dataset,
                      const ProbeSplit& split) {
    atomic_write(path, [&](std::ostream& out) {
        write_magic(out, "CPRB");
        write_le<std::uint32_t>(out, kProbeVersion);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(split.size()));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.embeddings->cols));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.num_classes));
        for (std::size_t i = 0; i < split.size(); ++i) {
            const auto row = dataset.embeddings->row(static_cast<int>(split.row_index[i]));
            for (float v : row) write_le<float>(out, v);
            write_le<std::uint16_t>(out, static_cast<std::uint16_t>(split.labels[i]));
        }
    });
}

LoadedProbeSplit load_probe_split(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open probe dataset: " + path.string());
    expect_magic(in, "CPRB");
    const auto version = read_le<std::uint32_t>(in);
    if (version != kProbeVersion)
        throw IoError("probe dataset version mismatch: file has " + std::to_string(version));
    const auto count = read_le<std::uint32_t>(in);
    const auto d_model = read_le<std::uint32_t>(in);
    const auto num_classes = read_le<std::uint32_t>(in);

    LoadedProbeSplit out;
    out.d_model = static_cast<int>(d_model);
    out.num_classes = static_cast<int>(num_classes);
    auto m = std::make_shared<EmbeddingMatrix>();
    m->rows = static_cast<int>(count);
    m->cols = static_cast<int>(d_model);
    m->values.resize(static_cast<std::size_t>(count) * d_model);
    out.split.row_index.resize(count);
    out.split.labels.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::uint32_t j = 0; j < d_model; ++j)
            m->values[static_cast<std::size_t>(i) * d_model + j] = read_le<float>(in);
        out.split.row_index[i] = i;
        out.split.labels[i] = read_le<std::uint16_t>(in);
    }
    out.embeddings = std::move(m);
    return out;
}

}  // namespace counterprobe::data
