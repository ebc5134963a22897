#pragma once

// RASP-lite: a sequence-op DAG interpreter for the built-in Dyck-1 recognizer
// (balance bookkeeping via causal mean-aggregates), and a structured
// residual-stream executor that lowers the same program into layers, giving
// every s-op a dedicated dimension range. Evaluating the compiled stream
// reproduces the interpreter exactly.
//
// Values are doubles. The program's quantities are integer-valued by
// construction, but mean-then-rescale arithmetic leaves them within 1e-12 of
// integers rather than on them, so every comparison primitive carries a 1e-9
// tolerance.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "counterprobe/corpus.hpp"
#include "counterprobe/probe.hpp"
#include "counterprobe/probe_dataset.hpp"

namespace counterprobe::rasp {

inline constexpr double kCmpTolerance = 1e-9;

enum class Cmp { lt, leq, eq, geq, gt };
bool cmp_apply(Cmp cmp, double a, double b);

struct SOp {
    enum class Kind {
        token_indicator,  // 1 where the input symbol equals `symbol`
        indices,          // position index 0,1,2,...
        aggregate,        // mean of operand a over selector-chosen positions
        add_const,        // a + constant
        mul,              // a * b
        sub,              // a - b
        cmp_const,        // indicator(a cmp constant)
        branch3,          // categorical: F if a > 0, else T if b == 0, else P
    };
    Kind kind;
    std::string name;
    char symbol = 0;
    Cmp cmp = Cmp::eq;
    double constant = 0.0;
    int a = -1;
    int b = -1;
    int selector = -1;
};

// Boolean attention pattern: query position i selects key positions j with
// pred(keys[j], queries[i]).
struct Selector {
    int keys = -1;
    int queries = -1;
    Cmp pred = Cmp::leq;
};

struct RaspProgram {
    std::vector<SOp> sops;  // topologically ordered
    std::vector<Selector> selectors;
    int output = -1;  // index of the branch3 s-op

    int sop_index(std::string_view name) const;

    // The built-in recognizer: running open/close counts via causal mean
    // aggregates, balance, a latched negative-balance flag, and a T/P/F verdict.
    static RaspProgram dyck1();
};

struct EvalTable {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;  // per s-op, one value per token
    std::string verdicts;                     // branch3 output, 'T'/'P'/'F' per token

    const std::vector<double>& by_name(std::string_view name) const;
};

// Standard semantics: aggregates average the selected values (empty selection
// gives 0). Input must be over the program's token alphabet.
EvalTable eval_program(const RaspProgram& program, std::string_view tokens);

struct DimRange {
    int offset = 0;
    int width = 0;
};

struct StreamActivations {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;  // row-major

    double at(int t, int dim) const { return values[static_cast<std::size_t>(t) * cols + dim]; }
};

// The lowered program: an input block writing the token one-hot, then one
// block per select/aggregate pair and one per run of elementwise ops, each
// writing its s-ops' dedicated dimensions.
class CompiledStream {
public:
    explicit CompiledStream(RaspProgram program);

    int width() const { return width_; }
    const RaspProgram& program() const { return program_; }
    DimRange sop_range(std::string_view name) const;

    StreamActivations run(std::string_view tokens) const;

    // Per-token activations for every corpus sequence, stacked in corpus
    // order and narrowed to f32 for the probing pipeline.
    data::EmbeddingMatrix embed_corpus(const data::Corpus& corpus) const;

    // Human-readable layout: blocks, their roles, and dimension assignments.
    std::string layout_dump() const;

private:
    struct Block {
        enum class Kind { input, attention, feedforward };
        Kind kind;
        std::vector<int> sops;  // attention blocks hold exactly one aggregate
    };

    RaspProgram program_;
    std::vector<Block> blocks_;
    std::vector<DimRange> ranges_;  // per s-op
    DimRange onehot_;               // raw token encoding
    int width_ = 0;
    std::string alphabet_;
};

struct RegressionResult {
    int arch_layers = 0;
    double accuracy = 0.0;  // fraction within +-0.5 after rounding
};

struct RaspProbeReport {
    std::vector<probe::ProbeResult> classification;
    std::vector<RegressionResult> regression;
};

// Runs the standard probing suite (classification + controls) on the compiled
// stream activations, plus regression probes on the same records.
RaspProbeReport probe_compiled(const CompiledStream& compiled, const data::Corpus& corpus,
                               const probe::SuiteConfig& cfg, std::uint64_t seed);

}  // namespace counterprobe::rasp
