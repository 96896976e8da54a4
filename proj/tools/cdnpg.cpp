// Command-line front end: train / generate / eval / inspect / bench.
//
// Every subcommand accepts --config FILE with flat key=value lines providing
// defaults; explicit flags win. Domain failures print a one-line
// "error: ..." to stderr and exit 1.

#include "cdnpg/bench.hpp"
#include "cdnpg/decoding.hpp"
#include "cdnpg/inspect.hpp"
#include "cdnpg/metrics.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace cdnpg;

DataFormat pick_format(const std::string& path, const std::string& flag) {
    if (flag == "tsv") return DataFormat::Tsv;
    if (flag == "jsonl") return DataFormat::Jsonl;
    if (flag == "auto") {
        if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") return DataFormat::Jsonl;
        return DataFormat::Tsv;
    }
    throw std::runtime_error("format must be auto, tsv, or jsonl; got '" + flag + "'");
}

Model<float> load_model_for(const std::string& checkpoint, const Vocabulary& vocab) {
    auto model = load_checkpoint<float>(checkpoint);
    if (model.config().vocab_size != vocab.size())
        throw std::runtime_error("vocabulary has " + std::to_string(vocab.size()) +
                                 " entries but the checkpoint expects " +
                                 std::to_string(model.config().vocab_size));
    return model;
}

std::string ids_to_text(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::vector<std::string> words;
    for (int id : ids)
        if (id >= kReservedIds) words.push_back(vocab.token(id));
    return detokenize(words);
}

std::vector<std::string> ids_to_tokens(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::vector<std::string> words;
    for (int id : ids)
        if (id >= kReservedIds) words.push_back(vocab.token(id));
    return words;
}

// Encodes and truncates one source line; returns empty for blank input.
std::vector<int> encode_source(const std::string& line, const Vocabulary& vocab,
                               std::size_t max_len, bool& truncated) {
    auto ids = vocab.encode(tokenize(line));
    if (ids.size() > max_len) {
        ids.resize(max_len);
        truncated = true;
    }
    return ids;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
    std::string data, format = "auto", valid_path, vocab_path, out_dir, resume;
    double valid_frac = 0.1;
    std::size_t vocab_cap = 8000;
    // model
    std::size_t hidden = 450, layers = 3, heads = 9, ffn_dim = 0, max_len = 20, epsilon = 2;
    double dropout = 0.1;
    std::string mask_mode = "RxS";
    bool no_ga = false;
    TrainConfig tc;
};

void run_train(const TrainArgs& a) {
    auto loaded = load_dataset(a.data, pick_format(a.data, a.format));
    if (loaded.skipped > 0)
        std::cerr << "notice: skipped " << loaded.skipped << " malformed of " << loaded.total
                  << " lines\n";

    std::vector<ParaphrasePair> train_pairs, valid_pairs;
    if (!a.valid_path.empty()) {
        train_pairs = std::move(loaded.pairs);
        valid_pairs = load_dataset(a.valid_path, pick_format(a.valid_path, a.format)).pairs;
    } else {
        auto split = seeded_split(std::move(loaded.pairs), 1.0 - a.valid_frac, a.valid_frac,
                                  a.tc.seed);
        train_pairs = std::move(split.train);
        valid_pairs = std::move(split.valid);
    }
    if (train_pairs.empty()) throw std::runtime_error("train: no training pairs after split");

    Vocabulary vocab;
    if (!a.vocab_path.empty()) {
        vocab = Vocabulary::load(a.vocab_path);
    } else {
        std::vector<std::vector<std::string>> docs;
        docs.reserve(train_pairs.size() * 2);
        for (const auto& p : train_pairs) {
            docs.push_back(tokenize(p.source));
            docs.push_back(tokenize(p.target));
        }
        vocab = Vocabulary::build(docs, a.vocab_cap);
    }

    std::optional<Model<float>> model;
    if (!a.resume.empty()) {
        model.emplace(load_model_for(a.resume, vocab));
        std::cerr << "notice: resuming from " << a.resume
                  << "; model shape comes from the checkpoint\n";
    } else {
        ModelConfig mc;
        mc.vocab_size = vocab.size();
        mc.hidden = a.hidden;
        mc.layers = a.layers;
        mc.heads = a.heads;
        mc.ffn_dim = a.ffn_dim;
        mc.max_len = a.max_len;
        mc.dropout = a.dropout;
        mc.mask_mode = mask_mode_from_string(a.mask_mode);
        mc.epsilon = a.epsilon;
        mc.ga_enabled = !a.no_ga;
        mc.validate();
        model.emplace(mc, a.tc.seed);
    }

    TrainConfig tc = a.tc;
    tc.out_dir = a.out_dir;
    if (!tc.out_dir.empty()) {
        std::filesystem::create_directories(tc.out_dir);
        vocab.save((std::filesystem::path(tc.out_dir) / "vocab.txt").string());
    }

    std::cout << "training on " << train_pairs.size() << " pairs (" << valid_pairs.size()
              << " validation), vocabulary " << vocab.size() << ", parameters "
              << model->parameter_count() << "\n";
    auto result = train_loop(*model, train_pairs, valid_pairs, vocab, tc);
    std::cout << "ran " << result.steps_run << " steps, final train loss "
              << result.final_train_loss;
    if (std::isfinite(result.best_val_loss))
        std::cout << ", best validation loss " << result.best_val_loss;
    if (result.stopped_early) std::cout << " (stopped early)";
    std::cout << "\n";
    if (!tc.out_dir.empty()) std::cout << "wrote " << tc.out_dir << "\n";
}

// ---- generate -----------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint, vocab_path, input_path, output_path;
    std::size_t beam = 8, max_len = 0;
    double alpha = 1.0;
    bool best_only = false;
};

void run_generate(const GenerateArgs& a) {
    auto vocab = Vocabulary::load(a.vocab_path);
    auto model = load_model_for(a.checkpoint, vocab);

    std::ifstream file_in;
    if (!a.input_path.empty()) {
        file_in.open(a.input_path);
        if (!file_in) throw std::runtime_error("cannot open input file " + a.input_path);
    }
    std::istream& in = a.input_path.empty() ? std::cin : file_in;

    std::ofstream file_out;
    if (!a.output_path.empty()) {
        file_out.open(a.output_path);
        if (!file_out) throw std::runtime_error("cannot open output file " + a.output_path);
    }
    std::ostream& out = a.output_path.empty() ? std::cout : file_out;

    const std::size_t src_cap = model.config().max_len;
    DecodeOptions opts{a.beam, a.max_len == 0 ? model.config().max_len : a.max_len, a.alpha};
    opts.validate();

    bool truncated = false;
    std::string line;
    while (std::getline(in, line)) {
        auto ids = encode_source(line, vocab, src_cap, truncated);
        if (ids.empty()) {
            std::cerr << "notice: skipping blank input line\n";
            continue;
        }
        auto hyps = generate(model, ids, opts);
        nlohmann::json j;
        j["source"] = line;
        if (a.best_only) {
            j["text"] = ids_to_text(hyps.at(0).token_ids, vocab);
            j["score"] = hypothesis_score(hyps.at(0), a.alpha);
        } else {
            auto arr = nlohmann::json::array();
            for (const auto& h : hyps)
                arr.push_back({{"text", ids_to_text(h.token_ids, vocab)},
                               {"score", hypothesis_score(h, a.alpha)}});
            j["candidates"] = std::move(arr);
        }
        out << j.dump() << '\n';
    }
    if (truncated)
        std::cerr << "notice: some inputs exceeded " << src_cap << " tokens and were truncated\n";
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, vocab_path, data, format = "auto", output_path;
    std::size_t beam = 8, max_len = 0;
    double alpha = 1.0;
};

void run_eval(const EvalArgs& a) {
    auto vocab = Vocabulary::load(a.vocab_path);
    auto model = load_model_for(a.checkpoint, vocab);
    auto loaded = load_dataset(a.data, pick_format(a.data, a.format));

    const std::size_t src_cap = model.config().max_len;
    DecodeOptions opts{a.beam, a.max_len == 0 ? model.config().max_len : a.max_len, a.alpha};
    opts.validate();

    std::vector<Tokens> cands, srcs;
    std::vector<std::vector<Tokens>> refs;
    bool truncated = false;
    for (const auto& pair : loaded.pairs) {
        auto ids = encode_source(pair.source, vocab, src_cap, truncated);
        auto ref = tokenize(pair.target);
        if (ids.empty() || ref.empty()) {
            std::cerr << "notice: skipping pair with a blank side\n";
            continue;
        }
        auto hyps = generate(model, ids, opts);
        cands.push_back(ids_to_tokens(hyps.at(0).token_ids, vocab));
        refs.push_back({std::move(ref)});
        srcs.push_back(tokenize(pair.source));
    }
    if (truncated)
        std::cerr << "notice: some sources exceeded " << src_cap << " tokens and were truncated\n";
    if (cands.empty()) throw std::runtime_error("eval: no usable pairs in " + a.data);

    nlohmann::json report;
    report["pairs"] = cands.size();
    report["bleu"] = corpus_bleu(cands, refs, 4);
    report["ibleu"] = ibleu(cands, refs, srcs);
    report["rouge_l"] = corpus_rouge_l(cands, refs);
    report["beam_size"] = a.beam;
    report["length_alpha"] = a.alpha;

    if (a.output_path.empty()) {
        std::cout << report.dump(2) << '\n';
    } else {
        std::ofstream out(a.output_path);
        if (!out) throw std::runtime_error("cannot open output file " + a.output_path);
        out << report.dump(2) << '\n';
    }
}

// ---- inspect ------------------------------------------------------------------

struct InspectArgs {
    std::string checkpoint, vocab_path, text, color = "auto";
    bool as_json = false;
};

void run_inspect(const InspectArgs& a) {
    auto vocab = Vocabulary::load(a.vocab_path);
    auto model = load_model_for(a.checkpoint, vocab);

    auto words = tokenize(a.text);
    if (words.empty()) throw std::runtime_error("inspect: the text has no tokens");
    if (words.size() > model.config().max_len) {
        words.resize(model.config().max_len);
        std::cerr << "notice: input truncated to " << words.size() << " tokens\n";
    }
    auto ids = vocab.encode(words);
    auto report = granularity_report(model, ids, words, a.checkpoint);

    if (a.as_json) {
        std::cout << report_to_json(report).dump() << '\n';
        return;
    }
    const bool ansi = a.color == "always" || (a.color == "auto" && isatty(STDOUT_FILENO));
    std::cout << render_heatmap(report, ansi);
    std::cout << "scale: 0.00 local ... 1.00 global (mask mode " << report.mask_mode << ")\n";
}

// ---- bench --------------------------------------------------------------------

void run_bench(const BenchOptions& o) {
    auto r = run_overhead_bench(o);
    nlohmann::json j;
    j["ga_seconds"] = r.ga_seconds;
    j["vanilla_seconds"] = r.vanilla_seconds;
    j["ratio"] = r.ratio;
    std::cout << j.dump(2) << '\n';
}

void add_config(CLI::App* sub) {
    sub->add_option("--config", "flat key=value file with option defaults; flags win");
}

std::string trim_copy(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Reads a flat key=value config file named by a subcommand's --config option
// and appends --key=value tokens for every key not already given explicitly,
// so command-line flags always win. Returns the augmented argument list.
std::vector<std::string> apply_config_defaults(CLI::App& app, std::vector<std::string> args) {
    // Locate the subcommand; everything after it belongs to that subcommand.
    CLI::App* sub = nullptr;
    std::size_t sub_pos = 0;
    for (std::size_t i = 0; i < args.size() && sub == nullptr; ++i)
        for (CLI::App* cand : app.get_subcommands(nullptr))
            if (args[i] == cand->get_name()) {
                sub = cand;
                sub_pos = i;
                break;
            }
    if (sub == nullptr) return args;

    std::string path;
    for (std::size_t i = sub_pos + 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);

    std::map<std::string, std::string> entries;  // last occurrence wins
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim_copy(line);
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected key=value, got '" + line + "'");
        auto key = trim_copy(line.substr(0, eq));
        auto value = trim_copy(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
        if (key == "config")
            throw std::runtime_error(path + ": config files cannot nest via the 'config' key");
        if (sub->get_option_no_throw("--" + key) == nullptr)
            throw std::runtime_error(path + ": unknown key '" + key + "' for subcommand '" +
                                     sub->get_name() + "'");
        entries[key] = value;
    }

    for (const auto& [key, value] : entries) {
        const std::string flag = "--" + key;
        bool given = false;
        for (std::size_t i = sub_pos + 1; i < args.size() && !given; ++i)
            given = args[i] == flag || args[i].rfind(flag + "=", 0) == 0;
        if (!given) args.push_back(flag + "=" + value);
    }
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"granularity-aware sequence-to-sequence paraphrasing toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "0.1.0");
    app.failure_message(CLI::FailureMessage::simple);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train a model on paraphrase pairs");
    add_config(train);
    train->add_option("--data", ta.data, "pair file: TSV source<TAB>target or JSONL")
        ->required();
    train->add_option("--format", ta.format, "auto|tsv|jsonl (default auto by extension)");
    train->add_option("--valid", ta.valid_path, "separate validation pair file");
    train->add_option("--valid-frac", ta.valid_frac,
                      "validation fraction when --valid is absent (default 0.1)");
    train->add_option("--vocab", ta.vocab_path, "existing vocabulary file (default: build)");
    train->add_option("--vocab-cap", ta.vocab_cap, "max vocabulary size incl. specials");
    train->add_option("--out-dir", ta.out_dir, "metrics + checkpoints directory")
        ->envname("CDNPG_OUT_DIR");
    train->add_option("--resume", ta.resume, "checkpoint to continue from");
    train->add_option("--hidden", ta.hidden, "model width (default 450)");
    train->add_option("--layers", ta.layers, "encoder/decoder depth (default 3)");
    train->add_option("--heads", ta.heads, "attention heads (default 9)");
    train->add_option("--ffn-dim", ta.ffn_dim, "feed-forward width (0 = 4x hidden)");
    train->add_option("--max-len", ta.max_len, "sequence length cap (default 20)");
    train->add_option("--dropout", ta.dropout, "dropout rate (default 0.1)");
    train->add_option("--mask-mode", ta.mask_mode, "R | S | RxS | R+S (default RxS)");
    train->add_option("--epsilon", ta.epsilon, "scope threshold offset (default 2)");
    train->add_flag("--no-ga", ta.no_ga, "disable granularity-aware attention");
    train->add_option("--batch-size", ta.tc.batch_size, "rows per step (default 32)");
    train->add_option("--max-steps", ta.tc.max_steps, "total steps (default 100000)");
    train->add_option("--warmup-steps", ta.tc.warmup_steps, "linear warmup (default 5000)");
    train->add_option("--peak-lr", ta.tc.peak_lr, "peak learning rate (default 5e-5)");
    train->add_option("--weight-decay", ta.tc.weight_decay, "decoupled decay (default 0.01)");
    train->add_option("--seed", ta.tc.seed, "rng seed (default 0)");
    train->add_option("--validation-interval", ta.tc.validation_interval,
                      "steps between validations (default 500)");
    train->add_option("--patience", ta.tc.patience,
                      "stop after this many fruitless validations (0 = off)");
    train->add_option("--label-smoothing", ta.tc.label_smoothing, "default 0");
    train->add_option("--grad-clip", ta.tc.grad_clip, "global-norm cap (0 = off)");
    train->add_option("--start-step", ta.tc.start_step, "resume step offset");
    train->callback([&ta] { run_train(ta); });

    GenerateArgs ga;
    auto* gen = app.add_subcommand("generate", "paraphrase input lines");
    add_config(gen);
    gen->add_option("--checkpoint", ga.checkpoint, "trained weights")->required();
    gen->add_option("--vocab", ga.vocab_path, "vocabulary file")->required();
    gen->add_option("--input", ga.input_path, "one sentence per line (default stdin)");
    gen->add_option("--output", ga.output_path, "JSONL destination (default stdout)");
    gen->add_option("--beam-size", ga.beam, "beam width (default 8)");
    gen->add_option("--max-len", ga.max_len, "output length cap (0 = model max)");
    gen->add_option("--length-alpha", ga.alpha, "length normalization (default 1.0)");
    gen->add_flag("--best-only", ga.best_only, "emit only the top candidate");
    gen->callback([&ga] { run_generate(ga); });

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "score generations against references");
    add_config(ev);
    ev->add_option("--checkpoint", ea.checkpoint, "trained weights")->required();
    ev->add_option("--vocab", ea.vocab_path, "vocabulary file")->required();
    ev->add_option("--data", ea.data, "pair file with references")->required();
    ev->add_option("--format", ea.format, "auto|tsv|jsonl");
    ev->add_option("--output", ea.output_path, "JSON report destination (default stdout)");
    ev->add_option("--beam-size", ea.beam, "beam width (default 8)");
    ev->add_option("--max-len", ea.max_len, "output length cap (0 = model max)");
    ev->add_option("--length-alpha", ea.alpha, "length normalization (default 1.0)");
    ev->callback([&ea] { run_eval(ea); });

    InspectArgs ia;
    auto* ins = app.add_subcommand("inspect", "show per-layer granularity for a sentence");
    add_config(ins);
    ins->add_option("--checkpoint", ia.checkpoint, "trained weights")->required();
    ins->add_option("--vocab", ia.vocab_path, "vocabulary file")->required();
    ins->add_option("--text", ia.text, "sentence to inspect")->required();
    ins->add_flag("--json", ia.as_json, "emit the report as JSON");
    ins->add_option("--color", ia.color, "auto|always|never (default auto)");
    ins->callback([&ia] { run_inspect(ia); });

    BenchOptions bo;
    auto* be = app.add_subcommand("bench", "time attention overhead against a plain model");
    add_config(be);
    be->add_option("--hidden", bo.hidden, "model width (default 450)");
    be->add_option("--layers", bo.layers, "depth (default 3)");
    be->add_option("--heads", bo.heads, "attention heads (default 9)");
    be->add_option("--seq-len", bo.seq_len, "sequence length (default 20)");
    be->add_option("--batch", bo.batch, "rows per step (default 32)");
    be->add_option("--vocab-size", bo.vocab, "vocabulary size (default 8000)");
    be->add_option("--repeats", bo.repeats, "timed steps; median reported (default 5)");
    be->add_option("--seed", bo.seed, "rng seed (default 1)");
    be->callback([&bo] { run_bench(bo); });

    try {
        auto args = apply_config_defaults(app, {argv + 1, argv + argc});
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
