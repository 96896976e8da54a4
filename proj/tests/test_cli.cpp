// End-to-end tests that drive the installed command-line binary as a user
// would: real process, real files, captured stdout/stderr and exit codes.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include "cdnpg/inspect.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

fs::path scratch_root() {
    // A fixed name: each run wipes the previous run's leftovers.
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "cdnpg_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
    REQUIRE(out.good());
}

// Runs the CLI with the given argument string, capturing both streams.
RunResult run_cli(const std::string& args, const std::string& stdin_text = "") {
    static int counter = 0;
    const fs::path dir = scratch_root();
    const fs::path out_file = dir / ("stdout." + std::to_string(counter));
    const fs::path err_file = dir / ("stderr." + std::to_string(counter));
    const fs::path in_file = dir / ("stdin." + std::to_string(counter));
    ++counter;
    spit(in_file, stdin_text);

    const std::string cmd = std::string("\"") + CDNPG_CLI_PATH + "\" " + args + " < " +
                            in_file.string() + " > " + out_file.string() + " 2> " +
                            err_file.string();
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = (rc != -1 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

const std::string kPairsTsv =
    "the cat sat on the mat\ta cat sat upon the mat\n"
    "the dog ran in the park\ta dog ran around the park\n"
    "birds sing in the morning\tbirds are singing at dawn\n"
    "she reads a book at night\tat night she reads a book\n"
    "he cooks dinner for the family\the makes dinner for his family\n"
    "the sun rises in the east\tthe sun comes up in the east\n"
    "rain falls on the quiet town\train is falling on the town\n"
    "children play near the river\tkids play close to the river\n";

const char* kTinyModelFlags =
    "--hidden 16 --layers 1 --heads 2 --max-len 12 --dropout 0 ";
const char* kTinyTrainFlags =
    "--batch-size 4 --warmup-steps 5 --peak-lr 1e-3 --validation-interval 10 "
    "--valid-frac 0.25 --seed 3 ";

// One small training run shared by the generate / eval / inspect cases.
struct TrainedFixture {
    fs::path data;
    fs::path out_dir;
    fs::path checkpoint;
    fs::path vocab;
};

const TrainedFixture& trained() {
    static const TrainedFixture fx = [] {
        TrainedFixture f;
        f.data = scratch_root() / "pairs.tsv";
        f.out_dir = scratch_root() / "trained";
        spit(f.data, kPairsTsv);
        auto r = run_cli("train --data " + f.data.string() + " --out-dir " +
                         f.out_dir.string() + " " + kTinyModelFlags + kTinyTrainFlags +
                         "--max-steps 30");
        REQUIRE_MESSAGE(r.exit_code == 0, r.err);
        f.checkpoint = f.out_dir / "best.ckpt";
        f.vocab = f.out_dir / "vocab.txt";
        return f;
    }();
    return fx;
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("argument errors exit nonzero with a one-line message") {
    auto none = run_cli("");
    CHECK(none.exit_code == 1);
    CHECK(none.err.find("error:") != std::string::npos);

    auto unknown = run_cli("frobnicate");
    CHECK(unknown.exit_code == 1);
    CHECK(unknown.err.find("error:") != std::string::npos);

    auto missing = run_cli("train");
    CHECK(missing.exit_code == 1);
    CHECK(missing.err.find("error:") != std::string::npos);

    auto help = run_cli("--help");
    CHECK(help.exit_code == 0);
    CHECK(help.out.find("train") != std::string::npos);

    auto version = run_cli("--version");
    CHECK(version.exit_code == 0);
}

TEST_CASE("train writes metrics, checkpoints, and the vocabulary") {
    const auto& fx = trained();
    CHECK(fs::exists(fx.out_dir / "metrics.jsonl"));
    CHECK(fs::exists(fx.out_dir / "best.ckpt"));
    CHECK(fs::exists(fx.out_dir / "last.ckpt"));
    CHECK(fs::exists(fx.out_dir / "vocab.txt"));

    const std::string metrics = slurp(fx.out_dir / "metrics.jsonl");
    CHECK(count_lines(metrics) == 30);
    std::istringstream in(metrics);
    std::string line;
    std::size_t step = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        ++step;
        CHECK(j.at("step").get<std::size_t>() == step);
        CHECK(j.at("train_loss").get<double>() > 0.0);
        CHECK(j.at("lr").get<double>() >= 0.0);
        if (step % 10 == 0)
            CHECK(j.at("val_loss").is_number());
        else
            CHECK(j.at("val_loss").is_null());
    }
}

TEST_CASE("config files supply defaults and explicit flags win") {
    const fs::path data = scratch_root() / "cfg_pairs.tsv";
    spit(data, kPairsTsv);
    const fs::path cfg = scratch_root() / "train.cfg";
    spit(cfg,
         "# comment then blank line\n\n"
         "max-steps=5\nhidden=16\nlayers=1\nheads=2\nmax-len=12\ndropout=0\n"
         "batch-size=4\nwarmup-steps=2\npeak-lr=1e-3\nvalidation-interval=10\n"
         "valid-frac=0.25\nseed=3\n");

    const fs::path out_a = scratch_root() / "cfg_run_a";
    auto a = run_cli("train --data " + data.string() + " --config " + cfg.string() +
                     " --out-dir " + out_a.string());
    REQUIRE_MESSAGE(a.exit_code == 0, a.err);
    CHECK(count_lines(slurp(out_a / "metrics.jsonl")) == 5);

    const fs::path out_b = scratch_root() / "cfg_run_b";
    auto b = run_cli("train --data " + data.string() + " --config " + cfg.string() +
                     " --out-dir " + out_b.string() + " --max-steps 3");
    REQUIRE_MESSAGE(b.exit_code == 0, b.err);
    CHECK(count_lines(slurp(out_b / "metrics.jsonl")) == 3);

    const fs::path bad = scratch_root() / "bad.cfg";
    spit(bad, "bogus-key=1\n");
    auto c = run_cli("train --data " + data.string() + " --config " + bad.string());
    CHECK(c.exit_code == 1);
    CHECK(c.err.find("bogus-key") != std::string::npos);
}

TEST_CASE("generate emits one JSONL row per input line and is deterministic") {
    const auto& fx = trained();
    const std::string base = "generate --checkpoint " + fx.checkpoint.string() +
                             " --vocab " + fx.vocab.string() + " --beam-size 3";
    const std::string input = "the cat sat on the mat\n\nbirds sing in the morning\n";

    auto r = run_cli(base, input);
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    CHECK(count_lines(r.out) == 2);  // the blank line is skipped
    CHECK(r.err.find("blank") != std::string::npos);

    std::istringstream rows(r.out);
    std::string line;
    while (std::getline(rows, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("source").is_string());
        const auto& cands = j.at("candidates");
        REQUIRE(cands.is_array());
        CHECK(cands.size() >= 1);
        CHECK(cands.size() <= 3);
        for (const auto& c : cands) {
            CHECK(c.at("text").is_string());
            CHECK(c.at("score").is_number());
        }
        for (std::size_t i = 1; i < cands.size(); ++i)
            CHECK(cands[i - 1].at("score").get<double>() >=
                  cands[i].at("score").get<double>());
    }

    auto again = run_cli(base, input);
    CHECK(again.exit_code == 0);
    CHECK(again.out == r.out);

    auto best = run_cli(base + " --best-only", "the cat sat on the mat\n");
    REQUIRE_MESSAGE(best.exit_code == 0, best.err);
    auto j = nlohmann::json::parse(best.out);
    CHECK(j.at("source").get<std::string>() == "the cat sat on the mat");
    CHECK(j.at("text").is_string());
    CHECK(j.at("score").is_number());
    CHECK_FALSE(j.contains("candidates"));
}

TEST_CASE("generate rejects a vocabulary that mismatches the checkpoint") {
    const auto& fx = trained();
    const fs::path tiny = scratch_root() / "tiny_vocab.txt";
    spit(tiny, "onlyword\n");
    auto r = run_cli("generate --checkpoint " + fx.checkpoint.string() + " --vocab " +
                     tiny.string());
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("error:") != std::string::npos);
    CHECK(r.err.find("expects") != std::string::npos);
}

TEST_CASE("eval reports corpus metrics as JSON") {
    const auto& fx = trained();
    auto r = run_cli("eval --checkpoint " + fx.checkpoint.string() + " --vocab " +
                     fx.vocab.string() + " --data " + fx.data.string() +
                     " --beam-size 2");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("pairs").get<std::size_t>() == 8);
    CHECK(j.at("beam_size").get<std::size_t>() == 2);
    CHECK(j.at("length_alpha").get<double>() == 1.0);
    for (const char* key : {"bleu", "ibleu", "rouge_l"}) {
        const double v = j.at(key).get<double>();
        CHECK(v >= -1.0);  // ibleu can dip below zero by construction
        CHECK(v <= 1.0);
    }

    const fs::path report = scratch_root() / "eval.json";
    auto to_file = run_cli("eval --checkpoint " + fx.checkpoint.string() + " --vocab " +
                           fx.vocab.string() + " --data " + fx.data.string() +
                           " --beam-size 2 --output " + report.string());
    REQUIRE(to_file.exit_code == 0);
    CHECK(nlohmann::json::parse(slurp(report)) == j);
}

TEST_CASE("inspect renders a heatmap and exports parseable JSON") {
    const auto& fx = trained();
    const std::string base = "inspect --checkpoint " + fx.checkpoint.string() +
                             " --vocab " + fx.vocab.string();

    auto plain = run_cli(base + " --text \"the cat sat on the mat\" --color never");
    REQUIRE_MESSAGE(plain.exit_code == 0, plain.err);
    CHECK(plain.out.find("layer 0") != std::string::npos);
    CHECK(plain.out.find("cat") != std::string::npos);
    CHECK(plain.out.find('\x1b') == std::string::npos);

    auto colored = run_cli(base + " --text \"the cat\" --color always");
    REQUIRE(colored.exit_code == 0);
    CHECK(colored.out.find("\x1b[48;5;") != std::string::npos);

    auto as_json = run_cli(base + " --text \"the cat sat on the mat\" --json");
    REQUIRE_MESSAGE(as_json.exit_code == 0, as_json.err);
    auto report = cdnpg::report_from_json(nlohmann::json::parse(as_json.out));
    CHECK(report.tokens == std::vector<std::string>{"the", "cat", "sat", "on", "the", "mat"});
    REQUIRE(report.per_layer_z.size() == 1);
    CHECK(report.per_layer_z[0].size() == 6);
    for (double z : report.per_layer_z[0]) {
        CHECK(z > 0.0);
        CHECK(z < 1.0);
    }

    auto truncated = run_cli(base +
                             " --text \"one two three four five six seven eight nine ten "
                             "eleven twelve thirteen fourteen\" --json");
    REQUIRE(truncated.exit_code == 0);
    CHECK(truncated.err.find("truncated") != std::string::npos);
    auto cut = cdnpg::report_from_json(nlohmann::json::parse(truncated.out));
    CHECK(cut.tokens.size() == 12);  // the model caps sequences at 12
}

TEST_CASE("bench times both attention variants on a tiny shape") {
    auto r = run_cli(
        "bench --hidden 16 --layers 1 --heads 2 --seq-len 6 --batch 2 --repeats 1 "
        "--vocab-size 32");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("ga_seconds").get<double>() > 0.0);
    CHECK(j.at("vanilla_seconds").get<double>() > 0.0);
    CHECK(j.at("ratio").get<double>() > 0.0);
}
