#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "fixtures.hpp"
#include "refinelm/eval.hpp"
#include "refinelm/http_backend.hpp"
#include "refinelm/refine.hpp"

namespace fs = std::filesystem;
using namespace refinelm;

namespace {

const std::string kCli = REFINELM_CLI;
const std::string kData = REFINELM_DATA;
const std::string kLexicon = kData + "/gender_demo.lex";
const std::string kSplit = kData + "/gender_demo.split";

struct Run {
    int code = -1;
    std::string output; // stdout and stderr interleaved
};

Run run(const std::string& args, const std::string& env = "") {
    const auto cmd = env + (env.empty() ? "" : " ") + "'" + kCli + "' " + args + " 2>&1";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.output.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    const auto text = slurp(p);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

// Number printed after `label` in the CLI output.
double printed(const std::string& output, const std::string& label) {
    const auto pos = output.find(label);
    if (pos == std::string::npos) return NAN;
    return std::stod(output.substr(pos + label.size()));
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("refinelm_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    std::string write(const std::string& name, const std::string& text) const {
        std::ofstream(dir_ / name, std::ios::binary) << text;
        return path(name);
    }

    // Cache holding every prompt of the demo lexicon's test split, minus `drop` records.
    std::string demo_cache(const std::string& name, std::size_t drop = 0) const {
        const auto lex = load_lexicon(kLexicon, Category::gender);
        const auto test = split(lex, load_split_config(kSplit)).test;
        const auto be = new_synthetic(lex, SyntheticSpec::fair(), 0);
        std::vector<ProbeResult> records;
        for (const auto& t : enumerate_templates(test, test.contexts, test.subjects))
            for (const auto& v : expand_variants(t))
                records.push_back(be->probe(build_prompt(v, PromptStyle::masked()), {t.x1.name, t.x2.name}, 8));
        records.resize(records.size() - drop);
        write_cache(path(name), {1, 8, "masked"}, records);
        return path(name);
    }

    fs::path dir_;
};

const std::string kDemo = "--lexicon '" + kLexicon + "' --split '" + kSplit + "'";

} // namespace

TEST_F(Cli, GenPrintsVariantCountsAndWritesManifest) {
    const auto r = run("gen " + kDemo + " --out " + path("gen"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("train variants: 432\n"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("test variants: 432\n"), std::string::npos) << r.output;
    EXPECT_EQ(line_count(path("gen/manifest.jsonl")), 216u);
    EXPECT_EQ(line_count(path("gen/prompts.jsonl")), 864u);
    const auto first = nlohmann::json::parse(slurp(path("gen/prompts.jsonl")).substr(0, slurp(path("gen/prompts.jsonl")).find('\n')));
    EXPECT_EQ(first["prompt_id"], prompt_id(first["prompt"].get<std::string>()));
    EXPECT_EQ(first["subjects"].size(), 2u);
}

TEST_F(Cli, GenIsDeterministic) {
    ASSERT_EQ(run("gen " + kDemo + " --out " + path("a")).code, 0);
    ASSERT_EQ(run("gen " + kDemo + " --out " + path("b")).code, 0);
    EXPECT_EQ(slurp(path("a/manifest.jsonl")), slurp(path("b/manifest.jsonl")));
    EXPECT_EQ(slurp(path("a/prompts.jsonl")), slurp(path("b/prompts.jsonl")));
}

TEST_F(Cli, GenReligionSizedSplit) {
    std::ostringstream lex;
    lex << "format=1\n[subjects]\n";
    for (int i = 0; i < 11; ++i) lex << "Believer" << i << "\tgroup" << i << "\n";
    lex << "[attributes]\n";
    for (int i = 0; i < 50; ++i) lex << "was trait" << i << "\twas never trait" << i << "\n";
    lex << "[contexts]\n";
    for (int i = 0; i < 14; ++i) lex << "met place" << i << " with\n";
    const auto lexicon = write("religion.lex", lex.str());
    const auto cfg = write("religion.split", "format=1\ncategory=religion\ntrain_context_count=8\ntest_context_count=6\n");
    const auto r = run("gen --category religion --lexicon " + lexicon + " --split " + cfg + " --out " + path("gen"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("train variants: 88000\n"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("test variants: 66000\n"), std::string::npos) << r.output;
}

TEST_F(Cli, EmptyContextSubsetIsConfigError) {
    const auto cfg = write("bad.split", "format=1\ncategory=gender\ntrain_context_count=0\n");
    const auto r = run("gen --lexicon " + kLexicon + " --split " + cfg + " --out " + path("gen"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("context counts must be positive"), std::string::npos) << r.output;
}

TEST_F(Cli, MeasureFairSyntheticIsZero) {
    const auto r = run("measure " + kDemo + " --backend synthetic:fair --out " + path("m"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rep = load_report(path("m/report.json"));
    EXPECT_NEAR(rep.mu, 0.0, 1e-12);
    EXPECT_EQ(rep.templates.size(), 108u);
    EXPECT_EQ(rep.provenance.at("subset"), "test");
    EXPECT_TRUE(fs::exists(path("m/report.csv")));
}

TEST_F(Cli, MeasureBiasedSpecMatchesAnalyticMu) {
    const auto r = run("measure " + kDemo + " --subset all --backend synthetic:" + kData + "/biased_spec.json --out " + path("m"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rep = load_report(path("m/report.json"));
    EXPECT_NEAR(rep.mu, 0.2, 1e-9);
    EXPECT_NEAR(printed(r.output, "mu: "), 0.2, 1e-6);
}

TEST_F(Cli, MeasureListsEveryMissingPrompt) {
    const auto cache = demo_cache("cache.jsonl", 3);
    const auto r = run("measure " + kDemo + " --backend cache:" + cache + " --out " + path("m"));
    EXPECT_EQ(r.code, 4) << r.output;
    EXPECT_NE(r.output.find("3 prompt(s) missing"), std::string::npos) << r.output;
    EXPECT_EQ(line_count(path("m/missing_prompts.txt")), 3u);
    std::istringstream ids(slurp(path("m/missing_prompts.txt")));
    for (std::string id; std::getline(ids, id);) EXPECT_NE(r.output.find("missing prompt " + id), std::string::npos);
    EXPECT_FALSE(fs::exists(path("m/report.json")));
}

TEST_F(Cli, MeasureFromCompleteCacheMatchesSynthetic) {
    const auto cache = demo_cache("cache.jsonl");
    ASSERT_EQ(run("measure " + kDemo + " --backend cache:" + cache + " --out " + path("c")).code, 0);
    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:fair --out " + path("s")).code, 0);
    EXPECT_EQ(load_report(path("c/report.json")).templates, load_report(path("s/report.json")).templates);
}

TEST_F(Cli, CacheStyleMismatchIsConfigError) {
    const auto cache = demo_cache("cache.jsonl");
    const auto r = run("measure " + kDemo + " --style infill --backend cache:" + cache + " --out " + path("m"));
    EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, TruncatedCacheIsDataError) {
    const auto cache = demo_cache("cache.jsonl");
    auto text = slurp(cache);
    text.resize(text.size() - 30);
    write("cache.jsonl", text);
    EXPECT_EQ(run("measure " + kDemo + " --backend cache:" + cache + " --out " + path("m")).code, 3);
}

TEST_F(Cli, UsageErrorsAreConfigErrors) {
    EXPECT_EQ(run("measure " + kDemo + " --backend bogus --out " + path("m")).code, 2);
    EXPECT_EQ(run("measure " + kDemo + " --backend synthetic:fair --out " + path("m") + " --no-such-flag").code, 2);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("train --lexicon " + kLexicon + " --backend synthetic:fair --out " + path("t")).code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, TrainZeroStepsWritesInitCheckpoint) {
    const auto r = run("train " + kDemo + " --backend synthetic:fair --steps 0 --seed 5 --out " + path("t"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(load_checkpoint(path("t/checkpoint.json")), init_refine(8, 16, 5));
}

TEST_F(Cli, TrainIsDeterministicAcrossJobCounts) {
    const std::string args = "train " + kDemo + " --backend synthetic:" + kData + "/biased_spec.json --steps 40 --seed 2 --eval-every 10";
    ASSERT_EQ(run(args + " --jobs 1 --out " + path("a")).code, 0);
    ASSERT_EQ(run(args + " --jobs 3 --out " + path("b")).code, 0);
    EXPECT_EQ(slurp(path("a/checkpoint.json")), slurp(path("b/checkpoint.json")));
    EXPECT_EQ(line_count(path("a/train_log.jsonl")), 40u);
    // Logs agree except for wall-clock time.
    std::istringstream la(slurp(path("a/train_log.jsonl"))), lb(slurp(path("b/train_log.jsonl")));
    for (std::string a, b; std::getline(la, a) && std::getline(lb, b);) {
        auto ja = nlohmann::json::parse(a), jb = nlohmann::json::parse(b);
        ja.erase("elapsed");
        jb.erase("elapsed");
        EXPECT_EQ(ja, jb);
    }
}

TEST_F(Cli, TrainReducesHeldOutBias) {
    const auto r = run("train " + kDemo + " --backend synthetic:" + kData +
                       "/biased_spec.json --steps 300 --seed 1 --checkpoint-every 100 --out " + path("t"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NEAR(printed(r.output, "initial held-out mu: "), 0.2, 0.01) << r.output;
    EXPECT_LT(printed(r.output, "final held-out mu: "), 0.02) << r.output;
    for (const char* step : {"step_000100.json", "step_000200.json", "step_000300.json"})
        EXPECT_TRUE(fs::exists(dir_ / "t" / "checkpoints" / step)) << step;
    EXPECT_EQ(slurp(path("t/checkpoints/step_000300.json")), slurp(path("t/checkpoint.json")));

    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:" + kData + "/biased_spec.json --refine " +
                  path("t/checkpoint.json") + " --out " + path("m"))
                  .code,
              0);
    EXPECT_LT(load_report(path("m/report.json")).mu, 0.02);
}

TEST_F(Cli, ConfigFileAndFlagPrecedence) {
    const auto cfg = write("run.toml", "measure.backend=\"synthetic:fair\"\nmeasure.k=6\nmeasure.seed=9\n");
    ASSERT_EQ(run("--config " + cfg + " measure " + kDemo + " --k 8 --out " + path("m")).code, 0);
    const auto echoed = slurp(path("m/effective_config.toml"));
    EXPECT_NE(echoed.find("measure.k=8"), std::string::npos) << echoed;
    EXPECT_NE(echoed.find("measure.seed=9"), std::string::npos) << echoed;
    EXPECT_NE(echoed.find("measure.backend=\"synthetic:fair\""), std::string::npos) << echoed;
    // The echoed config reproduces the run.
    ASSERT_EQ(run("--config " + path("m/effective_config.toml") + " measure --out " + path("again")).code, 0);
    EXPECT_EQ(load_report(path("again/report.json")), load_report(path("m/report.json")));
}

TEST_F(Cli, ReportPairedChart) {
    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:" + kData + "/biased_spec.json --out " + path("base")).code, 0);
    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:fair --out " + path("fair")).code, 0);
    const auto r = run("report --input " + path("base/report.json") + " --input " + path("fair/report.json") + " --out " + path("r"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto svg = slurp(path("r/group_gamma.svg"));
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find(">base<"), std::string::npos);
    EXPECT_NE(svg.find(">refined<"), std::string::npos);
    const auto csv = slurp(path("r/group_gamma.csv"));
    EXPECT_EQ(csv.rfind("group,base,refined\n", 0), 0u) << csv;
    EXPECT_NE(csv.find("\nmale,0.2"), std::string::npos) << csv;
}

TEST_F(Cli, ReportSchemaMismatchIsDataError) {
    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:fair --out " + path("m")).code, 0);
    auto j = nlohmann::json::parse(slurp(path("m/report.json")));
    j["schema"] = 2;
    const auto bad = write("bad.json", j.dump());
    EXPECT_EQ(run("report --input " + bad + " --out " + path("r")).code, 3);
}

TEST_F(Cli, EvalKnownRanksAndIdentityLayer) {
    std::vector<ProbeResult> records;
    const std::vector<std::vector<std::string>> ranked{
        {"A", "b", "c", "d", "e", "f", "g", "h"},
        {"x", "y", "a", "d", "e", "f", "g", "h"},
        {"x", "y", "z", "q", "a", "f", "g", "h"},
        {"x", "y", "z", "q", "r", "s", "t", "u"},
    };
    std::string mcq;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        MCQItem m;
        m.passage = "Passage " + std::to_string(i) + ".";
        m.question = "Which?";
        m.options = {{"A", "one"}, {"B", "two"}, {"C", "three"}, {"D", "four"}};
        m.gold = "A";
        mcq += nlohmann::json{{"passage", m.passage}, {"question", m.question},
                              {"options", {{"A", "one"}, {"B", "two"}, {"C", "three"}, {"D", "four"}}}, {"gold", "A"}}
                   .dump() +
               "\n";
        std::vector<TokenProb> entries;
        for (std::size_t j = 0; j < 8; ++j) entries.push_back({ranked[i][j], 0.16 - 0.015 * static_cast<double>(j)});
        records.push_back(fixtures::make_result(render_mcq(m, PromptStyle::masked()), entries, {}));
    }
    write_cache(path("cache.jsonl"), {1, 8, "masked"}, records);
    const auto items_path = write("mcq.jsonl", mcq);
    save_checkpoint(path("init.json"), init_refine(8, 16, 1));

    const auto r = run("eval --mcq " + items_path + " --backend cache:" + path("cache.jsonl") + " --refine " +
                       path("init.json") + " --out " + path("e"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(path("e/eval.csv")),
              "set,model,items,acc@1,acc@3,acc@5\nmcq,base,4,0.25,0.5,0.75\nmcq,refined,4,0.25,0.5,0.75\n");
    const auto j = nlohmann::json::parse(slurp(path("e/eval.json")));
    EXPECT_EQ(j["rows"].size(), 2u);
}

TEST_F(Cli, EvalRejectsSyntheticBackend) {
    const auto q = write("q.jsonl", R"({"prompt":"[MASK] ran.","expected":["he"]})" "\n");
    EXPECT_EQ(run("eval --specified " + q + " --backend synthetic:fair --out " + path("e")).code, 2);
}

TEST_F(Cli, MeasureOverHttpMatchesSynthetic) {
    const auto lex = load_lexicon(kLexicon, Category::gender);
    const auto synthetic = new_synthetic(lex, SyntheticSpec::fair(), 0);
    httplib::Server server;
    server.Post("/probe", [&](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        const auto r = synthetic->probe(body.at("prompt"), body.at("subjects").get<std::vector<std::string>>(), body.at("k"));
        res.set_content(to_json(r).dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    const auto url = "http://127.0.0.1:" + std::to_string(port);

    const auto r = run("measure " + kDemo + " --backend http:" + url + " --out " + path("h"), "REFINE_HTTP_TIMEOUT_MS=5000");
    const auto bad = run("measure " + kDemo + " --backend http:" + url + " --out " + path("x"), "REFINE_HTTP_TIMEOUT_MS=soon");
    server.stop();
    t.join();
    ASSERT_EQ(r.code, 0) << r.output;
    ASSERT_EQ(run("measure " + kDemo + " --backend synthetic:fair --out " + path("s")).code, 0);
    EXPECT_EQ(load_report(path("h/report.json")).templates, load_report(path("s/report.json")).templates);
    EXPECT_EQ(bad.code, 2) << bad.output;
}

TEST_F(Cli, UnreachableHttpIsBackendError) {
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    const auto r = run("measure " + kDemo + " --jobs 1 --backend http://127.0.0.1:" + std::to_string(port) + " --out " + path("m"),
                       "REFINE_HTTP_TIMEOUT_MS=200");
    EXPECT_EQ(r.code, 4) << r.output;
}
