#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "refinelm/eval.hpp"
#include "refinelm/http_backend.hpp"
#include "refinelm/lexicon.hpp"
#include "refinelm/metrics.hpp"
#include "refinelm/refine.hpp"
#include "refinelm/report.hpp"
#include "refinelm/trainer.hpp"

namespace fs = std::filesystem;
using namespace refinelm;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitBackend = 4;

struct Options {
    std::string lexicon;
    std::string category = "gender";
    std::string split;
    std::string subset;
    std::string backend;
    std::string style = "masked";
    std::string mask = std::string(kMaskPlaceholder);
    std::size_t k = 0; // 0 selects the style default
    std::string refine;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());

    std::size_t steps = 2000;
    double lr = 1e-2;
    std::size_t batch = 16;
    std::size_t hidden = 0;
    std::size_t eval_every = 100;
    std::size_t checkpoint_every = 0;

    std::string mcq;
    std::string specified;
    std::vector<std::size_t> cutoffs{1, 3, 5};

    std::vector<std::string> reports;
    std::vector<std::string> labels;
};

PromptStyle prompt_style(const Options& o) {
    auto style = parse_prompt_style(o.style);
    if (style.mode == PromptStyle::Mode::masked) style.mask_token = o.mask;
    return style;
}

std::size_t top_k(const Options& o) { return o.k != 0 ? o.k : prompt_style(o).default_k(); }

Lexicon load_inputs(const Options& o) {
    if (o.lexicon.empty()) throw ConfigError("--lexicon is required");
    auto lex = load_lexicon(o.lexicon, parse_category(o.category));
    lex.validate();
    return lex;
}

std::optional<SplitViews> load_split(const Options& o, const Lexicon& lex) {
    if (o.split.empty()) return std::nullopt;
    return split(lex, load_split_config(o.split));
}

std::vector<TemplateInstance> templates_of(const Lexicon& lex) {
    return enumerate_templates(lex, lex.contexts, lex.subjects);
}

// Templates for --subset: train, test or all (default test when a split is given).
std::vector<TemplateInstance> subset_templates(const Options& o, const Lexicon& lex, const std::optional<SplitViews>& views) {
    const std::string subset = o.subset.empty() ? (views ? "test" : "all") : o.subset;
    if (subset == "all") return templates_of(lex);
    if (!views) throw ConfigError("--subset " + subset + " needs --split");
    if (subset == "train") return templates_of(views->train);
    if (subset == "test") return templates_of(views->test);
    throw ConfigError("unknown subset '" + subset + "' (expected train, test or all)");
}

HttpOptions http_options() {
    HttpOptions opts;
    if (const char* env = std::getenv("REFINE_HTTP_TIMEOUT_MS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long ms = std::strtol(env, &end, 10);
        if (*end != '\0' || ms <= 0) throw ConfigError("REFINE_HTTP_TIMEOUT_MS must be a positive integer, got '" + std::string(env) + "'");
        opts.timeout = std::chrono::milliseconds(ms);
    }
    return opts;
}

// cache:<path> | synthetic:<spec.json> | synthetic:fair | http:<url>
std::unique_ptr<Backend> open_backend(const Options& o, const Lexicon& lex) {
    const auto& spec = o.backend;
    if (spec.empty()) throw ConfigError("--backend is required");
    if (spec.starts_with("http://") || spec.starts_with("https://")) return open_http(spec, http_options());
    const auto colon = spec.find(':');
    if (colon == std::string::npos) throw ConfigError("backend '" + spec + "' must be cache:<path>, synthetic:<spec> or http:<url>");
    const auto kind = spec.substr(0, colon), arg = spec.substr(colon + 1);
    if (arg.empty()) throw ConfigError("backend '" + spec + "' has an empty argument");
    if (kind == "cache") {
        auto cache = open_cache(arg);
        const auto style = prompt_style(o);
        if (cache->header().style != style.name())
            throw ConfigError("cache style '" + cache->header().style + "' does not match --style " + std::string(style.name()));
        return cache;
    }
    if (kind == "synthetic") {
        if (arg == "fair") return new_synthetic(lex, SyntheticSpec::fair(), o.seed);
        std::ifstream in(arg, std::ios::binary);
        if (!in) throw DataError("cannot open synthetic spec '" + arg + "'");
        json j;
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw DataError("synthetic spec '" + arg + "': " + e.what());
        }
        return new_synthetic(lex, synthetic_spec_from_json(j), o.seed);
    }
    if (kind == "http") return open_http(arg, http_options());
    throw ConfigError("unknown backend kind '" + kind + "'");
}

std::optional<RefineParams> load_refine(const Options& o) {
    if (o.refine.empty()) return std::nullopt;
    auto p = load_checkpoint(o.refine);
    if (p.k != top_k(o))
        throw ConfigError("checkpoint k=" + std::to_string(p.k) + " does not match --k " + std::to_string(top_k(o)));
    return p;
}

fs::path prepare_out(const Options& o, const CLI::App& app) {
    if (o.out.empty()) throw ConfigError("--out is required");
    const fs::path dir(o.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory '" + o.out + "': " + ec.message());
    std::ofstream cfg(dir / "effective_config.toml", std::ios::binary);
    if (!cfg) throw ConfigError("output directory '" + o.out + "' is not writable");
    // Only the active subcommand's settings, in a form --config reads back.
    const auto prefix = app.get_subcommands().front()->get_name() + ".";
    std::istringstream all(app.config_to_str(true, false));
    for (std::string line; std::getline(all, line);)
        if (line.starts_with(prefix) && !line.ends_with("=\"\"")) cfg << line << '\n';
    return dir;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    return out;
}

// ---------------------------------------------------------------------------

int cmd_gen(const Options& o, const CLI::App& app) {
    const auto lex = load_inputs(o);
    const auto views = load_split(o, lex);
    const auto style = prompt_style(o);
    const auto dir = prepare_out(o, app);

    std::vector<std::pair<std::string, std::vector<TemplateInstance>>> parts;
    if (views) {
        parts.emplace_back("train", templates_of(views->train));
        parts.emplace_back("test", templates_of(views->test));
    } else {
        parts.emplace_back("all", templates_of(lex));
    }
    auto manifest = open_out(dir / "manifest.jsonl");
    auto prompts = open_out(dir / "prompts.jsonl");
    std::set<std::string> written;
    for (const auto& [name, templates] : parts) {
        for (const auto& t : templates) {
            json ids = json::array();
            for (const auto& v : expand_variants(t)) {
                const auto prompt = build_prompt(v, style);
                auto id = prompt_id(prompt);
                ids.push_back(id);
                if (written.insert(id).second)
                    prompts << json{{"prompt_id", id}, {"prompt", prompt}, {"subjects", {t.x1.name, t.x2.name}}}.dump() << '\n';
            }
            manifest << json{{"template_id", t.id_hex()}, {"split", name},          {"x1", t.x1.name},
                             {"x1_group", t.x1.group}, {"x2", t.x2.name},          {"x2_group", t.x2.group},
                             {"context", t.context},   {"attribute", t.attribute.positive},
                             {"negation", t.attribute.negative},                   {"prompt_ids", ids}}
                            .dump()
                     << '\n';
        }
        std::printf("%s variants: %zu\n", name.c_str(), templates.size() * 4);
    }
    if (!manifest || !prompts) throw DataError("write failed under '" + dir.string() + "'");
    return 0;
}

int cmd_measure(const Options& o, const CLI::App& app) {
    const auto lex = load_inputs(o);
    const auto views = load_split(o, lex);
    const auto templates = subset_templates(o, lex, views);
    const auto refine = load_refine(o);
    const auto backend = open_backend(o, lex);
    const auto dir = prepare_out(o, app);

    ScoredTemplates scored;
    try {
        scored = score_templates(templates, *backend, refine ? &*refine : nullptr, top_k(o), prompt_style(o), o.jobs);
    } catch (const MissingProbes& e) {
        auto missing = open_out(dir / "missing_prompts.txt");
        for (const auto& id : e.ids()) {
            std::fprintf(stderr, "missing prompt %s\n", id.c_str());
            missing << id << '\n';
        }
        throw;
    }
    auto rep = aggregate(scored.biases, lex.groups(), scored.skipped);
    rep.category = std::string(to_string(lex.category));
    rep.provenance = {{"backend", backend->describe()},
                      {"lexicon", o.lexicon},
                      {"split", o.split},
                      {"subset", o.subset.empty() ? (views ? "test" : "all") : o.subset},
                      {"k", std::to_string(top_k(o))},
                      {"style", o.style},
                      {"refine", o.refine},
                      {"seed", std::to_string(o.seed)}};
    save_report((dir / "report.json").string(), (dir / "report.csv").string(), rep);
    std::printf("templates: %zu scored, %zu skipped\n", scored.biases.size(), scored.skipped);
    std::printf("mu: %.6f\navg positional error: %.6f\navg attributive error: %.6f\n", rep.mu, rep.avg_positional,
                rep.avg_attributive);
    return 0;
}

int cmd_train(const Options& o, const CLI::App& app) {
    const auto lex = load_inputs(o);
    const auto views = load_split(o, lex);
    if (!views) throw ConfigError("train needs --split to hold out test contexts or subjects");
    const auto backend = open_backend(o, lex);
    const auto dir = prepare_out(o, app);

    TrainConfig cfg;
    cfg.k = top_k(o);
    cfg.h = o.hidden;
    cfg.lr = o.lr;
    cfg.batch_size = o.batch;
    cfg.steps = o.steps;
    cfg.seed = o.seed;
    cfg.eval_every = o.eval_every;
    cfg.checkpoint_every = o.checkpoint_every;
    cfg.style = prompt_style(o);
    cfg.jobs = o.jobs;

    const auto ckpt_dir = dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    auto log = open_out(dir / "train_log.jsonl");
    TrainHooks hooks;
    hooks.log = [&](const StepLog& l) { log << to_json(l).dump() << '\n'; };
    hooks.checkpoint = [&](std::size_t step, const RefineParams& p) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06zu.json", step);
        save_checkpoint((ckpt_dir / name).string(), p);
    };
    const auto res = train(templates_of(views->train), templates_of(views->test), lex.groups(), *backend, cfg, hooks);
    save_checkpoint((dir / "checkpoint.json").string(), res.params);
    if (!log) throw DataError("write failed for train log");

    std::printf("train templates skipped (absent subjects): %zu\n", res.skipped);
    if (res.aborted_steps != 0) std::printf("aborted steps (non-finite gradient): %zu\n", res.aborted_steps);
    if (res.initial && res.final) {
        std::printf("initial held-out mu: %.6f (positional %.6f, attributive %.6f)\n", res.initial->mu,
                    res.initial->avg_positional, res.initial->avg_attributive);
        std::printf("final held-out mu: %.6f (positional %.6f, attributive %.6f)\n", res.final->mu,
                    res.final->avg_positional, res.final->avg_attributive);
    } else {
        std::printf("no eligible held-out templates\n");
    }
    return 0;
}

int cmd_eval(const Options& o, const CLI::App& app) {
    if (o.mcq.empty() && o.specified.empty()) throw ConfigError("eval needs --mcq and/or --specified");
    const auto refine = load_refine(o);
    const auto style = prompt_style(o);
    std::vector<MCQItem> mcq;
    std::vector<SpecifiedQuestion> specified;
    if (!o.mcq.empty()) mcq = load_jsonl<MCQItem>(o.mcq, mcq_from_json);
    if (!o.specified.empty()) specified = load_jsonl<SpecifiedQuestion>(o.specified, specified_from_json);
    if (o.backend.starts_with("synthetic:")) throw ConfigError("eval needs a cache or http backend");
    const auto backend = open_backend(o, Lexicon{});
    const auto dir = prepare_out(o, app);

    std::vector<std::pair<std::string, const RefineParams*>> models{{"base", nullptr}};
    if (refine) models.emplace_back("refined", &*refine);
    json rows = json::array();
    auto csv = open_out(dir / "eval.csv");
    csv << "set,model,items";
    for (auto c : o.cutoffs) csv << ",acc@" << c;
    csv << '\n';
    for (const auto& [model, params] : models) {
        std::vector<std::pair<std::string, AccuracyTable>> tables;
        if (!mcq.empty()) tables.emplace_back("mcq", eval_mcq(mcq, *backend, params, top_k(o), style, o.cutoffs, o.jobs));
        if (!specified.empty())
            tables.emplace_back("specified", eval_specified(specified, *backend, params, top_k(o), style, o.cutoffs, o.jobs));
        for (const auto& [set, t] : tables) {
            auto j = to_json(t);
            j["set"] = set;
            j["model"] = model;
            rows.push_back(j);
            csv << set << ',' << model << ',' << t.items;
            std::printf("%-9s %-7s", set.c_str(), model.c_str());
            for (std::size_t i = 0; i < t.cutoffs.size(); ++i) {
                csv << ',' << json(t.accuracy[i]).dump();
                std::printf("  acc@%zu %.4f", t.cutoffs[i], t.accuracy[i]);
            }
            csv << '\n';
            std::printf("\n");
        }
    }
    open_out(dir / "eval.json") << json{{"backend", backend->describe()}, {"refine", o.refine}, {"rows", rows}}.dump(1) << '\n';
    return 0;
}

int cmd_report(const Options& o, const CLI::App& app) {
    if (o.reports.empty() || o.reports.size() > 2) throw ConfigError("report takes one or two --input reports");
    std::vector<std::string> labels = o.labels;
    if (labels.empty()) labels = o.reports.size() == 1 ? std::vector<std::string>{"base"} : std::vector<std::string>{"base", "refined"};
    if (labels.size() != o.reports.size()) throw ConfigError("--labels needs one label per --input");
    std::vector<ChartPanel> panels;
    for (std::size_t i = 0; i < o.reports.size(); ++i) panels.push_back({labels[i], load_report(o.reports[i]).group_gamma});
    const auto svg = render_group_chart(panels);
    const auto csv = group_chart_csv(panels);
    const auto dir = prepare_out(o, app);
    open_out(dir / "group_gamma.svg") << svg;
    open_out(dir / "group_gamma.csv") << csv;
    std::printf("wrote %s and %s\n", (dir / "group_gamma.svg").string().c_str(), (dir / "group_gamma.csv").string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bias measurement and debiasing-layer training over top-k language-model outputs"};
    app.set_config("--config", "", "Config file (TOML); command-line flags override it");
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* cmd, bool needs_backend) {
        cmd->add_option("--out", o.out, "Output directory")->required();
        cmd->add_option("--seed", o.seed, "Seed for shuffling, initialization and synthetic noise")->capture_default_str();
        cmd->add_option("--jobs", o.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--style", o.style, "Prompt style: masked or infill")->capture_default_str();
        cmd->add_option("--mask", o.mask, "Mask token for masked prompts")->capture_default_str();
        cmd->add_option("--k", o.k, "Top-k size (0 = style default: 8 masked, 10 infill)")->capture_default_str();
        if (needs_backend)
            cmd->add_option("--backend", o.backend, "cache:<path> | synthetic:<spec.json|fair> | http:<url>")->required();
    };
    auto lexicon = [&](CLI::App* cmd) {
        cmd->add_option("--lexicon", o.lexicon, "Lexicon file")->required()->check(CLI::ExistingFile);
        cmd->add_option("--category", o.category, "gender, nationality, ethnicity or religion")->capture_default_str();
        cmd->add_option("--split", o.split, "Split config file")->check(CLI::ExistingFile);
    };

    auto* gen = app.add_subcommand("gen", "Write the template manifest and prompt list");
    lexicon(gen);
    common(gen, false);

    auto* measure = app.add_subcommand("measure", "Score templates and write a bias report");
    lexicon(measure);
    common(measure, true);
    measure->add_option("--subset", o.subset, "train, test or all (default: test with --split, else all)");
    measure->add_option("--refine", o.refine, "Refine-layer checkpoint to apply")->check(CLI::ExistingFile);

    auto* trn = app.add_subcommand("train", "Train the refine layer on the train split");
    lexicon(trn);
    common(trn, true);
    trn->add_option("--steps", o.steps, "Step budget")->capture_default_str();
    trn->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
    trn->add_option("--batch", o.batch, "Batch size (templates per step)")->capture_default_str();
    trn->add_option("--hidden", o.hidden, "Hidden width (0 = 2k)")->capture_default_str();
    trn->add_option("--eval-every", o.eval_every, "Held-out evaluation cadence in steps (0 = start and end only)")
        ->capture_default_str();
    trn->add_option("--checkpoint-every", o.checkpoint_every, "Checkpoint cadence in steps (0 = final only)")
        ->capture_default_str();

    auto* ev = app.add_subcommand("eval", "Acc@k on multiple-choice and specified questions");
    common(ev, true);
    ev->add_option("--mcq", o.mcq, "Multiple-choice items (JSON Lines)")->check(CLI::ExistingFile);
    ev->add_option("--specified", o.specified, "Specified questions (JSON Lines)")->check(CLI::ExistingFile);
    ev->add_option("--refine", o.refine, "Refine-layer checkpoint; adds a refined row")->check(CLI::ExistingFile);
    ev->add_option("--cutoffs", o.cutoffs, "Accuracy cutoffs")->capture_default_str();

    auto* rep = app.add_subcommand("report", "Per-group bias chart (SVG + CSV) from one or two reports");
    rep->add_option("--input", o.reports, "report.json, given once or twice (before, after)")->required()->check(CLI::ExistingFile);
    rep->add_option("--labels", o.labels, "Panel titles, one per input");
    rep->add_option("--out", o.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        const auto* cmd = app.get_subcommands().front();
        const auto& name = cmd->get_name();
        if (name == "gen") return cmd_gen(o, app);
        if (name == "measure") return cmd_measure(o, app);
        if (name == "train") return cmd_train(o, app);
        if (name == "eval") return cmd_eval(o, app);
        return cmd_report(o, app);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const BackendError& e) {
        std::fprintf(stderr, "backend error: %s\n", e.what());
        return kExitBackend;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    }
}
