// bcmf command line: data generation, training, evaluation and tooling.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bcmf/harness.hpp"
#include "bcmf/verify.hpp"

namespace fs = std::filesystem;
using namespace bcmf;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "flat key = value config file");
    sub->add_option("--seed", c.seed, "training / initialization seed");
    sub->add_option("--out", c.out, "output directory");
    sub->allow_extras();
}

// Leftover arguments are dotted-key overrides: --key value or --key=value.
KeyValues overrides(const std::vector<std::string>& extras) {
    KeyValues kv;
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& a = extras[i];
        require(a.rfind("--", 0) == 0 && a.size() > 2, ErrorKind::config, "unexpected argument '" + a + "'");
        std::string key = a.substr(2), value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key.erase(eq);
        } else {
            require(i + 1 < extras.size(), ErrorKind::config, "override --" + key + " needs a value");
            value = extras[++i];
        }
        kv[key] = value;
    }
    return kv;
}

TrainConfig resolve(const Common& c, const CLI::App* sub) {
    TrainConfig cfg;
    KeyValues kv;
    if (!c.config_path.empty()) kv = read_config_file(c.config_path);
    for (auto& [k, v] : overrides(sub->remaining())) kv[k] = v;
    if (c.seed) kv["seed"] = std::to_string(*c.seed);
    if (!c.out.empty()) kv["out"] = c.out;
    apply_config(cfg, kv);
    return cfg;
}

std::vector<Sample> load_or_generate(const std::string& manifest, const SceneSpec& spec, std::size_t count, std::uint64_t first) {
    if (!manifest.empty()) return load_dataset(read_manifest(manifest));
    return generate(spec, count, first);
}

std::vector<Sample> train_set(const TrainConfig& cfg) { return load_or_generate(cfg.train_manifest, cfg.data, cfg.train_count, 0); }
std::vector<Sample> eval_set(const TrainConfig& cfg) { return load_or_generate(cfg.eval_manifest, cfg.data, cfg.eval_count, cfg.train_count); }

Network restore(const TrainConfig& cfg, const std::string& checkpoint) {
    Network net(cfg.net, cfg.seed);
    load_checkpoint(net.params(), cfg.net.digest(), checkpoint);
    return net;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    require(static_cast<bool>(os << text), ErrorKind::io, "cannot write " + path.string());
}

std::string quoted(std::string s) {
    for (char& ch : s)
        if (ch == '"' || ch == '\n') ch = '\'';
    return '"' + s + '"';
}

int run_generate(const TrainConfig& cfg) {
    cfg.data.validate();
    const fs::path out = cfg.out_dir.empty() ? fs::path("data") : fs::path(cfg.out_dir);
    const int classes = static_cast<int>(cfg.net.num_classes);
    write_dataset((out / "train").string(), generate(cfg.data, cfg.train_count, 0), cfg.data.digest(), classes);
    write_dataset((out / "eval").string(), generate(cfg.data, cfg.eval_count, cfg.train_count), cfg.data.digest(), classes);
    std::cout << "train_manifest=" << (out / "train" / "manifest.txt").string() << '\n'
              << "eval_manifest=" << (out / "eval" / "manifest.txt").string() << '\n'
              << "digest=" << hex64(cfg.data.digest()) << '\n';
    return 0;
}

int run_train(TrainConfig cfg) {
    if (cfg.out_dir.empty()) cfg.out_dir = "run";
    const auto train_samples = train_set(cfg);
    const auto eval_samples = eval_set(cfg);
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "config.txt", config_text(cfg));
    const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 20);
    TrainResult r = train(cfg, train_samples, &eval_samples, [&](const TraceLine& t) {
        if (t.iter % every == 0 || t.iter + 1 == cfg.iterations) std::cerr << t.to_string() << '\n';
    });
    const MetricsReport report = evaluate(r.net, eval_samples, cfg.boundary_tolerance);
    write_text(fs::path(cfg.out_dir) / "metrics.txt", report.to_text());
    std::cout << "checkpoint=" << checkpoint_path(cfg.out_dir, "final") << '\n' << report.to_text();
    return 0;
}

int run_eval(const TrainConfig& cfg, const std::string& checkpoint) {
    Network net = restore(cfg, checkpoint);
    const MetricsReport report = evaluate(net, eval_set(cfg), cfg.boundary_tolerance);
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        write_text(fs::path(cfg.out_dir) / "metrics.txt", report.to_text());
    }
    std::cout << report.to_text();
    return 0;
}

int run_gradcheck(std::size_t instances, std::uint64_t seed) {
    std::size_t failed = 0;
    for (const GradcheckResult& r : gradcheck_suite(instances, seed)) {
        std::cout << "op=" << r.name << " instances=" << r.instances << " max_rel_err=" << r.max_error
                  << " status=" << (r.passed() ? "pass" : "fail") << '\n';
        if (!r.passed()) ++failed;
    }
    if (failed > 0) {
        std::cerr << "error kind=gradcheck msg=" << quoted(std::to_string(failed) + " ops exceeded the tolerance") << '\n';
        return 1;
    }
    return 0;
}

int run_benchmark(const TrainConfig& cfg, std::size_t repeats) {
    const BenchmarkResult b = benchmark(cfg.net, cfg.data.height, cfg.data.width, repeats, cfg.seed);
    std::cout << "height=" << b.height << " width=" << b.width << " params=" << b.cost.params << " flops=" << b.cost.flops
              << " seconds_per_forward=" << b.seconds_per_forward << '\n';
    return 0;
}

int run_export(const TrainConfig& cfg, const std::string& checkpoint) {
    require(!cfg.out_dir.empty(), ErrorKind::config, "export needs --out");
    Network net = restore(cfg, checkpoint);
    const auto samples = eval_set(cfg);
    export_predictions(net, samples, cfg.out_dir);
    std::cout << "exported=" << samples.size() << " dir=" << cfg.out_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bilateral segmentation network with multi-scale fusion and boundary loss"};
    app.require_subcommand(1);

    Common common;
    std::string checkpoint;
    std::size_t instances = 5, repeats = 5;
    std::uint64_t gc_seed = 2024;

    auto* gen = app.add_subcommand("generate-data", "write train and eval datasets with manifests");
    auto* tr = app.add_subcommand("train", "train a network and evaluate it");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    auto* bm = app.add_subcommand("benchmark", "parameter and FLOP count plus forward timing");
    auto* ex = app.add_subcommand("export", "write color-mapped predictions");
    for (auto* s : {gen, tr, ev, gc, bm, ex}) add_common(s, common);
    for (auto* s : {ev, ex}) s->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    gc->add_option("--instances", instances, "random instances per op");
    gc->add_option("--gc-seed", gc_seed, "seed for the random instances");
    bm->add_option("--repeats", repeats, "timed forward passes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error kind=usage msg=" << quoted(e.what()) << '\n';
        return 2;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        const TrainConfig cfg = resolve(common, sub);
        if (sub == gen) return run_generate(cfg);
        if (sub == tr) return run_train(cfg);
        if (sub == ev) return run_eval(cfg, checkpoint);
        if (sub == gc) return run_gradcheck(instances, gc_seed);
        if (sub == bm) return run_benchmark(cfg, repeats);
        return run_export(cfg, checkpoint);
    } catch (const Error& e) {
        std::cerr << "error kind=" << to_string(e.kind()) << " msg=" << quoted(e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error kind=internal msg=" << quoted(e.what()) << '\n';
        return 1;
    }
}
