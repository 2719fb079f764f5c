// dae_cli: verify the exact minimisers, train, compare runs and study how much
// Q and A move between policy snapshots.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dae/dae.hpp"

namespace fs = std::filesystem;
using namespace dae;

namespace {

struct Globals {
    std::string output_dir = "runs";
    std::string seeds;
    std::size_t threads = 1;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    const Config c = Config::parse_string("seeds = " + text, "--seeds");
    std::vector<std::uint64_t> out;
    for (auto s : c.get_counts("seeds", {}, true)) out.push_back(s);
    return out;
}

RunSpec load_spec(const std::string& path, const Globals& g) {
    RunSpec spec = load_run_spec(fs::path(path));
    if (!g.seeds.empty()) spec.seeds = parse_seeds(g.seeds);
    return spec;
}

std::string fmt(double x, int digits = 4) {
    std::ostringstream os;
    os << std::setprecision(digits) << x;
    return os.str();
}

int cmd_verify(const std::string& scope, std::size_t instances, std::uint64_t seed, bool verbose) {
    if (instances == 0) {
        std::cerr << "error: --instances must be >= 1\n";
        return 2;
    }
    std::vector<SuiteReport> reports;
    const bool all = scope == "all";
    if (all || scope == "theorem1") reports.push_back(verify_theorem1(instances, seed));
    if (all || scope == "theorem2") reports.push_back(verify_theorem2(instances, seed));
    if (all || scope == "shaping") reports.push_back(verify_shaping(instances, seed));
    if (all || scope == "locality") reports.push_back(verify_locality(instances, seed));
    bool ok = true;
    for (const auto& r : reports) {
        if (verbose)
            for (const auto& inst : r.instances)
                std::cout << "  " << r.name << " #" << inst.index << " (" << inst.description
                          << "): max error " << fmt(inst.max_error, 3) << '\n';
        std::cout << r.name << ": " << r.instances.size() << " instances, max error " << fmt(r.max_error(), 3)
                  << " (tolerance " << fmt(r.tolerance, 3) << ") " << (r.passed() ? "PASS" : "FAIL") << '\n';
        if (!r.passed()) {
            ok = false;
            const InstanceResult* w = r.worst();
            std::cout << "offending instance #" << w->index << " (" << w->description << "), error "
                      << fmt(w->max_error, 3) << ":\n"
                      << w->mdp_text;
        }
    }
    return ok ? 0 : 1;
}

void report_seed(const RunSpec& spec, const SeedResult& r) {
    const auto& rows = r.metrics.rows;
    std::cout << spec.name << " seed " << r.seed << ": ";
    if (rows.empty()) {
        std::cout << "no iterations\n";
        return;
    }
    std::cout << rows.size() << " iterations, final exact return " << fmt(rows.back().exact_return, 6)
              << ", advantage MSE " << fmt(rows.back().mse_advantage, 3) << " -> " << (r.dir / "metrics.csv").string()
              << '\n';
}

int cmd_train(const std::string& config, bool resume, const Globals& g) {
    const RunSpec spec = load_spec(config, g);
    for (const auto& r : run_all_seeds(spec, g.output_dir, resume, g.threads)) report_seed(spec, r);
    return 0;
}

struct MethodScores {
    std::string name;
    MeanSe overall, last, final_return;
};

MethodScores score(const RunSpec& spec, const std::vector<SeedResult>& results) {
    std::vector<double> overall, last, fin;
    for (const auto& r : results) {
        const auto eps = r.metrics.episode_returns();
        if (eps.empty()) throw std::runtime_error(spec.name + " seed " + std::to_string(r.seed) + ": no finished episodes");
        const ScoreSummary s = summarize_scores(eps);
        overall.push_back(s.overall);
        last.push_back(s.last);
        fin.push_back(r.metrics.rows.back().exact_return);
    }
    return {spec.name, mean_se(overall), mean_se(last), mean_se(fin)};
}

std::string cell(const MeanSe& m) {
    std::string se = std::isnan(m.se) ? "n/a" : fmt(m.se, 3);
    return fmt(m.mean, 5) + " +- " + se + " (n=" + std::to_string(m.n) + ")";
}

int cmd_compare(const std::string& config_a, const std::string& config_b, const Globals& g) {
    const RunSpec a = load_spec(config_a, g);
    RunSpec b = load_spec(config_b, g);
    if (a.env != b.env) {
        std::cerr << "error: configs target different environments ('" << a.env << "' vs '" << b.env << "')\n";
        return 2;
    }
    if (b.name == a.name) b.name += "_b";
    const MethodScores sa = score(a, run_all_seeds(a, g.output_dir, true, g.threads));
    const MethodScores sb = score(b, run_all_seeds(b, g.output_dir, true, g.threads));
    std::printf("%-13s %-34s %-34s %s\n", "metric", sa.name.c_str(), sb.name.c_str(), "winner");
    auto line = [&](const char* metric, const MeanSe& x, const MeanSe& y) {
        std::printf("%-13s %-34s %-34s %s\n", metric, cell(x).c_str(), cell(y).c_str(),
                    verdict_name(compare_scores(x, y), sa.name, sb.name).c_str());
    };
    line("Overall", sa.overall, sb.overall);
    line("Last", sa.last, sb.last);
    line("Final exact", sa.final_return, sb.final_return);
    return 0;
}

int cmd_variation(const std::string& dir, const std::string& csv_path) {
    const fs::path d(dir);
    if (!fs::is_directory(d)) {
        std::cerr << "error: no such run directory: " << dir << '\n';
        return 2;
    }
    if (!fs::exists(d / "env.mdp")) {
        std::cerr << "error: " << (d / "env.mdp").string() << " not found\n";
        return 2;
    }
    const auto snaps = list_snapshots(d);
    if (snaps.size() < 2) {
        std::cerr << "error: need at least 2 policy snapshots in " << (d / "snapshots").string() << ", found "
                  << snaps.size() << '\n';
        return 2;
    }
    std::ifstream is(d / "env.mdp");
    const FiniteMdp mdp = read_mdp(is);
    std::vector<TabularPolicy> policies;
    for (const auto& [it, path] : snaps) policies.push_back(load_policy(path));
    const VariationReport rep = variation_study(mdp, policies, non_terminal_pairs(mdp));
    const fs::path out = csv_path.empty() ? d / "variation.csv" : fs::path(csv_path);
    std::ostringstream os;
    write_variation_csv(os, rep);
    write_text_file(out, os.str());
    std::cout << rep.rows.size() << " updates over " << policies.size() << " snapshots -> " << out.string() << '\n'
              << "median |dA| <= median |dQ| at every update: " << (rep.advantage_more_stable() ? "yes" : "no") << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Direct advantage estimation on finite MDPs"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--output-dir", g.output_dir, "Directory for run outputs")->capture_default_str();
    app.add_option("--seeds", g.seeds, "Seeds overriding the config, e.g. 0-9 or 1,4,7");
    app.add_option("--threads", g.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.fallthrough();

    auto* verify = app.add_subcommand("verify", "Check the exact minimisers and identities on random MDPs");
    std::string scope = "all";
    std::size_t instances = 50;
    std::uint64_t verify_seed = 0;
    bool verbose = false;
    verify->add_option("--scope", scope)
        ->check(CLI::IsMember({"theorem1", "theorem2", "shaping", "locality", "all"}))
        ->capture_default_str();
    verify->add_option("--instances", instances, "Random instances per suite")->capture_default_str();
    verify->add_option("--seed", verify_seed)->capture_default_str();
    verify->add_flag("--verbose", verbose, "Print every instance");

    auto* train = app.add_subcommand("train", "Train every seed of a run config");
    std::string train_config;
    bool resume = false;
    train->add_option("config", train_config)->required()->check(CLI::ExistingFile);
    train->add_flag("--resume", resume, "Continue from existing checkpoints");

    auto* compare = app.add_subcommand("compare", "Train two configs and compare Overall/Last scores");
    std::string cmp_a, cmp_b;
    compare->add_option("config_a", cmp_a)->required()->check(CLI::ExistingFile);
    compare->add_option("config_b", cmp_b)->required()->check(CLI::ExistingFile);

    auto* variation = app.add_subcommand("variation", "Q/A variation between policy snapshots of a run");
    std::string var_dir, var_csv;
    variation->add_option("run_dir", var_dir, "A seed directory containing env.mdp and snapshots/")->required();
    variation->add_option("--csv", var_csv, "Output path (default <run_dir>/variation.csv)");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*verify) return cmd_verify(scope, instances, verify_seed, verbose);
        if (*train) return cmd_train(train_config, resume, g);
        if (*compare) return cmd_compare(cmp_a, cmp_b, g);
        if (*variation) return cmd_variation(var_dir, var_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
