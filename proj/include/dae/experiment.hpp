#pragma once

// Runs a configured experiment for one seed and manages its directory:
//
//   <out>/<run>/seed_<k>/metrics.csv       one row per iteration
//   <out>/<run>/seed_<k>/episodes.csv      every finished training episode
//   <out>/<run>/seed_<k>/checkpoint.params full trainer state, for --resume
//   <out>/<run>/seed_<k>/env.mdp           the environment, for replay
//   <out>/<run>/seed_<k>/snapshots/policy_<iteration>.params

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dae/config.hpp"
#include "dae/envs.hpp"
#include "dae/mdp_io.hpp"
#include "dae/training.hpp"

namespace dae {

namespace fs = std::filesystem;

inline fs::path seed_dir(const fs::path& out, const RunSpec& spec, std::uint64_t seed) {
    return out / spec.name / ("seed_" + std::to_string(seed));
}

inline fs::path snapshot_path(const fs::path& dir, std::size_t iteration) {
    std::ostringstream name;
    name << "policy_" << std::setw(6) << std::setfill('0') << iteration << ".params";
    return dir / "snapshots" / name.str();
}

inline void save_policy(const fs::path& path, const TabularPolicy& pi) {
    ParamVector p = make_params({{"logits", 0, pi.n_states(), pi.n_actions()}});
    p.block("logits") = pi.logits();
    detail::save_params_file(path, p);
}

inline TabularPolicy load_policy(const fs::path& path) {
    return TabularPolicy(Matrix(detail::load_params_file(path).block("logits")));
}

/// Policy snapshots in a seed directory, ordered by iteration.
inline std::vector<std::pair<std::size_t, fs::path>> list_snapshots(const fs::path& dir) {
    std::vector<std::pair<std::size_t, fs::path>> out;
    const fs::path snaps = dir / "snapshots";
    if (!fs::is_directory(snaps)) return out;
    for (const auto& entry : fs::directory_iterator(snaps)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("policy_", 0) != 0 || entry.path().extension() != ".params") continue;
        out.emplace_back(std::stoull(name.substr(7, name.size() - 7 - 7)), entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << text;
    }
    fs::rename(tmp, path);
}

struct SeedResult {
    std::uint64_t seed = 0;
    TrainingMetrics metrics;
    fs::path dir;
};

namespace detail {

template <class Trainer>
SeedResult drive(Trainer& trainer, const FiniteMdp& mdp, const RunSpec& spec, std::uint64_t seed,
                 const fs::path& dir, bool resume) {
    fs::create_directories(dir);
    const fs::path ck = dir / "checkpoint.params";
    if (resume && fs::exists(ck)) trainer.restore(load_params_file(ck));
    write_text_file(dir / "env.mdp", to_text(mdp));
    if (spec.snapshot_every > 0) {
        fs::create_directories(dir / "snapshots");
        trainer.on_policy = [&](std::size_t it, const TabularPolicy& pi) {
            if (it % spec.snapshot_every == 0) save_policy(snapshot_path(dir, it), pi);
        };
    }
    auto flush = [&] {
        const fs::path tmp = ck.string() + ".tmp";
        save_params_file(tmp, trainer.checkpoint());
        fs::rename(tmp, ck);
        std::ostringstream m, e;
        write_metrics_csv(m, trainer.metrics());
        write_episodes_csv(e, trainer.metrics());
        write_text_file(dir / "metrics.csv", m.str());
        write_text_file(dir / "episodes.csv", e.str());
    };
    while (!trainer.done()) {
        trainer.step();
        if (spec.checkpoint_every > 0 && trainer.iteration() % spec.checkpoint_every == 0) flush();
    }
    if (spec.snapshot_every > 0 && trainer.iteration() % spec.snapshot_every == 0)
        save_policy(snapshot_path(dir, trainer.iteration()), trainer.policy());
    flush();
    return {seed, trainer.metrics(), dir};
}

}  // namespace detail

/// Trains one seed of `spec`, writing its directory under `out`. With
/// `resume`, an existing checkpoint is loaded and training continues from it.
inline SeedResult run_seed(const RunSpec& spec, std::uint64_t seed, const fs::path& out, bool resume,
                           std::size_t actor_threads = 1) {
    const EnvInstance env = make_env(spec.env);
    const fs::path dir = seed_dir(out, spec, seed);
    if (spec.algorithm == Algorithm::ActorCritic) {
        ActorCriticConfig cfg = spec.actor_critic;
        cfg.seed = seed;
        ActorCriticTrainer trainer(env.mdp, cfg);
        return detail::drive(trainer, env.mdp, spec, seed, dir, resume);
    }
    PpoConfig cfg = spec.ppo;
    cfg.seed = seed;
    cfg.threads = actor_threads;
    PpoDaeTrainer trainer(env.mdp, cfg);
    return detail::drive(trainer, env.mdp, spec, seed, dir, resume);
}

/// All seeds of `spec`, up to `threads` at a time. Results are in seed order
/// and do not depend on `threads`.
inline std::vector<SeedResult> run_all_seeds(const RunSpec& spec, const fs::path& out, bool resume,
                                             std::size_t threads) {
    std::vector<SeedResult> results(spec.seeds.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, spec.seeds.size()));
    const std::size_t actor_threads = std::max<std::size_t>(1, threads / workers);
    detail::parallel_for(spec.seeds.size(), workers, [&](std::size_t i) {
        results[i] = run_seed(spec, spec.seeds[i], out, resume, actor_threads);
    });
    return results;
}

}  // namespace dae
