#pragma once

// Run configuration files: flat `key = value` lines grouped under `[section]`
// headers, `#` comments. Every key is addressed as "section.key". Errors name
// the file, line and offending key.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dae/estimators.hpp"
#include "dae/mdp_io.hpp"
#include "dae/training.hpp"

namespace dae {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Config {
public:
    static Config parse(std::istream& is, const std::string& source = "<config>") {
        Config cfg;
        cfg.source_ = source;
        std::string line, section;
        for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string text = trim(line);
            if (text.empty()) continue;
            if (text.front() == '[') {
                if (text.back() != ']' || text.size() < 3)
                    throw ConfigError(source + ":" + std::to_string(lineno) + ": malformed section header '" + text + "'");
                section = trim(text.substr(1, text.size() - 2));
                continue;
            }
            const auto eq = text.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value, got '" + text + "'");
            const std::string name = trim(text.substr(0, eq));
            if (name.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
            const std::string key = section.empty() ? name : section + "." + name;
            if (cfg.entries_.count(key))
                throw ConfigError(source + ":" + std::to_string(lineno) + ": key '" + key + "' is set twice");
            cfg.entries_[key] = {trim(text.substr(eq + 1)), lineno, false};
        }
        return cfg;
    }

    static Config parse_string(const std::string& text, const std::string& source = "<config>") {
        std::istringstream is(text);
        return parse(is, source);
    }

    static Config load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file " + path.string());
        return parse(is, path.string());
    }

    const std::string& source() const noexcept { return source_; }
    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    bool has_section(const std::string& section) const {
        for (const auto& [k, e] : entries_)
            if (k.rfind(section + ".", 0) == 0) return true;
        return false;
    }

    std::string get_string(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError(source_ + ": missing required key '" + key + "'");
        it->second.used = true;
        return it->second.value;
    }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? get_string(key) : fallback;
    }

    double get_real(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        const std::string v = get_string(key);
        try {
            return parse_double(v);
        } catch (const std::exception&) {
            throw error(key, "expected a real number, got '" + v + "'");
        }
    }

    std::size_t get_count(const std::string& key, std::size_t fallback) const {
        if (!has(key)) return fallback;
        return parse_count(key, get_string(key));
    }

    bool get_flag(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = get_string(key);
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw error(key, "expected true or false, got '" + v + "'");
    }

    /// Comma-separated counts. With `ranges`, "a-b" expands to the inclusive range.
    std::vector<std::size_t> get_counts(const std::string& key, std::vector<std::size_t> fallback,
                                        bool ranges = false) const {
        if (!has(key)) return fallback;
        return parse_count_list(key, get_string(key), ranges);
    }

    std::vector<std::size_t> parse_count_list(const std::string& key, const std::string& text, bool ranges) const {
        std::vector<std::size_t> out;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) continue;
            const auto dash = item.find('-');
            if (ranges && dash != std::string::npos && dash > 0) {
                const std::size_t lo = parse_count(key, item.substr(0, dash));
                const std::size_t hi = parse_count(key, item.substr(dash + 1));
                if (hi < lo) throw error(key, "empty range '" + item + "'");
                for (std::size_t x = lo; x <= hi; ++x) out.push_back(x);
            } else {
                out.push_back(parse_count(key, item));
            }
        }
        if (out.empty()) throw error(key, "expected a non-empty list");
        return out;
    }

    /// Throws on the first key that no getter has read.
    void reject_unused() const {
        for (const auto& [k, e] : entries_)
            if (!e.used) throw ConfigError(source_ + ":" + std::to_string(e.line) + ": unknown key '" + k + "'");
    }

    ConfigError error(const std::string& key, const std::string& what) const {
        const auto it = entries_.find(key);
        const std::string where = it == entries_.end() ? source_ : source_ + ":" + std::to_string(it->second.line);
        return ConfigError(where + ": key '" + key + "': " + what);
    }

private:
    struct Entry {
        std::string value;
        std::size_t line = 0;
        mutable bool used = false;
    };

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::size_t parse_count(const std::string& key, const std::string& text) const {
        std::size_t v = 0;
        const std::string t = trim(text);
        const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
        if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
            throw error(key, "expected a non-negative integer, got '" + text + "'");
        return v;
    }

    std::string source_;
    std::map<std::string, Entry> entries_;
};

enum class Algorithm { ActorCritic, PpoDae };

/// Everything needed to run one configured experiment.
struct RunSpec {
    std::string name;
    Algorithm algorithm = Algorithm::ActorCritic;
    std::string env = "chain128";
    Estimator estimator = Estimator::Dae;
    std::vector<std::uint64_t> seeds = {0};
    std::size_t iterations = 1000;
    std::size_t checkpoint_every = 100;
    std::size_t snapshot_every = 0;
    ActorCriticConfig actor_critic;
    PpoConfig ppo;
};

inline RunSpec load_run_spec(const Config& c, const std::string& default_name = "run") {
    RunSpec spec;
    spec.name = c.get_string("run.name", default_name);
    if (spec.name.empty() || spec.name.find('/') != std::string::npos)
        throw c.error("run.name", "must be a non-empty name without '/'");
    const std::string algo = c.get_string("run.algorithm", "actor_critic");
    if (algo == "actor_critic") spec.algorithm = Algorithm::ActorCritic;
    else if (algo == "ppo") spec.algorithm = Algorithm::PpoDae;
    else throw c.error("run.algorithm", "expected actor_critic or ppo, got '" + algo + "'");
    spec.env = c.get_string("run.env", spec.env);
    try {
        spec.estimator = parse_estimator(c.get_string("run.estimator"));
    } catch (const std::invalid_argument& e) {
        throw c.error("run.estimator", e.what());
    }
    spec.seeds.clear();
    for (auto s : c.get_counts("run.seeds", {0}, true)) spec.seeds.push_back(s);
    spec.iterations = c.get_count("run.iterations", spec.algorithm == Algorithm::PpoDae ? 200 : 1000);
    spec.checkpoint_every = c.get_count("run.checkpoint_every", spec.checkpoint_every);
    spec.snapshot_every = c.get_count("run.snapshot_every", spec.snapshot_every);

    if (spec.algorithm == Algorithm::ActorCritic) {
        if (c.has_section("ppo")) throw ConfigError(c.source() + ": section [ppo] is not used by algorithm actor_critic");
        auto& a = spec.actor_critic;
        a.iterations = spec.iterations;
        a.estimator = spec.estimator;
        a.trajectories_per_iter = c.get_count("actor_critic.trajectories_per_iter", a.trajectories_per_iter);
        a.value_grads_per_iter = c.get_count("actor_critic.value_grads_per_iter", a.value_grads_per_iter);
        a.policy_grads_per_iter = c.get_count("actor_critic.policy_grads_per_iter", a.policy_grads_per_iter);
        a.discount = c.get_real("actor_critic.discount", a.discount);
        a.lr_value = c.get_real("actor_critic.lr_value", a.lr_value);
        a.lr_policy = c.get_real("actor_critic.lr_policy", a.lr_policy);
        a.adam_beta1 = c.get_real("actor_critic.adam_beta1", a.adam_beta1);
        a.adam_beta2 = c.get_real("actor_critic.adam_beta2", a.adam_beta2);
        a.adam_epsilon = c.get_real("actor_critic.adam_epsilon", a.adam_epsilon);
        a.gae_lambda = c.get_real("actor_critic.gae_lambda", a.gae_lambda);
        a.hidden = c.get_counts("actor_critic.hidden", a.hidden);
        a.max_episode_steps = c.get_count("actor_critic.max_episode_steps", a.max_episode_steps);
        try {
            a.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(c.source() + ": " + e.what());
        }
    } else {
        if (c.has_section("actor_critic"))
            throw ConfigError(c.source() + ": section [actor_critic] is not used by algorithm ppo");
        if (spec.estimator != Estimator::Dae)
            throw c.error("run.estimator", "algorithm ppo supports only estimator dae");
        auto& p = spec.ppo;
        p.iterations = spec.iterations;
        p.n_actors = c.get_count("ppo.n_actors", p.n_actors);
        p.n_steps = c.get_count("ppo.n_steps", p.n_steps);
        p.n_epochs = c.get_count("ppo.n_epochs", p.n_epochs);
        p.batch_trajectories = c.get_count("ppo.batch_trajectories", p.batch_trajectories);
        p.clip_epsilon = c.get_real("ppo.clip_epsilon", p.clip_epsilon);
        p.beta_v = c.get_real("ppo.beta_v", p.beta_v);
        p.beta_entropy = c.get_real("ppo.beta_entropy", p.beta_entropy);
        p.discount = c.get_real("ppo.discount", p.discount);
        p.learning_rate = c.get_real("ppo.learning_rate", p.learning_rate);
        p.adam_beta1 = c.get_real("ppo.adam_beta1", p.adam_beta1);
        p.adam_beta2 = c.get_real("ppo.adam_beta2", p.adam_beta2);
        p.adam_epsilon = c.get_real("ppo.adam_epsilon", p.adam_epsilon);
        p.anneal = c.get_flag("ppo.anneal", p.anneal);
        p.hidden = c.get_counts("ppo.hidden", p.hidden);
        try {
            p.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(c.source() + ": " + e.what());
        }
    }
    c.reject_unused();
    return spec;
}

inline RunSpec load_run_spec(const std::filesystem::path& path) {
    return load_run_spec(Config::load(path), path.stem().string());
}

}  // namespace dae
