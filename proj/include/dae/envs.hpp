#pragma once

// Concrete environments: the action-independent chain, the bootstrapping
// counterexample and a seeded random-MDP generator.

#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "dae/mdp.hpp"
#include "dae/mdp_io.hpp"
#include "dae/rng.hpp"

namespace dae {

struct ChainEnvSpec {
    std::size_t n_states = 128;
    std::uint64_t reward_swap_seed = 0;
    double discount = 0.99;
    bool swap_rewards = true;
};

/// Chain s_1 -> s_2 -> ... -> s_n -> terminal. At every state exactly one of
/// the two actions pays 1; the transition ignores the action.
struct ChainEnv {
    FiniteMdp mdp;
    std::vector<std::size_t> high_action;  // reward-1 action per chain state

    std::size_t length() const noexcept { return high_action.size(); }

    /// Closed-form advantage: A(s, high) = 1 - pi(high|s), A(s, low) = -pi(high|s).
    Matrix true_advantage(const TabularPolicy& policy) const {
        Matrix adv = Matrix::Zero(mdp.n_states(), 2);
        for (std::size_t s = 0; s < length(); ++s) {
            const std::size_t hi = high_action[s];
            const double p_hi = policy.prob(s, hi);
            adv(s, hi) = 1.0 - p_hi;
            adv(s, 1 - hi) = -p_hi;
        }
        return adv;
    }

    /// Undiscounted expected return: sum_s pi(high|s).
    double true_return(const TabularPolicy& policy) const {
        double g = 0.0;
        for (std::size_t s = 0; s < length(); ++s) g += policy.prob(s, high_action[s]);
        return g;
    }

    /// Policy that picks the reward-1 action with probability `p_high` everywhere.
    TabularPolicy constant_policy(double p_high) const {
        Matrix probs(mdp.n_states(), 2);
        for (std::size_t s = 0; s < mdp.n_states(); ++s) {
            const std::size_t hi = s < length() ? high_action[s] : 0;
            probs(s, hi) = p_high;
            probs(s, 1 - hi) = 1.0 - p_high;
        }
        return TabularPolicy::from_probabilities(probs);
    }
};

inline ChainEnv build_chain(const ChainEnvSpec& spec) {
    if (spec.n_states < 1) throw std::invalid_argument("build_chain: need at least one state");
    const std::size_t n = spec.n_states, S = n + 1, A = 2;
    std::vector<double> transition(S * A * S, 0.0);
    Matrix reward = Matrix::Zero(S, A);
    std::vector<std::size_t> high(n, 0);
    for (std::size_t s = 0; s < n; ++s) {
        if (spec.swap_rewards) {
            CounterRng coin(stream_key(spec.reward_swap_seed, {0x636861696eULL, s}));
            high[s] = coin.uniform() < 0.5 ? 1 : 0;
        }
        reward(s, high[s]) = 1.0;
        for (std::size_t a = 0; a < A; ++a) transition[(s * A + a) * S + s + 1] = 1.0;
    }
    for (std::size_t a = 0; a < A; ++a) transition[(n * A + a) * S + n] = 1.0;
    Vector initial = Vector::Zero(S);
    initial[0] = 1.0;
    std::vector<bool> terminal(S, false);
    terminal[n] = true;
    return {FiniteMdp(S, A, std::move(transition), std::move(reward), spec.discount, std::move(initial),
                      std::move(terminal)),
            std::move(high)};
}

/// Indices of the counterexample's states and actions.
struct Counterexample {
    static constexpr std::size_t kStart = 0, kUp = 1, kDown = 2, kTerminal = 3;
    static constexpr std::size_t kActionUp = 0, kActionDown = 1;
};

/// Four-state MDP: s --u--> s_u --> (r = 1) end, s --d--> s_d --> (r = 0) end.
/// No reward is paid at s. Undiscounted (gamma = 1) and episodic.
inline FiniteMdp build_counterexample() {
    using C = Counterexample;
    const std::size_t S = 4, A = 2;
    std::vector<double> transition(S * A * S, 0.0);
    auto set = [&](std::size_t s, std::size_t a, std::size_t n) { transition[(s * A + a) * S + n] = 1.0; };
    Matrix reward = Matrix::Zero(S, A);
    set(C::kStart, C::kActionUp, C::kUp);
    set(C::kStart, C::kActionDown, C::kDown);
    for (std::size_t a = 0; a < A; ++a) {
        set(C::kUp, a, C::kTerminal);
        set(C::kDown, a, C::kTerminal);
        set(C::kTerminal, a, C::kTerminal);
        reward(C::kUp, a) = 1.0;
    }
    Vector initial = Vector::Zero(S);
    initial[C::kStart] = 1.0;
    return {S, A, std::move(transition), std::move(reward), 1.0, std::move(initial), {false, false, false, true}};
}

struct RandomMdpSpec {
    std::size_t n_states = 4;
    std::size_t n_actions = 2;
    std::size_t branching = 2;
    double discount = 0.9;
    std::uint64_t seed = 0;
    bool episodic = false;
};

/// Seeded random MDP. Rewards are uniform in [-1, 1]; each (s, a) has
/// `branching` successors with random weights. When episodic, the last state
/// is absorbing and every non-terminal (s, a) can move there, so every policy
/// terminates with probability 1.
inline FiniteMdp build_random(const RandomMdpSpec& spec) {
    const std::size_t S = spec.n_states, A = spec.n_actions;
    if (S == 0 || A == 0) throw std::invalid_argument("build_random: need at least one state and one action");
    if (spec.branching < 1 || spec.branching > S)
        throw std::invalid_argument("build_random: branching must lie in [1, n_states]");
    if (spec.episodic && S < 2) throw std::invalid_argument("build_random: episodic MDP needs >= 2 states");
    CounterRng rng(stream_key(spec.seed, {0x72616e646f6dULL}));
    const std::size_t term = S - 1;
    std::vector<double> transition(S * A * S, 0.0);
    Matrix reward(S, A);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) {
            double* row = transition.data() + (s * A + a) * S;
            if (spec.episodic && s == term) {
                row[term] = 1.0;
                reward(s, a) = 0.0;
                continue;
            }
            reward(s, a) = 2.0 * rng.uniform() - 1.0;
            // Partial Fisher-Yates pick of distinct successors.
            std::vector<std::size_t> order(S);
            for (std::size_t i = 0; i < S; ++i) order[i] = i;
            for (std::size_t i = 0; i < spec.branching; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(S - i));
                std::swap(order[i], order[std::min(j, S - 1)]);
            }
            std::vector<std::size_t> succ(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.branching));
            if (spec.episodic && std::find(succ.begin(), succ.end(), term) == succ.end()) succ.back() = term;
            double total = 0.0;
            std::vector<double> w(succ.size());
            for (double& x : w) total += (x = 0.1 + rng.uniform());
            for (std::size_t i = 0; i < succ.size(); ++i) row[succ[i]] += w[i] / total;
            // Renormalise so the row sums to 1 up to a single rounding.
            double sum = 0.0;
            for (std::size_t n = 0; n < S; ++n) sum += row[n];
            row[succ.front()] += 1.0 - sum;
        }
    }
    const std::size_t live = spec.episodic ? S - 1 : S;
    Vector initial = Vector::Zero(S);
    double total = 0.0;
    for (std::size_t s = 0; s < live; ++s) {
        // Roughly half the states start with positive probability; state 0 always does.
        if (s == 0 || rng.uniform() < 0.5) total += (initial[s] = 0.1 + rng.uniform());
    }
    initial /= total;
    initial[0] += 1.0 - initial.sum();
    std::vector<bool> terminal(S, false);
    if (spec.episodic) terminal[term] = true;
    return {S, A, std::move(transition), std::move(reward), spec.discount, std::move(initial), std::move(terminal)};
}

/// An environment resolved from its configuration name.
struct EnvInstance {
    std::string name;
    FiniteMdp mdp;
    std::optional<ChainEnv> chain;
};

namespace detail {

inline std::map<std::string, std::string> parse_env_params(std::string_view text, std::string_view env) {
    std::map<std::string, std::string> out;
    while (!text.empty()) {
        const auto comma = text.find(',');
        const std::string_view item = text.substr(0, comma);
        text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("environment '" + std::string(env) + "': expected key=value, got '" +
                                        std::string(item) + "'");
        out[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
    }
    return out;
}

inline std::size_t parse_count(const std::string& text, const std::string& key) {
    std::size_t v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size())
        throw std::invalid_argument("environment parameter '" + key + "' must be a non-negative integer");
    return v;
}

}  // namespace detail

/// Resolves "chain128", "chain<N>[:swap_seed=..,discount=..,swap=0|1]",
/// "counterexample" and "random:states=..,actions=..,branching=..,discount=..,seed=..,episodic=0|1".
inline EnvInstance make_env(const std::string& name) {
    const auto colon = name.find(':');
    const std::string head = name.substr(0, colon);
    const auto params =
        detail::parse_env_params(colon == std::string::npos ? std::string_view{} : std::string_view(name).substr(colon + 1), name);
    auto check_keys = [&](std::initializer_list<const char*> allowed) {
        for (const auto& [k, v] : params) {
            bool ok = false;
            for (const char* a : allowed) ok = ok || k == a;
            if (!ok) throw std::invalid_argument("environment '" + name + "': unknown parameter '" + k + "'");
        }
    };
    if (head == "counterexample") {
        check_keys({});
        return {name, build_counterexample(), std::nullopt};
    }
    if (head.rfind("chain", 0) == 0) {
        check_keys({"swap_seed", "discount", "swap"});
        ChainEnvSpec spec;
        if (head.size() > 5) spec.n_states = detail::parse_count(head.substr(5), "chain length");
        if (auto it = params.find("swap_seed"); it != params.end())
            spec.reward_swap_seed = detail::parse_count(it->second, "swap_seed");
        if (auto it = params.find("discount"); it != params.end()) spec.discount = parse_double(it->second);
        if (auto it = params.find("swap"); it != params.end()) spec.swap_rewards = it->second != "0";
        ChainEnv chain = build_chain(spec);
        FiniteMdp mdp = chain.mdp;
        return {name, std::move(mdp), std::move(chain)};
    }
    if (head == "random") {
        check_keys({"states", "actions", "branching", "discount", "seed", "episodic"});
        RandomMdpSpec spec;
        for (const auto& [k, v] : params) {
            if (k == "states") spec.n_states = detail::parse_count(v, k);
            else if (k == "actions") spec.n_actions = detail::parse_count(v, k);
            else if (k == "branching") spec.branching = detail::parse_count(v, k);
            else if (k == "discount") spec.discount = parse_double(v);
            else if (k == "seed") spec.seed = detail::parse_count(v, k);
            else if (k == "episodic") spec.episodic = v != "0";
        }
        return {name, build_random(spec), std::nullopt};
    }
    throw std::invalid_argument("unknown environment '" + name + "'");
}

}  // namespace dae
