#pragma once

// Plain-text MDP format.
//
//   <states> <actions> <discount>
//   reward rows:      <states> lines of <actions> numbers
//   transition rows:  <states>*<actions> lines of <states> numbers, ordered (s, a)
//   initial:          one line of <states> numbers
//   terminal:         one line of <states> 0/1 flags
//
// Numbers are written in shortest round-trip form, so a file whose values
// carry at most 15 significant digits is reproduced byte for byte.

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>

#include "dae/mdp.hpp"

namespace dae {

inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    if (res.ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
    return {buf, res.ptr};
}

inline double parse_double(const std::string& text) {
    double x = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    if (first != last && *first == '+') ++first;
    auto res = std::from_chars(first, last, x);
    if (res.ec != std::errc() || res.ptr != last)
        throw std::invalid_argument("not a number: '" + text + "'");
    return x;
}

inline void write_mdp(std::ostream& os, const FiniteMdp& mdp) {
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    os << S << ' ' << A << ' ' << format_double(mdp.discount()) << '\n';
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) os << (a ? " " : "") << format_double(mdp.r(s, a));
        os << '\n';
    }
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            auto row = mdp.transition_row(s, a);
            for (std::size_t n = 0; n < S; ++n) os << (n ? " " : "") << format_double(row[n]);
            os << '\n';
        }
    for (std::size_t s = 0; s < S; ++s) os << (s ? " " : "") << format_double(mdp.initial_dist()[s]);
    os << '\n';
    for (std::size_t s = 0; s < S; ++s) os << (s ? " " : "") << (mdp.is_terminal(s) ? 1 : 0);
    os << '\n';
}

inline std::string to_text(const FiniteMdp& mdp) {
    std::ostringstream os;
    write_mdp(os, mdp);
    return os.str();
}

inline FiniteMdp read_mdp(std::istream& is) {
    auto next = [&](const char* what) {
        std::string tok;
        if (!(is >> tok)) throw std::invalid_argument(std::string("read_mdp: missing ") + what);
        return tok;
    };
    auto next_count = [&](const char* what) {
        const std::string tok = next(what);
        std::size_t value = 0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), value);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
            throw std::invalid_argument(std::string("read_mdp: bad ") + what + " '" + tok + "'");
        return value;
    };
    const std::size_t S = next_count("state count");
    const std::size_t A = next_count("action count");
    const double gamma = parse_double(next("discount"));
    Matrix reward(S, A);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) reward(s, a) = parse_double(next("reward"));
    std::vector<double> transition(S * A * S);
    for (double& p : transition) p = parse_double(next("transition probability"));
    Vector initial(S);
    for (std::size_t s = 0; s < S; ++s) initial[s] = parse_double(next("initial probability"));
    std::vector<bool> terminal(S);
    for (std::size_t s = 0; s < S; ++s) {
        const std::string flag = next("terminal flag");
        if (flag != "0" && flag != "1") throw std::invalid_argument("read_mdp: terminal flag must be 0 or 1");
        terminal[s] = flag == "1";
    }
    return {S, A, std::move(transition), std::move(reward), gamma, std::move(initial), std::move(terminal)};
}

inline FiniteMdp mdp_from_text(const std::string& text) {
    std::istringstream is(text);
    return read_mdp(is);
}

}  // namespace dae
