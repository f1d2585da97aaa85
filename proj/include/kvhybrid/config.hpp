// Experiment configuration: a sectioned key/value text format, strict
// parsing (unknown keys are errors), and a byte-stable resolved echo written
// next to every run's outputs.
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/budget.hpp"
#include "kvhybrid/distill.hpp"

namespace kvhybrid {

struct ExperimentConfig {
    // [dims]
    std::uint32_t d_h = 16;
    std::uint32_t d_phi = 8;
    std::uint32_t d_emb = 0;  // 0 = default 2*d_h, resolved on validate
    std::uint32_t layers = 1;
    std::uint32_t heads = 2;
    // [partition]
    std::uint32_t n_sink = 4;
    std::uint32_t n_tail = 16;
    // [traces]
    std::uint32_t n = 256;
    std::uint32_t queries_per_head = 100;
    double beta_min = 0.5;
    double beta_max = 8.0;
    std::uint64_t seed = 1;
    // [training]
    LossConfig loss;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint32_t epochs = 10;
    std::uint32_t batch_size = 32;
    // [evaluation]
    std::vector<double> fractions{0.01, 0.03, 0.05};
    std::uint64_t l_gen = 1;
    std::uint32_t diag_queries = 10;  // diagnostic queries per head
    std::uint32_t b_dtype = 2;
    // [tradeoff]
    std::uint32_t xi_points = 16;
    std::uint32_t gamma_points = 13;
    double k_phi_fraction = 0.01;

    void validate() {
        if (d_emb == 0) d_emb = 2 * d_h;
        synth().validate();  // covers dims/partition/traces
        loss.validate();
        if (d_phi == 0) throw std::invalid_argument("config: d_phi must be >= 1");
        if (lr < 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0)
            throw std::invalid_argument("config: bad optimizer settings");
        if (fractions.empty()) throw std::invalid_argument("config: empty fraction list");
        for (double f : fractions)
            if (!(f >= 0)) throw std::invalid_argument("config: negative budget fraction");
        if (l_gen < 1) throw std::invalid_argument("config: l_gen must be >= 1");
        if (diag_queries == 0) throw std::invalid_argument("config: diag queries must be >= 1");
        budget().validate();  // covers b_dtype
        if (xi_points < 2 || gamma_points < 2)
            throw std::invalid_argument("config: grid needs at least 2 points per axis");
        if (!(k_phi_fraction > 0))
            throw std::invalid_argument("config: k_phi_fraction must be > 0");
    }

    SynthConfig synth() const {
        SynthConfig s;
        s.layers = layers;
        s.heads = heads;
        s.d_h = d_h;
        s.n = n;
        s.n_sink = n_sink;
        s.n_tail = n_tail;
        s.queries_per_head = queries_per_head;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        return s;
    }

    BudgetConfig budget() const {
        BudgetConfig b;
        b.d_h = d_h;
        b.d_phi = d_phi;
        b.b_dtype = b_dtype;
        b.n_sink = n_sink;
        b.n_tail = n_tail;
        b.n = n;
        b.l_gen = l_gen;
        return b;
    }

    TrainConfig training(std::uint64_t shuffle_seed, std::size_t threads) const {
        TrainConfig t;
        t.loss = loss;
        t.lr = lr;
        t.beta1 = beta1;
        t.beta2 = beta2;
        t.adam_eps = adam_eps;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.shuffle_seed = shuffle_seed;
        t.threads = threads;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double parse_num(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    }
    if (pos != v.size())
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    double x = parse_num(key, v);
    if (x < 0 || x != double(std::uint64_t(x)))
        throw std::invalid_argument("config: " + key + " must be a non-negative integer");
    return std::uint64_t(x);
}

inline std::string fmt_cfg(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

}  // namespace detail

/// Parse the sectioned key/value text. Unknown sections or keys are errors so
/// typos cannot silently fall back to defaults.
inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config: unterminated section at line " +
                                            std::to_string(line_no));
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section != "dims" && section != "partition" && section != "traces" &&
                section != "training" && section != "evaluation" && section != "tradeoff")
                throw std::invalid_argument("config: unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key = value at line " +
                                        std::to_string(line_no));
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        std::string qual = section + "." + key;

        if (qual == "dims.d_h") cfg.d_h = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "dims.d_phi") cfg.d_phi = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "dims.d_emb") cfg.d_emb = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "dims.layers") cfg.layers = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "dims.heads") cfg.heads = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "partition.n_sink")
            cfg.n_sink = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "partition.n_tail")
            cfg.n_tail = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "traces.n") cfg.n = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "traces.queries_per_head")
            cfg.queries_per_head = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "traces.beta_min") cfg.beta_min = detail::parse_num(qual, value);
        else if (qual == "traces.beta_max") cfg.beta_max = detail::parse_num(qual, value);
        else if (qual == "traces.seed") cfg.seed = detail::parse_uint(qual, value);
        else if (qual == "training.tau") cfg.loss.tau = detail::parse_num(qual, value);
        else if (qual == "training.lambda_kl") cfg.loss.lambda_kl = detail::parse_num(qual, value);
        else if (qual == "training.lambda_top")
            cfg.loss.lambda_top = detail::parse_num(qual, value);
        else if (qual == "training.lambda_fp") cfg.loss.lambda_fp = detail::parse_num(qual, value);
        else if (qual == "training.lambda_z") cfg.loss.lambda_z = detail::parse_num(qual, value);
        else if (qual == "training.band") cfg.loss.band = detail::parse_num(qual, value);
        else if (qual == "training.knee") cfg.loss.knee = detail::parse_num(qual, value);
        else if (qual == "training.lr") cfg.lr = detail::parse_num(qual, value);
        else if (qual == "training.beta1") cfg.beta1 = detail::parse_num(qual, value);
        else if (qual == "training.beta2") cfg.beta2 = detail::parse_num(qual, value);
        else if (qual == "training.adam_eps") cfg.adam_eps = detail::parse_num(qual, value);
        else if (qual == "training.epochs")
            cfg.epochs = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "training.batch_size")
            cfg.batch_size = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "evaluation.fractions") {
            cfg.fractions.clear();
            std::string cur;
            for (char ch : value + ",") {
                if (ch == ',') {
                    std::string item = detail::trim(cur);
                    if (!item.empty()) cfg.fractions.push_back(detail::parse_num(qual, item));
                    cur.clear();
                } else {
                    cur += ch;
                }
            }
            if (cfg.fractions.empty())
                throw std::invalid_argument("config: evaluation.fractions is empty");
        } else if (qual == "evaluation.l_gen") cfg.l_gen = detail::parse_uint(qual, value);
        else if (qual == "evaluation.queries")
            cfg.diag_queries = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "evaluation.b_dtype")
            cfg.b_dtype = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "tradeoff.xi_points")
            cfg.xi_points = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "tradeoff.gamma_points")
            cfg.gamma_points = std::uint32_t(detail::parse_uint(qual, value));
        else if (qual == "tradeoff.k_phi_fraction")
            cfg.k_phi_fraction = detail::parse_num(qual, value);
        else
            throw std::invalid_argument("config: unknown key '" + key + "' in section [" +
                                        section + "]");
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

/// The fully resolved configuration as config-file text, fixed key order.
/// Written next to every run's outputs for provenance.
inline std::string resolved_config_ini(const ExperimentConfig& cfg) {
    using detail::fmt_cfg;
    std::string s;
    s += "[dims]\n";
    s += "d_h = " + std::to_string(cfg.d_h) + "\n";
    s += "d_phi = " + std::to_string(cfg.d_phi) + "\n";
    s += "d_emb = " + std::to_string(cfg.d_emb) + "\n";
    s += "layers = " + std::to_string(cfg.layers) + "\n";
    s += "heads = " + std::to_string(cfg.heads) + "\n";
    s += "\n[partition]\n";
    s += "n_sink = " + std::to_string(cfg.n_sink) + "\n";
    s += "n_tail = " + std::to_string(cfg.n_tail) + "\n";
    s += "\n[traces]\n";
    s += "n = " + std::to_string(cfg.n) + "\n";
    s += "queries_per_head = " + std::to_string(cfg.queries_per_head) + "\n";
    s += "beta_min = " + fmt_cfg(cfg.beta_min) + "\n";
    s += "beta_max = " + fmt_cfg(cfg.beta_max) + "\n";
    s += "seed = " + std::to_string(cfg.seed) + "\n";
    s += "\n[training]\n";
    s += "tau = " + fmt_cfg(cfg.loss.tau) + "\n";
    s += "lambda_kl = " + fmt_cfg(cfg.loss.lambda_kl) + "\n";
    s += "lambda_top = " + fmt_cfg(cfg.loss.lambda_top) + "\n";
    s += "lambda_fp = " + fmt_cfg(cfg.loss.lambda_fp) + "\n";
    s += "lambda_z = " + fmt_cfg(cfg.loss.lambda_z) + "\n";
    s += "band = " + fmt_cfg(cfg.loss.band) + "\n";
    s += "knee = " + fmt_cfg(cfg.loss.knee) + "\n";
    s += "lr = " + fmt_cfg(cfg.lr) + "\n";
    s += "beta1 = " + fmt_cfg(cfg.beta1) + "\n";
    s += "beta2 = " + fmt_cfg(cfg.beta2) + "\n";
    s += "adam_eps = " + fmt_cfg(cfg.adam_eps) + "\n";
    s += "epochs = " + std::to_string(cfg.epochs) + "\n";
    s += "batch_size = " + std::to_string(cfg.batch_size) + "\n";
    s += "\n[evaluation]\n";
    s += "fractions = ";
    for (std::size_t i = 0; i < cfg.fractions.size(); ++i)
        s += (i ? "," : "") + fmt_cfg(cfg.fractions[i]);
    s += "\n";
    s += "l_gen = " + std::to_string(cfg.l_gen) + "\n";
    s += "queries = " + std::to_string(cfg.diag_queries) + "\n";
    s += "b_dtype = " + std::to_string(cfg.b_dtype) + "\n";
    s += "\n[tradeoff]\n";
    s += "xi_points = " + std::to_string(cfg.xi_points) + "\n";
    s += "gamma_points = " + std::to_string(cfg.gamma_points) + "\n";
    s += "k_phi_fraction = " + fmt_cfg(cfg.k_phi_fraction) + "\n";
    return s;
}

}  // namespace kvhybrid
