// Command-line driver: wires trace generation, feature-map training, cache
// construction, decoding, diagnostics, budget accounting, and the trade-off
// map into reproducible runs. Every command writes its resolved configuration
// next to its outputs and is byte-deterministic given (config, seed).
//
// Exit codes: 0 success, 1 usage/config error, 2 data-format error,
//             3 infeasible-budget request.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvhybrid/attention.hpp"
#include "kvhybrid/budget.hpp"
#include "kvhybrid/completion_cache.hpp"
#include "kvhybrid/config.hpp"
#include "kvhybrid/diagnostics.hpp"
#include "kvhybrid/distill.hpp"
#include "kvhybrid/feature_map.hpp"
#include "kvhybrid/tradeoff.hpp"

namespace fs = std::filesystem;
using namespace kvhybrid;

namespace {

// A budget-derived retrieval request that cannot be met (k_hyb infeasible).
struct infeasible_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error(format_fault::io, "cannot open for write: " + path.string());
    out.write(text.data(), std::streamsize(text.size()));
    out.close();
    if (!out) throw format_error(format_fault::io, "write failed: " + path.string());
}

struct Args {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t threads = 1;

    // per-command inputs
    std::string traces_path;
    std::string states_path;
    std::string checkpoint_path;
    std::string cache_path;
    std::string resume_path;
    std::string components_path;
    std::string mode;
    double budget_f = -1.0;
    std::int64_t explicit_k = -1;
    std::int64_t l_gen_flag = -1;
    std::string fractions_csv;
    double k_phi_flag = -1.0;
};

ExperimentConfig resolve_config(const Args& a) {
    ExperimentConfig cfg;
    if (!a.config_path.empty()) cfg = load_config(a.config_path);
    else cfg.validate();
    if (a.seed_set) cfg.seed = a.seed;
    if (a.l_gen_flag >= 1) {
        cfg.l_gen = std::uint64_t(a.l_gen_flag);
        cfg.validate();
    }
    return cfg;
}

fs::path ensure_out_dir(const Args& a) {
    if (a.out_dir.empty()) throw std::invalid_argument("--out-dir is required");
    fs::path dir(a.out_dir);
    fs::create_directories(dir);
    return dir;
}

void echo_config(const ExperimentConfig& cfg, const fs::path& dir) {
    write_text(dir / "resolved_config.ini", resolved_config_ini(cfg));
}

// Shared loader for the decode/diagnose triple with cross-file validation.
struct RunInputs {
    StateFile states;
    PhiBank bank;
    CacheBank caches;
    Partition part{0, 0, 0};
};

RunInputs load_run_inputs(const Args& a) {
    if (a.states_path.empty() || a.checkpoint_path.empty() || a.cache_path.empty())
        throw std::invalid_argument("--states, --checkpoint and --cache are all required");
    RunInputs in;
    in.states = load_states(a.states_path);
    in.bank = load_checkpoint(a.checkpoint_path);
    in.caches = cache_deserialize(a.cache_path);
    if (in.states.heads.empty())
        throw format_error(format_fault::inconsistent, "state file has no heads");
    if (in.bank.d_h != in.states.d_h || in.caches.d_h != in.states.d_h ||
        in.caches.d_phi != in.bank.d_phi)
        throw format_error(format_fault::inconsistent,
                           "dimension mismatch across states/checkpoint/cache");
    std::uint32_t n = in.states.heads.front().state.n();
    for (const SyntheticHead& sh : in.states.heads) {
        if (sh.state.n() != n)
            throw format_error(format_fault::inconsistent,
                               "state file mixes prefill lengths");
        if (sh.layer >= in.bank.layers || sh.head >= in.bank.heads)
            throw format_error(format_fault::inconsistent,
                               "state head outside checkpoint's (layer, head) range");
        if (sh.layer >= in.caches.layers || sh.head >= in.caches.kv_heads)
            throw format_error(format_fault::inconsistent,
                               "state head outside cache bank's (layer, head) range");
    }
    in.part = make_partition(n, in.states.n_sink, in.states.n_tail);
    if (in.part.mid_size() != in.caches.mid_size)
        throw format_error(format_fault::inconsistent,
                           "cache mid size does not match state partition");
    return in;
}

// Budget geometry for a loaded run: file dims are authoritative, the config
// contributes only the storage width.
BudgetConfig run_budget(const RunInputs& in, const ExperimentConfig& cfg) {
    BudgetConfig bc;
    bc.d_h = in.states.d_h;
    bc.d_phi = in.bank.d_phi;
    bc.b_dtype = cfg.b_dtype;
    bc.n_sink = in.states.n_sink;
    bc.n_tail = in.states.n_tail;
    bc.n = in.part.n;
    bc.l_gen = cfg.l_gen;
    bc.validate();
    return bc;
}

// ---------------------------------------------------------------------------
// gen-traces
// ---------------------------------------------------------------------------
int cmd_gen_traces(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    SynthConfig sc = cfg.synth();
    Rng rng(cfg.seed);
    std::vector<SyntheticHead> heads = generate_synthetic_heads(rng, sc);
    Partition part = sc.partition();

    StateFile sf{cfg.d_h, cfg.n_sink, cfg.n_tail, heads};
    save_states((dir / "states.bin").string(), sf);
    TraceFile tf{cfg.d_h, cfg.n_sink, cfg.n_tail, traces_from_heads(heads, part)};
    save_traces((dir / "traces.bin").string(), tf);
    traces_to_jsonl((dir / "traces.jsonl").string(), tf);
    echo_config(cfg, dir);
    std::cout << "gen-traces: " << heads.size() << " heads, " << tf.traces.size()
              << " traces (d_h=" << cfg.d_h << ", N=" << cfg.n
              << ", mid=" << part.mid_size() << ", seed=" << cfg.seed << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-phi
// ---------------------------------------------------------------------------
int cmd_train_phi(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    if (a.traces_path.empty()) throw std::invalid_argument("--traces is required");
    TraceFile tf = load_traces(a.traces_path);
    if (tf.d_h != cfg.d_h)
        throw std::invalid_argument("trace d_h does not match config d_h");

    PhiBank bank;
    if (a.resume_path.empty()) {
        Rng rng(cfg.seed);
        bank = make_phi_bank(rng, cfg.layers, cfg.heads, cfg.d_h, cfg.d_emb, cfg.d_phi);
    } else {
        bank = load_checkpoint(a.resume_path);
        if (bank.d_h != cfg.d_h || bank.d_emb != cfg.d_emb || bank.d_phi != cfg.d_phi ||
            bank.layers != cfg.layers || bank.heads != cfg.heads)
            throw std::invalid_argument("resume checkpoint does not match config dims");
    }

    TrainConfig tc = cfg.training(cfg.seed + 1, a.threads);
    TrainReport rep = train(tf.traces, bank, tc);
    for (const std::string& w : rep.warnings) std::cerr << "warning: " << w << "\n";

    save_checkpoint((dir / "phi.ckpt").string(), bank);
    std::string hist = "epoch,mean_loss\n0," + g17(rep.initial_loss) + "\n";
    for (std::size_t e = 0; e < rep.epoch_mean_loss.size(); ++e)
        hist += std::to_string(e + 1) + "," + g17(rep.epoch_mean_loss[e]) + "\n";
    write_text(dir / "loss_history.csv", hist);
    echo_config(cfg, dir);
    std::cout << "train-phi: " << tf.traces.size() << " traces, " << cfg.epochs
              << " epochs, loss " << g17(rep.initial_loss) << " -> " << g17(rep.final_loss)
              << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// build-cache
// ---------------------------------------------------------------------------
int cmd_build_cache(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    if (a.states_path.empty() || a.checkpoint_path.empty())
        throw std::invalid_argument("--states and --checkpoint are required");
    StateFile sf = load_states(a.states_path);
    PhiBank bank = load_checkpoint(a.checkpoint_path);
    if (sf.d_h != bank.d_h)
        throw format_error(format_fault::inconsistent,
                           "state d_h does not match checkpoint d_h");
    if (sf.heads.empty())
        throw format_error(format_fault::inconsistent, "state file has no heads");
    std::uint32_t n = sf.heads.front().state.n();
    for (const SyntheticHead& sh : sf.heads) {
        if (sh.state.n() != n)
            throw format_error(format_fault::inconsistent,
                               "state file mixes prefill lengths");
        if (sh.layer >= bank.layers || sh.head >= bank.heads)
            throw format_error(format_fault::inconsistent,
                               "state head outside checkpoint's (layer, head) range");
    }
    Partition part = make_partition(n, sf.n_sink, sf.n_tail);

    CacheBank cb;
    cb.layers = bank.layers;
    cb.kv_heads = bank.heads;
    cb.d_phi = bank.d_phi;
    cb.d_h = bank.d_h;
    cb.mid_size = std::uint32_t(part.mid_size());
    cb.caches.assign(std::size_t(cb.layers) * cb.kv_heads,
                     empty_stable_cache(cb.d_phi, cb.d_h));
    for (const SyntheticHead& sh : sf.heads)
        cb.cache(sh.layer, sh.head) =
            build_stable_cache(bank.pair(sh.layer, sh.head).phi_k, sh.state, part);

    cache_serialize((dir / "cache.bin").string(), cb);
    echo_config(cfg, dir);
    std::size_t empty = 0;
    for (const StableCompletionCache& c : cb.caches)
        if (c.empty()) ++empty;
    std::cout << "build-cache: " << cb.caches.size() << " head caches (mid=" << cb.mid_size
              << ", d_phi=" << cb.d_phi << ", empty=" << empty << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------
int cmd_decode(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    if (a.mode != "full" && a.mode != "sink_tail" && a.mode != "topk" && a.mode != "topk_phi")
        throw std::invalid_argument("--mode must be one of full, sink_tail, topk, topk_phi");
    RunInputs in = load_run_inputs(a);
    BudgetConfig bc = run_budget(in, cfg);

    std::size_t mid = in.part.mid_size();
    std::size_t k = 0;
    if (a.mode == "topk" || a.mode == "topk_phi") {
        if (a.explicit_k >= 0 && a.budget_f >= 0)
            throw std::invalid_argument("--k and --budget are mutually exclusive");
        if (a.explicit_k >= 0) {
            if (std::size_t(a.explicit_k) > mid)
                throw std::invalid_argument("--k exceeds the mid-region size");
            k = std::size_t(a.explicit_k);
        } else if (a.budget_f >= 0) {
            if (a.mode == "topk") {
                k = std::size_t(std::min<std::uint64_t>(k_topk(bc, a.budget_f), mid));
            } else {
                HybridBudget hb = k_hyb(bc, a.budget_f, cfg.l_gen);
                if (!hb.feasible)
                    throw infeasible_error("budget fraction " + g17(a.budget_f) +
                                           " cannot cover anchors plus the cache fetch");
                k = std::size_t(std::min<std::uint64_t>(hb.k, mid));
            }
        } else {
            throw std::invalid_argument("mode " + a.mode + " needs --budget or --k");
        }
    }

    std::string csv = "layer,head,query,mode,k,rho_z,rel_l1";
    for (std::uint32_t d = 0; d < in.states.d_h; ++d) csv += ",y" + std::to_string(d);
    csv += "\n";
    double err_sum = 0.0;
    std::size_t rows = 0;
    for (const SyntheticHead& sh : in.states.heads) {
        const HeadMapPair& maps = in.bank.pair(sh.layer, sh.head);
        const StableCompletionCache& cache = in.caches.cache(sh.layer, sh.head);
        for (std::size_t qi = 0; qi < sh.queries.rows(); ++qi) {
            std::span<const double> q = sh.queries.row(qi);
            std::vector<double> y_full = full_attention(q, sh.state);
            std::vector<double> y;
            double rho = 0.0;
            std::size_t k_used = 0;
            if (a.mode == "full") {
                y = y_full;
            } else if (a.mode == "sink_tail") {
                y = selection_only_decode(q, sh.state, in.part, 0);
            } else if (a.mode == "topk") {
                y = selection_only_decode(q, sh.state, in.part, k);
                k_used = k;
            } else {
                HybridDecodeResult hy = hybrid_decode(q, sh.state, in.part, k, maps, cache);
                y = std::move(hy.y);
                rho = hy.rho_z;
                k_used = k;
            }
            double err = rel_l1_error(y, y_full);
            err_sum += err;
            ++rows;
            csv += std::to_string(sh.layer) + "," + std::to_string(sh.head) + "," +
                   std::to_string(qi) + "," + a.mode + "," + std::to_string(k_used) + "," +
                   g17(rho) + "," + g17(err);
            for (double v : y) csv += "," + g17(v);
            csv += "\n";
        }
    }
    write_text(dir / "decode.csv", csv);
    echo_config(cfg, dir);
    std::cout << "decode: mode=" << a.mode << " k=" << k << " rows=" << rows
              << " mean_rel_l1=" << g17(rows ? err_sum / double(rows) : 0.0) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------
int cmd_diagnose(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    RunInputs in = load_run_inputs(a);
    BudgetConfig bc = run_budget(in, cfg);
    double f = a.budget_f >= 0 ? a.budget_f : cfg.fractions.front();

    std::size_t mid = in.part.mid_size();
    std::size_t k_sel = std::size_t(std::min<std::uint64_t>(k_topk(bc, f), mid));
    HybridBudget hb = k_hyb(bc, f, cfg.l_gen);
    if (!hb.feasible)
        throw infeasible_error("budget fraction " + g17(f) +
                               " cannot cover anchors plus the cache fetch");
    std::size_t k_h = std::size_t(std::min<std::uint64_t>(hb.k, mid));

    std::vector<QueryDiag> rows;
    for (const SyntheticHead& sh : in.states.heads) {
        const HeadMapPair& maps = in.bank.pair(sh.layer, sh.head);
        const StableCompletionCache& cache = in.caches.cache(sh.layer, sh.head);
        std::size_t nq = std::min<std::size_t>(cfg.diag_queries, sh.queries.rows());
        for (std::size_t qi = 0; qi < nq; ++qi)
            rows.push_back(diagnose_query(sh.queries.row(qi), sh.state, in.part, maps, cache,
                                          k_sel, k_h));
    }
    std::vector<HeadDiagnostics> heads = aggregate_heads(rows);
    write_text(dir / "head_diagnostics.csv", head_diagnostics_csv(heads));
    write_text(dir / "mass_curves.csv", mass_curve_csv(heads));
    echo_config(cfg, dir);

    double mean_gain = 0.0;
    for (const HeadDiagnostics& h : heads) mean_gain += h.gain;
    mean_gain /= double(heads.size());
    std::cout << "diagnose: heads=" << heads.size() << " queries=" << rows.size()
              << " f=" << g17(f) << " k_sel=" << k_sel << " k_hyb=" << k_h
              << " mean_gain=" << g17(mean_gain) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// budget
// ---------------------------------------------------------------------------
int cmd_budget(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    std::vector<double> fractions = cfg.fractions;
    if (!a.fractions_csv.empty()) {
        fractions.clear();
        std::string cur;
        for (char ch : a.fractions_csv + ",") {
            if (ch == ',') {
                if (!cur.empty()) fractions.push_back(std::stod(cur));
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (fractions.empty()) throw std::invalid_argument("--fractions list is empty");
    }
    // --l-gen 0 is the no-amortization limit: the one-time fetch is fully
    // amortized away and k_hyb coincides with k_topk.
    std::uint64_t l_gen = cfg.l_gen;
    if (a.l_gen_flag == 0) l_gen = l_gen_limit;

    std::vector<BudgetRow> rows = budget_table(cfg.budget(), fractions, l_gen);
    std::string csv = "f,n,k_topk,k_hyb,feasible\n";
    for (const BudgetRow& r : rows) {
        csv += g17(r.f) + "," + std::to_string(r.n) + "," + std::to_string(r.k_topk) + ",";
        csv += r.feasible ? std::to_string(r.k_hyb) : std::string("--");
        csv += r.feasible ? ",1\n" : ",0\n";
    }
    write_text(dir / "budget.csv", csv);
    echo_config(cfg, dir);
    std::cout << csv;
    return 0;
}

// ---------------------------------------------------------------------------
// tradeoff
// ---------------------------------------------------------------------------
int cmd_tradeoff(const Args& a) {
    ExperimentConfig cfg = resolve_config(a);
    fs::path dir = ensure_out_dir(a);
    TimingComponents tc;
    if (!a.components_path.empty()) {
        tc = load_components(a.components_path);
    } else {
        SynthComponentsConfig sc;
        sc.k_max = double(cfg.n);
        sc.k_phi = cfg.k_phi_fraction * double(cfg.n);
        tc = make_synthetic_components(sc);
        write_text(dir / "components.csv", components_to_csv(tc));
    }
    double k_phi = a.k_phi_flag > 0 ? a.k_phi_flag : tc.k_phi;
    MapGrid grid = default_map_grid(cfg.xi_points, cfg.gamma_points);
    TradeoffOutput out = emit_map(tc, grid, k_phi);
    write_text(dir / "tradeoff_map.csv", out.map_csv);
    write_text(dir / "tradeoff_contour.csv", out.contour_csv);
    write_text(dir / "tradeoff_metadata.txt", out.metadata);
    echo_config(cfg, dir);
    std::size_t cells = grid.xi.size() * grid.gamma.size() * grid.c.size();
    std::cout << "tradeoff: " << cells << " map cells, " << grid.c.size()
              << " contour columns, k_phi=" << g17(k_phi) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hybrid Top-K + feature-map completion attention workbench"};
    app.require_subcommand(1);
    Args a;

    auto add_common = [&a](CLI::App* sub, bool need_seed) {
        sub->add_option("--config", a.config_path, "experiment config file");
        auto* seed = sub->add_option("--seed", a.seed, "random seed (decimal integer)");
        if (need_seed) seed->required();
        seed->each([&a](const std::string&) { a.seed_set = true; });
        sub->add_option("--out-dir", a.out_dir, "output directory")->required();
        sub->add_option("--threads", a.threads, "worker threads");
    };

    CLI::App* gen = app.add_subcommand("gen-traces", "generate synthetic prefills and traces");
    add_common(gen, true);

    CLI::App* train = app.add_subcommand("train-phi", "distill feature maps from traces");
    add_common(train, true);
    train->add_option("--traces", a.traces_path, "trace file from gen-traces")->required();
    train->add_option("--resume", a.resume_path, "checkpoint to continue from");

    CLI::App* build = app.add_subcommand("build-cache", "build completion caches per head");
    add_common(build, false);
    build->add_option("--states", a.states_path, "state file from gen-traces")->required();
    build->add_option("--checkpoint", a.checkpoint_path, "feature-map checkpoint")->required();

    CLI::App* dec = app.add_subcommand("decode", "decode queries under a chosen mode");
    add_common(dec, false);
    dec->add_option("--states", a.states_path, "state file")->required();
    dec->add_option("--checkpoint", a.checkpoint_path, "feature-map checkpoint")->required();
    dec->add_option("--cache", a.cache_path, "completion cache bank")->required();
    dec->add_option("--mode", a.mode, "full | sink_tail | topk | topk_phi")->required();
    dec->add_option("--budget", a.budget_f, "token budget as a fraction of N");
    dec->add_option("--k", a.explicit_k, "explicit retrieval count");
    dec->add_option("--l-gen", a.l_gen_flag, "generation length for amortization");

    CLI::App* diag = app.add_subcommand("diagnose", "per-head diagnostics and mass curves");
    add_common(diag, false);
    diag->add_option("--states", a.states_path, "state file")->required();
    diag->add_option("--checkpoint", a.checkpoint_path, "feature-map checkpoint")->required();
    diag->add_option("--cache", a.cache_path, "completion cache bank")->required();
    diag->add_option("--budget", a.budget_f, "token budget as a fraction of N");
    diag->add_option("--l-gen", a.l_gen_flag, "generation length for amortization");

    CLI::App* bud = app.add_subcommand("budget", "token-equivalent budget table");
    add_common(bud, false);
    bud->add_option("--fractions", a.fractions_csv, "comma-separated budget fractions");
    bud->add_option("--l-gen", a.l_gen_flag,
                    "generation length for amortization (0 = no-amortization limit)");

    CLI::App* tr = app.add_subcommand("tradeoff", "speedup map and break-even contours");
    add_common(tr, false);
    tr->add_option("--components", a.components_path, "measured timing components CSV");
    tr->add_option("--k-phi", a.k_phi_flag, "hybrid retrieval count the map is anchored to");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_traces(a);
        if (train->parsed()) return cmd_train_phi(a);
        if (build->parsed()) return cmd_build_cache(a);
        if (dec->parsed()) return cmd_decode(a);
        if (diag->parsed()) return cmd_diagnose(a);
        if (bud->parsed()) return cmd_budget(a);
        if (tr->parsed()) return cmd_tradeoff(a);
        return 1;  // unreachable: require_subcommand(1)
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const format_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const infeasible_error& e) {
        std::cerr << "infeasible budget: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
