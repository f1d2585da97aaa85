// Break-even analysis over decode timing components: piecewise-linear
// interpolation of selection-only load/compute over the retrieval budget k,
// an I/O-slowdown axis xi and recompute-scaling set c applied to the hybrid
// path, the resulting speedup field, and its speedup = 1 contours.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/io_util.hpp"

namespace kvhybrid {

struct TopkSample {
    double k = 0.0;
    double t_load = 0.0;  // microseconds per decode step
    double t_cmp = 0.0;
};

// Measured (or synthesized) per-step times: selection-only sampled over k,
// and the hybrid path at one fixed retrieval budget k_phi, with the
// recompute share t_phi of its compute time broken out.
struct TimingComponents {
    std::vector<TopkSample> topk;
    double k_phi = 0.0;
    double hyb_t_load = 0.0;
    double hyb_t_cmp = 0.0;
    double hyb_t_phi = 0.0;

    void validate() const {
        if (topk.size() < 2)
            throw std::invalid_argument("timing components: need at least two selection samples");
        for (std::size_t i = 0; i < topk.size(); ++i) {
            if (topk[i].t_load < 0 || topk[i].t_cmp < 0)
                throw std::invalid_argument("timing components: negative time");
            if (i > 0 && !(topk[i].k > topk[i - 1].k))
                throw std::invalid_argument(
                    "timing components: sample k values must strictly increase");
        }
        if (k_phi < 0 || hyb_t_load < 0 || hyb_t_cmp < 0 || hyb_t_phi < 0)
            throw std::invalid_argument("timing components: negative hybrid entry");
        if (hyb_t_phi > hyb_t_cmp)
            throw std::invalid_argument(
                "timing components: recompute share exceeds hybrid compute time");
    }
};

struct MapGrid {
    std::vector<double> xi;     // I/O slowdown axis
    std::vector<double> gamma;  // quality-matched retrieval ratio axis
    std::vector<double> c;      // recompute scaling set

    void validate() const {
        auto check = [](const std::vector<double>& v, const char* name) {
            if (v.empty()) throw std::invalid_argument(std::string("map grid: empty ") + name);
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!(v[i] > 0))
                    throw std::invalid_argument(std::string("map grid: non-positive ") + name);
                if (i > 0 && !(v[i] > v[i - 1]))
                    throw std::invalid_argument(std::string("map grid: ") + name +
                                                " not strictly increasing");
            }
        };
        check(xi, "xi");
        check(gamma, "gamma");
        check(c, "c");
    }
};

/// Default axes: xi log-spaced over [1, 64], gamma linear over [1, 4], and
/// the standard recompute scaling set.
inline MapGrid default_map_grid(std::size_t xi_points = 16, std::size_t gamma_points = 13) {
    MapGrid g;
    for (std::size_t i = 0; i < xi_points; ++i) {
        double t = xi_points == 1 ? 0.0 : double(i) / double(xi_points - 1);
        g.xi.push_back(std::exp(t * std::log(64.0)));
    }
    for (std::size_t i = 0; i < gamma_points; ++i) {
        double t = gamma_points == 1 ? 0.0 : double(i) / double(gamma_points - 1);
        g.gamma.push_back(1.0 + t * 3.0);
    }
    g.c = {0.1, 0.25, 0.5, 1.0};
    return g;
}

struct InterpTimes {
    double t_load = 0.0;
    double t_cmp = 0.0;
};

/// Piecewise-linear in the interior; outside the sampled range the nearest
/// segment's line is extended and clamped at zero.
inline InterpTimes interp_topk_time(std::span<const TopkSample> samples, double k) {
    if (samples.size() < 2)
        throw std::invalid_argument("interp_topk_time: need at least two samples");
    std::size_t hi = 1;
    if (k > samples[1].k) {
        while (hi + 1 < samples.size() && k > samples[hi].k) ++hi;
    }
    const TopkSample& a = samples[hi - 1];
    const TopkSample& b = samples[hi];
    double t = (k - a.k) / (b.k - a.k);
    InterpTimes out;
    out.t_load = std::max(0.0, a.t_load + t * (b.t_load - a.t_load));
    out.t_cmp = std::max(0.0, a.t_cmp + t * (b.t_cmp - a.t_cmp));
    return out;
}

/// speedup(xi, gamma; c) — how much slower the selection-only path is than
/// the hybrid path when selection must retrieve gamma * k_phi tokens to match
/// quality, loads are slowed by xi, and the hybrid recompute share is scaled
/// by c. Values above 1 favor the hybrid path.
inline double speedup(const TimingComponents& tc, double xi, double gamma, double c,
                      double k_phi) {
    InterpTimes sel = interp_topk_time(tc.topk, gamma * k_phi);
    double t_topk = sel.t_cmp + xi * sel.t_load;
    double t_hyb = (tc.hyb_t_cmp - tc.hyb_t_phi) + c * tc.hyb_t_phi + xi * tc.hyb_t_load;
    if (!(t_hyb > 0.0))
        throw std::invalid_argument("speedup: hybrid time is zero at this grid point");
    return t_topk / t_hyb;
}

struct ContourPoint {
    double xi = 0.0;
    double gamma = 0.0;
};

/// Per xi column, the smallest gamma in range where the speedup crosses 1.
/// The grid brackets the sign change; bisection on the interpolated field
/// refines the root to |speedup - 1| < 1e-9. Columns without a crossing are
/// absent from the polyline.
inline std::vector<ContourPoint> break_even_contour(const TimingComponents& tc,
                                                    const MapGrid& grid, double c,
                                                    double k_phi) {
    tc.validate();
    grid.validate();
    std::vector<ContourPoint> contour;
    for (double xi : grid.xi) {
        double prev_g = grid.gamma.front();
        double prev_s = speedup(tc, xi, prev_g, c, k_phi);
        bool found = false;
        if (prev_s == 1.0) {
            contour.push_back({xi, prev_g});
            continue;
        }
        for (std::size_t gi = 1; gi < grid.gamma.size() && !found; ++gi) {
            double g = grid.gamma[gi];
            double s = speedup(tc, xi, g, c, k_phi);
            if ((prev_s - 1.0) * (s - 1.0) <= 0.0) {
                double lo = prev_g, hi = g;
                double mid = 0.5 * (lo + hi);
                for (int it = 0; it < 200; ++it) {
                    mid = 0.5 * (lo + hi);
                    double sm = speedup(tc, xi, mid, c, k_phi);
                    if (std::abs(sm - 1.0) < 1e-9) break;
                    if ((prev_s - 1.0) * (sm - 1.0) > 0.0)
                        lo = mid;
                    else
                        hi = mid;
                }
                contour.push_back({xi, mid});
                found = true;
            }
            prev_g = g;
            prev_s = s;
        }
    }
    return contour;
}

struct TradeoffOutput {
    std::string map_csv;      // xi,gamma,c,speedup — one row per grid cell
    std::string contour_csv;  // c,xi,gamma — break-even points per c
    std::string metadata;     // reference annotations, never assertions
};

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

}  // namespace detail

/// The full speedup field and its contours as CSV text, in fixed order
/// (c outer, then xi, then gamma) so identical inputs give identical bytes.
inline TradeoffOutput emit_map(const TimingComponents& tc, const MapGrid& grid, double k_phi) {
    tc.validate();
    grid.validate();
    TradeoffOutput out;
    out.map_csv = "xi,gamma,c,speedup\n";
    for (double c : grid.c)
        for (double xi : grid.xi)
            for (double g : grid.gamma)
                out.map_csv += detail::fmt_num(xi) + "," + detail::fmt_num(g) + "," +
                               detail::fmt_num(c) + "," +
                               detail::fmt_num(speedup(tc, xi, g, c, k_phi)) + "\n";
    out.contour_csv = "c,xi,gamma\n";
    for (double c : grid.c)
        for (const ContourPoint& p : break_even_contour(tc, grid, c, k_phi))
            out.contour_csv += detail::fmt_num(c) + "," + detail::fmt_num(p.xi) + "," +
                               detail::fmt_num(p.gamma) + "\n";
    out.metadata = "k_phi=" + detail::fmt_num(k_phi) +
                   "\ngamma_reference=1.8 (quality-matched retrieval ratio reference point; "
                   "annotation only, not a timing assertion)\n";
    return out;
}

// ---------------------------------------------------------------------------
// Components file (CSV with tagged rows)
// ---------------------------------------------------------------------------

/// Parse the components CSV: any number of `topk,<k>,<t_load>,<t_cmp>` rows
/// plus exactly one `hybrid,<k_phi>,<t_load>,<t_cmp>,<t_phi>` row. Blank
/// lines and `#` comments are ignored.
inline TimingComponents parse_components_csv(const std::string& text) {
    TimingComponents tc;
    bool have_hybrid = false;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                fields.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur += ch;
            }
        }
        fields.push_back(cur);
        auto where = [&line_no] { return " (line " + std::to_string(line_no) + ")"; };
        auto num = [&where](const std::string& s) {
            std::size_t pos = 0;
            double v;
            try {
                v = std::stod(s, &pos);
            } catch (const std::exception&) {
                throw format_error(format_fault::inconsistent,
                                   "components csv: bad number '" + s + "'" + where());
            }
            if (pos != s.size())
                throw format_error(format_fault::inconsistent,
                                   "components csv: bad number '" + s + "'" + where());
            return v;
        };
        if (fields[0] == "topk") {
            if (fields.size() != 4)
                throw format_error(format_fault::inconsistent,
                                   "components csv: topk row needs k,t_load,t_cmp" + where());
            tc.topk.push_back({num(fields[1]), num(fields[2]), num(fields[3])});
        } else if (fields[0] == "hybrid") {
            if (fields.size() != 5)
                throw format_error(
                    format_fault::inconsistent,
                    "components csv: hybrid row needs kphi,t_load,t_cmp,t_phi" + where());
            if (have_hybrid)
                throw format_error(format_fault::inconsistent,
                                   "components csv: duplicate hybrid row" + where());
            tc.k_phi = num(fields[1]);
            tc.hyb_t_load = num(fields[2]);
            tc.hyb_t_cmp = num(fields[3]);
            tc.hyb_t_phi = num(fields[4]);
            have_hybrid = true;
        } else {
            throw format_error(format_fault::inconsistent,
                               "components csv: unknown row tag '" + fields[0] + "'" + where());
        }
    }
    if (!have_hybrid)
        throw format_error(format_fault::inconsistent, "components csv: missing hybrid row");
    try {
        tc.validate();
    } catch (const std::invalid_argument& e) {
        throw format_error(format_fault::inconsistent, std::string("components csv: ") + e.what());
    }
    return tc;
}

inline TimingComponents load_components(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error(format_fault::io, path + ": cannot open");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_components_csv(buf.str());
}

inline std::string components_to_csv(const TimingComponents& tc) {
    std::string s = "# decode timing components (microseconds per step)\n";
    for (const TopkSample& r : tc.topk)
        s += "topk," + detail::fmt_num(r.k) + "," + detail::fmt_num(r.t_load) + "," +
             detail::fmt_num(r.t_cmp) + "\n";
    s += "hybrid," + detail::fmt_num(tc.k_phi) + "," + detail::fmt_num(tc.hyb_t_load) + "," +
         detail::fmt_num(tc.hyb_t_cmp) + "," + detail::fmt_num(tc.hyb_t_phi) + "\n";
    return s;
}

// Parameters for the synthetic components generator backing desk-scale runs:
// load linear in k, compute near-constant with a mild slope, hybrid measured
// at k_phi with a fixed recompute share of its compute time.
struct SynthComponentsConfig {
    std::size_t samples = 9;
    double k_max = 1024.0;
    double load_per_token = 0.01;
    double load_base = 0.5;
    double cmp_per_token = 0.001;
    double cmp_base = 2.0;
    double k_phi = 100.0;
    double phi_share = 0.3;  // t_phi as a fraction of hybrid compute

    void validate() const {
        if (samples < 2 || !(k_max > 0))
            throw std::invalid_argument("synth components: need >= 2 samples and k_max > 0");
        if (load_per_token < 0 || load_base < 0 || cmp_per_token < 0 || cmp_base < 0 ||
            k_phi < 0)
            throw std::invalid_argument("synth components: negative value");
        if (phi_share < 0 || phi_share >= 1)
            throw std::invalid_argument("synth components: phi_share must be in [0, 1)");
    }
};

inline TimingComponents make_synthetic_components(const SynthComponentsConfig& cfg) {
    cfg.validate();
    TimingComponents tc;
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        double k = cfg.k_max * double(i) / double(cfg.samples - 1);
        tc.topk.push_back({k, cfg.load_base + cfg.load_per_token * k,
                           cfg.cmp_base + cfg.cmp_per_token * k});
    }
    double base_cmp = cfg.cmp_base + cfg.cmp_per_token * cfg.k_phi;
    tc.k_phi = cfg.k_phi;
    tc.hyb_t_load = cfg.load_base + cfg.load_per_token * cfg.k_phi;
    tc.hyb_t_cmp = base_cmp / (1.0 - cfg.phi_share);
    tc.hyb_t_phi = tc.hyb_t_cmp * cfg.phi_share;
    tc.validate();
    return tc;
}

}  // namespace kvhybrid
