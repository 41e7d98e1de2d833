#include "fbtc/checkpoint.hpp"
#include "fbtc/datagen.hpp"
#include "fbtc/io.hpp"
#include "fbtc/metrics.hpp"
#include "fbtc/predict.hpp"
#include "fbtc/vi.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace {

using fbtc::DenseTensor;
using fbtc::FitState;
using fbtc::GriddedData;
using fbtc::MaskTensor;
using fbtc::ModelConfig;
using nlohmann::json;

constexpr const char* kVersion = "1.0.0";

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string iso_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stoi(cell));
    if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
    return out;
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
    if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
    return out;
}

// Collects run metadata and writes manifest.json in the output directory.
struct Manifest {
    json j;
    std::string dir;

    Manifest(const std::string& out_dir, const std::string& command_line,
             const std::string& subcommand, std::uint64_t seed)
        : dir(out_dir) {
        j["command"] = command_line;
        j["subcommand"] = subcommand;
        j["seed"] = seed;
        j["version"] = kVersion;
        j["started"] = iso_now();
        j["config"] = json::object();
        j["inputs"] = json::object();
        j["outputs"] = json::object();
    }

    void input(const std::string& path) { j["inputs"][path] = fbtc::file_digest(path); }
    void output(const std::string& path) { j["outputs"][path] = fbtc::file_digest(path); }

    void write() {
        j["finished"] = iso_now();
        const std::string path = dir + "/manifest.json";
        std::ofstream f(path);
        if (!f) throw fbtc::IoError("cannot open for writing: " + path);
        f << j.dump(2) << '\n';
    }
};

struct GlobalOpts {
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    int threads = 1;
    std::string command_line;
};

std::string out_path(const GlobalOpts& g, const std::string& name) {
    return g.out_dir + "/" + name;
}

// ---------------------------------------------------------------- synth ----

struct SynthOpts {
    std::string kind = "random-cp";
    std::string dims = "30,30,30";
    int rank = 0;
    double snr = 10.0;
    double sr = 0.3;
};

// Dataset built from one base seed; the same derivation serves synth and
// bench so equal seeds mean equal data.
struct Dataset {
    std::vector<std::vector<double>> coords;
    DenseTensor truth;
    DenseTensor noisy;
    MaskTensor mask;
};

Dataset make_discrete(const std::vector<int>& dims, int rank, double snr, double sr,
                      std::uint64_t seed) {
    Dataset d;
    d.truth = fbtc::gen_random_cp(dims, rank, fbtc::mix_seed(seed, 1)).truth;
    d.noisy = fbtc::add_noise_snr(d.truth, snr, fbtc::mix_seed(seed, 2));
    d.mask = fbtc::sample_mask(dims, sr, fbtc::mix_seed(seed, 3));
    d.coords.resize(dims.size());
    for (size_t k = 0; k < dims.size(); ++k) {
        d.coords[k].resize(static_cast<size_t>(dims[k]));
        for (int i = 0; i < dims[k]; ++i) d.coords[k][static_cast<size_t>(i)] = i + 1.0;
    }
    return d;
}

Dataset make_continuous(const std::vector<int>& dims, double snr, double sr, std::uint64_t seed) {
    Dataset d;
    fbtc::ContinuousData c = fbtc::gen_continuous(dims, fbtc::mix_seed(seed, 1));
    d.coords = std::move(c.coords);
    d.truth = std::move(c.truth);
    d.noisy = fbtc::add_noise_snr(d.truth, snr, fbtc::mix_seed(seed, 2));
    d.mask = fbtc::sample_mask(dims, sr, fbtc::mix_seed(seed, 3));
    return d;
}

fbtc::ObservationSet observed_points(const Dataset& d) {
    fbtc::ObservationSet obs;
    const int K = d.truth.order();
    obs.order = K;
    std::vector<int> idx(static_cast<size_t>(K), 0);
    for (std::int64_t f = 0; f < d.truth.size(); ++f) {
        if (d.mask.flags[static_cast<size_t>(f)]) {
            fbtc::Observation p;
            p.index.resize(static_cast<size_t>(K));
            for (int k = 0; k < K; ++k)
                p.index[static_cast<size_t>(k)] = d.coords[static_cast<size_t>(k)][static_cast<size_t>(idx[static_cast<size_t>(k)])];
            p.value = d.noisy.values[static_cast<size_t>(f)];
            obs.points.push_back(std::move(p));
        }
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[static_cast<size_t>(k)] < d.truth.dims[static_cast<size_t>(k)]) break;
            idx[static_cast<size_t>(k)] = 0;
        }
    }
    return obs;
}

GriddedData to_gridded(const Dataset& d) {
    GriddedData g;
    g.coord_sets = d.coords;
    g.Y = DenseTensor(d.truth.dims);
    g.O = d.mask;
    g.multiplicity.assign(d.truth.values.size(), 0);
    for (size_t i = 0; i < d.truth.values.size(); ++i)
        if (d.mask.flags[i]) {
            g.Y.values[i] = d.noisy.values[i];
            g.multiplicity[i] = 1;
        }
    return g;
}

int cmd_synth(const GlobalOpts& g, const SynthOpts& o) {
    const std::vector<int> dims = parse_int_list(o.dims, "--dims");
    Manifest man(g.out_dir, g.command_line, "synth", g.seed);
    man.j["config"] = {{"kind", o.kind}, {"dims", o.dims}, {"rank", o.rank},
                       {"snr", o.snr},   {"sr", o.sr}};

    Dataset d;
    if (o.kind == "random-cp") {
        if (o.rank < 1)
            throw std::invalid_argument("synth: --rank is required for --kind random-cp");
        d = make_discrete(dims, o.rank, o.snr, o.sr, g.seed);
    } else if (o.kind == "continuous") {
        d = make_continuous(dims, o.snr, o.sr, g.seed);
    } else {
        throw std::invalid_argument("synth: unknown --kind " + o.kind);
    }

    fbtc::write_tensor_text(out_path(g, "truth.txt"), d.truth);
    man.output(out_path(g, "truth.txt"));
    fbtc::write_point_csv(out_path(g, "obs.csv"), observed_points(d));
    man.output(out_path(g, "obs.csv"));
    fbtc::write_mask_text(out_path(g, "mask.txt"), d.mask);
    man.output(out_path(g, "mask.txt"));
    if (o.kind == "continuous") {
        fbtc::write_coords_csv(out_path(g, "coords.csv"), d.coords);
        man.output(out_path(g, "coords.csv"));
    }
    man.write();
    std::cout << "wrote " << (o.kind == "continuous" ? 5 : 4) << " files to " << g.out_dir
              << " (" << d.mask.count() << " observed cells)\n";
    return 0;
}

// ------------------------------------------------------------------ fit ----

struct FitOpts {
    std::string input;
    std::string kernel = "matern52";
    double lengthscale = 1.0;
    std::vector<std::string> lengthscale_k;
    double jitter = -1.0;
    int rank_init = -1;
    double prune_ratio = 1e-4;
    int max_iters = 200;
    double conv_tol = 1e-5;
    std::string init = "deflate";
    std::string hyperprior = "1e-3,1e-3,1e-3,1e-3";
    double merge_tol = 0.0;
    bool save_recon = false;
};

ModelConfig config_from(const FitOpts& o, int order, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.rank_init = o.rank_init;
    cfg.prune_ratio = o.prune_ratio;
    cfg.max_iters = o.max_iters;
    cfg.conv_tol = o.conv_tol;
    cfg.init = fbtc::init_scheme_from_string(o.init);
    cfg.seed = seed;
    const std::vector<double> hp = parse_double_list(o.hyperprior, "--hyperprior");
    if (hp.size() != 4) throw std::invalid_argument("--hyperprior: expected a,b,a0,b0");
    cfg.hyper = {hp[0], hp[1], hp[2], hp[3]};

    fbtc::KernelSpec base;
    base.family = fbtc::kernel_family_from_string(o.kernel);
    base.lengthscale = o.lengthscale;
    base.jitter = o.jitter;
    if (o.lengthscale_k.empty()) {
        cfg.kernels = {base};
    } else {
        cfg.kernels.assign(static_cast<size_t>(order), base);
        for (const std::string& s : o.lengthscale_k) {
            const size_t colon = s.find(':');
            if (colon == std::string::npos)
                throw std::invalid_argument("--lengthscale-k: expected k:h, got " + s);
            const int k = std::stoi(s.substr(0, colon));
            if (k < 0 || k >= order)
                throw std::invalid_argument("--lengthscale-k: mode out of range in " + s);
            cfg.kernels[static_cast<size_t>(k)].lengthscale = std::stod(s.substr(colon + 1));
        }
    }
    return cfg;
}

void write_trace_csvs(const GlobalOpts& g, const FitState& st, Manifest& man) {
    {
        std::ofstream f(out_path(g, "elbo_trace.csv"));
        f << "sweep,elbo\n";
        for (size_t i = 0; i < st.elbo_trace.size(); ++i)
            f << (i + 1) << ',' << fmt17(st.elbo_trace[i]) << '\n';
    }
    man.output(out_path(g, "elbo_trace.csv"));
    {
        std::ofstream f(out_path(g, "rank_trace.csv"));
        f << "sweep,rank\n";
        for (size_t i = 0; i < st.rank_trace.size(); ++i)
            f << (i + 1) << ',' << st.rank_trace[i] << '\n';
    }
    man.output(out_path(g, "rank_trace.csv"));
}

int cmd_fit(const GlobalOpts& g, const FitOpts& o) {
    Manifest man(g.out_dir, g.command_line, "fit", g.seed);
    man.input(o.input);

    fbtc::ObservationSet obs = fbtc::read_point_csv(o.input);
    if (o.merge_tol > 0) obs = fbtc::quantize_coords(obs, o.merge_tol);
    const GriddedData grid = fbtc::allocate(obs);
    const ModelConfig cfg = config_from(o, grid.Y.order(), g.seed);
    man.j["config"] = {{"kernel", o.kernel},         {"lengthscale", o.lengthscale},
                       {"jitter", o.jitter},         {"rank_init", o.rank_init},
                       {"prune_ratio", o.prune_ratio}, {"max_iters", o.max_iters},
                       {"conv_tol", o.conv_tol},     {"init", o.init},
                       {"hyperprior", o.hyperprior}, {"merge_tol", o.merge_tol}};

    const FitState st = fbtc::fit(grid, cfg);

    fbtc::save_checkpoint(out_path(g, "checkpoint.txt"), st);
    man.output(out_path(g, "checkpoint.txt"));
    write_trace_csvs(g, st, man);
    if (o.save_recon) {
        fbtc::write_tensor_text(out_path(g, "reconstruction.txt"), fbtc::reconstruct_means(st));
        man.output(out_path(g, "reconstruction.txt"));
    }
    man.write();

    std::cout << "final_rank " << st.rank << '\n'
              << "iters " << st.iters_run << '\n'
              << "converged " << (st.converged ? 1 : 0) << '\n'
              << "elbo " << fmt17(st.elbo_trace.empty() ? 0.0 : st.elbo_trace.back()) << '\n';
    return 0;
}

// -------------------------------------------------------------- predict ----

struct PredictOpts {
    std::string model;
    std::string query;
    std::string noise = "jitter";
    bool with_std = false;
};

int cmd_predict(const GlobalOpts& g, const PredictOpts& o) {
    Manifest man(g.out_dir, g.command_line, "predict", g.seed);
    man.input(o.model);
    man.input(o.query);
    man.j["config"] = {{"predict_noise", o.noise}, {"with_std", o.with_std}};

    const FitState st = fbtc::load_checkpoint(o.model);
    fbtc::QuerySet q;
    q.indices = fbtc::read_query_csv(o.query);
    const int K = st.order();
    if (!q.indices.empty() && static_cast<int>(q.indices[0].size()) != K)
        throw std::invalid_argument("predict: query has " +
                                    std::to_string(q.indices[0].size()) + " columns, model has " +
                                    std::to_string(K) + " modes");

    double sigma2 = 1e-6;
    if (o.noise == "learned")
        sigma2 = 1.0 / st.hypers.e_tau;
    else if (o.noise != "jitter")
        throw std::invalid_argument("predict: --predict-noise must be jitter or learned");

    const std::vector<double> yhat = fbtc::predict_values(st, q, sigma2);

    const std::string path = out_path(g, "predictions.csv");
    std::ofstream f(path);
    if (!f) throw fbtc::IoError("cannot open for writing: " + path);
    for (int k = 0; k < K; ++k) f << 'i' << (k + 1) << ',';
    f << "yhat";
    if (o.with_std)
        for (int r = 0; r < st.rank; ++r)
            for (int k = 0; k < K; ++k) f << ",std_mode" << (k + 1) << "_rank" << (r + 1);
    f << '\n';

    fbtc::FactorPrediction pred;
    if (o.with_std) pred = fbtc::predict_factors(st, q, sigma2);
    for (int m = 0; m < q.count(); ++m) {
        for (int k = 0; k < K; ++k) f << fmt17(q.indices[m][static_cast<size_t>(k)]) << ',';
        f << fmt17(yhat[static_cast<size_t>(m)]);
        if (o.with_std) {
            const std::vector<Eigen::VectorXd> stds = fbtc::predictive_std(pred, m);
            for (int r = 0; r < st.rank; ++r)
                for (int k = 0; k < K; ++k) f << ',' << fmt17(stds[static_cast<size_t>(k)](r));
        }
        f << '\n';
    }
    f.close();
    man.output(path);
    man.write();
    std::cout << "wrote " << path << " (" << q.count() << " rows)\n";
    return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalOpts {
    std::string truth;
    std::string estimate;
    double peak = 255.0;
};

bool is_image_path(const std::string& p) {
    return p.size() > 4 && (p.substr(p.size() - 4) == ".pgm" || p.substr(p.size() - 4) == ".ppm");
}

int cmd_eval(const GlobalOpts& g, const EvalOpts& o) {
    Manifest man(g.out_dir, g.command_line, "eval", g.seed);
    man.input(o.truth);
    man.input(o.estimate);
    man.j["config"] = {{"peak", o.peak}};

    const DenseTensor truth =
        is_image_path(o.truth) ? fbtc::read_image(o.truth) : fbtc::read_tensor_text(o.truth);
    const DenseTensor est = is_image_path(o.estimate) ? fbtc::read_image(o.estimate)
                                                      : fbtc::read_tensor_text(o.estimate);

    std::vector<std::pair<std::string, double>> rows;
    rows.emplace_back("rrse", fbtc::rrse(truth, est));
    rows.emplace_back("rmse", fbtc::rmse(truth, est));
    rows.emplace_back("psnr", fbtc::psnr(truth, est, o.peak));
    const bool ssim_ok = (truth.order() == 2 || (truth.order() == 3 && truth.dims[2] == 3)) &&
                         truth.dims[0] >= 11 && truth.dims[1] >= 11;
    if (ssim_ok) rows.emplace_back("ssim", fbtc::ssim(truth, est, o.peak));

    const std::string path = out_path(g, "metrics.csv");
    std::ofstream f(path);
    if (!f) throw fbtc::IoError("cannot open for writing: " + path);
    f << "metric,value\n";
    for (const auto& [name, v] : rows) {
        std::cout << name << ' ' << fmt17(v) << '\n';
        f << name << ',' << fmt17(v) << '\n';
    }
    f.close();
    man.output(path);
    man.write();
    return 0;
}

// ---------------------------------------------------------------- bench ----

struct BenchOpts {
    std::string experiment;
    int trials = 10;
    std::string dims;
    int rank = 10;
    std::string srs = "0.3,0.2";
    std::string snrs = "10,5";
    double sr = 0.2;
    double snr = 10.0;
    std::string rank_inits = "15,30,60";
    std::string lengthscales = "0.5,1,5,10";
    std::string kernel;
    double lengthscale = 0.0;
    int rank_init = -1;
    int max_iters = 200;
    double conv_tol = 1e-5;
    double prune_ratio = 1e-4;
    // Empty means per-experiment default: deflate on the discrete synthetics
    // (escapes the local optima svd stalls in there), svd on the continuous
    // ones (more reliable single-component recovery).
    std::string init;
};

struct BenchJob {
    double sr = 0.0, snr = 0.0, lengthscale = 0.0;
    int rank_init = -1;
    int trial = 0;
    std::uint64_t seed = 0;
};

struct BenchResult {
    int final_rank = 0;
    int iters = 0;
    bool converged = false;
    double rrse = 0.0;
    double heldout_rrse = 0.0;
    bool has_heldout = false;
    std::string error;
};

double heldout_rrse_of(const FitState& st, const Dataset& d) {
    fbtc::QuerySet q;
    const int K = d.truth.order();
    q.indices.reserve(d.truth.values.size());
    std::vector<int> idx(static_cast<size_t>(K), 0);
    for (std::int64_t f = 0; f < d.truth.size(); ++f) {
        std::vector<double> point(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k)
            point[static_cast<size_t>(k)] = d.coords[static_cast<size_t>(k)][static_cast<size_t>(idx[static_cast<size_t>(k)])];
        q.indices.push_back(std::move(point));
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[static_cast<size_t>(k)] < d.truth.dims[static_cast<size_t>(k)]) break;
            idx[static_cast<size_t>(k)] = 0;
        }
    }
    const std::vector<double> yhat = fbtc::predict_values(st, q, 1e-6);
    double num = 0, den = 0;
    for (size_t i = 0; i < d.truth.values.size(); ++i) {
        if (d.mask.flags[i]) continue;
        const double e = d.truth.values[i] - yhat[i];
        num += e * e;
        den += d.truth.values[i] * d.truth.values[i];
    }
    if (den == 0) throw std::invalid_argument("bench: zero-norm held-out truth");
    return std::sqrt(num / den);
}

BenchResult run_bench_trial(const BenchOpts& o, const BenchJob& job) {
    BenchResult res;
    const bool continuous = o.experiment == "synth-continuous" || o.experiment == "kernel-sweep";
    const std::vector<int> dims =
        o.dims.empty() ? std::vector<int>(3, continuous ? 50 : 30) : parse_int_list(o.dims, "--dims");

    Dataset d = continuous ? make_continuous(dims, job.snr, job.sr, job.seed)
                           : make_discrete(dims, o.rank, job.snr, job.sr, job.seed);

    ModelConfig cfg;
    cfg.rank_init = job.rank_init;
    cfg.max_iters = o.max_iters;
    cfg.conv_tol = o.conv_tol;
    cfg.prune_ratio = o.prune_ratio;
    cfg.init = fbtc::init_scheme_from_string(
        !o.init.empty() ? o.init : (continuous ? "svd" : "deflate"));
    cfg.seed = job.seed;
    fbtc::KernelSpec ks;
    ks.family = fbtc::kernel_family_from_string(
        !o.kernel.empty() ? o.kernel : (continuous ? "matern52" : "identity"));
    ks.lengthscale = job.lengthscale;
    cfg.kernels = {ks};

    const FitState st = fbtc::fit(to_gridded(d), cfg);
    res.final_rank = st.rank;
    res.iters = st.iters_run;
    res.converged = st.converged;
    res.rrse = fbtc::rrse(d.truth, fbtc::reconstruct_means(st));
    if (continuous) {
        res.heldout_rrse = heldout_rrse_of(st, d);
        res.has_heldout = true;
    }
    return res;
}

int cmd_bench(const GlobalOpts& g, const BenchOpts& o) {
    Manifest man(g.out_dir, g.command_line, "bench", g.seed);
    man.j["config"] = {{"experiment", o.experiment}, {"trials", o.trials},
                       {"dims", o.dims},             {"rank", o.rank},
                       {"srs", o.srs},               {"snrs", o.snrs},
                       {"sr", o.sr},                 {"snr", o.snr},
                       {"rank_inits", o.rank_inits}, {"lengthscales", o.lengthscales},
                       {"init", o.init}};
    if (o.trials < 1) throw std::invalid_argument("bench: --trials must be >= 1");

    const bool continuous = o.experiment == "synth-continuous" || o.experiment == "kernel-sweep";
    const double default_h = continuous ? 0.5 : 1.0;

    // One job per (cell, trial); cells vary by experiment.
    std::vector<BenchJob> jobs;
    auto add_cell = [&](double sr, double snr, int rank_init, double h) {
        for (int t = 0; t < o.trials; ++t) {
            BenchJob j;
            j.sr = sr;
            j.snr = snr;
            j.rank_init = rank_init;
            j.lengthscale = h > 0 ? h : default_h;
            j.trial = t;
            j.seed = g.seed + static_cast<std::uint64_t>(t);
            jobs.push_back(j);
        }
    };
    if (o.experiment == "synth-discrete") {
        for (double sr : parse_double_list(o.srs, "--srs"))
            for (double snr : parse_double_list(o.snrs, "--snrs"))
                add_cell(sr, snr, o.rank_init, o.lengthscale);
    } else if (o.experiment == "synth-continuous") {
        add_cell(o.sr, o.snr, o.rank_init, o.lengthscale);
    } else if (o.experiment == "rank-sweep") {
        for (int ri : parse_int_list(o.rank_inits, "--rank-inits")) add_cell(0.3, 10.0, ri, o.lengthscale);
    } else if (o.experiment == "kernel-sweep") {
        for (double h : parse_double_list(o.lengthscales, "--lengthscales"))
            add_cell(o.sr, o.snr, o.rank_init, h);
    } else {
        throw std::invalid_argument("bench: unknown experiment " + o.experiment);
    }

    std::vector<BenchResult> results(jobs.size());
    std::atomic<size_t> next{0};
    std::mutex log_mu;
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                results[i] = run_bench_trial(o, jobs[i]);
            } catch (const std::exception& e) {
                results[i].error = e.what();
            }
            std::lock_guard<std::mutex> lock(log_mu);
            const BenchResult& r = results[i];
            std::cout << o.experiment << " sr=" << jobs[i].sr << " snr=" << jobs[i].snr
                      << " rank_init=" << jobs[i].rank_init << " h=" << jobs[i].lengthscale
                      << " trial=" << jobs[i].trial;
            if (r.error.empty()) {
                std::cout << " rank=" << r.final_rank << " rrse=" << r.rrse;
                if (r.has_heldout) std::cout << " heldout_rrse=" << r.heldout_rrse;
            } else {
                std::cout << " ERROR: " << r.error;
            }
            std::cout << std::endl;
        }
    };
    const int nthreads = std::max(1, std::min<int>(g.threads, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int i = 1; i < nthreads; ++i) pool.emplace_back(worker);
    worker();
    for (std::thread& th : pool) th.join();

    const std::string results_path = out_path(g, "results.csv");
    {
        std::ofstream f(results_path);
        if (!f) throw fbtc::IoError("cannot open for writing: " + results_path);
        f << "experiment,sr,snr,rank_init,lengthscale,trial,seed,final_rank,iters,converged,"
             "rrse,heldout_rrse,error\n";
        for (size_t i = 0; i < jobs.size(); ++i) {
            const BenchJob& jb = jobs[i];
            const BenchResult& r = results[i];
            f << o.experiment << ',' << fmt17(jb.sr) << ',' << fmt17(jb.snr) << ','
              << jb.rank_init << ',' << fmt17(jb.lengthscale) << ',' << jb.trial << ',' << jb.seed
              << ',' << r.final_rank << ',' << r.iters << ',' << (r.converged ? 1 : 0) << ','
              << fmt17(r.rrse) << ',' << (r.has_heldout ? fmt17(r.heldout_rrse) : "") << ','
              << r.error << '\n';
        }
    }
    man.output(results_path);

    const std::string table_path = out_path(g, "table.csv");
    {
        std::ofstream f(table_path);
        if (!f) throw fbtc::IoError("cannot open for writing: " + table_path);
        f << "experiment,sr,snr,rank_init,lengthscale,trials,rrse_mean,rrse_std,"
             "heldout_rrse_mean,heldout_rrse_std,modal_rank,modal_rank_count\n";
        for (size_t i = 0; i < jobs.size(); i += static_cast<size_t>(o.trials)) {
            double sum = 0, sum2 = 0, hsum = 0, hsum2 = 0;
            int n = 0;
            bool heldout = false;
            std::map<int, int> rank_count;
            for (int t = 0; t < o.trials; ++t) {
                const BenchResult& r = results[i + static_cast<size_t>(t)];
                if (!r.error.empty()) continue;
                sum += r.rrse;
                sum2 += r.rrse * r.rrse;
                if (r.has_heldout) {
                    hsum += r.heldout_rrse;
                    hsum2 += r.heldout_rrse * r.heldout_rrse;
                    heldout = true;
                }
                ++rank_count[r.final_rank];
                ++n;
            }
            const BenchJob& jb = jobs[i];
            f << o.experiment << ',' << fmt17(jb.sr) << ',' << fmt17(jb.snr) << ','
              << jb.rank_init << ',' << fmt17(jb.lengthscale) << ',' << n << ',';
            if (n > 0) {
                const double mean = sum / n;
                const double var = std::max(0.0, sum2 / n - mean * mean);
                f << fmt17(mean) << ',' << fmt17(std::sqrt(var)) << ',';
                if (heldout) {
                    const double hmean = hsum / n;
                    const double hvar = std::max(0.0, hsum2 / n - hmean * hmean);
                    f << fmt17(hmean) << ',' << fmt17(std::sqrt(hvar)) << ',';
                } else {
                    f << ",,";
                }
                int modal = 0, modal_n = 0;
                for (const auto& [rk, c] : rank_count)
                    if (c > modal_n) {
                        modal = rk;
                        modal_n = c;
                    }
                f << modal << ',' << modal_n << '\n';
            } else {
                f << ",,,,,\n";
            }
        }
    }
    man.output(table_path);
    man.write();

    for (const BenchResult& r : results)
        if (!r.error.empty()) {
            std::cerr << "bench: " << r.error << '\n';
            return 3;
        }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    GlobalOpts g;
    {
        std::ostringstream cmd;
        for (int i = 0; i < argc; ++i) cmd << (i ? " " : "") << argv[i];
        g.command_line = cmd.str();
    }

    CLI::App app{"Functional Bayesian tensor completion with automatic rank revelation"};
    app.require_subcommand(1);
    app.add_option("--seed", g.seed, "Base RNG seed");
    app.add_option("--out-dir", g.out_dir, "Output directory (created if missing)");
    app.add_option("--threads", g.threads, "Worker threads for bench trials");

    SynthOpts so;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--kind", so.kind, "random-cp or continuous");
    synth->add_option("--dims", so.dims, "Comma-separated mode sizes");
    synth->add_option("--rank", so.rank, "True CP rank (random-cp only)");
    synth->add_option("--snr", so.snr, "Noise level in dB");
    synth->add_option("--sr", so.sr, "Sampling rate in (0,1]");

    FitOpts fo;
    CLI::App* fit = app.add_subcommand("fit", "Fit the model to a point-cloud CSV");
    fit->add_option("--input", fo.input, "Observations CSV (i1,...,iK,y)")->required();
    fit->add_option("--kernel", fo.kernel, "matern52, rbf, exponential, or identity");
    fit->add_option("--lengthscale", fo.lengthscale, "Kernel lengthscale (all modes)");
    fit->add_option("--lengthscale-k", fo.lengthscale_k, "Per-mode override k:h (repeatable)");
    fit->add_option("--jitter", fo.jitter, "Gram jitter; negative = auto");
    fit->add_option("--rank-init", fo.rank_init, "Initial rank; -1 = max mode size");
    fit->add_option("--prune-ratio", fo.prune_ratio, "Relative variance pruning threshold");
    fit->add_option("--max-iters", fo.max_iters, "Sweep cap");
    fit->add_option("--conv-tol", fo.conv_tol, "Relative reconstruction-change tolerance");
    fit->add_option("--init", fo.init, "deflate, svd, or random");
    fit->add_option("--hyperprior", fo.hyperprior, "Gamma hyperpriors a,b,a0,b0");
    fit->add_option("--merge-tol", fo.merge_tol, "Coordinate quantization before gridding; 0 = off");
    fit->add_flag("--save-reconstruction", fo.save_recon, "Write the posterior mean over the training grid");

    PredictOpts po;
    CLI::App* predict = app.add_subcommand("predict", "Predict at real-valued indices");
    predict->add_option("--model", po.model, "Checkpoint from fit")->required();
    predict->add_option("--query", po.query, "Query CSV (i1,...,iK)")->required();
    predict->add_option("--predict-noise", po.noise, "jitter or learned");
    predict->add_flag("--with-std", po.with_std, "Emit per-mode per-rank factor stds");

    EvalOpts eo;
    CLI::App* eval = app.add_subcommand("eval", "Compare an estimate against the truth");
    eval->add_option("--truth", eo.truth, "Truth tensor (.txt) or image (.pgm/.ppm)")->required();
    eval->add_option("--estimate", eo.estimate, "Estimate, same format")->required();
    eval->add_option("--peak", eo.peak, "Peak value for PSNR/SSIM");

    BenchOpts bo;
    CLI::App* bench = app.add_subcommand("bench", "Run an experiment sweep");
    bench->add_option("experiment", bo.experiment,
                      "synth-discrete, synth-continuous, rank-sweep, or kernel-sweep")
        ->required();
    bench->add_option("--trials", bo.trials, "Trials per cell");
    bench->add_option("--dims", bo.dims, "Mode sizes; default 30^3 discrete, 50^3 continuous");
    bench->add_option("--rank", bo.rank, "True rank of discrete data");
    bench->add_option("--srs", bo.srs, "Sampling rates (synth-discrete)");
    bench->add_option("--snrs", bo.snrs, "SNRs in dB (synth-discrete)");
    bench->add_option("--sr", bo.sr, "Sampling rate (continuous experiments)");
    bench->add_option("--snr", bo.snr, "SNR in dB (continuous experiments)");
    bench->add_option("--rank-inits", bo.rank_inits, "Initial ranks (rank-sweep)");
    bench->add_option("--lengthscales", bo.lengthscales, "Lengthscales (kernel-sweep)");
    bench->add_option("--kernel", bo.kernel, "Kernel override");
    bench->add_option("--lengthscale", bo.lengthscale, "Lengthscale override");
    bench->add_option("--rank-init", bo.rank_init, "Initial rank; -1 = max mode size");
    bench->add_option("--max-iters", bo.max_iters, "Sweep cap");
    bench->add_option("--conv-tol", bo.conv_tol, "Convergence tolerance");
    bench->add_option("--prune-ratio", bo.prune_ratio, "Pruning threshold");
    bench->add_option("--init", bo.init, "Initialization scheme");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        std::filesystem::create_directories(g.out_dir);
        if (*synth) return cmd_synth(g, so);
        if (*fit) return cmd_fit(g, fo);
        if (*predict) return cmd_predict(g, po);
        if (*eval) return cmd_eval(g, eo);
        if (*bench) return cmd_bench(g, bo);
        std::cerr << "no subcommand selected\n";
        return 2;
    } catch (const fbtc::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const fbtc::IoError& e) {
        std::cerr << "i/o failure: " << e.what() << '\n';
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o failure: " << e.what() << '\n';
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    }
}
