#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "bilevel/erm.hpp"
#include "bilevel/errors.hpp"
#include "bilevel/preset.hpp"
#include "bilevel/sgd.hpp"
#include "bilevel/studies.hpp"

namespace fs = std::filesystem;
using namespace bilevel;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct CommonOptions {
    std::string preset_spec;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    long long seed = -1;
    int threads = 0;
    bool full = false;
};

void add_common(CLI::App* cmd, CommonOptions& opt) {
    cmd->add_option("--preset", opt.preset_spec,
                    "Preset file path or builtin name")
        ->required();
    cmd->add_option("--set", opt.overrides,
                    "Override a preset key, e.g. --set sgd.lambda0=0.5");
    cmd->add_option("--out", opt.out_dir, "Output directory");
    cmd->add_option("--seed", opt.seed, "Master seed override");
    cmd->add_option("--threads", opt.threads, "Worker thread count");
    cmd->add_flag("--full", opt.full, "Use the full paper-scale budgets");
}

ExperimentPreset resolve_preset(const CommonOptions& opt) {
    ExperimentPreset p = fs::exists(opt.preset_spec)
                             ? load_preset(opt.preset_spec)
                             : builtin_preset(opt.preset_spec);
    for (const auto& o : opt.overrides) apply_override(p, o);
    if (opt.seed >= 0) {
        p.master_seed = static_cast<unsigned long long>(opt.seed);
        p.validate();
    }
    if (opt.full) apply_full_scale(p);
    return p;
}

void apply_environment(CommonOptions& opt) {
    if (const char* dir = std::getenv("BILEVEL_OUT"); dir && opt.out_dir == "out")
        opt.out_dir = dir;
    if (const char* th = std::getenv("BILEVEL_THREADS"); th && opt.threads == 0)
        opt.threads = std::atoi(th);
    if (opt.threads > 0) Eigen::setNbThreads(opt.threads);
}

std::string out_path(const CommonOptions& opt, const std::string& file) {
    fs::create_directories(opt.out_dir);
    return (fs::path(opt.out_dir) / file).string();
}

void emit_failure_manifest(const CommonOptions& opt, const ExperimentPreset* p,
                           const std::string& error) {
    if (!p) return;
    try {
        write_manifest(out_path(opt, "manifest.json"), *p, nullptr, {}, false,
                       error);
    } catch (...) {
        // manifest best effort; the exit code already carries the failure
    }
}

GradientKind default_kind(const ExperimentPreset& p) {
    return preset_category(p) == PresetCategory::Nonlinear
               ? GradientKind::CentralDifference
               : GradientKind::Exact;
}

void write_dataset_csv(const std::string& path, const ExperimentPreset& p,
                       const TrainingSet& ds) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NumericalError("dataset: cannot open '" + path + "'");
    out << "# bilevel-csv v1 study=dataset preset=" << p.name << " hash="
        << preset_hash(p) << " seed=" << p.master_seed << "\n";
    out << "pair";
    for (int i = 0; i < ds.targets.rows(); ++i) out << ",u" << i;
    for (int i = 0; i < ds.observations.rows(); ++i) out << ",y" << i;
    out << "\n";
    char buf[32];
    for (int j = 0; j < ds.size(); ++j) {
        out << j;
        for (int i = 0; i < ds.targets.rows(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.targets(i, j));
            out << "," << buf;
        }
        for (int i = 0; i < ds.observations.rows(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.observations(i, j));
            out << "," << buf;
        }
        out << "\n";
    }
}

void write_trace_csv(const std::string& path, const ExperimentPreset& p,
                     const SgdTrace& trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NumericalError("sgd: cannot open '" + path + "'");
    out << "# bilevel-csv v1 study=sgd-trace preset=" << p.name << " hash="
        << preset_hash(p) << " seed=" << p.master_seed << "\n";
    out << "iteration,lambda,gradient,data_index\n";
    char buf[32];
    for (size_t k = 0; k < trace.iterates.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%.17g", trace.iterates[k]);
        out << k << "," << buf << ",";
        if (k == 0) {
            out << ",";
        } else {
            std::snprintf(buf, sizeof(buf), "%.17g", trace.gradients[k - 1]);
            out << buf << "," << trace.data_indices[k - 1];
        }
        out << "\n";
    }
}

int run_validate(const CommonOptions& opt) {
    ExperimentPreset p = resolve_preset(opt);
    std::cout << preset_to_json(p).dump(2) << std::endl;
    return kExitOk;
}

int run_dataset(const CommonOptions& opt, int n) {
    ExperimentPreset p = resolve_preset(opt);
    RngStream rng = RngStream::split(p.master_seed, 0xDA7A);
    TrainingSet ds = generate_dataset(p, n, rng);
    const std::string csv = out_path(opt, "dataset.csv");
    write_dataset_csv(csv, p, ds);
    write_manifest(out_path(opt, "manifest.json"), p, nullptr, {csv}, true);
    std::cout << "wrote " << ds.size() << " pairs to " << csv << std::endl;
    return kExitOk;
}

int run_offline(const CommonOptions& opt, int n) {
    ExperimentPreset p = resolve_preset(opt);
    if (n <= 0) n = p.n_list.empty() ? 100 : p.n_list.back();
    RngStream rng = RngStream::split(p.master_seed, 0x0FF1);
    const LambdaInterval interval{p.lambda_lower, p.lambda_upper};

    OfflineResult res;
    if (preset_category(p) == PresetCategory::Linear) {
        LinearInstance inst = make_linear_instance(p);
        TrainingSet ds = sample_linear_dataset(inst, n, rng);
        res = LinearErmAccelerator(inst.A, inst.C0, inst.gamma, ds)
                  .minimize(interval);
    } else if (preset_category(p) == PresetCategory::Nonlinear) {
        NonlinearInstance inst = make_nonlinear_instance(p);
        TrainingSet ds = generate_dataset(p, n, rng);
        res = offline_minimize(inst.problem, nullptr, ds, interval);
    } else {
        throw ValidationError("offline: the signal preset trains online; "
                              "use the denoise subcommand");
    }

    StudyResult table;
    table.study = "offline";
    table.columns = {"n", "lambda_hat", "loss", "at_boundary", "evaluations"};
    table.rows = {{static_cast<double>(n), res.lambda_hat, res.loss,
                   res.at_boundary ? 1.0 : 0.0,
                   static_cast<double>(res.evaluations)}};
    table.preset_echo = preset_to_json(p);
    table.preset_hash = preset_hash(p);
    table.master_seed = p.master_seed;
    const std::string csv = out_path(opt, "offline.csv");
    write_csv(csv, table);
    write_manifest(out_path(opt, "manifest.json"), p, &table, {csv}, true);
    std::cout << "lambda_hat = " << res.lambda_hat
              << (res.at_boundary ? " (boundary)" : "") << std::endl;
    return kExitOk;
}

int run_sgd(const CommonOptions& opt, bool force_approx) {
    ExperimentPreset p = resolve_preset(opt);
    if (preset_category(p) == PresetCategory::Signal)
        throw ValidationError("sgd: the signal preset runs via the denoise "
                              "subcommand");
    GradientKind kind =
        force_approx ? GradientKind::CentralDifference : default_kind(p);
    std::vector<SgdTrace> traces;
    StudyResult result = online_study(p, kind, &traces);
    std::vector<std::string> outputs;
    const std::string summary = out_path(opt, "online.csv");
    write_csv(summary, result);
    outputs.push_back(summary);
    for (size_t s = 0; s < traces.size(); ++s) {
        const std::string path =
            out_path(opt, "sgd_trace_" + std::to_string(s) + ".csv");
        write_trace_csv(path, p, traces[s]);
        outputs.push_back(path);
    }
    write_manifest(out_path(opt, "manifest.json"), p, &result, outputs, true);
    std::cout << "median |bar_lambda - lambda*|^2 = "
              << result.extra["median_sq_error"].get<double>() << std::endl;
    return kExitOk;
}

int run_study(const CommonOptions& opt) {
    ExperimentPreset p = resolve_preset(opt);
    StudyResult result;
    if (p.name == "laplace1d-dim") {
        result = dimension_study(p);
    } else if (preset_category(p) == PresetCategory::Signal) {
        result = denoise_study(p);
    } else if (preset_category(p) == PresetCategory::Nonlinear) {
        result = online_study(p, GradientKind::CentralDifference);
    } else {
        result = consistency_study(p);
    }
    const std::string csv = out_path(opt, result.study + ".csv");
    write_csv(csv, result);
    write_manifest(out_path(opt, "manifest.json"), p, &result, {csv}, true);
    if (std::isfinite(result.slope))
        std::cout << "log-log slope = " << result.slope << " +- "
                  << result.slope_half_width << std::endl;
    std::cout << "wrote " << csv << std::endl;
    return kExitOk;
}

int run_denoise(const CommonOptions& opt) {
    ExperimentPreset p = resolve_preset(opt);
    StudyResult result = denoise_study(p);
    const std::string csv = out_path(opt, "denoise.csv");
    write_csv(csv, result);
    write_manifest(out_path(opt, "manifest.json"), p, &result, {csv}, true);
    std::cout << "learned beats fixed in "
              << result.extra["learned_beats_fixed_fraction"].get<double>() * 100
              << "% of seeds" << std::endl;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Batch runner for bilevel regularization-parameter learning"};
    app.require_subcommand(1);

    CommonOptions opt;
    int dataset_n = 10;
    int offline_n = 0;
    bool force_approx = false;

    CLI::App* validate = app.add_subcommand(
        "validate", "Resolve and echo a preset configuration");
    add_common(validate, opt);

    CLI::App* dataset =
        app.add_subcommand("dataset", "Generate a training dataset CSV");
    add_common(dataset, opt);
    dataset->add_option("--n", dataset_n, "Number of training pairs");

    CLI::App* offline = app.add_subcommand(
        "offline", "Offline ERM estimate of the regularization parameter");
    add_common(offline, opt);
    offline->add_option("--n", offline_n, "Training set size");

    CLI::App* sgd = app.add_subcommand(
        "sgd", "Online bilevel SGD over the preset's seed set");
    add_common(sgd, opt);
    sgd->add_flag("--approx", force_approx,
                  "Force the central-difference gradient (Algorithm 2)");

    CLI::App* study = app.add_subcommand(
        "study", "Run the preset's study (consistency/dimension/online/denoise)");
    add_common(study, opt);

    CLI::App* denoise =
        app.add_subcommand("denoise", "Signal denoising comparison table");
    add_common(denoise, opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    apply_environment(opt);

    ExperimentPreset resolved;
    bool have_preset = false;
    try {
        resolved = resolve_preset(opt);
        have_preset = true;
        if (validate->parsed()) return run_validate(opt);
        if (dataset->parsed()) return run_dataset(opt, dataset_n);
        if (offline->parsed()) return run_offline(opt, offline_n);
        if (sgd->parsed()) return run_sgd(opt, force_approx);
        if (study->parsed()) return run_study(opt);
        if (denoise->parsed()) return run_denoise(opt);
    } catch (const ValidationError& e) {
        std::cerr << "error:validation: " << e.what() << std::endl;
        emit_failure_manifest(opt, have_preset ? &resolved : nullptr, e.what());
        return kExitValidation;
    } catch (const NumericalError& e) {
        std::cerr << "error:numerical: " << e.what() << std::endl;
        emit_failure_manifest(opt, have_preset ? &resolved : nullptr, e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error:internal: " << e.what() << std::endl;
        emit_failure_manifest(opt, have_preset ? &resolved : nullptr, e.what());
        return kExitNumerical;
    }
    return kExitOk;
}
