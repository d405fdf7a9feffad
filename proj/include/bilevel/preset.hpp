#ifndef BILEVEL_PRESET_HPP
#define BILEVEL_PRESET_HPP

#include <string>
#include <vector>

#include <json.hpp>

namespace bilevel {

/// Fully resolved experiment configuration. Serialized as nested JSON with
/// sections mirroring the field prefixes below; unknown keys are rejected.
struct ExperimentPreset {
    std::string name;

    // mesh / grid
    int mesh_dimension = 1;
    int mesh_nodes = 33;
    std::string boundary = "dirichlet";

    // prior covariance beta (tau^2 - Delta)^{-alpha} and KL sampling
    double beta = 1.0;
    double tau = 0.0;
    double alpha = 2.0;
    double lambda_star = 1.0;
    int truncation = 1;
    std::string law = "gaussian";

    // observation
    int observation_count = 1;
    double gamma = 0.1;
    unsigned long long observation_seed = 7;  // fixes the observed points

    // signal model
    double signal_rate = 10.0;
    double signal_horizon = 1.0;
    double signal_sigma = 0.1;
    int signal_grid = 1000;

    // sgd
    double sgd_beta0 = 1.0;
    double sgd_exponent = 1.0;
    double sgd_h0 = 0.01;
    bool sgd_movement_cap = false;
    std::string sgd_h_decay = "fixed";  // fixed | step-scaled
    double lambda_lower = 1e-4;
    double lambda_upper = 10.0;
    double sgd_lambda0 = 1.0;
    int sgd_m = 50;
    int sgd_iterations = 1000;

    // study scale
    std::vector<int> n_list;
    int repetitions = 200;
    std::vector<int> mesh_nodes_list;
    int seeds = 50;
    unsigned long long master_seed = 1234;
    bool full_scale = false;

    // direct linear instances
    int linear_dimension = 1;

    void validate() const;
};

std::vector<std::string> builtin_preset_names();
ExperimentPreset builtin_preset(const std::string& name);

ExperimentPreset parse_preset(const nlohmann::json& j);
nlohmann::json preset_to_json(const ExperimentPreset& p);
ExperimentPreset load_preset(const std::string& path);

/// Applies one "section.key=value" override; unknown keys are errors.
void apply_override(ExperimentPreset& p, const std::string& assignment);

/// Restores the paper-scale Monte Carlo budgets behind --full.
void apply_full_scale(ExperimentPreset& p);

}  // namespace bilevel

#endif
