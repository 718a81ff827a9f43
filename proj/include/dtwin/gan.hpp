#pragma once

// Conditional masked WGAN-GP over multi-tissue expression vectors, plus the
// evaluation helpers (covariate sweeps, correlation fidelity).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dtwin/errors.hpp"
#include "dtwin/nn.hpp"
#include "dtwin/tensor.hpp"

namespace dtwin::gan {

using ad::Tensor;
using nn::ParamSet;
using nn::Rng;

/// b donors. x is [b x (tissues * genes)] with tissue-major columns (all genes of
/// tissue 0, then tissue 1, ...). Unmeasured tissues have m = 0 and x = 0.
/// q holds 1-based category indices, row-major [b x c].
struct OmicsBatch {
    std::size_t tissues = 1, genes = 1, covariates = 0, categoricals = 0;
    std::size_t rows = 0;
    std::vector<double> x, m, r;
    std::vector<std::size_t> q;

    std::size_t width() const { return tissues * genes; }
    /// ContractError listing the first broken invariant.
    void validate() const;
    OmicsBatch select(const std::vector<std::size_t>& idx) const;

    Tensor x_tensor() const;
    Tensor m_tensor() const;
    Tensor r_tensor() const;
};

struct GanConfig {
    std::size_t tissues = 1, genes = 1, covariates = 0;
    std::vector<std::size_t> vocab;  // one entry per categorical covariate
    std::vector<std::size_t> embed_dims;  // empty: ceil(sqrt(v)) + 1 each

    std::size_t noise_dim = 64;
    std::vector<std::size_t> gen_hidden{256, 256};
    std::vector<std::size_t> critic_hidden{256, 256};
    double leaky_slope = 0.2;

    double lambda = 10.0;
    std::size_t n_critic = 5;
    std::size_t batch = 64;
    std::size_t iterations = 1000;  // generator updates
    double lr_gen = 1e-4, lr_critic = 1e-4;
    double beta1 = 0.0, beta2 = 0.9;
    /// Scale both learning rates by (1 - (i - 1) / iterations) at iteration i.
    bool linear_decay = false;
    std::uint64_t seed = 0;

    /// Column of r holding the swept covariate (ACE2 level) for conditional sweeps.
    std::optional<std::size_t> ace2_index;

    /// Empty when valid.
    std::vector<std::string> violations() const;
    void validate() const;  // ContractError with all violations
    nlohmann::json to_json() const;
    static GanConfig from_json(const nlohmann::json& j);
};

/// The two players. Generator parameters live under "gen.", critic parameters
/// under "critic."; each player has its own embedding tables.
class CondGan {
public:
    explicit CondGan(GanConfig config);

    const GanConfig& config() const { return config_; }
    const nn::Mlp& generator_mlp() const { return gen_; }
    const nn::Mlp& critic_mlp() const { return critic_; }
    const std::vector<nn::EmbeddingTable>& gen_embeddings() const { return gen_emb_; }
    const std::vector<nn::EmbeddingTable>& critic_embeddings() const { return critic_emb_; }

    void init_generator(ParamSet& params, Rng& rng) const;
    void init_critic(ParamSet& params, Rng& rng) const;

    /// m (broadcast over genes) times MLP(z | r | e^G), [b x tissues*genes].
    Tensor generate(const ParamSet& gen, const Tensor& z, const Tensor& r, const std::vector<std::size_t>& q,
                    const Tensor& m) const;
    /// MLP(x | m | r | e^D), [b x 1]. Entries of x under m = 0 must already be zero.
    Tensor critic(const ParamSet& critic, const Tensor& x, const Tensor& m, const Tensor& r,
                  const std::vector<std::size_t>& q) const;

    /// [b x tissues*genes] 0/1 matrix: the mask repeated over each tissue's genes.
    Tensor broadcast_mask(const Tensor& m) const;
    /// b draws from the standard normal prior, [b x noise_dim].
    Tensor sample_noise(std::size_t b, Rng& rng) const;

private:
    void check_inputs(const char* who, std::size_t b, const Tensor& r, const std::vector<std::size_t>& q,
                      const Tensor& m) const;

    GanConfig config_;
    nn::Mlp gen_, critic_;
    std::vector<nn::EmbeddingTable> gen_emb_, critic_emb_;
    Tensor expand_;  // tissues x tissues*genes
};

class PenaltyError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

struct PenaltyResult {
    Tensor penalty;              // scalar, differentiable w.r.t. critic parameters
    std::vector<double> norms;   // per-sample input-gradient norms
};

/// mean_i (||grad_x D(x~_i)|| - 1)^2 with x~_i = alpha_i x_i + (1 - alpha_i) xhat_i.
PenaltyResult gradient_penalty(const CondGan& gan, const ParamSet& critic, const Tensor& x, const Tensor& xhat,
                               const Tensor& m, const Tensor& r, const std::vector<std::size_t>& q,
                               const std::vector<double>& alpha);
/// Same, with alpha_i ~ U(0, 1) drawn from `rng`.
PenaltyResult gradient_penalty(const CondGan& gan, const ParamSet& critic, const Tensor& x, const Tensor& xhat,
                               const Tensor& m, const Tensor& r, const std::vector<std::size_t>& q, Rng& rng);

struct IterationStats {
    double critic_loss = 0;  // last critic step, penalty included
    double penalty = 0;      // unweighted
    double wasserstein = 0;  // mean D(x) - mean D(xhat)
    double grad_norm_mean = 0, grad_norm_sd = 0;
    double gen_loss = 0;
};

struct GanState {
    ParamSet gen, critic;
    nn::OptimizerState gen_opt, critic_opt;
    std::size_t iteration = 0;
};

class GanDivergedError : public RuntimeFailure {
public:
    explicit GanDivergedError(std::size_t iteration)
        : RuntimeFailure("GAN training diverged (non-finite loss) at iteration " + std::to_string(iteration)),
          iteration_(iteration) {}
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// Fresh parameters and Adam states from config.seed.
GanState init_state(const CondGan& gan);

/// One critic update on the given real batch; returns the loss before the step.
IterationStats critic_step(const CondGan& gan, GanState& state, const OmicsBatch& real, Rng& rng);
/// One generator update using covariates and masks of `cond`; returns -mean D(xhat).
double generator_step(const CondGan& gan, GanState& state, const OmicsBatch& cond, Rng& rng);

struct GanResult {
    ParamSet gen, critic;
    std::vector<IterationStats> history;
};

/// config.iterations rounds of n_critic critic updates then one generator
/// update, each on a fresh mini-batch.
GanResult train_wgan_gp(const OmicsBatch& data, const GanConfig& config,
                        const std::function<void(std::size_t, const IterationStats&)>& on_iteration = {});

/// Synthetic donors for the given covariates and masks, noise from `seed`.
OmicsBatch sample(const CondGan& gan, const ParamSet& gen, const OmicsBatch& cond, std::uint64_t seed);

/// One output row per level, ascending by level. z, r, q and m describe a
/// single donor; only r[ace2_index] changes across rows.
struct SweepResult {
    std::vector<double> levels;
    std::vector<std::vector<double>> outputs;
};
SweepResult conditional_sweep(const CondGan& gan, const ParamSet& gen, const std::vector<double>& z,
                              std::vector<double> r, const std::vector<std::size_t>& q, const std::vector<double>& m,
                              std::vector<double> levels);

// ---------------------------------------------------------------------------
// Correlation fidelity

struct CorrelationMatrix {
    std::vector<std::string> genes;
    Eigen::MatrixXd r;
};

/// Pearson correlations between columns. Columns with zero variance are left
/// out and their names appended to `excluded`.
CorrelationMatrix pearson(const Eigen::MatrixXd& samples, const std::vector<std::string>& genes,
                          std::vector<std::string>* excluded = nullptr);

struct FidelityReport {
    std::vector<std::string> genes;     // kept in both
    std::vector<std::string> excluded;  // zero variance in real or synthetic
    Eigen::MatrixXd real, synthetic, diff;  // diff = synthetic - real
    double mean_abs_diff = 0;               // over pairs i < j
};

/// Needs at least 3 rows in each sample set.
FidelityReport correlation_fidelity(const Eigen::MatrixXd& real, const Eigen::MatrixXd& synthetic,
                                    const std::vector<std::string>& genes);

struct StratifiedFidelity {
    FidelityReport low, high;
    std::size_t real_low = 0, real_high = 0, synthetic_low = 0, synthetic_high = 0;
    double mean_abs_diff = 0;  // average of the two strata
};

/// Median split on `key` (per sample): the lower floor(n/2) samples form the
/// low stratum, the rest the high one. Ties keep input order.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> median_split(const std::vector<double>& key);

StratifiedFidelity stratified_fidelity(const Eigen::MatrixXd& real, const std::vector<double>& real_key,
                                       const Eigen::MatrixXd& synthetic, const std::vector<double>& synthetic_key,
                                       const std::vector<std::string>& genes);

nlohmann::json to_json(const FidelityReport& r);

// ---------------------------------------------------------------------------
// Export and persistence

/// sample_id,tissue,gene,value for measured tissues only.
void write_samples_csv(const OmicsBatch& batch, const std::vector<std::string>& tissue_names,
                       const std::vector<std::string>& gene_names, const std::filesystem::path& path);
/// {"covariates": [...], "r": [[...]], "q": [[...]], "m": [[...]]}
nlohmann::json covariate_sidecar(const OmicsBatch& batch, const std::vector<std::string>& covariate_names);

/// Config, seed and a diagnostics summary (first/last iteration, means of the last 10%).
nlohmann::json run_manifest(const GanConfig& config, const std::vector<IterationStats>& history);

struct GanModel {
    GanConfig config;
    ParamSet gen, critic;
    nlohmann::json meta = nlohmann::json::object();
};
void save_model(const std::filesystem::path& path, const GanModel& model);
GanModel load_model(const std::filesystem::path& path);

}  // namespace dtwin::gan
