#pragma once

// Synthetic multi-tissue RNA-seq counts, expression preprocessing (gene
// filtering, TMM, inverse normal transform) and the blood-to-tissue ridge
// crosstalk analysis with bootstrapped R².

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dtwin/errors.hpp"
#include "dtwin/gan.hpp"

namespace dtwin::omics {

/// Raw counts, one row per sample. Donor covariates are per sample and may be
/// empty when unknown.
struct CountMatrix {
    std::vector<std::string> samples, donors, tissues;  // per sample
    std::vector<std::string> genes;
    std::vector<double> gene_lengths;  // bp, per gene
    Eigen::MatrixXd counts;            // samples x genes, non-negative integers
    std::vector<double> age;
    std::vector<std::size_t> sex;  // 1 or 2

    std::size_t n_samples() const { return samples.size(); }
    std::size_t n_genes() const { return genes.size(); }
    Eigen::VectorXd library_sizes() const { return counts.rowwise().sum(); }
    /// DataError on shape mismatch, negative or fractional counts, duplicate genes.
    void validate() const;
    CountMatrix select_samples(const std::vector<std::size_t>& idx) const;
    CountMatrix select_genes(const std::vector<std::size_t>& idx) const;
    std::optional<std::size_t> gene_index(const std::string& gene) const;
};

struct GeneSet {
    std::string pathway;
    std::vector<std::string> genes;
};

/// Built-in pathway fixture: renin_angiotensin, chemokine, tnf, tgf_beta.
std::vector<GeneSet> default_gene_sets();
/// {pathway: [genes]}; DataError on empty sets or repeated names.
std::vector<GeneSet> load_gene_sets(const std::filesystem::path& path);
void validate_gene_sets(const std::vector<GeneSet>& sets);
const GeneSet& find_gene_set(const std::vector<GeneSet>& sets, const std::string& pathway);
/// Union of the named pathways, first occurrence order.
std::vector<std::string> union_genes(const std::vector<GeneSet>& sets, const std::vector<std::string>& pathways);

/// Deterministic fixture length in [500, 5000] bp from the gene name.
double fixture_gene_length(const std::string& gene);

inline const std::string kBlood = "whole_blood";
inline const std::vector<std::string> kTargetTissues{"lung", "kidney_cortex", "pancreas", "heart_left_ventricle"};
inline const std::vector<std::string> kSignallingPathways{"chemokine", "tnf", "tgf_beta"};
inline const std::string kRasPathway = "renin_angiotensin";

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
    std::size_t donors = 600;
    std::vector<std::string> tissues{kBlood, "lung", "kidney_cortex", "pancreas", "heart_left_ventricle"};
    /// Per-tissue chance that a donor has a sample.
    std::vector<double> availability{0.80, 0.50, 0.074, 0.31, 0.39};
    std::vector<GeneSet> gene_sets = default_gene_sets();
    std::size_t background_genes = 10;  // lowly expressed, fail the filters

    /// Share of each target-tissue RAS gene's latent variance carried by the
    /// donor signal that also drives blood signalling genes.
    double coupling = 0.5;
    double blood_share = 0.7;      // same for blood signalling genes
    std::size_t private_factors = 3;
    double log_sd = 1.0;           // latent scale on the log-mean
    double dispersion = 0.05;      // negative binomial, var = mu + phi mu^2
    double depth = 2e4;            // mean library size
    std::uint64_t seed = 0;

    void validate() const;  // ContractError
};

/// Negative-binomial counts from a low-rank Gaussian factor model. Every donor
/// carries a scalar signal s; blood signalling genes load on s with share
/// blood_share and target-tissue RAS genes with share coupling.
CountMatrix synth_counts(const SynthConfig& config);

// ---------------------------------------------------------------------------
// Preprocessing

/// Transcripts per million from counts and gene lengths.
Eigen::MatrixXd tpm(const CountMatrix& counts);

struct FilterThresholds {
    double min_tpm = 0.1;
    double min_reads = 6;
    double min_fraction = 0.2;  // inclusive
};

/// Indices of genes with TPM >= min_tpm and reads >= min_reads, each in at
/// least min_fraction of samples.
std::vector<std::size_t> filter_genes(const CountMatrix& counts, const FilterThresholds& th = {});

class NormalizationError : public DataError {
public:
    using DataError::DataError;
};

/// Sample whose upper-quartile-scaled counts are closest to the mean upper quartile.
std::size_t default_reference(const CountMatrix& counts);

struct TmmOptions {
    double trim_m = 0.3;
    double trim_a = 0.05;
};

/// TMM scale factors against `reference`, rescaled to geometric mean 1.
std::vector<double> tmm_factors(const CountMatrix& counts, std::size_t reference, const TmmOptions& opt = {});
/// Library size times TMM factor.
std::vector<double> effective_library_sizes(const CountMatrix& counts, const std::vector<double>& factors);
/// Counts per million against the effective library sizes.
Eigen::MatrixXd normalized_cpm(const CountMatrix& counts, const std::vector<double>& factors);

class TransformError : public DataError {
public:
    using DataError::DataError;
};

/// Phi^-1((rank - 0.5) / N) with average ranks for ties. TransformError on
/// fewer than two distinct values.
std::vector<double> inverse_normal_transform(std::span<const double> values);

/// One tissue after preprocessing: samples x genes, one donor per row.
struct ExpressionTable {
    std::string tissue;
    std::vector<std::string> donors, genes;
    Eigen::MatrixXd values;

    std::optional<std::size_t> gene_index(const std::string& gene) const;
    std::optional<std::size_t> donor_index(const std::string& donor) const;
};

/// Per tissue: filter, TMM, CPM, then inverse normal transform per gene.
/// Tissues with fewer than 3 samples are dropped.
std::vector<ExpressionTable> preprocess(const CountMatrix& counts, const FilterThresholds& th = {},
                                        const TmmOptions& tmm = {});
const ExpressionTable* find_table(const std::vector<ExpressionTable>& tables, const std::string& tissue);

// ---------------------------------------------------------------------------
// Ridge regression

/// Y ~ standardize(X) W + intercept. W is predictors x targets.
struct RidgeFit {
    Eigen::MatrixXd W;
    Eigen::RowVectorXd intercepts;
    Eigen::RowVectorXd x_mean, x_scale;
    double alpha = 0;
    Eigen::MatrixXd residuals;  // on the training rows

    Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const;
    /// Coefficients on the raw X scale.
    Eigen::MatrixXd raw_coefficients() const;
};

/// Closed form W = (Xs'Xs + alpha I)^-1 Xs'Yc with Xs the column-standardized X.
RidgeFit fit_ridge(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double alpha);

/// Per-column 1 - SSE/SST, SST around the column mean of Y. Constant columns give NaN.
Eigen::RowVectorXd r2_scores(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& predicted);

struct RidgeCvConfig {
    std::vector<double> alphas = log_grid(1e-2, 1e4, 13);
    std::size_t folds = 5;
    std::uint64_t seed = 0;

    static std::vector<double> log_grid(double lo, double hi, std::size_t n);
};

struct RidgeCvResult {
    RidgeFit fit;                  // refit on all rows at the best alpha
    std::vector<double> alphas;
    std::vector<double> cv_r2;     // mean over targets of out-of-fold R²
};

/// Picks alpha by k-fold cross-validated R² (ties go to the larger alpha).
/// DataError when there are fewer rows than 2 folds need.
RidgeCvResult fit_ridge_cv(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const RidgeCvConfig& cfg = {});

using FitProcedure = std::function<RidgeFit(const Eigen::MatrixXd&, const Eigen::MatrixXd&)>;

struct BootstrapConfig {
    std::size_t replicates = 200;
    std::uint64_t seed = 0;
    std::size_t workers = 0;  // 0: hardware concurrency
};

struct GeneR2 {
    double mean = 0, lo = 0, hi = 0;
    std::size_t evaluated = 0;  // replicates with a finite score
};

struct BootstrapReport {
    std::vector<GeneR2> genes;  // one per column of Y
    std::size_t replicates = 0, skipped = 0;
    std::vector<std::vector<double>> scores;  // [replicate][gene], NaN if undefined
};

/// Resamples rows with replacement, refits with `fit` and scores R² on the
/// out-of-bag rows. Replicates with a single distinct in-bag row or fewer than
/// two out-of-bag rows are skipped. Results do not depend on `workers`.
BootstrapReport bootstrap_r2(const FitProcedure& fit, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                             const BootstrapConfig& cfg = {});

// ---------------------------------------------------------------------------
// Crosstalk analysis

struct CrosstalkConfig {
    std::string source = kBlood;
    std::vector<std::string> targets = kTargetTissues;
    std::vector<std::string> predictor_pathways = kSignallingPathways;
    std::string target_pathway = kRasPathway;
    RidgeCvConfig cv;
    BootstrapConfig bootstrap;
};

struct TissueReport {
    std::string tissue;
    std::string status = "ok";  // or "insufficient_donors", "missing_tissue"
    std::size_t donors = 0, predictors = 0;
    double alpha = 0;
    std::vector<std::string> genes;
    BootstrapReport bootstrap;
};

/// Donor-matched X (source predictor genes) and Y (target RAS genes).
struct MatchedData {
    std::vector<std::string> donors, predictors, targets;
    Eigen::MatrixXd X, Y;
};
MatchedData match_donors(const ExpressionTable& source, const ExpressionTable& target,
                         const std::vector<std::string>& predictor_genes, const std::vector<std::string>& target_genes);

/// Alpha is chosen once by cross-validation on all matched donors, then held
/// fixed inside the bootstrap.
std::vector<TissueReport> crosstalk(const std::vector<ExpressionTable>& tables, const std::vector<GeneSet>& sets,
                                    const CrosstalkConfig& cfg = {});
/// {"schema_version", "config", "tissues": {tissue: {"status", "donors", "alpha",
/// "skipped", "genes": {gene: {r2_mean, r2_lo, r2_hi}}}}}
nlohmann::json crosstalk_json(const std::vector<TissueReport>& reports, const CrosstalkConfig& cfg);

// ---------------------------------------------------------------------------
// Files and GAN handoff

/// Long format: sample_id,donor_id,tissue,gene,count (zero counts included).
void write_counts_csv(const CountMatrix& counts, const std::filesystem::path& path);
/// Inverse of write_counts_csv; gene lengths come from fixture_gene_length.
CountMatrix read_counts_csv(const std::filesystem::path& path);
/// donor_id,age,sex
void write_donors_csv(const CountMatrix& counts, const std::filesystem::path& path);
/// Fills counts.age and counts.sex from a donors CSV. DataError when a donor
/// of the matrix is missing from the file.
void read_donors_csv(const std::filesystem::path& path, CountMatrix& counts);

/// Donor-level GAN training data: tissue-major expression of `genes` in each
/// of `tissues` (mask 0 where the donor has no sample), covariates
/// r = [age standardized, ace2 expression in ace2_tissue (0 if missing)] and
/// q = [sex]. Donors lacking every tissue are left out.
struct GanData {
    gan::OmicsBatch batch;
    std::vector<std::string> donors, tissues, genes, covariates;
};
GanData gan_data(const CountMatrix& raw, const std::vector<ExpressionTable>& tables,
                 const std::vector<std::string>& tissues, const std::vector<std::string>& genes,
                 const std::string& ace2_tissue = "lung");

}  // namespace dtwin::omics
