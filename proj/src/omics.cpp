#include "dtwin/omics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <boost/math/distributions/normal.hpp>

#include "dtwin/forecast.hpp"
#include "dtwin/nn.hpp"

namespace dtwin::omics {

using nn::Rng;

// ---------------------------------------------------------------------------
// CountMatrix

void CountMatrix::validate() const {
    const auto n = samples.size();
    if (donors.size() != n || tissues.size() != n)
        throw DataError("CountMatrix: donors/tissues must have one entry per sample");
    if (gene_lengths.size() != genes.size()) throw DataError("CountMatrix: one length per gene");
    if (static_cast<std::size_t>(counts.rows()) != n || static_cast<std::size_t>(counts.cols()) != genes.size())
        throw DataError("CountMatrix: counts must be samples x genes");
    if (!age.empty() && age.size() != n) throw DataError("CountMatrix: age must be empty or per sample");
    if (!sex.empty() && sex.size() != n) throw DataError("CountMatrix: sex must be empty or per sample");
    std::set<std::string> seen;
    for (const auto& g : genes)
        if (!seen.insert(g).second) throw DataError("CountMatrix: duplicate gene " + g);
    for (double len : gene_lengths)
        if (!(len > 0)) throw DataError("CountMatrix: gene lengths must be positive");
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
        const double c = counts.data()[i];
        if (!(c >= 0) || c != std::floor(c)) throw DataError("CountMatrix: counts must be non-negative integers");
    }
}

CountMatrix CountMatrix::select_samples(const std::vector<std::size_t>& idx) const {
    CountMatrix out;
    out.genes = genes;
    out.gene_lengths = gene_lengths;
    out.counts.resize(static_cast<Eigen::Index>(idx.size()), counts.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = idx[k];
        out.samples.push_back(samples.at(i));
        out.donors.push_back(donors.at(i));
        out.tissues.push_back(tissues.at(i));
        if (!age.empty()) out.age.push_back(age[i]);
        if (!sex.empty()) out.sex.push_back(sex[i]);
        out.counts.row(static_cast<Eigen::Index>(k)) = counts.row(static_cast<Eigen::Index>(i));
    }
    return out;
}

CountMatrix CountMatrix::select_genes(const std::vector<std::size_t>& idx) const {
    CountMatrix out = *this;
    out.genes.clear();
    out.gene_lengths.clear();
    out.counts.resize(counts.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        out.genes.push_back(genes.at(idx[k]));
        out.gene_lengths.push_back(gene_lengths.at(idx[k]));
        out.counts.col(static_cast<Eigen::Index>(k)) = counts.col(static_cast<Eigen::Index>(idx[k]));
    }
    return out;
}

std::optional<std::size_t> CountMatrix::gene_index(const std::string& gene) const {
    const auto it = std::find(genes.begin(), genes.end(), gene);
    if (it == genes.end()) return std::nullopt;
    return static_cast<std::size_t>(it - genes.begin());
}

// ---------------------------------------------------------------------------
// Gene sets

std::vector<GeneSet> default_gene_sets() {
    return {
        {"renin_angiotensin",
         {"ACE", "ACE2", "AGT", "AGTR1", "AGTR2", "ANPEP", "ATP6AP2", "CMA1", "CPA3", "CTSA", "CTSG", "ENPEP",
          "LNPEP", "MAS1", "MME", "NLN", "PRCP", "PREP", "REN", "THOP1"}},
        {"chemokine",
         {"CCL2", "CCL3", "CCL4", "CCL5", "CCR2", "CCR5", "CX3CL1", "CXCL8", "CXCL10", "CXCL12", "CXCR4", "JAK2",
          "STAT3", "RAC1"}},
        {"tnf",
         {"TNF", "TNFRSF1A", "TNFRSF1B", "TRADD", "TRAF2", "RIPK1", "NFKB1", "MAPK14", "IL6", "IL1B", "CCL2",
          "CXCL10"}},
        {"tgf_beta",
         {"TGFB1", "TGFB2", "TGFBR1", "TGFBR2", "SMAD2", "SMAD3", "SMAD4", "SMAD7", "BMP2", "ACVR1", "THBS1",
          "TNF"}},
    };
}

void validate_gene_sets(const std::vector<GeneSet>& sets) {
    std::set<std::string> names;
    for (const auto& s : sets) {
        if (s.pathway.empty()) throw DataError("gene set with an empty pathway name");
        if (!names.insert(s.pathway).second) throw DataError("duplicate pathway " + s.pathway);
        if (s.genes.empty()) throw DataError("gene set " + s.pathway + " is empty");
        std::set<std::string> seen;
        for (const auto& g : s.genes)
            if (g.empty() || !seen.insert(g).second) throw DataError("gene set " + s.pathway + ": bad or repeated gene '" + g + "'");
    }
}

std::vector<GeneSet> load_gene_sets(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open gene sets " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("gene sets " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw DataError("gene sets must be a JSON object {pathway: [genes]}");
    std::vector<GeneSet> out;
    for (const auto& [name, genes] : j.items()) {
        if (!genes.is_array()) throw DataError("gene set " + name + " must be an array");
        GeneSet s{name, {}};
        for (const auto& g : genes) {
            if (!g.is_string()) throw DataError("gene set " + name + ": gene names must be strings");
            s.genes.push_back(g.get<std::string>());
        }
        out.push_back(std::move(s));
    }
    validate_gene_sets(out);
    return out;
}

const GeneSet& find_gene_set(const std::vector<GeneSet>& sets, const std::string& pathway) {
    for (const auto& s : sets)
        if (s.pathway == pathway) return s;
    throw LookupError("no gene set named " + pathway);
}

std::vector<std::string> union_genes(const std::vector<GeneSet>& sets, const std::vector<std::string>& pathways) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& p : pathways)
        for (const auto& g : find_gene_set(sets, p).genes)
            if (seen.insert(g).second) out.push_back(g);
    return out;
}

double fixture_gene_length(const std::string& gene) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : gene) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return 500.0 + static_cast<double>(h % 4501);
}

// ---------------------------------------------------------------------------
// Synthetic counts

void SynthConfig::validate() const {
    std::vector<std::string> v;
    if (donors < 2) v.push_back("donors must be >= 2");
    if (tissues.size() < 2) v.push_back("need at least 2 tissues");
    if (availability.size() != tissues.size()) v.push_back("one availability per tissue");
    for (double p : availability)
        if (!(p >= 0 && p <= 1)) v.push_back("availability must lie in [0, 1]");
    if (!(coupling >= 0 && coupling <= 1)) v.push_back("coupling must lie in [0, 1]");
    if (!(blood_share >= 0 && blood_share <= 1)) v.push_back("blood_share must lie in [0, 1]");
    if (!(dispersion > 0)) v.push_back("dispersion must be > 0");
    if (!(depth > 0)) v.push_back("depth must be > 0");
    if (!(log_sd >= 0)) v.push_back("log_sd must be >= 0");
    if (private_factors < 1) v.push_back("private_factors must be >= 1");
    if (!v.empty()) {
        std::string msg = "SynthConfig:";
        for (const auto& s : v) msg += " " + s + ";";
        throw ContractError(msg);
    }
    validate_gene_sets(gene_sets);
}

CountMatrix synth_counts(const SynthConfig& cfg) {
    cfg.validate();
    const auto signalling = union_genes(cfg.gene_sets, kSignallingPathways);
    const auto& ras = find_gene_set(cfg.gene_sets, kRasPathway).genes;
    std::vector<std::string> all_pathways;
    for (const auto& s : cfg.gene_sets) all_pathways.push_back(s.pathway);

    CountMatrix out;
    out.genes = union_genes(cfg.gene_sets, all_pathways);
    const std::size_t expressed = out.genes.size();
    for (std::size_t b = 0; b < cfg.background_genes; ++b) {
        std::ostringstream name;
        name << "BG" << (b + 1 < 10 ? "0" : "") << b + 1;
        out.genes.push_back(name.str());
    }
    const std::size_t G = out.genes.size(), T = cfg.tissues.size(), K = cfg.private_factors;
    for (const auto& g : out.genes) out.gene_lengths.push_back(fixture_gene_length(g));

    const std::set<std::string> sig_set(signalling.begin(), signalling.end()), ras_set(ras.begin(), ras.end());
    std::vector<int> role(G, 0);  // 1 signalling, 2 RAS
    for (std::size_t g = 0; g < G; ++g) {
        if (ras_set.count(out.genes[g])) role[g] = 2;
        else if (sig_set.count(out.genes[g])) role[g] = 1;
    }
    const std::size_t blood = static_cast<std::size_t>(
        std::find(cfg.tissues.begin(), cfg.tissues.end(), kBlood) - cfg.tissues.begin());

    // Structure: gene abundances, per-tissue offsets, signal signs, factor loadings.
    Rng srng(nn::derive_seed(cfg.seed, 1));
    std::normal_distribution<double> N01(0.0, 1.0);
    std::vector<double> share(G, 0.0);
    double total = 0;
    for (std::size_t g = 0; g < expressed; ++g) {
        share[g] = std::exp(0.5 * N01(srng)) * out.gene_lengths[g] / 1000.0;
        total += share[g];
    }
    for (std::size_t g = 0; g < expressed; ++g) share[g] /= total;
    Eigen::MatrixXd offset(T, G);
    for (Eigen::Index i = 0; i < offset.size(); ++i) offset.data()[i] = 0.3 * N01(srng);
    std::vector<double> sign(G);
    for (auto& s : sign) s = N01(srng) < 0 ? -1.0 : 1.0;
    std::vector<Eigen::MatrixXd> loadings(T, Eigen::MatrixXd(K, G));
    for (auto& L : loadings) {
        for (Eigen::Index i = 0; i < L.size(); ++i) L.data()[i] = N01(srng);
        L.colwise().normalize();
    }

    Rng rng(nn::derive_seed(cfg.seed, 2));
    std::uniform_real_distribution<double> U01(0.0, 1.0);
    const int width = std::max<int>(4, static_cast<int>(std::to_string(cfg.donors).size()));
    std::vector<Eigen::RowVectorXd> rows;
    const double sd = cfg.log_sd, phi = cfg.dispersion;
    for (std::size_t d = 0; d < cfg.donors; ++d) {
        std::ostringstream id;
        id << 'D' << std::setw(width) << std::setfill('0') << d + 1;
        const double age = 20.0 + 50.0 * U01(rng);
        const std::size_t sex = U01(rng) < 0.5 ? 1 : 2;
        const double s = N01(rng);
        for (std::size_t t = 0; t < T; ++t) {
            const bool present = U01(rng) < cfg.availability[t];
            // Draws are made whether or not the sample exists, so availability
            // changes do not reshuffle the other samples.
            Eigen::VectorXd f(K);
            for (auto& v : f) v = N01(rng);
            const double depth = cfg.depth * std::exp(0.2 * N01(rng));
            Eigen::RowVectorXd c(G);
            for (std::size_t g = 0; g < G; ++g) {
                const double e = std::sqrt(0.6) * loadings[t].col(g).dot(f) + std::sqrt(0.4) * N01(rng);
                double z = e;
                if (role[g] == 1 && t == blood) z = std::sqrt(cfg.blood_share) * sign[g] * s + std::sqrt(1 - cfg.blood_share) * e;
                if (role[g] == 2 && t != blood) z = std::sqrt(cfg.coupling) * sign[g] * s + std::sqrt(1 - cfg.coupling) * e;
                const double mu = g < expressed
                                      ? depth * share[g] * std::exp(offset(t, g) + sd * z - 0.5 * sd * sd)
                                      : 0.3 * std::exp(0.3 * z);
                std::gamma_distribution<double> gam(1.0 / phi, mu * phi);
                const double lambda = gam(rng);
                std::poisson_distribution<long long> pois(lambda > 0 ? lambda : 1e-300);
                c[static_cast<Eigen::Index>(g)] = lambda > 0 ? static_cast<double>(pois(rng)) : 0.0;
            }
            if (!present) continue;
            out.samples.push_back(id.str() + "-" + cfg.tissues[t]);
            out.donors.push_back(id.str());
            out.tissues.push_back(cfg.tissues[t]);
            out.age.push_back(age);
            out.sex.push_back(sex);
            rows.push_back(std::move(c));
        }
    }
    out.counts.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(G));
    for (std::size_t i = 0; i < rows.size(); ++i) out.counts.row(static_cast<Eigen::Index>(i)) = rows[i];
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

Eigen::MatrixXd tpm(const CountMatrix& c) {
    Eigen::MatrixXd rate = c.counts;
    for (std::size_t g = 0; g < c.n_genes(); ++g) rate.col(static_cast<Eigen::Index>(g)) /= c.gene_lengths[g] / 1000.0;
    for (Eigen::Index i = 0; i < rate.rows(); ++i) {
        const double s = rate.row(i).sum();
        if (s > 0) rate.row(i) *= 1e6 / s;
    }
    return rate;
}

namespace {

// k of n counts as "at least a fraction f" with a relative slack that absorbs
// rounding in f * n (0.2 * 100 must admit exactly 20).
bool at_least_fraction(std::size_t k, std::size_t n, double f) {
    return static_cast<double>(k) >= f * static_cast<double>(n) * (1.0 - 1e-12);
}

// 1-based ranks, ties averaged.
std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> o(v.size());
    std::iota(o.begin(), o.end(), 0);
    std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < o.size();) {
        std::size_t j = i;
        while (j + 1 < o.size() && v[o[j + 1]] == v[o[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[o[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

std::vector<std::size_t> filter_genes(const CountMatrix& c, const FilterThresholds& th) {
    const Eigen::MatrixXd t = tpm(c);
    const std::size_t n = c.n_samples();
    std::vector<std::size_t> kept;
    if (n == 0) return kept;
    for (std::size_t g = 0; g < c.n_genes(); ++g) {
        std::size_t tpm_ok = 0, reads_ok = 0;
        for (std::size_t i = 0; i < n; ++i) {
            tpm_ok += t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) >= th.min_tpm;
            reads_ok += c.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) >= th.min_reads;
        }
        if (at_least_fraction(tpm_ok, n, th.min_fraction) && at_least_fraction(reads_ok, n, th.min_fraction))
            kept.push_back(g);
    }
    return kept;
}

std::size_t default_reference(const CountMatrix& c) {
    if (c.n_samples() == 0) throw DataError("default_reference: no samples");
    const Eigen::VectorXd lib = c.library_sizes();
    std::vector<double> uq(c.n_samples());
    for (std::size_t i = 0; i < uq.size(); ++i) {
        const auto row = c.counts.row(static_cast<Eigen::Index>(i));
        std::vector<double> v(row.begin(), row.end());
        std::sort(v.begin(), v.end());
        const double l = lib[static_cast<Eigen::Index>(i)];
        uq[i] = l > 0 ? forecast::quantile_sorted(v, 0.75) / l : 0.0;
    }
    const double mean = std::accumulate(uq.begin(), uq.end(), 0.0) / static_cast<double>(uq.size());
    std::size_t best = 0;
    for (std::size_t i = 1; i < uq.size(); ++i)
        if (std::abs(uq[i] - mean) < std::abs(uq[best] - mean)) best = i;
    return best;
}

std::vector<double> tmm_factors(const CountMatrix& c, std::size_t reference, const TmmOptions& opt) {
    if (reference >= c.n_samples()) throw ContractError("tmm_factors: reference out of range");
    const Eigen::VectorXd lib = c.library_sizes();
    const double nR = lib[static_cast<Eigen::Index>(reference)];
    if (!(nR > 0)) throw NormalizationError("tmm_factors: reference sample has an empty library");
    const auto G = static_cast<Eigen::Index>(c.n_genes());
    std::vector<double> f(c.n_samples(), 1.0);
    for (std::size_t k = 0; k < c.n_samples(); ++k) {
        const auto ki = static_cast<Eigen::Index>(k);
        const double nO = lib[ki];
        if (!(nO > 0)) throw NormalizationError("tmm_factors: sample " + c.samples[k] + " has an empty library");
        std::vector<double> logR, absE, v;
        for (Eigen::Index g = 0; g < G; ++g) {
            const double o = c.counts(ki, g), r = c.counts(static_cast<Eigen::Index>(reference), g);
            if (o <= 0 || r <= 0) continue;
            const double var = (nO - o) / nO / o + (nR - r) / nR / r;
            if (!(var > 0)) continue;
            logR.push_back(std::log2((o / nO) / (r / nR)));
            absE.push_back((std::log2(o / nO) + std::log2(r / nR)) / 2.0);
            v.push_back(var);
        }
        const std::size_t n = logR.size();
        if (n == 0) throw NormalizationError("tmm_factors: no genes shared with the reference for " + c.samples[k]);
        if (std::all_of(logR.begin(), logR.end(), [](double x) { return std::abs(x) < 1e-6; })) continue;
        const double loL = std::floor(static_cast<double>(n) * opt.trim_m) + 1, hiL = static_cast<double>(n) + 1 - loL;
        const double loS = std::floor(static_cast<double>(n) * opt.trim_a) + 1, hiS = static_cast<double>(n) + 1 - loS;
        const auto rl = average_ranks(logR), ra = average_ranks(absE);
        double num = 0, den = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (rl[i] < loL || rl[i] > hiL || ra[i] < loS || ra[i] > hiS) continue;
            num += logR[i] / v[i];
            den += 1.0 / v[i];
        }
        if (den == 0) throw NormalizationError("tmm_factors: every gene trimmed for " + c.samples[k]);
        f[k] = std::exp2(num / den);
    }
    double log_mean = 0;
    for (double x : f) log_mean += std::log(x);
    log_mean /= static_cast<double>(f.size());
    for (auto& x : f) x /= std::exp(log_mean);
    return f;
}

std::vector<double> effective_library_sizes(const CountMatrix& c, const std::vector<double>& factors) {
    if (factors.size() != c.n_samples()) throw DimensionError("effective_library_sizes: one factor per sample");
    const Eigen::VectorXd lib = c.library_sizes();
    std::vector<double> out(factors.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = lib[static_cast<Eigen::Index>(i)] * factors[i];
    return out;
}

Eigen::MatrixXd normalized_cpm(const CountMatrix& c, const std::vector<double>& factors) {
    const auto eff = effective_library_sizes(c, factors);
    Eigen::MatrixXd out = c.counts;
    for (std::size_t i = 0; i < eff.size(); ++i) out.row(static_cast<Eigen::Index>(i)) *= 1e6 / eff[i];
    return out;
}

std::vector<double> inverse_normal_transform(std::span<const double> values) {
    for (double v : values)
        if (!std::isfinite(v)) throw TransformError("inverse_normal_transform: non-finite value");
    const bool constant =
        values.empty() || std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; });
    if (constant) throw TransformError("inverse_normal_transform: need at least two distinct values");
    const auto r = average_ranks(values);
    const boost::math::normal_distribution<double> normal;
    const double N = static_cast<double>(values.size());
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = boost::math::quantile(normal, (r[i] - 0.5) / N);
    return out;
}

std::optional<std::size_t> ExpressionTable::gene_index(const std::string& gene) const {
    const auto it = std::find(genes.begin(), genes.end(), gene);
    if (it == genes.end()) return std::nullopt;
    return static_cast<std::size_t>(it - genes.begin());
}

std::optional<std::size_t> ExpressionTable::donor_index(const std::string& donor) const {
    const auto it = std::find(donors.begin(), donors.end(), donor);
    if (it == donors.end()) return std::nullopt;
    return static_cast<std::size_t>(it - donors.begin());
}

std::vector<ExpressionTable> preprocess(const CountMatrix& counts, const FilterThresholds& th, const TmmOptions& tmm) {
    counts.validate();
    std::vector<std::string> tissues;
    for (const auto& t : counts.tissues)
        if (std::find(tissues.begin(), tissues.end(), t) == tissues.end()) tissues.push_back(t);
    std::vector<ExpressionTable> out;
    for (const auto& tissue : tissues) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < counts.n_samples(); ++i)
            if (counts.tissues[i] == tissue) idx.push_back(i);
        if (idx.size() < 3) continue;
        const auto sub = counts.select_samples(idx);
        const auto kept = sub.select_genes(filter_genes(sub, th));
        ExpressionTable table;
        table.tissue = tissue;
        table.donors = kept.donors;
        table.genes = kept.genes;
        if (kept.n_genes() == 0) {
            table.values.resize(static_cast<Eigen::Index>(kept.n_samples()), 0);
            out.push_back(std::move(table));
            continue;
        }
        const auto cpm = normalized_cpm(kept, tmm_factors(kept, default_reference(kept), tmm));
        table.values.resize(cpm.rows(), cpm.cols());
        for (Eigen::Index g = 0; g < cpm.cols(); ++g) {
            const Eigen::VectorXd col = cpm.col(g);
            try {
                const auto z = inverse_normal_transform(std::span<const double>(col.data(), col.size()));
                table.values.col(g) = Eigen::Map<const Eigen::VectorXd>(z.data(), cpm.rows());
            } catch (const TransformError& e) {
                throw TransformError(tissue + "/" + kept.genes[static_cast<std::size_t>(g)] + ": " + e.what());
            }
        }
        out.push_back(std::move(table));
    }
    return out;
}

const ExpressionTable* find_table(const std::vector<ExpressionTable>& tables, const std::string& tissue) {
    for (const auto& t : tables)
        if (t.tissue == tissue) return &t;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Ridge

Eigen::MatrixXd RidgeFit::predict(const Eigen::MatrixXd& X) const {
    if (X.cols() != W.rows()) throw DimensionError("RidgeFit::predict: predictor count mismatch");
    const Eigen::MatrixXd Xs = (X.rowwise() - x_mean).array().rowwise() / x_scale.array();
    return (Xs * W).rowwise() + intercepts;
}

Eigen::MatrixXd RidgeFit::raw_coefficients() const {
    return W.array().colwise() / x_scale.transpose().array();
}

RidgeFit fit_ridge(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double alpha) {
    if (X.rows() != Y.rows()) throw DimensionError("fit_ridge: X and Y need the same rows");
    if (X.rows() < 1) throw DataError("fit_ridge: no rows");
    if (!(alpha >= 0) || !std::isfinite(alpha)) throw ContractError("fit_ridge: alpha must be finite and >= 0");
    RidgeFit fit;
    fit.alpha = alpha;
    const double n = static_cast<double>(X.rows());
    fit.x_mean = X.colwise().mean();
    const Eigen::MatrixXd Xc = X.rowwise() - fit.x_mean;
    fit.x_scale = (Xc.colwise().squaredNorm() / std::max(1.0, n - 1)).cwiseSqrt();
    for (auto& s : fit.x_scale)
        if (!(s > 1e-12)) s = 1.0;
    const Eigen::MatrixXd Xs = Xc.array().rowwise() / fit.x_scale.array();
    fit.intercepts = Y.colwise().mean();
    const Eigen::MatrixXd Yc = Y.rowwise() - fit.intercepts;
    Eigen::MatrixXd A = Xs.transpose() * Xs;
    A.diagonal().array() += alpha;
    fit.W = A.ldlt().solve(Xs.transpose() * Yc);
    fit.residuals = Yc - Xs * fit.W;
    return fit;
}

Eigen::RowVectorXd r2_scores(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& P) {
    if (Y.rows() != P.rows() || Y.cols() != P.cols()) throw DimensionError("r2_scores: shape mismatch");
    Eigen::RowVectorXd out(Y.cols());
    for (Eigen::Index j = 0; j < Y.cols(); ++j) {
        const double mean = Y.col(j).mean();
        const double sst = (Y.col(j).array() - mean).square().sum();
        const double sse = (Y.col(j) - P.col(j)).squaredNorm();
        out[j] = sst > 0 ? 1.0 - sse / sst : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

std::vector<double> RidgeCvConfig::log_grid(double lo, double hi, std::size_t n) {
    if (!(lo > 0 && hi >= lo) || n < 1) throw ContractError("log_grid: need 0 < lo <= hi and n >= 1");
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        g[i] = std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
    }
    return g;
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& M, const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), M.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = M.row(static_cast<Eigen::Index>(idx[k]));
    return out;
}

double finite_mean(const Eigen::RowVectorXd& v) {
    double s = 0;
    std::size_t n = 0;
    for (double x : v)
        if (std::isfinite(x)) {
            s += x;
            ++n;
        }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

RidgeCvResult fit_ridge_cv(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const RidgeCvConfig& cfg) {
    if (X.rows() != Y.rows()) throw DimensionError("fit_ridge_cv: X and Y need the same rows");
    if (cfg.folds < 2) throw ContractError("fit_ridge_cv: folds must be >= 2");
    if (cfg.alphas.empty()) throw ContractError("fit_ridge_cv: empty alpha grid");
    const auto n = static_cast<std::size_t>(X.rows());
    if (n < 2 * cfg.folds)
        throw DataError("fit_ridge_cv: " + std::to_string(n) + " rows, need at least " + std::to_string(2 * cfg.folds) +
                        " for " + std::to_string(cfg.folds) + " folds");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(cfg.seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> fold(n);
    for (std::size_t k = 0; k < n; ++k) fold[perm[k]] = k % cfg.folds;

    RidgeCvResult res;
    res.alphas = cfg.alphas;
    std::sort(res.alphas.begin(), res.alphas.end());
    for (double a : res.alphas) {
        Eigen::MatrixXd oof(Y.rows(), Y.cols());
        for (std::size_t f = 0; f < cfg.folds; ++f) {
            std::vector<std::size_t> tr, te;
            for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(i);
            const auto fit = fit_ridge(take_rows(X, tr), take_rows(Y, tr), a);
            const Eigen::MatrixXd p = fit.predict(take_rows(X, te));
            for (std::size_t k = 0; k < te.size(); ++k) oof.row(static_cast<Eigen::Index>(te[k])) = p.row(static_cast<Eigen::Index>(k));
        }
        res.cv_r2.push_back(finite_mean(r2_scores(Y, oof)));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < res.alphas.size(); ++i)
        if (!(res.cv_r2[i] < res.cv_r2[best])) best = i;
    res.fit = fit_ridge(X, Y, res.alphas[best]);
    return res;
}

BootstrapReport bootstrap_r2(const FitProcedure& fit, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                             const BootstrapConfig& cfg) {
    if (cfg.replicates < 10) throw ContractError("bootstrap_r2: need at least 10 replicates");
    if (X.rows() != Y.rows()) throw DimensionError("bootstrap_r2: X and Y need the same rows");
    const auto n = static_cast<std::size_t>(X.rows());
    const auto G = static_cast<std::size_t>(Y.cols());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    BootstrapReport rep;
    rep.replicates = cfg.replicates;
    rep.scores.assign(cfg.replicates, std::vector<double>(G, nan));
    std::vector<char> skipped(cfg.replicates, 0);

    auto one = [&](std::size_t b) {
        Rng rng(nn::derive_seed(cfg.seed, b));
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        std::vector<std::size_t> in(n);
        std::vector<char> drawn(n, 0);
        for (auto& i : in) {
            i = pick(rng);
            drawn[i] = 1;
        }
        std::vector<std::size_t> oob;
        for (std::size_t i = 0; i < n; ++i)
            if (!drawn[i]) oob.push_back(i);
        const auto distinct = n - oob.size();
        if (distinct < 2 || oob.size() < 2) {
            skipped[b] = 1;
            return;
        }
        const auto model = fit(take_rows(X, in), take_rows(Y, in));
        const auto r2 = r2_scores(take_rows(Y, oob), model.predict(take_rows(X, oob)));
        for (std::size_t g = 0; g < G; ++g) rep.scores[b][g] = r2[static_cast<Eigen::Index>(g)];
    };

    std::size_t workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, cfg.replicates);
    std::mutex mu;
    std::size_t failed = cfg.replicates;
    std::exception_ptr failure;
    auto run = [&](std::size_t w) {
        for (std::size_t b = w; b < cfg.replicates; b += workers) {
            try {
                one(b);
            } catch (...) {
                std::lock_guard lock(mu);
                if (b < failed) {
                    failed = b;
                    failure = std::current_exception();
                }
                return;
            }
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    rep.skipped = static_cast<std::size_t>(std::count(skipped.begin(), skipped.end(), 1));
    rep.genes.resize(G);
    for (std::size_t g = 0; g < G; ++g) {
        std::vector<double> v;
        for (std::size_t b = 0; b < cfg.replicates; ++b)
            if (std::isfinite(rep.scores[b][g])) v.push_back(rep.scores[b][g]);
        auto& out = rep.genes[g];
        out.evaluated = v.size();
        if (v.empty()) {
            out.mean = out.lo = out.hi = nan;
            continue;
        }
        out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        std::sort(v.begin(), v.end());
        out.lo = forecast::quantile_sorted(v, 0.025);
        out.hi = forecast::quantile_sorted(v, 0.975);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Crosstalk

MatchedData match_donors(const ExpressionTable& source, const ExpressionTable& target,
                         const std::vector<std::string>& predictor_genes, const std::vector<std::string>& target_genes) {
    MatchedData m;
    std::vector<std::size_t> pcols, tcols;
    for (const auto& g : predictor_genes)
        if (auto i = source.gene_index(g)) {
            m.predictors.push_back(g);
            pcols.push_back(*i);
        }
    for (const auto& g : target_genes)
        if (auto i = target.gene_index(g)) {
            m.targets.push_back(g);
            tcols.push_back(*i);
        }
    std::unordered_map<std::string, std::size_t> src;
    for (std::size_t i = 0; i < source.donors.size(); ++i) src.emplace(source.donors[i], i);
    std::vector<std::pair<std::size_t, std::size_t>> rows;
    for (std::size_t i = 0; i < target.donors.size(); ++i) {
        const auto it = src.find(target.donors[i]);
        if (it == src.end()) continue;
        m.donors.push_back(target.donors[i]);
        rows.emplace_back(it->second, i);
    }
    m.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(pcols.size()));
    m.Y.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(tcols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        for (std::size_t k = 0; k < pcols.size(); ++k)
            m.X(ri, static_cast<Eigen::Index>(k)) = source.values(static_cast<Eigen::Index>(rows[r].first), static_cast<Eigen::Index>(pcols[k]));
        for (std::size_t k = 0; k < tcols.size(); ++k)
            m.Y(ri, static_cast<Eigen::Index>(k)) = target.values(static_cast<Eigen::Index>(rows[r].second), static_cast<Eigen::Index>(tcols[k]));
    }
    return m;
}

std::vector<TissueReport> crosstalk(const std::vector<ExpressionTable>& tables, const std::vector<GeneSet>& sets,
                                    const CrosstalkConfig& cfg) {
    const auto predictors = union_genes(sets, cfg.predictor_pathways);
    const auto& targets = find_gene_set(sets, cfg.target_pathway).genes;
    const ExpressionTable* source = find_table(tables, cfg.source);
    std::vector<TissueReport> out;
    for (const auto& tissue : cfg.targets) {
        TissueReport rep;
        rep.tissue = tissue;
        const ExpressionTable* target = find_table(tables, tissue);
        if (!source || !target) {
            rep.status = "missing_tissue";
            out.push_back(std::move(rep));
            continue;
        }
        const auto m = match_donors(*source, *target, predictors, targets);
        rep.donors = m.donors.size();
        rep.predictors = m.predictors.size();
        rep.genes = m.targets;
        if (rep.donors < 2 * cfg.cv.folds || m.predictors.empty() || m.targets.empty()) {
            rep.status = "insufficient_donors";
            out.push_back(std::move(rep));
            continue;
        }
        const auto cv = fit_ridge_cv(m.X, m.Y, cfg.cv);
        rep.alpha = cv.fit.alpha;
        const double alpha = rep.alpha;
        rep.bootstrap = bootstrap_r2([alpha](const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) { return fit_ridge(X, Y, alpha); },
                                     m.X, m.Y, cfg.bootstrap);
        out.push_back(std::move(rep));
    }
    return out;
}

nlohmann::json crosstalk_json(const std::vector<TissueReport>& reports, const CrosstalkConfig& cfg) {
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    nlohmann::json tissues = nlohmann::json::object();
    for (const auto& r : reports) {
        nlohmann::json genes = nlohmann::json::object();
        for (std::size_t g = 0; g < r.genes.size() && g < r.bootstrap.genes.size(); ++g) {
            const auto& s = r.bootstrap.genes[g];
            genes[r.genes[g]] = {{"r2_mean", num(s.mean)}, {"r2_lo", num(s.lo)}, {"r2_hi", num(s.hi)},
                                 {"evaluated", s.evaluated}};
        }
        tissues[r.tissue] = {{"status", r.status}, {"donors", r.donors}, {"predictors", r.predictors},
                             {"alpha", r.alpha},   {"skipped", r.bootstrap.skipped}, {"genes", genes}};
    }
    return {{"schema_version", 1},
            {"config",
             {{"source", cfg.source},
              {"targets", cfg.targets},
              {"predictor_pathways", cfg.predictor_pathways},
              {"target_pathway", cfg.target_pathway},
              {"alphas", cfg.cv.alphas},
              {"folds", cfg.cv.folds},
              {"cv_seed", cfg.cv.seed},
              {"replicates", cfg.bootstrap.replicates},
              {"bootstrap_seed", cfg.bootstrap.seed},
              {"r2", "out_of_bag"}}},
            {"tissues", tissues}};
}

// ---------------------------------------------------------------------------
// Files

void write_counts_csv(const CountMatrix& c, const std::filesystem::path& path) {
    c.validate();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "sample_id,donor_id,tissue,gene,count\n";
    for (std::size_t i = 0; i < c.n_samples(); ++i)
        for (std::size_t g = 0; g < c.n_genes(); ++g)
            out << c.samples[i] << ',' << c.donors[i] << ',' << c.tissues[i] << ',' << c.genes[g] << ','
                << static_cast<long long>(c.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g))) << '\n';
}

CountMatrix read_counts_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "sample_id,donor_id,tissue,gene,count")
        throw DataError(path.string() + ": expected header sample_id,donor_id,tissue,gene,count");
    CountMatrix c;
    std::unordered_map<std::string, std::size_t> sidx, gidx;
    std::vector<std::tuple<std::size_t, std::size_t, double>> cells;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 5) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
        auto [sit, snew] = sidx.emplace(f[0], c.samples.size());
        if (snew) {
            c.samples.push_back(f[0]);
            c.donors.push_back(f[1]);
            c.tissues.push_back(f[2]);
        } else if (c.donors[sit->second] != f[1] || c.tissues[sit->second] != f[2]) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": sample " + f[0] + " changes donor or tissue");
        }
        auto [git, gnew] = gidx.emplace(f[3], c.genes.size());
        if (gnew) c.genes.push_back(f[3]);
        double v;
        try {
            std::size_t used = 0;
            v = std::stod(f[4], &used);
            if (used != f[4].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad count '" + f[4] + "'");
        }
        cells.emplace_back(sit->second, git->second, v);
    }
    c.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.samples.size()), static_cast<Eigen::Index>(c.genes.size()));
    for (const auto& [s, g, v] : cells) c.counts(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(g)) = v;
    for (const auto& g : c.genes) c.gene_lengths.push_back(fixture_gene_length(g));
    c.validate();
    return c;
}

void write_donors_csv(const CountMatrix& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "donor_id,age,sex\n";
    std::set<std::string> seen;
    for (std::size_t i = 0; i < c.n_samples(); ++i) {
        if (!seen.insert(c.donors[i]).second) continue;
        out << c.donors[i] << ',';
        if (!c.age.empty()) out << c.age[i];
        out << ',';
        if (!c.sex.empty()) out << c.sex[i];
        out << '\n';
    }
}

void read_donors_csv(const std::filesystem::path& path, CountMatrix& c) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "donor_id,age,sex")
        throw DataError(path.string() + ": expected header donor_id,age,sex");
    std::unordered_map<std::string, std::pair<double, std::size_t>> info;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 3) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
        try {
            const auto sex = std::stoul(f[2]);
            if (sex != 1 && sex != 2) throw std::out_of_range("sex");
            info[f[0]] = {std::stod(f[1]), sex};
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad age or sex (sex is 1 or 2)");
        }
    }
    c.age.clear();
    c.sex.clear();
    for (const auto& d : c.donors) {
        const auto it = info.find(d);
        if (it == info.end()) throw DataError(path.string() + ": no entry for donor " + d);
        c.age.push_back(it->second.first);
        c.sex.push_back(it->second.second);
    }
}

GanData gan_data(const CountMatrix& raw, const std::vector<ExpressionTable>& tables,
                 const std::vector<std::string>& tissues, const std::vector<std::string>& genes,
                 const std::string& ace2_tissue) {
    if (tissues.empty() || genes.empty()) throw ContractError("gan_data: need tissues and genes");
    std::vector<const ExpressionTable*> tabs;
    for (const auto& t : tissues) tabs.push_back(find_table(tables, t));
    std::set<std::string> donor_set;
    for (const auto* t : tabs)
        if (t) donor_set.insert(t->donors.begin(), t->donors.end());

    std::unordered_map<std::string, double> age;
    std::unordered_map<std::string, std::size_t> sex;
    for (std::size_t i = 0; i < raw.n_samples(); ++i) {
        if (!raw.age.empty()) age.emplace(raw.donors[i], raw.age[i]);
        if (!raw.sex.empty()) sex.emplace(raw.donors[i], raw.sex[i]);
    }

    GanData d;
    d.tissues = tissues;
    d.genes = genes;
    d.covariates = {"age", "ace2_" + ace2_tissue};
    d.donors.assign(donor_set.begin(), donor_set.end());
    auto& b = d.batch;
    b.tissues = tissues.size();
    b.genes = genes.size();
    b.covariates = 2;
    b.categoricals = 1;
    b.rows = d.donors.size();

    double age_mean = 0, age_sd = 0;
    for (const auto& id : d.donors) age_mean += age.count(id) ? age[id] : 0.0;
    age_mean /= std::max<double>(1, static_cast<double>(d.donors.size()));
    for (const auto& id : d.donors) age_sd += std::pow((age.count(id) ? age[id] : 0.0) - age_mean, 2);
    age_sd = std::sqrt(age_sd / std::max<double>(1, static_cast<double>(d.donors.size()) - 1));
    if (!(age_sd > 0)) age_sd = 1;

    const ExpressionTable* ace_tab = find_table(tables, ace2_tissue);
    const auto ace_col = ace_tab ? ace_tab->gene_index("ACE2") : std::nullopt;
    for (const auto& id : d.donors) {
        for (const auto* t : tabs) {
            const auto row = t ? t->donor_index(id) : std::nullopt;
            b.m.push_back(row ? 1.0 : 0.0);
            for (const auto& g : genes) {
                const auto col = row ? t->gene_index(g) : std::nullopt;
                b.x.push_back(col ? t->values(static_cast<Eigen::Index>(*row), static_cast<Eigen::Index>(*col)) : 0.0);
            }
        }
        b.r.push_back(((age.count(id) ? age[id] : age_mean) - age_mean) / age_sd);
        const auto arow = ace_col ? ace_tab->donor_index(id) : std::nullopt;
        b.r.push_back(arow ? ace_tab->values(static_cast<Eigen::Index>(*arow), static_cast<Eigen::Index>(*ace_col)) : 0.0);
        b.q.push_back(sex.count(id) ? sex[id] : 1);
    }
    b.validate();
    return d;
}

}  // namespace dtwin::omics
