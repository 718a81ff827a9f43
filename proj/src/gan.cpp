#include "dtwin/gan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace dtwin::gan {

namespace {

std::string dims(const Tensor& t) { return ad::shape_str(t.shape()); }

Tensor matrix_or_empty(std::size_t rows, std::size_t cols, const std::vector<double>& v) {
    if (cols == 0) return Tensor::zeros({rows, 0});
    return Tensor::matrix(rows, cols, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// OmicsBatch

void OmicsBatch::validate() const {
    if (rows == 0) throw ContractError("omics batch is empty");
    if (tissues == 0 || genes == 0) throw ContractError("omics batch needs at least one tissue and one gene");
    if (x.size() != rows * width()) throw ContractError("x must be rows x (tissues * genes)");
    if (m.size() != rows * tissues) throw ContractError("m must be rows x tissues");
    if (r.size() != rows * covariates) throw ContractError("r must be rows x covariates");
    if (q.size() != rows * categoricals) throw ContractError("q must be rows x categoricals");
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t t = 0; t < tissues; ++t) {
            const double mv = m[i * tissues + t];
            if (mv != 0.0 && mv != 1.0) {
                throw ContractError("mask entry (" + std::to_string(i) + ", " + std::to_string(t) + ") is not 0/1");
            }
            for (std::size_t g = 0; g < genes; ++g) {
                const double xv = x[i * width() + t * genes + g];
                if (!std::isfinite(xv)) throw ContractError("x has a non-finite value in row " + std::to_string(i));
                if (mv == 0.0 && xv != 0.0) {
                    throw ContractError("row " + std::to_string(i) + ", tissue " + std::to_string(t) +
                                        " is unmeasured but not zero-imputed");
                }
            }
        }
    }
    for (double v : r) {
        if (!std::isfinite(v)) throw ContractError("r has a non-finite value");
    }
    for (std::size_t v : q) {
        if (v == 0) throw ContractError("categorical indices are 1-based; found 0");
    }
}

OmicsBatch OmicsBatch::select(const std::vector<std::size_t>& idx) const {
    OmicsBatch b;
    b.tissues = tissues;
    b.genes = genes;
    b.covariates = covariates;
    b.categoricals = categoricals;
    b.rows = idx.size();
    for (std::size_t i : idx) {
        if (i >= rows) throw LookupError("omics batch row " + std::to_string(i) + " out of range");
        b.x.insert(b.x.end(), x.begin() + static_cast<std::ptrdiff_t>(i * width()),
                   x.begin() + static_cast<std::ptrdiff_t>((i + 1) * width()));
        b.m.insert(b.m.end(), m.begin() + static_cast<std::ptrdiff_t>(i * tissues),
                   m.begin() + static_cast<std::ptrdiff_t>((i + 1) * tissues));
        b.r.insert(b.r.end(), r.begin() + static_cast<std::ptrdiff_t>(i * covariates),
                   r.begin() + static_cast<std::ptrdiff_t>((i + 1) * covariates));
        b.q.insert(b.q.end(), q.begin() + static_cast<std::ptrdiff_t>(i * categoricals),
                   q.begin() + static_cast<std::ptrdiff_t>((i + 1) * categoricals));
    }
    return b;
}

Tensor OmicsBatch::x_tensor() const { return Tensor::matrix(rows, width(), x); }
Tensor OmicsBatch::m_tensor() const { return Tensor::matrix(rows, tissues, m); }
Tensor OmicsBatch::r_tensor() const { return matrix_or_empty(rows, covariates, r); }

// ---------------------------------------------------------------------------
// Config

std::vector<std::string> GanConfig::violations() const {
    std::vector<std::string> v;
    if (tissues < 1) v.push_back("tissues must be >= 1");
    if (genes < 1) v.push_back("genes must be >= 1");
    if (noise_dim < 1) v.push_back("noise_dim must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) v.push_back("lambda must be >= 0");
    if (n_critic < 1) v.push_back("n_critic must be >= 1");
    if (batch < 1) v.push_back("batch must be >= 1");
    if (!(lr_gen > 0.0) || !(lr_critic > 0.0)) v.push_back("learning rates must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) v.push_back("betas must be in [0, 1)");
    if (!(leaky_slope >= 0.0)) v.push_back("leaky_slope must be >= 0");
    for (std::size_t j = 0; j < vocab.size(); ++j) {
        if (vocab[j] < 1) v.push_back("vocab[" + std::to_string(j) + "] must be >= 1");
    }
    if (!embed_dims.empty() && embed_dims.size() != vocab.size()) v.push_back("embed_dims must match vocab");
    for (std::size_t d : embed_dims) {
        if (d < 1) v.push_back("embedding dims must be >= 1");
    }
    for (std::size_t w : gen_hidden) {
        if (w < 1) v.push_back("gen_hidden widths must be >= 1");
    }
    for (std::size_t w : critic_hidden) {
        if (w < 1) v.push_back("critic_hidden widths must be >= 1");
    }
    if (ace2_index && *ace2_index >= covariates) v.push_back("ace2_index must name a column of r");
    return v;
}

void GanConfig::validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid GAN config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ContractError(msg);
}

nlohmann::json GanConfig::to_json() const {
    nlohmann::json j{{"tissues", tissues},
                     {"genes", genes},
                     {"covariates", covariates},
                     {"vocab", vocab},
                     {"embed_dims", embed_dims},
                     {"noise_dim", noise_dim},
                     {"noise_prior", "standard_normal"},
                     {"gen_hidden", gen_hidden},
                     {"critic_hidden", critic_hidden},
                     {"leaky_slope", leaky_slope},
                     {"lambda", lambda},
                     {"n_critic", n_critic},
                     {"batch", batch},
                     {"iterations", iterations},
                     {"lr_gen", lr_gen},
                     {"lr_critic", lr_critic},
                     {"beta1", beta1},
                     {"beta2", beta2},
                     {"linear_decay", linear_decay},
                     {"seed", seed}};
    j["ace2_index"] = ace2_index ? nlohmann::json(*ace2_index) : nlohmann::json(nullptr);
    return j;
}

GanConfig GanConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{
        "tissues", "genes",         "covariates",  "vocab", "embed_dims", "noise_dim", "noise_prior",
        "gen_hidden", "critic_hidden", "leaky_slope", "lambda", "n_critic", "batch", "iterations",
        "lr_gen", "lr_critic",     "beta1",       "beta2", "linear_decay", "seed", "ace2_index"};
    if (!j.is_object()) throw ContractError("GAN config must be a JSON object");
    for (const auto& [k, _] : j.items()) {
        if (!known.count(k)) throw ContractError("unknown GAN config field '" + k + "'");
    }
    GanConfig c;
    try {
        c.tissues = j.value("tissues", c.tissues);
        c.genes = j.value("genes", c.genes);
        c.covariates = j.value("covariates", c.covariates);
        c.vocab = j.value("vocab", c.vocab);
        c.embed_dims = j.value("embed_dims", c.embed_dims);
        c.noise_dim = j.value("noise_dim", c.noise_dim);
        if (j.contains("noise_prior") && j.at("noise_prior") != "standard_normal") {
            throw ContractError("only the standard_normal noise prior is supported");
        }
        c.gen_hidden = j.value("gen_hidden", c.gen_hidden);
        c.critic_hidden = j.value("critic_hidden", c.critic_hidden);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
        c.lambda = j.value("lambda", c.lambda);
        c.n_critic = j.value("n_critic", c.n_critic);
        c.batch = j.value("batch", c.batch);
        c.iterations = j.value("iterations", c.iterations);
        c.lr_gen = j.value("lr_gen", c.lr_gen);
        c.lr_critic = j.value("lr_critic", c.lr_critic);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.linear_decay = j.value("linear_decay", c.linear_decay);
        c.seed = j.value("seed", c.seed);
        if (j.contains("ace2_index") && !j.at("ace2_index").is_null()) c.ace2_index = j.at("ace2_index").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("malformed GAN config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Players

CondGan::CondGan(GanConfig config) : config_(std::move(config)) {
    config_.validate();
    std::size_t emb_width = 0;
    for (std::size_t j = 0; j < config_.vocab.size(); ++j) {
        auto g = nn::EmbeddingTable::with_default_dim("gen.emb" + std::to_string(j), config_.vocab[j]);
        auto d = nn::EmbeddingTable::with_default_dim("critic.emb" + std::to_string(j), config_.vocab[j]);
        if (!config_.embed_dims.empty()) g.dim = d.dim = config_.embed_dims[j];
        emb_width += g.dim;
        gen_emb_.push_back(g);
        critic_emb_.push_back(d);
    }
    const std::size_t w = config_.tissues * config_.genes;

    nn::MlpSpec gs;
    gs.widths.push_back(config_.noise_dim + config_.covariates + emb_width);
    gs.widths.insert(gs.widths.end(), config_.gen_hidden.begin(), config_.gen_hidden.end());
    gs.widths.push_back(w);
    gs.hidden = nn::Activation::leaky_relu;
    gs.leaky_slope = config_.leaky_slope;
    gen_ = nn::Mlp(gs, "gen.mlp");

    nn::MlpSpec cs;
    cs.widths.push_back(w + config_.tissues + config_.covariates + emb_width);
    cs.widths.insert(cs.widths.end(), config_.critic_hidden.begin(), config_.critic_hidden.end());
    cs.widths.push_back(1);
    cs.hidden = nn::Activation::leaky_relu;
    cs.leaky_slope = config_.leaky_slope;
    critic_ = nn::Mlp(cs, "critic.mlp");

    std::vector<double> e(config_.tissues * w, 0.0);
    for (std::size_t t = 0; t < config_.tissues; ++t)
        for (std::size_t g = 0; g < config_.genes; ++g) e[t * w + t * config_.genes + g] = 1.0;
    expand_ = Tensor::matrix(config_.tissues, w, std::move(e));
}

void CondGan::init_generator(ParamSet& params, Rng& rng) const {
    gen_.init(params, rng);
    for (const auto& t : gen_emb_) t.init(params, rng);
}

void CondGan::init_critic(ParamSet& params, Rng& rng) const {
    critic_.init(params, rng);
    for (const auto& t : critic_emb_) t.init(params, rng);
}

Tensor CondGan::broadcast_mask(const Tensor& m) const { return ad::matmul(m, expand_); }

Tensor CondGan::sample_noise(std::size_t b, Rng& rng) const {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> z(b * config_.noise_dim);
    for (auto& v : z) v = n(rng);
    return Tensor::matrix(b, config_.noise_dim, std::move(z));
}

void CondGan::check_inputs(const char* who, std::size_t b, const Tensor& r, const std::vector<std::size_t>& q,
                           const Tensor& m) const {
    const std::string w(who);
    if (m.rank() != 2 || m.rows() != b || m.cols() != config_.tissues) {
        throw ContractError(w + ": mask is " + dims(m) + ", expected [" + std::to_string(b) + " x " +
                            std::to_string(config_.tissues) + "]");
    }
    if (r.numel() != b * config_.covariates || (config_.covariates > 0 && (r.rank() != 2 || r.cols() != config_.covariates))) {
        throw ContractError(w + ": r is " + dims(r) + ", expected [" + std::to_string(b) + " x " +
                            std::to_string(config_.covariates) + "]");
    }
    const std::size_t c = config_.vocab.size();
    if (q.size() != b * c) {
        throw ContractError(w + ": q has " + std::to_string(q.size()) + " entries, expected " + std::to_string(b * c));
    }
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < 1 || q[i] > config_.vocab[i % c]) {
            throw ContractError(w + ": category " + std::to_string(q[i]) + " outside 1.." +
                                std::to_string(config_.vocab[i % c]));
        }
    }
}

Tensor CondGan::generate(const ParamSet& gen, const Tensor& z, const Tensor& r, const std::vector<std::size_t>& q,
                         const Tensor& m) const {
    if (z.rank() != 2 || z.cols() != config_.noise_dim) {
        throw ContractError("generate: z is " + dims(z) + ", expected [b x " + std::to_string(config_.noise_dim) + "]");
    }
    const std::size_t b = z.rows();
    check_inputs("generate", b, r, q, m);
    std::vector<Tensor> parts{z};
    if (config_.covariates > 0) parts.push_back(r);
    if (!gen_emb_.empty()) parts.push_back(nn::concat_embedding_rows(gen_emb_, gen, q, b));
    const Tensor in = parts.size() == 1 ? z : ad::concat(parts, 1);
    return ad::mul(gen_.forward(gen, in, false, nullptr), broadcast_mask(m));
}

Tensor CondGan::critic(const ParamSet& critic, const Tensor& x, const Tensor& m, const Tensor& r,
                       const std::vector<std::size_t>& q) const {
    const std::size_t w = config_.tissues * config_.genes;
    if (x.rank() != 2 || x.cols() != w) {
        throw ContractError("critic: x is " + dims(x) + ", expected [b x " + std::to_string(w) + "]");
    }
    const std::size_t b = x.rows();
    check_inputs("critic", b, r, q, m);
    const auto xd = x.data();
    const auto md = m.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < config_.tissues; ++t) {
            if (md[i * config_.tissues + t] != 0.0) continue;
            for (std::size_t g = 0; g < config_.genes; ++g) {
                if (xd[i * w + t * config_.genes + g] != 0.0) {
                    throw ContractError("critic: row " + std::to_string(i) + ", tissue " + std::to_string(t) +
                                        " is masked but not zero-imputed");
                }
            }
        }
    std::vector<Tensor> parts{x, m};
    if (config_.covariates > 0) parts.push_back(r);
    if (!critic_emb_.empty()) parts.push_back(nn::concat_embedding_rows(critic_emb_, critic, q, b));
    return critic_.forward(critic, ad::concat(parts, 1), false, nullptr);
}

// ---------------------------------------------------------------------------
// Gradient penalty

PenaltyResult gradient_penalty(const CondGan& gan, const ParamSet& critic, const Tensor& x, const Tensor& xhat,
                               const Tensor& m, const Tensor& r, const std::vector<std::size_t>& q,
                               const std::vector<double>& alpha) {
    if (x.shape() != xhat.shape() || x.rank() != 2) {
        throw ContractError("gradient_penalty: real " + dims(x) + " and synthetic " + dims(xhat) + " differ");
    }
    const std::size_t b = x.rows(), w = x.cols();
    if (alpha.size() != b) throw ContractError("gradient_penalty: one alpha per sample required");
    const auto xd = x.data(), hd = xhat.data();
    std::vector<double> mix(b * w);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < w; ++c) mix[i * w + c] = alpha[i] * xd[i * w + c] + (1.0 - alpha[i]) * hd[i * w + c];
    const Tensor xt = Tensor::matrix(b, w, std::move(mix), true);

    ad::GradModeGuard on(true);
    const Tensor score = ad::sum(gan.critic(critic, xt, m, r, q));
    const Tensor g = ad::grad(score, {xt}, true)[0];
    // The small epsilon keeps the second derivative finite when a gradient row is zero.
    const Tensor norms = ad::row_norms(g, 1e-12);
    PenaltyResult res;
    res.norms = norms.to_vector();
    for (std::size_t i = 0; i < b; ++i) {
        if (!std::isfinite(res.norms[i])) {
            throw PenaltyError("gradient penalty: non-finite input gradient for sample " + std::to_string(i));
        }
    }
    res.penalty = ad::mean(ad::square(ad::add(norms, -1.0)));
    return res;
}

PenaltyResult gradient_penalty(const CondGan& gan, const ParamSet& critic, const Tensor& x, const Tensor& xhat,
                               const Tensor& m, const Tensor& r, const std::vector<std::size_t>& q, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> alpha(x.rank() == 2 ? x.rows() : 0);
    for (auto& a : alpha) a = u(rng);
    return gradient_penalty(gan, critic, x, xhat, m, r, q, alpha);
}

// ---------------------------------------------------------------------------
// Training

GanState init_state(const CondGan& gan) {
    const auto& c = gan.config();
    GanState s;
    Rng rng(nn::derive_seed(c.seed, 0x6a6e));
    gan.init_generator(s.gen, rng);
    gan.init_critic(s.critic, rng);
    s.gen_opt.config = nn::OptimizerConfig{nn::OptimizerKind::adam, c.lr_gen, c.beta1, c.beta2, 1e-8};
    s.critic_opt.config = nn::OptimizerConfig{nn::OptimizerKind::adam, c.lr_critic, c.beta1, c.beta2, 1e-8};
    return s;
}

IterationStats critic_step(const CondGan& gan, GanState& state, const OmicsBatch& real, Rng& rng) {
    const auto& cfg = gan.config();
    const Tensor x = real.x_tensor(), m = real.m_tensor(), r = real.r_tensor();
    const Tensor z = gan.sample_noise(real.rows, rng);
    Tensor xhat;
    {
        ad::NoGradGuard off;
        xhat = gan.generate(state.gen, z, r, real.q, m);
    }
    const Tensor d_real = gan.critic(state.critic, x, m, r, real.q);
    const Tensor d_fake = gan.critic(state.critic, xhat, m, r, real.q);
    const auto pen = gradient_penalty(gan, state.critic, x, xhat, m, r, real.q, rng);
    const Tensor w_gap = ad::sub(ad::mean(d_fake), ad::mean(d_real));
    const Tensor loss = ad::add(w_gap, ad::mul(pen.penalty, cfg.lambda));

    IterationStats s;
    s.critic_loss = loss.item();
    s.penalty = pen.penalty.item();
    s.wasserstein = -w_gap.item();
    double mean = 0.0, sq = 0.0;
    for (double v : pen.norms) mean += v;
    mean /= static_cast<double>(pen.norms.size());
    for (double v : pen.norms) sq += (v - mean) * (v - mean);
    s.grad_norm_mean = mean;
    s.grad_norm_sd = std::sqrt(sq / static_cast<double>(pen.norms.size()));
    if (!std::isfinite(s.critic_loss)) throw GanDivergedError(state.iteration);
    state.critic = nn::optimizer_step(state.critic_opt, state.critic, nn::gradients(loss, state.critic));
    return s;
}

double generator_step(const CondGan& gan, GanState& state, const OmicsBatch& cond, Rng& rng) {
    const Tensor m = cond.m_tensor(), r = cond.r_tensor();
    const Tensor z = gan.sample_noise(cond.rows, rng);
    const ParamSet frozen = state.critic.as_leaves(false);
    const Tensor loss = ad::neg(ad::mean(gan.critic(frozen, gan.generate(state.gen, z, r, cond.q, m), m, r, cond.q)));
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw GanDivergedError(state.iteration);
    state.gen = nn::optimizer_step(state.gen_opt, state.gen, nn::gradients(loss, state.gen));
    return lv;
}

namespace {

std::vector<std::size_t> draw_batch(std::size_t rows, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t b = std::min(rows, batch);
    // Partial Fisher-Yates: the first b entries are a uniform draw without replacement.
    for (std::size_t i = 0; i < b; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, rows - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(b);
    return idx;
}

void check_data_matches(const OmicsBatch& data, const GanConfig& c) {
    data.validate();
    if (data.tissues != c.tissues || data.genes != c.genes || data.covariates != c.covariates ||
        data.categoricals != c.vocab.size()) {
        throw DimensionError("data layout (tissues " + std::to_string(data.tissues) + ", genes " +
                             std::to_string(data.genes) + ", covariates " + std::to_string(data.covariates) +
                             ", categoricals " + std::to_string(data.categoricals) + ") does not match the config");
    }
}

}  // namespace

GanResult train_wgan_gp(const OmicsBatch& data, const GanConfig& config,
                        const std::function<void(std::size_t, const IterationStats&)>& on_iteration) {
    config.validate();
    check_data_matches(data, config);
    const CondGan gan(config);
    GanState state = init_state(gan);
    Rng rng(config.seed);
    GanResult res;
    for (std::size_t it = 1; it <= config.iterations; ++it) {
        state.iteration = it;
        if (config.linear_decay) {
            const double f = 1.0 - static_cast<double>(it - 1) / static_cast<double>(config.iterations);
            state.gen_opt.config.lr = config.lr_gen * f;
            state.critic_opt.config.lr = config.lr_critic * f;
        }
        IterationStats s;
        for (std::size_t k = 0; k < config.n_critic; ++k) {
            s = critic_step(gan, state, data.select(draw_batch(data.rows, config.batch, rng)), rng);
        }
        s.gen_loss = generator_step(gan, state, data.select(draw_batch(data.rows, config.batch, rng)), rng);
        res.history.push_back(s);
        if (on_iteration) on_iteration(it, s);
    }
    res.gen = state.gen;
    res.critic = state.critic;
    return res;
}

OmicsBatch sample(const CondGan& gan, const ParamSet& gen, const OmicsBatch& cond, std::uint64_t seed) {
    const auto& c = gan.config();
    if (cond.tissues != c.tissues || cond.genes != c.genes || cond.covariates != c.covariates ||
        cond.categoricals != c.vocab.size()) {
        throw DimensionError("sample: conditioning layout does not match the config");
    }
    Rng rng(seed);
    OmicsBatch out = cond;
    ad::NoGradGuard off;
    const Tensor z = gan.sample_noise(cond.rows, rng);
    out.x = gan.generate(gen, z, cond.r_tensor(), cond.q, cond.m_tensor()).to_vector();
    return out;
}

SweepResult conditional_sweep(const CondGan& gan, const ParamSet& gen, const std::vector<double>& z,
                              std::vector<double> r, const std::vector<std::size_t>& q, const std::vector<double>& m,
                              std::vector<double> levels) {
    const auto& c = gan.config();
    if (!c.ace2_index) throw ContractError("conditional_sweep: ace2_index is not set in the config");
    if (levels.empty()) throw ContractError("conditional_sweep: empty level grid");
    if (r.size() != c.covariates) throw ContractError("conditional_sweep: r has the wrong length");
    if (z.size() != c.noise_dim) throw ContractError("conditional_sweep: z has the wrong length");
    std::sort(levels.begin(), levels.end());
    const std::size_t L = levels.size();
    std::vector<double> zz, rr, mm;
    std::vector<std::size_t> qq;
    for (double level : levels) {
        r[*c.ace2_index] = level;
        zz.insert(zz.end(), z.begin(), z.end());
        rr.insert(rr.end(), r.begin(), r.end());
        mm.insert(mm.end(), m.begin(), m.end());
        qq.insert(qq.end(), q.begin(), q.end());
    }
    if (mm.size() != L * c.tissues) throw ContractError("conditional_sweep: m has the wrong length");
    ad::NoGradGuard off;
    const auto x = gan.generate(gen, Tensor::matrix(L, c.noise_dim, zz), matrix_or_empty(L, c.covariates, rr), qq,
                                Tensor::matrix(L, c.tissues, mm))
                       .to_vector();
    SweepResult res;
    res.levels = levels;
    const std::size_t w = c.tissues * c.genes;
    for (std::size_t l = 0; l < L; ++l) res.outputs.emplace_back(x.begin() + static_cast<std::ptrdiff_t>(l * w),
                                                                 x.begin() + static_cast<std::ptrdiff_t>((l + 1) * w));
    return res;
}

// ---------------------------------------------------------------------------
// Correlation fidelity

namespace {

std::vector<bool> zero_variance_columns(const Eigen::MatrixXd& s) {
    std::vector<bool> out(static_cast<std::size_t>(s.cols()), false);
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
        const auto col = s.col(c);
        out[static_cast<std::size_t>(c)] = (col.array() == col(0)).all();
    }
    return out;
}

Eigen::MatrixXd correlations(const Eigen::MatrixXd& s) {
    const Eigen::MatrixXd centered = s.rowwise() - s.colwise().mean();
    const Eigen::VectorXd sd = centered.colwise().norm();
    Eigen::MatrixXd r = centered.transpose() * centered;
    for (Eigen::Index i = 0; i < r.rows(); ++i)
        for (Eigen::Index j = 0; j < r.cols(); ++j) r(i, j) = i == j ? 1.0 : std::clamp(r(i, j) / (sd(i) * sd(j)), -1.0, 1.0);
    // Exact symmetry regardless of summation order.
    return (r + r.transpose()) / 2.0;
}

Eigen::MatrixXd keep_columns(const Eigen::MatrixXd& s, const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd out(s.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = s.col(static_cast<Eigen::Index>(cols[k]));
    return out;
}

Eigen::MatrixXd keep_rows(const Eigen::MatrixXd& s, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), s.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = s.row(static_cast<Eigen::Index>(rows[k]));
    return out;
}

}  // namespace

CorrelationMatrix pearson(const Eigen::MatrixXd& samples, const std::vector<std::string>& genes,
                          std::vector<std::string>* excluded) {
    if (static_cast<std::size_t>(samples.cols()) != genes.size()) throw DimensionError("pearson: one name per column");
    if (samples.rows() < 2) throw DataError("pearson: need at least 2 samples");
    const auto zero = zero_variance_columns(samples);
    std::vector<std::size_t> keep;
    CorrelationMatrix cm;
    for (std::size_t c = 0; c < genes.size(); ++c) {
        if (zero[c]) {
            if (excluded) excluded->push_back(genes[c]);
        } else {
            keep.push_back(c);
            cm.genes.push_back(genes[c]);
        }
    }
    cm.r = correlations(keep_columns(samples, keep));
    return cm;
}

FidelityReport correlation_fidelity(const Eigen::MatrixXd& real, const Eigen::MatrixXd& synthetic,
                                    const std::vector<std::string>& genes) {
    if (real.rows() < 3 || synthetic.rows() < 3) {
        throw DataError("correlation fidelity needs at least 3 samples per set (real " + std::to_string(real.rows()) +
                        ", synthetic " + std::to_string(synthetic.rows()) + ")");
    }
    if (static_cast<std::size_t>(real.cols()) != genes.size() || synthetic.cols() != real.cols()) {
        throw DimensionError("correlation fidelity: real, synthetic and gene names must have the same columns");
    }
    const auto zr = zero_variance_columns(real), zs = zero_variance_columns(synthetic);
    FidelityReport rep;
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < genes.size(); ++c) {
        if (zr[c] || zs[c]) {
            rep.excluded.push_back(genes[c]);
        } else {
            keep.push_back(c);
            rep.genes.push_back(genes[c]);
        }
    }
    rep.real = correlations(keep_columns(real, keep));
    rep.synthetic = correlations(keep_columns(synthetic, keep));
    rep.diff = rep.synthetic - rep.real;
    const std::size_t n = keep.size();
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j, ++pairs) total += std::abs(rep.diff(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    rep.mean_abs_diff = pairs ? total / static_cast<double>(pairs) : 0.0;
    return rep;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> median_split(const std::vector<double>& key) {
    std::vector<std::size_t> order(key.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    const std::size_t half = key.size() / 2;
    std::vector<std::size_t> low(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<std::size_t> high(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());
    std::sort(low.begin(), low.end());
    std::sort(high.begin(), high.end());
    return {low, high};
}

StratifiedFidelity stratified_fidelity(const Eigen::MatrixXd& real, const std::vector<double>& real_key,
                                       const Eigen::MatrixXd& synthetic, const std::vector<double>& synthetic_key,
                                       const std::vector<std::string>& genes) {
    if (real_key.size() != static_cast<std::size_t>(real.rows()) ||
        synthetic_key.size() != static_cast<std::size_t>(synthetic.rows())) {
        throw DimensionError("stratified fidelity: one key per sample required");
    }
    const auto [rl, rh] = median_split(real_key);
    const auto [sl, sh] = median_split(synthetic_key);
    StratifiedFidelity out;
    out.low = correlation_fidelity(keep_rows(real, rl), keep_rows(synthetic, sl), genes);
    out.high = correlation_fidelity(keep_rows(real, rh), keep_rows(synthetic, sh), genes);
    out.real_low = rl.size();
    out.real_high = rh.size();
    out.synthetic_low = sl.size();
    out.synthetic_high = sh.size();
    out.mean_abs_diff = (out.low.mean_abs_diff + out.high.mean_abs_diff) / 2.0;
    return out;
}

nlohmann::json to_json(const FidelityReport& r) {
    auto mat = [](const Eigen::MatrixXd& m) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            std::vector<double> row(static_cast<std::size_t>(m.cols()));
            for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
            rows.push_back(row);
        }
        return rows;
    };
    return {{"genes", r.genes},
            {"excluded", r.excluded},
            {"real", mat(r.real)},
            {"synthetic", mat(r.synthetic)},
            {"mean_abs_diff", r.mean_abs_diff}};
}

// ---------------------------------------------------------------------------
// Export and persistence

void write_samples_csv(const OmicsBatch& batch, const std::vector<std::string>& tissue_names,
                       const std::vector<std::string>& gene_names, const std::filesystem::path& path) {
    if (tissue_names.size() != batch.tissues || gene_names.size() != batch.genes) {
        throw DimensionError("write_samples_csv: names do not match the batch layout");
    }
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out.precision(17);
    out << "sample_id,tissue,gene,value\n";
    for (std::size_t i = 0; i < batch.rows; ++i)
        for (std::size_t t = 0; t < batch.tissues; ++t) {
            if (batch.m[i * batch.tissues + t] == 0.0) continue;
            for (std::size_t g = 0; g < batch.genes; ++g) {
                out << i << ',' << tissue_names[t] << ',' << gene_names[g] << ','
                    << batch.x[i * batch.width() + t * batch.genes + g] << '\n';
            }
        }
    if (!out) throw RuntimeFailure("failed writing " + path.string());
}

nlohmann::json covariate_sidecar(const OmicsBatch& batch, const std::vector<std::string>& covariate_names) {
    if (covariate_names.size() != batch.covariates) throw DimensionError("covariate_sidecar: one name per column of r");
    nlohmann::json r = nlohmann::json::array(), q = nlohmann::json::array(), m = nlohmann::json::array();
    for (std::size_t i = 0; i < batch.rows; ++i) {
        r.push_back(std::vector<double>(batch.r.begin() + static_cast<std::ptrdiff_t>(i * batch.covariates),
                                        batch.r.begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.covariates)));
        q.push_back(std::vector<std::size_t>(batch.q.begin() + static_cast<std::ptrdiff_t>(i * batch.categoricals),
                                             batch.q.begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.categoricals)));
        m.push_back(std::vector<double>(batch.m.begin() + static_cast<std::ptrdiff_t>(i * batch.tissues),
                                        batch.m.begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.tissues)));
    }
    return {{"covariates", covariate_names}, {"r", r}, {"q", q}, {"m", m}};
}

namespace {

nlohmann::json stats_json(const IterationStats& s) {
    return {{"critic_loss", s.critic_loss},   {"penalty", s.penalty},         {"wasserstein", s.wasserstein},
            {"grad_norm_mean", s.grad_norm_mean}, {"grad_norm_sd", s.grad_norm_sd}, {"gen_loss", s.gen_loss}};
}

}  // namespace

nlohmann::json run_manifest(const GanConfig& config, const std::vector<IterationStats>& history) {
    nlohmann::json diag{{"iterations", history.size()}};
    if (!history.empty()) {
        diag["first"] = stats_json(history.front());
        diag["last"] = stats_json(history.back());
        const std::size_t tail = std::max<std::size_t>(1, history.size() / 10);
        IterationStats mean;
        for (std::size_t i = history.size() - tail; i < history.size(); ++i) {
            const auto& s = history[i];
            mean.critic_loss += s.critic_loss / static_cast<double>(tail);
            mean.penalty += s.penalty / static_cast<double>(tail);
            mean.wasserstein += s.wasserstein / static_cast<double>(tail);
            mean.grad_norm_mean += s.grad_norm_mean / static_cast<double>(tail);
            mean.grad_norm_sd += s.grad_norm_sd / static_cast<double>(tail);
            mean.gen_loss += s.gen_loss / static_cast<double>(tail);
        }
        diag["tail_mean"] = stats_json(mean);
    }
    return {{"kind", "wgan-gp"}, {"config", config.to_json()}, {"seed", config.seed}, {"diagnostics", diag}};
}

void save_model(const std::filesystem::path& path, const GanModel& model) {
    const nlohmann::json j{{"format", "dtwin.gan"},
                           {"version", 1},
                           {"config", model.config.to_json()},
                           {"gen", nn::params_to_json(model.gen)},
                           {"critic", nn::params_to_json(model.critic)},
                           {"meta", model.meta}};
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump();
    if (!out) throw RuntimeFailure("failed writing " + path.string());
}

GanModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open GAN model " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("GAN model " + path.string() + " is not valid JSON: " + e.what());
    }
    if (j.value("format", "") != "dtwin.gan" || j.value("version", 0) != 1) {
        throw DataError(path.string() + " is not a dtwin.gan v1 file");
    }
    GanModel m;
    m.config = GanConfig::from_json(j.at("config"));
    m.gen = nn::params_from_json(j.at("gen"));
    m.critic = nn::params_from_json(j.at("critic"));
    m.meta = j.value("meta", nlohmann::json::object());
    return m;
}

}  // namespace dtwin::gan
