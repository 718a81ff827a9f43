// dtwin: command-line entry point for simulation, training, forecasting,
// omics synthesis and the HTTP service.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtwin/forecast.hpp"
#include "dtwin/gan.hpp"
#include "dtwin/graph_net.hpp"
#include "dtwin/http_api.hpp"
#include "dtwin/omics.hpp"
#include "dtwin/physio.hpp"
#include "dtwin/run_store.hpp"
#include "dtwin/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtwin;

namespace {

/// Bad flags, files or values: exit 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void ensure_parent(const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw RuntimeFailure("cannot write " + path.string());
}

void announce(const fs::path& path) { std::cout << path.string() << '\n'; }

void write_json(const fs::path& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
    announce(path);
}

/// A scenario file, or the id of one of the bundled fixtures.
physio::Scenario resolve_scenario(const std::string& ref) {
    fs::path p(ref);
    if (!fs::exists(p)) {
        const auto fixture = fs::path(DTWIN_FIXTURE_DIR) / "scenarios" / (ref + ".json");
        if (!fs::exists(fixture)) throw ConfigError("scenario '" + ref + "' is neither a file nor a bundled scenario id");
        p = fixture;
    }
    auto s = physio::load_scenario(p);
    if (s.id.empty()) s.id = p.stem().string();
    const auto v = s.violations();
    if (!v.empty()) throw ConfigError("scenario " + p.string() + ": " + v.front());
    return s;
}

struct ExposomeFlags {
    std::optional<double> ace, heparin, calories, exercise, infection;
    std::string raw;

    void add(CLI::App* cmd) {
        cmd->add_option("--ace-inhibitor", ace, "ACE inhibitor dose, mg/day");
        cmd->add_option("--heparin", heparin, "Heparin dose, U/ml");
        cmd->add_option("--calories", calories, "Calorie intake, kcal/day");
        cmd->add_option("--exercise", exercise, "Exercise level in [0, 1]");
        cmd->add_option("--infection-onset", infection, "Infection onset time, s");
        cmd->add_option("--exposome", raw, "Exposome overrides as a JSON object");
    }
    json overrides() const {
        json j = json::object();
        if (!raw.empty()) {
            try {
                j = json::parse(raw);
            } catch (const json::exception& e) {
                throw ConfigError(std::string("--exposome is not valid JSON: ") + e.what());
            }
            if (!j.is_object()) throw ConfigError("--exposome must be a JSON object");
        }
        if (ace) j["ace_inhibitor_dose"] = *ace;
        if (heparin) j["heparin_dose"] = *heparin;
        if (calories) j["calorie_intake"] = *calories;
        if (exercise) j["exercise_level"] = *exercise;
        if (infection) j["infection_onset"] = *infection;
        return j;
    }
};

// ---------------------------------------------------------------------------

struct SimulateOpts {
    std::string scenario;
    std::string out;
    std::optional<double> horizon;
    ExposomeFlags exposome;
};

int run_simulate(const SimulateOpts& o) {
    auto s = resolve_scenario(o.scenario);
    s.exposome = physio::exposome_from_json(o.exposome.overrides(), s.exposome);
    if (o.horizon) s.horizon_s = *o.horizon;
    const auto v = s.violations();
    if (!v.empty()) throw ConfigError(v.front());
    const auto traj = physio::simulate_scenario(s.initial, s.exposome, s.horizon_s, s.dt, s.params, 0.0, s.output_dt);
    const fs::path out(o.out);
    fs::create_directories(out);
    physio::write_csv(traj, out / "trajectory.csv");
    announce(out / "trajectory.csv");
    write_json(out / "scenario.json", physio::to_json(s));
    const auto cs = physio::cycle_summary(traj);
    write_json(out / "summary.json", {{"rows", traj.rows()},
                                      {"beats", cs.beats},
                                      {"heart_rate", cs.heart_rate},
                                      {"map", cs.map},
                                      {"ang2", cs.ang2},
                                      {"ace2", cs.ace2},
                                      {"total_volume_start", physio::total_volume(s.params, traj.state(0))},
                                      {"total_volume_end", physio::total_volume(s.params, traj.state(traj.rows() - 1))}});
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainGnnOpts {
    gn::GnConfig model;
    gn::TrainConfig train;
    std::string optimizer = "sgd";
    std::string aggregator = "mean";
    physio::SplitSizes split;
    std::size_t scenarios = 10;
    std::string checkpoint;
    std::string out;
};

int run_train_gnn(TrainGnnOpts o) {
    try {
        o.train.optimizer = o.optimizer == "adam" ? nn::OptimizerKind::adam
                          : o.optimizer == "sgd"  ? nn::OptimizerKind::sgd
                                                  : throw ConfigError("--optimizer must be sgd or adam");
        o.model.aggregator = gn::parse_aggregator(o.aggregator);
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    std::cerr << "building dataset: " << o.split.total() << " windows of " << o.model.tau << " steps\n";
    auto ds = physio::default_dataset(o.model.tau, o.split, o.train.seed, o.scenarios);
    gn::GnModel m;
    m.config = o.model;
    m.topology = physio::derive_graph(physio::surrogate_system());
    m.normalizer = ds.normalizer;
    o.train.on_epoch = [](std::size_t epoch, double tr, double val) {
        std::fprintf(stderr, "epoch %3zu  train %.6g  val %.6g\n", epoch, tr, val);
    };
    const auto res = gn::train_gnn(gn::GnForecaster(m.config, m.topology), ds, o.train);
    m.params = res.params;
    m.meta = {{"epochs", o.train.epochs}, {"lr", o.train.lr}, {"batch", o.train.batch}, {"seed", o.train.seed},
              {"optimizer", o.optimizer}, {"split", {o.split.train, o.split.val, o.split.test}}};
    const fs::path ckpt(o.checkpoint);
    ensure_parent(ckpt);
    gn::save_model(ckpt, m);
    announce(ckpt);

    const fs::path out(o.out);
    fs::create_directories(out);
    std::ostringstream csv;
    csv.precision(17);
    csv << "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < res.train_loss.size(); ++e)
        csv << e + 1 << ',' << res.train_loss[e] << ',' << res.val_loss[e] << '\n';
    write_text(out / "losses.csv", csv.str());
    announce(out / "losses.csv");
    const double test = gn::evaluate(gn::GnForecaster(m.config, m.topology), m.params, ds, ds.test);
    write_json(out / "manifest.json", {{"kind", "train-gnn"},
                                       {"config", m.config.to_json()},
                                       {"train", m.meta},
                                       {"checkpoint", ckpt.string()},
                                       {"test_loss", test},
                                       {"final_val_loss", res.val_loss.empty() ? 0.0 : res.val_loss.back()}});
    return 0;
}

// ---------------------------------------------------------------------------

struct ForecastOpts {
    std::string scenario;
    std::string checkpoint;
    std::size_t horizon = 100, passes = 100;
    std::optional<std::uint64_t> seed;
    std::string masks = "per_step";
    double level = 0.95;
    ExposomeFlags exposome;
    std::string out;
};

int run_forecast(const ForecastOpts& o) {
    const fs::path ckpt(o.checkpoint);
    if (!fs::exists(ckpt))
        throw ConfigError("missing trained checkpoint " + ckpt.string() + " (run `dtwin train-gnn` first or pass --checkpoint)");
    const auto s = resolve_scenario(o.scenario);
    json body{{"scenario_id", s.id}, {"exposome", o.exposome.overrides()}, {"horizon", o.horizon},
              {"passes", o.passes},  {"masks", o.masks},                   {"level", o.level}};
    if (o.seed) body["seed"] = *o.seed;
    std::vector<std::string> v;
    const auto req = service::InterventionRequest::from_json(body, v);
    if (!v.empty()) throw ConfigError(v.front());

    std::ifstream in(ckpt, std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    const auto model = gn::load_model(ckpt);
    const auto files = service::execute_forecast(s, req, model, service::sha256_hex(bytes.str()), 0);
    const fs::path out(o.out);
    fs::create_directories(out);
    for (const auto& [name, text] : files) {
        write_text(out / name, text);
        announce(out / name);
    }
    const auto bundle = forecast::bundle_from_json(json::parse(files.at("bundle.json")));
    forecast::write_bundle_csv(bundle, service::forecast_variable_names(), out / "bundle.csv");
    announce(out / "bundle.csv");
    return 0;
}

// ---------------------------------------------------------------------------

struct OmicsInput {
    std::string counts, donors_csv;
    std::size_t donors = 600;
    double coupling = 0.5;
    std::uint64_t seed = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--counts", counts, "Counts CSV (sample_id,donor_id,tissue,gene,count); synthetic when omitted");
        cmd->add_option("--donor-info", donors_csv, "Donor CSV (donor_id,age,sex) for --counts");
        cmd->add_option("--donors", donors, "Synthetic donors")->check(CLI::PositiveNumber);
        cmd->add_option("--coupling", coupling, "Synthetic blood-to-tissue coupling in [0, 1]");
        cmd->add_option("--seed", seed, "Seed");
    }
    /// Loads or synthesizes; synthetic inputs are written to `out` for reuse.
    omics::CountMatrix load(const fs::path& out) const {
        if (!counts.empty()) {
            auto c = omics::read_counts_csv(counts);
            if (!donors_csv.empty()) omics::read_donors_csv(donors_csv, c);
            return c;
        }
        omics::SynthConfig sc;
        sc.donors = donors;
        sc.coupling = coupling;
        sc.seed = seed;
        try {
            sc.validate();
        } catch (const ContractError& e) {
            throw ConfigError(e.what());
        }
        auto c = omics::synth_counts(sc);
        fs::create_directories(out);
        omics::write_counts_csv(c, out / "counts.csv");
        announce(out / "counts.csv");
        omics::write_donors_csv(c, out / "donors.csv");
        announce(out / "donors.csv");
        return c;
    }
};

struct CrosstalkOpts {
    OmicsInput input;
    std::string gene_sets;
    std::size_t replicates = 200;
    std::string out;
};

int run_crosstalk(const CrosstalkOpts& o) {
    const fs::path out(o.out);
    const auto counts = o.input.load(out);
    const auto sets = o.gene_sets.empty() ? omics::default_gene_sets() : omics::load_gene_sets(o.gene_sets);
    omics::CrosstalkConfig cfg;
    cfg.bootstrap.replicates = o.replicates;
    cfg.bootstrap.seed = o.input.seed;
    cfg.cv.seed = o.input.seed;
    const auto tables = omics::preprocess(counts);
    const auto reports = omics::crosstalk(tables, sets, cfg);
    for (const auto& r : reports) {
        double mean = 0;
        for (const auto& g : r.bootstrap.genes) mean += g.mean;
        if (!r.bootstrap.genes.empty()) mean /= static_cast<double>(r.bootstrap.genes.size());
        std::fprintf(stderr, "%-22s %-20s donors %4zu  mean R2 %.3f\n", r.tissue.c_str(), r.status.c_str(), r.donors,
                     r.status == "ok" ? mean : 0.0);
    }
    write_json(out / "crosstalk.json", omics::crosstalk_json(reports, cfg));
    return 0;
}

struct TrainGanOpts {
    OmicsInput input;
    std::string pathway = omics::kRasPathway;
    std::vector<std::string> tissues{omics::kBlood, "lung", "kidney_cortex", "pancreas", "heart_left_ventricle"};
    std::string ace2_tissue = "lung";
    std::size_t iterations = 1000, batch = 64, noise = 64, width = 256;
    double lr_gen = 1e-4, lr_critic = 1e-4, lambda = 10.0;
    bool decay = false;
    std::string model;
    std::string out;
};

int run_train_gan(const TrainGanOpts& o) {
    const fs::path out(o.out);
    const auto counts = o.input.load(out);
    const auto tables = omics::preprocess(counts);
    const auto set = omics::find_gene_set(omics::default_gene_sets(), o.pathway);
    auto data = omics::gan_data(counts, tables, o.tissues, set.genes, o.ace2_tissue);

    gan::GanConfig cfg;
    cfg.tissues = data.batch.tissues;
    cfg.genes = data.batch.genes;
    cfg.covariates = data.batch.covariates;
    cfg.vocab = {2};
    cfg.noise_dim = o.noise;
    cfg.gen_hidden = cfg.critic_hidden = {o.width, o.width};
    cfg.iterations = o.iterations;
    cfg.batch = o.batch;
    cfg.lr_gen = o.lr_gen;
    cfg.lr_critic = o.lr_critic;
    cfg.lambda = o.lambda;
    cfg.linear_decay = o.decay;
    cfg.seed = o.input.seed;
    cfg.ace2_index = 1;
    const auto v = cfg.violations();
    if (!v.empty()) throw ConfigError(v.front());

    const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 20);
    const auto res = gan::train_wgan_gp(data.batch, cfg, [&](std::size_t i, const gan::IterationStats& s) {
        if (i % every == 0 || i == cfg.iterations)
            std::fprintf(stderr, "iter %5zu  W %.4f  penalty %.4f  |grad| %.3f\n", i, s.wasserstein, s.penalty,
                         s.grad_norm_mean);
    });
    gan::GanModel m{cfg, res.gen, res.critic, json::object()};
    m.meta = {{"tissues", data.tissues},
              {"genes", data.genes},
              {"pathway", o.pathway},
              {"conditions", gan::covariate_sidecar(data.batch, data.covariates)}};
    const fs::path model_path = o.model.empty() ? out / "gan.json" : fs::path(o.model);
    ensure_parent(model_path);
    gan::save_model(model_path, m);
    announce(model_path);
    write_json(out / "manifest.json", gan::run_manifest(cfg, res.history));
    return 0;
}

struct SampleOpts {
    std::string model;
    std::size_t n = 100;
    std::uint64_t seed = 0;
    std::optional<double> ace2;
    std::string out;
};

int run_sample(const SampleOpts& o) {
    if (!fs::exists(o.model)) throw ConfigError("missing GAN model " + o.model + " (run `dtwin train-gan` first)");
    const auto m = gan::load_model(o.model);
    const auto& cond = m.meta.at("conditions");
    const auto r = cond.at("r").get<std::vector<std::vector<double>>>();
    const auto q = cond.at("q").get<std::vector<std::vector<std::size_t>>>();
    const auto mask = cond.at("m").get<std::vector<std::vector<double>>>();
    if (r.empty()) throw DataError("model " + o.model + " carries no conditioning rows");

    // Resample observed donor conditions so masks and covariates stay realistic.
    gan::OmicsBatch c;
    c.tissues = m.config.tissues;
    c.genes = m.config.genes;
    c.covariates = m.config.covariates;
    c.categoricals = m.config.vocab.size();
    c.rows = o.n;
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<std::size_t> pick(0, r.size() - 1);
    for (std::size_t i = 0; i < o.n; ++i) {
        const std::size_t k = pick(rng);
        auto ri = r[k];
        if (o.ace2 && m.config.ace2_index) ri[*m.config.ace2_index] = *o.ace2;
        c.r.insert(c.r.end(), ri.begin(), ri.end());
        c.q.insert(c.q.end(), q[k].begin(), q[k].end());
        c.m.insert(c.m.end(), mask[k].begin(), mask[k].end());
    }
    c.x.assign(c.rows * c.width(), 0.0);
    const gan::CondGan g(m.config);
    const auto synth = gan::sample(g, m.gen, c, o.seed);
    const fs::path out(o.out);
    fs::create_directories(out);
    gan::write_samples_csv(synth, m.meta.at("tissues").get<std::vector<std::string>>(),
                           m.meta.at("genes").get<std::vector<std::string>>(), out / "samples.csv");
    announce(out / "samples.csv");
    write_json(out / "covariates.json",
               gan::covariate_sidecar(synth, cond.at("covariates").get<std::vector<std::string>>()));
    return 0;
}

// ---------------------------------------------------------------------------

struct ServeOpts {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    std::string checkpoint;
    std::size_t workers = 2;
};

int run_serve(const ServeOpts& o, const fs::path& data_dir) {
    service::ServiceConfig cfg;
    cfg.data_dir = data_dir;
    if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
    cfg.workers = o.workers;
    std::optional<fs::path> static_dir;
    if (!o.static_dir.empty()) {
        if (!fs::is_directory(o.static_dir)) throw ConfigError("static directory " + o.static_dir + " does not exist");
        static_dir = o.static_dir;
    }

    // Signals go to a dedicated thread that stops the server cleanly.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::TwinService svc(cfg);
    service::HttpApi api(svc, static_dir);
    const int port = api.bind(o.host, o.port);
    std::cout << "serving on http://" << o.host << ':' << port << "  data dir " << data_dir.string() << std::endl;
    if (!fs::exists(svc.checkpoint_path()))
        std::cerr << "note: no checkpoint at " << svc.checkpoint_path().string() << "; forecasts will be refused\n";
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        api.stop();
    });
    api.listen();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Digital twin toolkit: physiology simulation, graph-network forecasting, omics synthesis"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string data_dir = "twin-data";
    app.add_option("--data-dir", data_dir, "Data directory (runs, models, scenarios)")->envname("TWIN_DATA_DIR");
    auto under = [&](const std::string& out, const std::string& name) {
        return out.empty() ? (fs::path(data_dir) / name).string() : out;
    };

    SimulateOpts sim;
    auto* c_sim = app.add_subcommand("simulate", "Integrate a scenario and write its trajectory");
    c_sim->add_option("--scenario", sim.scenario, "Scenario JSON file or bundled id")->required();
    c_sim->add_option("--out", sim.out, "Output directory (default <data-dir>/simulate)");
    c_sim->add_option("--horizon", sim.horizon, "Override the simulated time, s");
    sim.exposome.add(c_sim);

    TrainGnnOpts tg;
    auto* c_tg = app.add_subcommand("train-gnn", "Train the graph-network forecaster");
    c_tg->add_option("--epochs", tg.train.epochs, "Epochs")->capture_default_str();
    c_tg->add_option("--lr", tg.train.lr, "Learning rate")->capture_default_str();
    c_tg->add_option("--batch", tg.train.batch, "Mini-batch size")->capture_default_str();
    c_tg->add_option("--optimizer", tg.optimizer, "sgd or adam")->capture_default_str();
    c_tg->add_option("--seed", tg.train.seed, "Seed")->capture_default_str();
    c_tg->add_option("--tau", tg.model.tau, "Window length")->capture_default_str();
    c_tg->add_option("--width", tg.model.width, "Latent width")->capture_default_str();
    c_tg->add_option("--blocks", tg.model.blocks, "Graph-network blocks")->capture_default_str();
    c_tg->add_option("--hidden-layers", tg.model.hidden_layers, "Hidden layers per update MLP")->capture_default_str();
    c_tg->add_option("--dropout", tg.model.dropout, "Dropout rate")->capture_default_str();
    c_tg->add_option("--aggregator", tg.aggregator, "sum, mean or max")->capture_default_str();
    c_tg->add_option("--train-windows", tg.split.train, "Training windows")->capture_default_str();
    c_tg->add_option("--val-windows", tg.split.val, "Validation windows")->capture_default_str();
    c_tg->add_option("--test-windows", tg.split.test, "Test windows")->capture_default_str();
    c_tg->add_option("--scenarios", tg.scenarios, "Simulated training scenarios")->capture_default_str();
    c_tg->add_option("--checkpoint", tg.checkpoint, "Checkpoint path (default <data-dir>/models/gnn.json)");
    c_tg->add_option("--out", tg.out, "Output directory (default <data-dir>/train-gnn)");

    ForecastOpts fo;
    auto* c_fo = app.add_subcommand("forecast", "MC-dropout forecast for a scenario under an intervention");
    c_fo->add_option("--scenario", fo.scenario, "Scenario JSON file or bundled id")->required();
    c_fo->add_option("--checkpoint", fo.checkpoint, "Checkpoint (default <data-dir>/models/gnn.json)");
    c_fo->add_option("--horizon", fo.horizon, "Forecast steps")->capture_default_str();
    c_fo->add_option("--passes", fo.passes, "Stochastic passes")->capture_default_str();
    c_fo->add_option("--seed", fo.seed, "Seed (default: the scenario seed)");
    c_fo->add_option("--masks", fo.masks, "per_step or per_trajectory")->capture_default_str();
    c_fo->add_option("--level", fo.level, "Band level")->capture_default_str();
    c_fo->add_option("--out", fo.out, "Output directory (default <data-dir>/forecast)");
    fo.exposome.add(c_fo);

    TrainGanOpts ga;
    auto* c_ga = app.add_subcommand("train-gan", "Train the conditional masked WGAN-GP on expression data");
    ga.input.add(c_ga);
    c_ga->add_option("--pathway", ga.pathway, "Gene set to model")->capture_default_str();
    c_ga->add_option("--tissues", ga.tissues, "Tissues to model")->delimiter(',');
    c_ga->add_option("--ace2-tissue", ga.ace2_tissue, "Tissue whose ACE2 level is a covariate")->capture_default_str();
    c_ga->add_option("--iterations", ga.iterations, "Generator updates")->capture_default_str();
    c_ga->add_option("--batch", ga.batch, "Mini-batch size")->capture_default_str();
    c_ga->add_option("--noise", ga.noise, "Noise dimension")->capture_default_str();
    c_ga->add_option("--width", ga.width, "Hidden width of both players")->capture_default_str();
    c_ga->add_option("--lr-gen", ga.lr_gen, "Generator learning rate")->capture_default_str();
    c_ga->add_option("--lr-critic", ga.lr_critic, "Critic learning rate")->capture_default_str();
    c_ga->add_option("--lambda", ga.lambda, "Gradient-penalty weight")->capture_default_str();
    c_ga->add_flag("--linear-decay", ga.decay, "Decay both learning rates linearly to zero");
    c_ga->add_option("--model", ga.model, "Model path (default <out>/gan.json)");
    c_ga->add_option("--out", ga.out, "Output directory (default <data-dir>/train-gan)");

    SampleOpts sa;
    auto* c_sa = app.add_subcommand("sample", "Draw synthetic donors from a trained GAN");
    c_sa->add_option("--model", sa.model, "GAN model (default <data-dir>/train-gan/gan.json)");
    c_sa->add_option("-n,--count", sa.n, "Donors to draw")->check(CLI::PositiveNumber)->capture_default_str();
    c_sa->add_option("--seed", sa.seed, "Seed")->capture_default_str();
    c_sa->add_option("--ace2", sa.ace2, "Fix the ACE2 covariate at this level");
    c_sa->add_option("--out", sa.out, "Output directory (default <data-dir>/sample)");

    CrosstalkOpts ct;
    auto* c_ct = app.add_subcommand("crosstalk", "Blood-to-tissue ridge crosstalk with bootstrap R2");
    ct.input.add(c_ct);
    c_ct->add_option("--gene-sets", ct.gene_sets, "Gene set JSON (default: bundled sets)");
    c_ct->add_option("--replicates", ct.replicates, "Bootstrap replicates")->capture_default_str();
    c_ct->add_option("--out", ct.out, "Output directory (default <data-dir>/crosstalk)");

    ServeOpts sv;
    auto* c_sv = app.add_subcommand("serve", "Serve the JSON API (and optional static UI)");
    c_sv->add_option("--host", sv.host, "Bind address")->capture_default_str();
    c_sv->add_option("--port", sv.port, "Port (0 picks a free one)")->capture_default_str();
    c_sv->add_option("--static", sv.static_dir, "Directory of static assets served at /");
    c_sv->add_option("--checkpoint", sv.checkpoint, "Forecaster checkpoint (default <data-dir>/models/gnn.json)");
    c_sv->add_option("--workers", sv.workers, "Background run workers")->check(CLI::PositiveNumber)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*c_sim) return run_simulate((sim.out = under(sim.out, "simulate"), sim));
        if (*c_tg) {
            tg.checkpoint = tg.checkpoint.empty() ? (fs::path(data_dir) / "models" / "gnn.json").string() : tg.checkpoint;
            tg.out = under(tg.out, "train-gnn");
            return run_train_gnn(tg);
        }
        if (*c_fo) {
            fo.checkpoint = fo.checkpoint.empty() ? (fs::path(data_dir) / "models" / "gnn.json").string() : fo.checkpoint;
            fo.out = under(fo.out, "forecast");
            return run_forecast(fo);
        }
        if (*c_ga) return run_train_gan((ga.out = under(ga.out, "train-gan"), ga));
        if (*c_sa) {
            sa.model = sa.model.empty() ? (fs::path(data_dir) / "train-gan" / "gan.json").string() : sa.model;
            sa.out = under(sa.out, "sample");
            return run_sample(sa);
        }
        if (*c_ct) return run_crosstalk((ct.out = under(ct.out, "crosstalk"), ct));
        if (*c_sv) return run_serve(sv, data_dir);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const service::ApiError& e) {
        std::cerr << "error: " << e.what() << '\n';
        for (const auto& v : e.violations()) std::cerr << "  " << v << '\n';
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const LookupError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
