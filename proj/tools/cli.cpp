#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dilink/eval.hpp"
#include "dilink/model.hpp"
#include "dilink/service.hpp"
#include "dilink/synthetic.hpp"
#include "dilink/version.hpp"

namespace dilink::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                    std::uint64_t seed, const json& config, const json& outputs) {
  const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  json m = {{"command", command},
            {"args", args},
            {"seed", seed},
            {"config", config},
            {"config_hash", config_hash(config)},
            {"versions",
             {{"dilink", kVersion},
              {"checkpoint_format", model::kCheckpointVersion},
              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"compiler", __VERSION__}}},
            {"outputs", outputs},
            {"created_at", now}};
  write_json(dir / "manifest.json", m);
}

fs::path prepare_out(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

/// Options shared by every command that drives the training pipeline.
struct PipelineOptions {
  std::string preset = "desk";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> dim;
  std::optional<std::string> variant;
  std::optional<Timestamp> cutoff;
  std::optional<std::size_t> replicas;

  void add_to(CLI::App* app, bool model_flags) {
    app->add_option("--preset", preset, "Base configuration: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    app->add_option("--config", config, "JSON pipeline config merged over the preset")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Seed for every stochastic step");
    app->add_option("--cutoff", cutoff, "Train/test split time (epoch seconds)");
    app->add_option("--replicas", replicas, "Bootstrap test replicas");
    if (model_flags) {
      app->add_option("--epochs", epochs, "Training epochs");
      app->add_option("--dim", dim, "Shared text/graph dimension");
    }
  }

  eval::PipelineConfig resolve(const fs::path& fallback_config = {}) const {
    eval::PipelineConfig base = preset == "paper" ? eval::PipelineConfig{} : eval::desk_preset();
    json j = base.to_json();
    if (!config.empty()) {
      j.merge_patch(read_json_file(config));
    } else if (!fallback_config.empty() && fs::exists(fallback_config)) {
      j = read_json_file(fallback_config);
    }
    if (seed) {
      j["seed"] = *seed;
      j["train"]["seed"] = *seed;
      j["model"]["seed"] = *seed;
    }
    if (epochs) j["train"]["epochs"] = *epochs;
    if (dim) j["model"]["dim"] = *dim;
    if (variant) j["model"]["variant"] = *variant;
    if (cutoff) j["cutoff"] = *cutoff;
    if (replicas) j["replicas"] = *replicas;
    return eval::pipeline_config_from_json(j);
  }
};

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream s(text);
  for (std::string item; std::getline(s, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string loss_csv(const std::vector<model::EpochLog>& log) {
  std::ostringstream out;
  out << std::setprecision(10) << "tower,epoch,mean_loss,batches\n";
  for (const auto& e : log) out << e.tower << ',' << e.epoch << ',' << e.mean_loss << ',' << e.batches << '\n';
  return out.str();
}

std::vector<const Incident*> incidents_before(const IncidentMap& incidents, Timestamp cutoff) {
  std::vector<const Incident*> out;
  for (const auto& [_, inc] : incidents)
    if (inc.created_at < cutoff) out.push_back(&inc);
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DiLink: dependency-aware incident linking"};
  app.name("dilink");
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // simulate ------------------------------------------------------------------------
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic world and incident dataset");
  std::string sim_config, sim_out;
  std::optional<std::uint64_t> sim_seed;
  std::optional<std::size_t> sim_services;
  std::optional<double> sim_leakage, sim_rate;
  simulate->add_option("--config", sim_config, "World config JSON")->check(CLI::ExistingFile);
  simulate->add_option("--out", sim_out, "Output directory")->required();
  simulate->add_option("--seed", sim_seed, "World seed");
  simulate->add_option("--services", sim_services, "Number of services");
  simulate->add_option("--leakage", sim_leakage, "Cross-token leakage in [0,1]");
  simulate->add_option("--root-rate", sim_rate, "Root incidents per service per hour");

  // build-graph ---------------------------------------------------------------------
  auto* build_graph = app.add_subcommand("build-graph", "Build the service dependency graph");
  std::string bg_data, bg_out;
  std::optional<double> bg_keep;
  bool bg_all_links = false;
  PipelineOptions bg_opts;
  build_graph->add_option("--data", bg_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  build_graph->add_option("--out", bg_out, "Output directory")->required();
  build_graph->add_option("--edge-keep", bg_keep, "Fraction of edges to keep (seeded)")->check(CLI::Range(0.0, 1.0));
  build_graph->add_flag("--all-links", bg_all_links, "Use every link instead of training-period links only");
  bg_opts.add_to(build_graph, false);

  // train ---------------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a model variant and write a checkpoint");
  std::string tr_data, tr_out, tr_variant = "dilink-gcn";
  bool tr_tune = false;
  PipelineOptions tr_opts;
  train->add_option("--data", tr_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", tr_out, "Run directory")->required();
  train->add_option("--variant", tr_variant,
                    "baseline-text, concatenation, lidar, dilink-gcn, dilink-gat or dilink-gsage");
  train->add_flag("--tune", tr_tune, "Also tune the threshold on the validation links");
  tr_opts.add_to(train, true);

  // tune-threshold ------------------------------------------------------------------
  auto* tune = app.add_subcommand("tune-threshold", "Tune the decision threshold on validation links");
  std::string tu_ckpt, tu_data, tu_out;
  PipelineOptions tu_opts;
  tune->add_option("--checkpoint", tu_ckpt, "Checkpoint to tune")->required()->check(CLI::ExistingFile);
  tune->add_option("--data", tu_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tune->add_option("--out", tu_out, "Run directory (default: next to the checkpoint, updated in place)");
  tu_opts.add_to(tune, false);

  // evaluate ------------------------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "Scoped evaluation on the test period");
  std::string ev_ckpt, ev_data, ev_out;
  PipelineOptions ev_opts;
  evaluate->add_option("--checkpoint", ev_ckpt, "Tuned checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", ev_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", ev_out, "Output directory (default: next to the checkpoint)");
  ev_opts.add_to(evaluate, false);

  // experiment ----------------------------------------------------------------------
  auto* experiment = app.add_subcommand("experiment", "Sensitivity sweeps: edges, dims or hops");
  std::string ex_kind, ex_data, ex_out, ex_values, ex_variant = "dilink-gcn";
  bool ex_baseline = false;
  PipelineOptions ex_opts;
  experiment->add_option("kind", ex_kind, "edges, dims or hops")->required()->check(CLI::IsMember({"edges", "dims", "hops"}));
  experiment->add_option("--data", ex_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  experiment->add_option("--out", ex_out, "Output directory")->required();
  experiment->add_option("--values", ex_values,
                         "Comma-separated settings (default edges 0,0.25,0.5,0.75,1; dims 8,16,32,48,64; hops 0..5)");
  experiment->add_option("--variant", ex_variant, "Model variant");
  experiment->add_flag("--baseline", ex_baseline, "Also run baseline-text once for reference");
  ex_opts.add_to(experiment, true);

  // serve ---------------------------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "Run the link suggestion HTTP service");
  service::ServerConfig sv;
  std::string sv_bind, sv_ckpt, sv_log;
  std::optional<Timestamp> sv_lookback;
  serve->add_option("--checkpoint", sv_ckpt, "Tuned checkpoint (env DILINK_CHECKPOINT)");
  serve->add_option("--lookback", sv_lookback, "Lookback window in seconds (env DILINK_LOOKBACK_SECS, default 14400)");
  serve->add_option("--bind", sv_bind, "host:port (env DILINK_BIND, default 127.0.0.1:8080)");
  serve->add_option("--log", sv_log, "Persistence log (JSONL), replayed on start");

  // score ---------------------------------------------------------------------------
  auto* score = app.add_subcommand("score", "Score one incident pair");
  std::string sc_ckpt, sc_data, sc_a, sc_b, sc_out;
  score->add_option("--checkpoint", sc_ckpt, "Tuned checkpoint")->required()->check(CLI::ExistingFile);
  score->add_option("--data", sc_data, "Dataset directory to look incidents up in");
  score->add_option("--a", sc_a, "Incident id, or a path to an incident JSON file")->required();
  score->add_option("--b", sc_b, "Incident id, or a path to an incident JSON file")->required();
  score->add_option("--out", sc_out, "Optional output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto progress = [&err](const std::string& msg) { err << msg << '\n'; };

  try {
    if (simulate->parsed()) {
      synthetic::WorldConfig wc;
      if (!sim_config.empty()) wc = synthetic::world_config_from_json(read_json_file(sim_config));
      if (sim_seed) wc.seed = *sim_seed;
      if (sim_services) wc.services = *sim_services;
      if (sim_leakage) wc.cross_token_leakage = *sim_leakage;
      if (sim_rate) wc.root_rate = *sim_rate;
      wc.validate();
      const auto dir = prepare_out(sim_out);
      const auto world = synthetic::generate_world(wc);
      const auto sim = synthetic::simulate_incidents(world);
      synthetic::export_world(world, sim, dir);
      write_manifest(dir, "simulate", args, wc.seed, synthetic::to_json(wc),
                     {"world.json", "incidents.jsonl", "links.jsonl", "metadata_edges.tsv"});
      out << "wrote " << sim.incidents.size() << " incidents, " << sim.links.size() << " links, "
          << world.edges.size() << " dependencies to " << dir.string() << '\n';
      return kExitOk;
    }

    if (build_graph->parsed()) {
      auto cfg = bg_opts.resolve();
      if (bg_keep) cfg.edge_keep = *bg_keep;
      const auto data = eval::load_experiment_data(bg_data);
      const auto dir = prepare_out(bg_out);
      graph::ServiceGraph g;
      if (bg_all_links) {
        g = graph::build_graph(data.metadata_edges, data.dataset.links, data.dataset.incidents);
        if (cfg.edge_keep < 1.0) g = graph::sample_edges(g, cfg.edge_keep, derive_seed(cfg.seed, 0xed6e));
      } else {
        g = eval::training_graph(data, eval::plan_split(data.dataset, cfg), cfg);
      }
      write_json(dir / "graph.json", g.to_json());
      write_manifest(dir, "build-graph", args, cfg.seed, cfg.to_json(), {"graph.json"});
      out << g.nodes().size() << " services, " << g.logical_edge_count() << " edges\n";
      return kExitOk;
    }

    if (train->parsed()) {
      tr_opts.variant = tr_variant;
      const auto cfg = tr_opts.resolve();
      const auto data = eval::load_experiment_data(tr_data);
      const auto dir = prepare_out(tr_out);
      const auto plan = eval::plan_split(data.dataset, cfg);
      const auto graph = eval::training_graph(data, plan, cfg);
      const auto triplets = eval::training_triplets(data.dataset, plan, cfg);
      if (triplets.triplets.empty()) throw DataError("no training triplets");
      progress("graph " + std::to_string(graph.logical_edge_count()) + " edges, " +
               std::to_string(triplets.triplets.size()) + " triplets");
      auto m = model::make_model(cfg.model, incidents_before(data.dataset.incidents, plan.cutoff), graph);
      const auto result = model::train(*m, cfg.train, triplets.triplets, data.dataset.incidents,
                                       [&](const model::EpochLog& e) {
                                         progress("epoch " + std::to_string(e.epoch) + " [" + e.tower + "] loss " +
                                                  std::to_string(e.mean_loss));
                                       });
      json outputs = {"model.ckpt", "loss_log.csv", "loss_log.json", "graph.json", "pipeline.json"};
      json summary = {{"initial_loss", result.initial_loss},
                      {"final_loss", result.final_loss},
                      {"triplets", triplets.triplets.size()},
                      {"cutoff", plan.cutoff}};
      if (tr_tune) {
        eval::EvalReport validation;
        summary["tau"] = eval::tune_on_validation(*m, data.dataset, plan, cfg, &validation);
        write_json(dir / "threshold.json", {{"tau", summary["tau"]}, {"validation", eval::to_json(validation)}});
        outputs.push_back("threshold.json");
      }
      model::save_checkpoint(*m, dir / "model.ckpt");
      write_text(dir / "loss_log.csv", loss_csv(result.log));
      json log = json::array();
      for (const auto& e : result.log) {
        log.push_back({{"tower", e.tower}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"batches", e.batches}});
      }
      write_json(dir / "loss_log.json", {{"summary", summary}, {"epochs", log}});
      write_json(dir / "graph.json", graph.to_json());
      write_json(dir / "pipeline.json", cfg.to_json());
      write_manifest(dir, "train", args, cfg.seed, cfg.to_json(), outputs);
      out << summary.dump() << '\n';
      return kExitOk;
    }

    if (tune->parsed()) {
      const fs::path ckpt(tu_ckpt);
      const auto cfg = tu_opts.resolve(ckpt.parent_path() / "pipeline.json");
      const auto data = eval::load_experiment_data(tu_data);
      auto m = model::load_checkpoint(ckpt);
      const auto plan = eval::plan_split(data.dataset, cfg);
      eval::EvalReport validation;
      const double tau = eval::tune_on_validation(*m, data.dataset, plan, cfg, &validation);
      const fs::path dir = tu_out.empty() ? ckpt.parent_path() : prepare_out(tu_out);
      const fs::path target = tu_out.empty() ? ckpt : dir / ckpt.filename();
      model::save_checkpoint(*m, target);
      write_json(dir / "threshold.json", {{"tau", tau}, {"validation", eval::to_json(validation)}});
      write_manifest(dir, "tune-threshold", args, cfg.seed, cfg.to_json(),
                     {target.filename().string(), "threshold.json"});
      out << json({{"tau", tau}, {"checkpoint", target.string()}}).dump() << '\n';
      return kExitOk;
    }

    if (evaluate->parsed()) {
      const fs::path ckpt(ev_ckpt);
      const auto cfg = ev_opts.resolve(ckpt.parent_path() / "pipeline.json");
      const auto data = eval::load_experiment_data(ev_data);
      const auto m = model::load_checkpoint(ckpt);
      if (!m->threshold()) throw std::runtime_error("checkpoint has no threshold; run tune-threshold first");
      const auto plan = eval::plan_split(data.dataset, cfg);
      const auto report = eval::scoped_eval(*m, eval::test_pairs(data.dataset, plan, cfg), data.dataset.incidents,
                                            cfg.replicas, derive_seed(cfg.seed, 0xb007));
      const fs::path dir = ev_out.empty() ? ckpt.parent_path() : prepare_out(ev_out);
      json rj = eval::to_json(report);
      rj["variant"] = std::string(model::to_string(m->variant()));
      write_json(dir / "report.json", rj);
      write_text(dir / "report.csv", eval::report_csv(report));
      write_manifest(dir, "evaluate", args, cfg.seed, cfg.to_json(), {"report.json", "report.csv"});
      out << eval::report_csv(report);
      return kExitOk;
    }

    if (experiment->parsed()) {
      ex_opts.variant = ex_variant;
      const auto cfg = ex_opts.resolve();
      const auto data = eval::load_experiment_data(ex_data);
      const auto dir = prepare_out(ex_out);
      const auto values = split_csv(ex_values);
      std::vector<eval::SweepRow> rows;
      std::string x_name;
      try {
        if (ex_kind == "edges") {
          x_name = "edge_keep";
          std::vector<double> ps;
          for (const auto& v : values) ps.push_back(std::stod(v));
          if (ps.empty()) ps = {0.0, 0.25, 0.5, 0.75, 1.0};
          rows = eval::edge_sensitivity(data, cfg, ps, progress);
        } else if (ex_kind == "dims") {
          x_name = "input_dim";
          std::vector<std::size_t> ds;
          for (const auto& v : values) ds.push_back(std::stoul(v));
          if (ds.empty()) ds = {8, 16, 32, 48, 64};
          rows = eval::dim_sensitivity(data, cfg, ds, progress);
        } else {
          x_name = "hops";
          std::vector<int> hs;
          for (const auto& v : values) hs.push_back(std::stoi(v));
          if (hs.empty()) hs = {0, 1, 2, 3, 4, 5};
          rows = eval::hop_sensitivity(data, cfg, hs, progress);
        }
      } catch (const std::logic_error& e) {
        // std::stod and friends throw invalid_argument/out_of_range on bad --values.
        if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e)) {
          throw UsageError(std::string("bad --values: ") + e.what());
        }
        throw;
      }
      json result = eval::sweep_json(x_name, rows);
      result["variant"] = ex_variant;
      json outputs = {ex_kind + ".json", ex_kind + ".csv", ex_kind + "_plot.csv"};
      if (ex_baseline) {
        auto bcfg = cfg;
        bcfg.model.variant = model::Variant::BaselineText;
        bcfg.model.sync();
        progress("baseline-text");
        const auto b = eval::run_pipeline(data, bcfg, progress);
        result["baseline"] = eval::to_json(b.report);
      }
      write_json(dir / (ex_kind + ".json"), result);
      // Table: one row per setting, overall scope.
      std::ostringstream table;
      table << std::setprecision(6) << x_name << ",precision,recall,f1,accuracy,f1_std,final_loss\n";
      for (const auto& r : rows) {
        const auto& s = r.report.scope(eval::kOverall);
        table << r.x << ',' << s.mean.precision << ',' << s.mean.recall << ',' << s.mean.f1 << ','
              << s.mean.accuracy << ',' << s.stddev.f1 << ',' << r.final_loss << '\n';
      }
      write_text(dir / (ex_kind + ".csv"), table.str());
      write_text(dir / (ex_kind + "_plot.csv"), eval::sweep_csv(x_name, rows));
      write_manifest(dir, "experiment " + ex_kind, args, cfg.seed, cfg.to_json(), outputs);
      out << table.str();
      return kExitOk;
    }

    if (serve->parsed()) {
      if (!sv_ckpt.empty()) sv.checkpoint = sv_ckpt;
      if (sv_lookback) sv.lookback = *sv_lookback;
      if (!sv_bind.empty()) service::parse_bind(sv_bind, sv.host, sv.port);
      service::apply_environment(sv, !sv_ckpt.empty(), sv_lookback.has_value(), !sv_bind.empty());
      if (sv.checkpoint.empty()) throw UsageError("serve needs --checkpoint or DILINK_CHECKPOINT");
      sv.log_path = sv_log;
      std::shared_ptr<const model::Model> m = model::load_checkpoint(sv.checkpoint);
      service::LinkService svc(m, sv.lookback, sv.log_path);
      service::HttpServer http(svc);
      const int port = http.bind(sv.host, sv.port);
      if (port < 0) throw std::runtime_error("cannot bind " + sv.host + ":" + std::to_string(sv.port));
      out << "listening on " << sv.host << ':' << port << " (tau " << *m->threshold() << ", lookback "
          << sv.lookback << " s)" << std::endl;
      http.run();
      return kExitOk;
    }

    if (score->parsed()) {
      const auto m = model::load_checkpoint(sc_ckpt);
      if (!m->threshold()) throw std::runtime_error("checkpoint has no threshold; run tune-threshold first");
      std::optional<Dataset> ds;
      auto fetch = [&](const std::string& ref) -> Incident {
        if (fs::is_regular_file(ref)) return incident_from_json(read_json_file(ref));
        if (sc_data.empty()) throw UsageError("'" + ref + "' is not a file; pass --data to look up incident ids");
        if (!ds) ds = load_dataset(sc_data);
        auto it = ds->incidents.find(ref);
        if (it == ds->incidents.end()) throw DataError("unknown incident '" + ref + "'");
        return it->second;
      };
      const Incident a = fetch(sc_a);
      const Incident b = fetch(sc_b);
      bool fa = false, fb = false;
      const auto va = m->scoring_vector(a, true, &fa);
      const auto vb = m->scoring_vector(b, true, &fb);
      const double d = m->distance(va, vb);
      const double tau = *m->threshold();
      json result = {{"a", a.id},
                     {"b", b.id},
                     {"distance", d},
                     {"tau", tau},
                     {"linked", d < tau},
                     {"confidence", service::confidence(d, tau)},
                     {"scope", std::string(to_string(pair_scope(a, b)))},
                     {"fallback", fa || fb}};
      if (!sc_out.empty()) {
        const auto dir = prepare_out(sc_out);
        write_json(dir / "score.json", result);
        write_manifest(dir, "score", args, 0, {{"checkpoint", sc_ckpt}}, {"score.json"});
      }
      out << result.dump() << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "dilink: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "dilink: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dilink::cli
