#include "dilink/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dilink/rng.hpp"
#include "dilink/text.hpp"

namespace dilink::synthetic {

using nlohmann::json;

namespace {

const std::vector<std::pair<std::string, std::string>>& synonym_pairs() {
  static const std::vector<std::pair<std::string, std::string>> pairs = {
      {"error", "failure"},      {"timeout", "timedout"},   {"latency", "slowness"},   {"unhealthy", "degraded"},
      {"spike", "surge"},        {"dropped", "lost"},       {"crash", "abort"},        {"throttled", "ratelimited"},
      {"unreachable", "offline"}, {"exhausted", "depleted"}, {"stale", "outdated"},     {"rejected", "refused"}};
  return pairs;
}

const std::string* synonym_of(const std::string& token) {
  for (const auto& [a, b] : synonym_pairs()) {
    if (token == a) return &b;
    if (token == b) return &a;
  }
  return nullptr;
}

std::string format_index(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

}  // namespace

void WorldConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must be in [0, 1]");
  };
  if (services < 1 || workloads < 1) throw std::invalid_argument("services and workloads must be >= 1");
  if (services < workloads) throw std::invalid_argument("services must be >= workloads");
  prob(cascade_prob, "cascade_prob");
  prob(duplicate_prob, "duplicate_prob");
  prob(related_prob, "related_prob");
  prob(cross_token_leakage, "cross_token_leakage");
  if (!(cascade_decay > 0.0 && cascade_decay <= 1.0)) throw std::invalid_argument("cascade_decay must be in (0, 1]");
  if (!(root_rate >= 0.0)) throw std::invalid_argument("root_rate must be >= 0");
  if (!(duration_hours > 0.0)) throw std::invalid_argument("duration_hours must be > 0");
  if (!(same_workload_affinity > 0.0)) throw std::invalid_argument("same_workload_affinity must be > 0");
  if (start_time <= 0) throw std::invalid_argument("start_time must be > 0");
  if (title_length < 4 || service_tokens < 4 || workload_tokens < 2) {
    throw std::invalid_argument("title_length, service_tokens and workload_tokens are too small");
  }
  if (monitors_per_service < 1) throw std::invalid_argument("monitors_per_service must be >= 1");
}

json to_json(const WorldConfig& c) {
  return json{{"services", c.services},
              {"workloads", c.workloads},
              {"attachment", c.attachment},
              {"same_workload_affinity", c.same_workload_affinity},
              {"root_rate", c.root_rate},
              {"cascade_prob", c.cascade_prob},
              {"cascade_decay", c.cascade_decay},
              {"max_cascade_hops", c.max_cascade_hops},
              {"duplicate_prob", c.duplicate_prob},
              {"related_prob", c.related_prob},
              {"cross_token_leakage", c.cross_token_leakage},
              {"duration_hours", c.duration_hours},
              {"start_time", c.start_time},
              {"service_tokens", c.service_tokens},
              {"workload_tokens", c.workload_tokens},
              {"title_length", c.title_length},
              {"monitors_per_service", c.monitors_per_service},
              {"seed", c.seed}};
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig c;
  c.services = j.value("services", c.services);
  c.workloads = j.value("workloads", c.workloads);
  c.attachment = j.value("attachment", c.attachment);
  c.same_workload_affinity = j.value("same_workload_affinity", c.same_workload_affinity);
  c.root_rate = j.value("root_rate", c.root_rate);
  c.cascade_prob = j.value("cascade_prob", c.cascade_prob);
  c.cascade_decay = j.value("cascade_decay", c.cascade_decay);
  c.max_cascade_hops = j.value("max_cascade_hops", c.max_cascade_hops);
  c.duplicate_prob = j.value("duplicate_prob", c.duplicate_prob);
  c.related_prob = j.value("related_prob", c.related_prob);
  c.cross_token_leakage = j.value("cross_token_leakage", c.cross_token_leakage);
  c.duration_hours = j.value("duration_hours", c.duration_hours);
  c.start_time = j.value("start_time", c.start_time);
  c.service_tokens = j.value("service_tokens", c.service_tokens);
  c.workload_tokens = j.value("workload_tokens", c.workload_tokens);
  c.title_length = j.value("title_length", c.title_length);
  c.monitors_per_service = j.value("monitors_per_service", c.monitors_per_service);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

World generate_world(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;
  Rng rng(derive_seed(config.seed, 1));
  const std::size_t n = config.services;
  for (std::size_t i = 0; i < n; ++i) w.services.push_back(format_index("svc", i, 3));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::size_t> workload(n);
  for (std::size_t k = 0; k < n; ++k) workload[order[k]] = k % config.workloads;
  for (std::size_t i = 0; i < n; ++i) w.workload_of[w.services[i]] = format_index("wl", workload[i], 1);

  // Preferential attachment: service i depends on up to `attachment` earlier
  // services, chosen with weight (degree + 1), boosted within a workload.
  std::vector<double> degree(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    std::set<std::size_t> chosen;
    const std::size_t m = std::min(config.attachment, i);
    while (chosen.size() < m) {
      double total = 0.0;
      std::vector<double> weight(i, 0.0);
      for (std::size_t j = 0; j < i; ++j) {
        if (chosen.contains(j)) continue;
        weight[j] = (degree[j] + 1.0) * (workload[j] == workload[i] ? config.same_workload_affinity : 1.0);
        total += weight[j];
      }
      double u = rng.uniform() * total;
      std::size_t pickj = i - 1;
      for (std::size_t j = 0; j < i; ++j) {
        if (weight[j] == 0.0) continue;
        if (u < weight[j]) {
          pickj = j;
          break;
        }
        u -= weight[j];
      }
      if (chosen.contains(pickj)) {
        for (std::size_t j = 0; j < i; ++j)
          if (!chosen.contains(j)) pickj = j;
      }
      chosen.insert(pickj);
    }
    for (std::size_t j : chosen) {
      w.edges.emplace_back(w.services[j], w.services[i]);
      degree[j] += 1.0;
      degree[i] += 1.0;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto& vocab = w.service_vocab[w.services[i]];
    for (std::size_t k = 0; k < config.service_tokens; ++k) vocab.push_back(format_index(("t" + std::to_string(i) + "x").c_str(), k, 2));
    auto& mons = w.monitors[w.services[i]];
    for (std::size_t k = 0; k < config.monitors_per_service; ++k) mons.push_back(format_index(("mon" + std::to_string(i) + "m").c_str(), k, 1));
  }
  for (std::size_t b = 0; b < config.workloads; ++b) {
    const std::string wl = format_index("wl", b, 1);
    auto& vocab = w.workload_vocab[wl];
    for (std::size_t k = 0; k < config.workload_tokens; ++k) vocab.push_back(format_index(("w" + std::to_string(b) + "y").c_str(), k, 2));
  }
  for (const auto& [a, b] : synonym_pairs()) {
    w.generic_vocab.push_back(a);
    w.generic_vocab.push_back(b);
  }
  w.failure_types = {"cpu", "memory", "disk", "network", "dependency", "deployment", "certificate", "quota"};
  w.regions = {"eastus", "westus", "northeu", "westeu", "southasia", "eastasia"};
  return w;
}

std::string paraphrase(const std::string& title, std::uint64_t seed) {
  Rng rng(seed);
  const auto tokens = text::tokenize(title);
  std::vector<std::string> out;
  for (const auto& t : tokens) {
    if (rng.bernoulli(0.2)) continue;
    const std::string* syn = synonym_of(t);
    out.push_back(syn && rng.bernoulli(0.5) ? *syn : t);
  }
  for (std::size_t k = 0; out.size() < std::min<std::size_t>(3, tokens.size()); ++k) out.push_back(tokens[k]);
  return join(out);
}

namespace {

struct Spec {
  std::size_t service;
  Timestamp time;
  std::string title;
  std::string topology;
  std::string monitor;
  std::string failure;
  int severity;
};

struct PendingLink {
  std::size_t parent;
  std::size_t child;
  LinkType type;
  Timestamp created_at;
};

class Simulator {
 public:
  explicit Simulator(const World& w) : w_(w), rng_(derive_seed(w.config.seed, 2)) {
    for (std::size_t i = 0; i < w.services.size(); ++i) index_[w.services[i]] = i;
    downstream_.resize(w.services.size());
    for (const auto& [src, dst] : w.edges) downstream_[index_.at(src)].push_back(index_.at(dst));
  }

  Simulation run() {
    const auto& c = w_.config;
    const double horizon = c.duration_hours * 3600.0;
    std::vector<std::pair<Timestamp, std::size_t>> roots;
    for (std::size_t s = 0; s < w_.services.size(); ++s) {
      if (c.root_rate <= 0.0) break;
      double t = 0.0;
      while (true) {
        t += rng_.exponential(c.root_rate / 3600.0);
        if (t >= horizon) break;
        roots.emplace_back(c.start_time + static_cast<Timestamp>(t), s);
      }
    }
    std::sort(roots.begin(), roots.end());
    for (const auto& [t, s] : roots) {
      const std::size_t root = add(make_spec(s, t, nullptr));
      cascade(root);
    }
    return finish();
  }

 private:
  std::vector<std::string> title_tokens(std::size_t s, const std::set<std::string>& banned) {
    const auto& c = w_.config;
    const auto& sv = w_.service_vocab.at(w_.services[s]);
    const auto& wv = w_.workload_vocab.at(w_.workload_of.at(w_.services[s]));
    std::vector<std::string> out;
    std::set<std::string> used = banned;
    auto draw_from = [&](const std::vector<std::string>& pool) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const auto& t = pick(pool, rng_);
        if (used.insert(t).second) {
          out.push_back(t);
          return;
        }
      }
    };
    const std::size_t generic = 2;
    const std::size_t shared = 1;
    const std::size_t own = c.title_length - generic - shared;
    for (std::size_t k = 0; k < own; ++k) draw_from(sv);
    draw_from(wv);
    for (std::size_t k = 0; k < generic; ++k) draw_from(w_.generic_vocab);
    rng_.shuffle(out.begin(), out.end());
    return out;
  }

  Spec make_spec(std::size_t s, Timestamp t, const Spec* parent) {
    Spec spec;
    spec.service = s;
    spec.time = t;
    std::vector<std::string> tokens;
    if (parent) {
      const auto ptoks = text::tokenize(parent->title);
      const std::set<std::string> banned(ptoks.begin(), ptoks.end());
      tokens = title_tokens(s, banned);
      for (auto& tok : tokens)
        if (w_.config.cross_token_leakage > 0.0 && rng_.bernoulli(w_.config.cross_token_leakage)) tok = pick(ptoks, rng_);
    } else {
      tokens = title_tokens(s, {});
    }
    spec.title = join(tokens);
    spec.topology = pick(w_.regions, rng_) + " " + w_.services[s] + "c" + std::to_string(rng_.below(4)) + " ring" +
                    std::to_string(rng_.below(3));
    spec.monitor = pick(w_.monitors.at(w_.services[s]), rng_);
    spec.failure = pick(w_.failure_types, rng_);
    const double u = rng_.uniform();
    spec.severity = u < 0.1 ? 1 : (u < 0.4 ? 2 : 3);
    return spec;
  }

  std::size_t add(Spec spec) {
    specs_.push_back(std::move(spec));
    const std::size_t id = specs_.size() - 1;
    follow_ups(id);
    return id;
  }

  void link(std::size_t parent, std::size_t child, LinkType type) {
    const Timestamp lag = 300 + static_cast<Timestamp>(rng_.below(3300));
    links_.push_back({parent, child, type, specs_[child].time + lag});
  }

  void follow_ups(std::size_t id) {
    const auto& c = w_.config;
    if (rng_.bernoulli(c.duplicate_prob)) {
      Spec dup = specs_[id];
      dup.time += 60 + static_cast<Timestamp>(rng_.below(3540));
      dup.title = paraphrase(specs_[id].title, rng_.next());
      specs_.push_back(std::move(dup));
      link(id, specs_.size() - 1, LinkType::Duplicate);
    }
    if (rng_.bernoulli(c.related_prob)) {
      const Spec& base = specs_[id];
      Spec rel = make_spec(base.service, base.time + 600 + static_cast<Timestamp>(rng_.below(6600)), nullptr);
      auto btoks = text::tokenize(base.title);
      auto rtoks = text::tokenize(rel.title);
      for (std::size_t k = 0; k < rtoks.size() / 2 && k < btoks.size(); ++k) rtoks[k] = btoks[k];
      rel.title = join(rtoks);
      specs_.push_back(std::move(rel));
      link(id, specs_.size() - 1, LinkType::Related);
    }
  }

  void cascade(std::size_t root) {
    const auto& c = w_.config;
    if (c.cascade_prob <= 0.0) return;
    std::set<std::size_t> affected{specs_[root].service};
    std::deque<std::pair<std::size_t, int>> queue{{root, 0}};
    while (!queue.empty()) {
      const auto [parent, hop] = queue.front();
      queue.pop_front();
      if (hop >= c.max_cascade_hops) continue;
      const double p = c.cascade_prob * std::pow(c.cascade_decay, hop);
      for (std::size_t next : downstream_[specs_[parent].service]) {
        if (affected.contains(next) || !rng_.bernoulli(p)) continue;
        affected.insert(next);
        const Timestamp t = specs_[parent].time + 60 + static_cast<Timestamp>(rng_.below(1741));
        const Spec parent_copy = specs_[parent];
        const std::size_t child = add(make_spec(next, t, &parent_copy));
        link(parent, child, LinkType::Responsible);
        queue.emplace_back(child, hop + 1);
      }
    }
  }

  Simulation finish() {
    std::vector<std::size_t> order(specs_.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return specs_[a].time < specs_[b].time; });
    std::vector<IncidentId> ids(specs_.size());
    Simulation sim;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Spec& s = specs_[order[k]];
      ids[order[k]] = format_index("inc", k, 6);
      Incident inc{ids[order[k]], s.title, s.topology, s.monitor, s.failure,
                   w_.services[s.service], w_.workload_of.at(w_.services[s.service]), s.severity, s.time};
      sim.incidents.emplace(inc.id, std::move(inc));
    }
    std::stable_sort(links_.begin(), links_.end(),
                     [](const PendingLink& a, const PendingLink& b) { return a.created_at < b.created_at; });
    for (const auto& l : links_) sim.links.push_back({ids[l.parent], ids[l.child], l.type, l.created_at});
    return sim;
  }

  const World& w_;
  Rng rng_;
  std::map<ServiceId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> downstream_;
  std::vector<Spec> specs_;
  std::vector<PendingLink> links_;
};

}  // namespace

Simulation simulate_incidents(const World& world) { return Simulator(world).run(); }

void export_world(const World& world, const Simulation& sim, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json services = json::array();
  for (const auto& s : world.services) services.push_back({{"id", s}, {"workload", world.workload_of.at(s)}});
  const json meta{{"config", to_json(world.config)},
                  {"services", services},
                  {"incident_count", sim.incidents.size()},
                  {"link_count", sim.links.size()}};
  {
    std::ofstream os(dir / "world.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "world.json").string());
    os << meta.dump(2) << '\n';
  }
  std::vector<Incident> incidents;
  incidents.reserve(sim.incidents.size());
  for (const auto& [_, inc] : sim.incidents) incidents.push_back(inc);
  std::stable_sort(incidents.begin(), incidents.end(),
                   [](const Incident& a, const Incident& b) { return a.created_at < b.created_at; });
  write_incident_file(dir / "incidents.jsonl", incidents);
  write_link_file(dir / "links.jsonl", sim.links);
  graph::write_metadata_edges(dir / "metadata_edges.tsv", world.edges);
}

}  // namespace dilink::synthetic
