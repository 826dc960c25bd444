#include "fscil/protocol.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "fscil/base_trainer.hpp"
#include "fscil/errors.hpp"

namespace fscil {

using nlohmann::json;

namespace {

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t stats_hash(const SessionStats& s) { return fnv1a(stats_to_json(s).dump()); }

[[noreturn]] void rethrow_in_session(std::size_t k) {
  const std::string p = "session " + std::to_string(k) + ": ";
  try {
    throw;
  } catch (const ContractViolation& e) {
    throw ContractViolation(p + e.what());
  } catch (const UsageError& e) {
    throw UsageError(p + e.what());
  } catch (const NumericError& e) {
    throw NumericError(p + e.what());
  } catch (const FormatError& e) {
    throw FormatError(p + e.what(), e.offset());
  } catch (const DomainError& e) {
    throw DomainError(p + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(p + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(p + e.what());
  }
}

Metric resolve_metric(Metric m, const std::vector<SessionSpec>& specs) {
  if (m != Metric::automatic) return m;
  for (const auto& s : specs) {
    if (s.index > 0 && s.shots == 1) return Metric::euclidean;
  }
  return Metric::mahalanobis;
}

/// Raw statistics, optional pseudo-label enrichment, optional rectification.
SessionStats session_statistics(EncoderState& encoder, const Dataset& data, const Dataset& test,
                                const SessionSpec& spec, const TaskRouter& router, Metric metric,
                                const RunConfig& cfg, SeededRng& rng, SessionArtifacts& art) {
  const std::size_t k = spec.index;
  const Tensor labeled = embed(encoder, data.features);
  std::vector<double> rows(labeled.storage());
  std::vector<std::size_t> labels = data.labels;
  std::vector<bool> is_pseudo(labels.size(), false);
  SessionStats raw = fit_class_stats(labeled, labels, k);

  if (cfg.rectification.pseudo_label && !spec.test.empty()) {
    const Dataset pool_data = test.subset(spec.test);
    const Tensor pool = embed(encoder, pool_data.features);
    TaskRouter candidate = router;
    candidate.add_session(raw);
    const PseudoLabels pl = pseudo_label(pool, candidate, metric);
    const std::set<std::size_t> mine(spec.classes.begin(), spec.classes.end());
    for (std::size_t i = 0; i < pl.index.size(); ++i) {
      if (!mine.count(pl.cls[i])) continue;
      auto r = pool.row(pl.index[i]);
      rows.insert(rows.end(), r.begin(), r.end());
      labels.push_back(pl.cls[i]);
      is_pseudo.push_back(true);
      ++art.pseudo_labeled;
    }
  }
  const Tensor all(Shape{labels.size(), labeled.cols()}, std::move(rows));
  if (art.pseudo_labeled > 0) raw = fit_class_stats(all, labels, k);

  if (!(cfg.components.prediction_net && cfg.rectification.enabled)) return raw;

  const std::size_t lambda = k == 0 ? cfg.rectification.base_outliers : cfg.rectification.incremental_outliers;
  const bool use_pseudo = k > 0 && cfg.rectification.pseudo_pairs;
  std::vector<OutlierPairs> parts;
  for (const auto& g : raw.classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == g.cls && (!is_pseudo[i] || use_pseudo)) members.push_back(i);
    }
    if (members.empty()) continue;
    OutlierPairs p = select_outlier_pairs(gather_rows(all, members), g.mean, lambda, true);
    for (auto& s : p.source) s = members[s];
    parts.push_back(std::move(p));
  }
  const OutlierPairs pairs = merge_pairs(parts);
  SeededRng net_rng = rng.split(71);
  PredictionNet net = PredictionNet::create(all.cols(), cfg.rectification.linear, net_rng, k);
  train_prediction_net(net, pairs, cfg.rectification, net_rng);
  SessionStats refined = refine_gaussian_stats(net, all, labels, raw);
  art.net = std::move(net);
  return refined;
}

Tensor means_matrix(const SessionStats& stats) {
  const std::size_t d = stats.scatter.rows();
  Tensor m(Shape{stats.classes.size(), d});
  for (std::size_t i = 0; i < stats.classes.size(); ++i) {
    std::copy(stats.classes[i].mean.begin(), stats.classes[i].mean.end(), m.row(i).begin());
  }
  return m;
}

}  // namespace

DataBundle prepare_data(const RunConfig& cfg, std::uint64_t seed) {
  DataBundle b;
  if (cfg.data.kind == "blobs") {
    BlobSpec spec = cfg.data.blobs;
    spec.seed += seed;
    Blobs blobs = generate_blobs(spec);
    b.train = std::move(blobs.train);
    b.test = std::move(blobs.test);
    b.bayes_accuracy = blobs.bayes_accuracy;
  } else {
    b.train = load_idx_images(cfg.data.train_images, cfg.data.train_labels);
    b.test = load_idx_images(cfg.data.test_images, cfg.data.test_labels);
    const std::size_t classes = std::max(b.train.classes, b.test.classes);
    b.train.classes = b.test.classes = classes;
  }
  DatasetMeta meta{b.train.classes, b.train.labels, b.test.labels};
  b.specs = build_fscil_splits(meta, cfg.data.base_classes, cfg.data.ways, cfg.data.shots, seed, cfg.data.sessions);
  return b;
}

RunRecord run_protocol(const Dataset& train, const Dataset& test, const std::vector<SessionSpec>& specs,
                       const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (specs.empty()) throw ArgumentError("no sessions to run");
  RunRecord rec;
  rec.config = cfg;
  rec.config.seed = seed;
  rec.seed = seed;
  rec.started = now_iso();

  SeededRng root(seed, 0xF5C1);
  SessionDataStream stream(train, specs);
  const Metric metric = resolve_metric(cfg.routing.metric, specs);
  const bool stochastic = cfg.components.stochastic_head && cfg.head.stochastic;
  const bool delta = cfg.components.delta_params;
  const std::size_t d = cfg.backbone.embed_dim;

  EncoderState encoder;
  std::optional<StochasticHead> head;
  TaskRouter router(d, cfg.routing.regularization);
  std::vector<PrefixSet> prefixes;
  std::set<std::size_t> seen;

  for (std::size_t k = 0; k < specs.size(); ++k) {
    const SessionSpec& spec = specs[k];
    try {
      for (std::size_t c : spec.classes) {
        if (!seen.insert(c).second) throw ContractViolation("class " + std::to_string(c) + " already seen");
      }
      SessionView view = stream.acquire(k);
      const Dataset& data = view.data();
      SeededRng rng = root.split(1000 + k);
      SessionArtifacts art;
      art.session = k;
      art.classes = spec.classes;

      if (k == 0) {
        SeededRng base_rng = rng.split(1);
        BaseTrainResult base = train_base(data, cfg, base_rng, &rec.events);
        encoder = std::move(base.encoder);
        head.emplace(std::move(base.head));
        encoder.set_trainable(false);
        encoder.mode = Mode::eval;
      }
      const std::size_t epochs = k == 0 ? cfg.session.base_epochs : cfg.session.incremental_epochs;
      SeededRng train_rng = rng.split(2), stats_rng = rng.split(3);

      if (delta) {
        art.stats = session_statistics(encoder, data, test, spec, router, metric, cfg, stats_rng, art);
        if (k > 0) head->init_means_from_prototypes(means_matrix(art.stats));
        SeededRng prefix_rng = rng.split(4);
        art.prefixes = PrefixSet::create(encoder.blocks.size(), cfg.session.prefix_length, d,
                                         cfg.session.prefix_init, prefix_rng);
        const auto report = train_session(data, encoder, *head, k, art.prefixes, cfg.session, epochs,
                                          stochastic, train_rng, k, &rec.events);
        art.trainable = report.trainable;
        art.total = report.total;
      } else {
        if (k > 0) {
          const Tensor feats = embed(encoder, data.features);
          head->init_means_from_prototypes(class_prototypes(feats, data.labels, spec.classes.front(),
                                                            spec.classes.size()));
          SessionConfig tune = cfg.session;
          tune.lr = cfg.supervised.lr;  // backbone rate from supervised base training
          const auto report = finetune_session(data, encoder, *head, k, tune, epochs, stochastic, train_rng, k,
                                               &rec.events);
          art.trainable = report.trainable;
          art.total = report.total;
        }
        art.prefixes = PrefixSet::create(encoder.blocks.size(), 0, d, 0.0, train_rng);
        art.stats = session_statistics(encoder, data, test, spec, router, metric, cfg, stats_rng, art);
      }
      router.add_session(art.stats);
      prefixes.push_back(art.prefixes);

      // Evaluation on the cumulative pool.
      const Dataset pool = test.subset(spec.test);
      SessionPredictions sp;
      sp.labels = pool.labels;
      sp.predictions.assign(pool.size(), 0);
      if (pool.size() > 0) {
        const Tensor h = embed(encoder, pool.features);
        const auto routed = router.select_all(h, metric);
        std::map<std::size_t, std::vector<std::size_t>> by_session;
        for (std::size_t i = 0; i < routed.size(); ++i) by_session[routed[i].session].push_back(i);
        SeededRng eval_noise = rng.split(5);
        SeededRng* noise = cfg.head.eval_noise && stochastic ? &eval_noise : nullptr;
        for (const auto& [s, rows] : by_session) {
          const Tensor z = delta ? embed(encoder, gather_rows(pool.features, rows), &prefixes[s].layers)
                                 : gather_rows(h, rows);
          const BlockRange range = cfg.eval.scope == EvalScope::session ? BlockRange{s, s + 1} : head->all();
          for (std::size_t r = 0; r < rows.size(); ++r) {
            sp.predictions[rows[r]] = head->predict_label(z.row(r), range, noise);
          }
        }
        record(&rec.events, "eval", k, 0, "accuracy", accuracy(sp.labels, sp.predictions));
      }
      rec.predictions.push_back(std::move(sp));
      rec.session_classes.push_back(spec.classes);
      rec.sessions.push_back(std::move(art));
    } catch (...) {
      rethrow_in_session(k);
    }
  }
  rec.metrics = compute_metrics(rec.predictions, rec.session_classes);
  rec.checkpoint = encoder_tensors(encoder);
  for (auto& [name, t] : head_tensors(*head)) rec.checkpoint.emplace(name, t);
  rec.model_hash = encoder.hash() ^ (head->hash() * 1099511628211ULL);
  rec.finished = now_iso();
  return rec;
}

RunRecord run_config(const RunConfig& cfg, std::uint64_t seed) {
  const DataBundle data = prepare_data(cfg, seed);
  return run_protocol(data.train, data.test, data.specs, cfg, seed);
}

json RunRecord::to_json() const {
  json preds = json::array();
  for (const auto& p : predictions) preds.push_back({{"labels", p.labels}, {"predictions", p.predictions}});
  json sessions_j = json::array();
  for (const auto& s : sessions) {
    sessions_j.push_back({{"session", s.session},
                          {"classes", s.classes},
                          {"prefix_hash", hex(s.prefixes.hash())},
                          {"stats_hash", hex(stats_hash(s.stats))},
                          {"prediction_net_hash", s.net ? hex(s.net->hash()) : std::string()},
                          {"pseudo_labeled", s.pseudo_labeled},
                          {"trainable_parameters", s.trainable},
                          {"total_parameters", s.total}});
  }
  json ev = json::array();
  for (const auto& e : events) ev.push_back({e.phase, e.session, e.epoch, e.key, e.value});
  return {{"config", fscil::to_json(config)},
          {"seed", seed},
          {"session_classes", session_classes},
          {"predictions", preds},
          {"metrics", fscil::to_json(metrics)},
          {"sessions", sessions_j},
          {"events", ev},
          {"model_hash", hex(model_hash)}};
}

std::uint64_t RunRecord::hash() const { return fnv1a(to_json().dump()); }

void write_run(const RunRecord& record, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(record.config));
  json m = {{"seed", record.seed},
            {"metrics", to_json(record.metrics)},
            {"record_hash", hex(record.hash())},
            {"model_hash", hex(record.model_hash)},
            {"started", record.started},
            {"finished", record.finished}};
  write_json(dir / "metrics.json", m);
  {
    std::ofstream ev(dir / "events.jsonl");
    if (!ev) throw ArgumentError("cannot write events log in " + dir.string());
    for (const auto& e : record.events) {
      ev << json{{"phase", e.phase}, {"session", e.session}, {"epoch", e.epoch}, {"key", e.key}, {"value", e.value}}
                .dump()
         << '\n';
    }
  }
  json preds = json::array();
  for (const auto& p : record.predictions) preds.push_back({{"labels", p.labels}, {"predictions", p.predictions}});
  write_json(dir / "predictions.json", {{"session_classes", record.session_classes}, {"sessions", preds}});
  write_json(dir / "checkpoint.json", tensors_to_json(record.checkpoint));
  for (const auto& s : record.sessions) {
    const fs::path sd = dir / ("session_" + std::to_string(s.session));
    fs::create_directories(sd);
    write_json(sd / "prefixes.json", tensors_to_json(prefix_tensors(s.prefixes)));
    write_json(sd / "stats.json", stats_to_json(s.stats));
    if (s.net) write_json(sd / "prediction_net.json", tensors_to_json(prediction_net_tensors(*s.net)));
  }
}

Metrics read_run_metrics(const std::filesystem::path& dir) {
  const json p = read_json(dir / "predictions.json");
  std::vector<SessionPredictions> evals;
  for (const auto& s : p.at("sessions")) {
    evals.push_back({s.at("labels").get<std::vector<std::size_t>>(),
                     s.at("predictions").get<std::vector<std::size_t>>()});
  }
  return compute_metrics(evals, p.at("session_classes").get<std::vector<std::vector<std::size_t>>>());
}

RunConfig without(const RunConfig& cfg, const std::string& toggle) {
  RunConfig c = cfg;
  if (toggle == "ssl") {
    c.components.ssl = false;
  } else if (toggle == "prediction_net") {
    c.components.prediction_net = false;
  } else if (toggle == "stochastic_head") {
    c.components.stochastic_head = false;
  } else if (toggle == "delta_params") {
    c.components.delta_params = false;
  } else {
    throw ArgumentError("unknown ablation toggle '" + toggle +
                        "' (expected ssl, prediction_net, stochastic_head or delta_params)");
  }
  return c;
}

std::string AblationReport::table() const {
  std::ostringstream s;
  s << std::left << std::setw(18) << "variant" << std::right << std::setw(10) << "avg acc" << std::setw(12)
    << "forgetting" << std::setw(10) << "macro F1" << std::setw(11) << "final acc" << '\n';
  s << std::fixed;
  for (const auto& r : rows) {
    s << std::left << std::setw(18) << r.name << std::right << std::setprecision(2) << std::setw(10)
      << r.metrics.average_accuracy << std::setw(12) << r.metrics.forgetting << std::setprecision(4)
      << std::setw(10) << r.metrics.macro_f1 << std::setprecision(2) << std::setw(11)
      << r.metrics.session_accuracy.back() << '\n';
  }
  return s.str();
}

AblationReport run_ablation(const RunConfig& cfg, const std::vector<std::string>& toggles, std::uint64_t seed) {
  std::vector<RunConfig> variants;
  for (const auto& t : toggles) variants.push_back(without(cfg, t));
  AblationReport rep;
  const RunRecord full = run_config(cfg, seed);
  rep.rows.push_back({"full", full.metrics, full.hash()});
  for (std::size_t i = 0; i < toggles.size(); ++i) {
    const RunRecord r = run_config(variants[i], seed);
    rep.rows.push_back({"w/o " + toggles[i], r.metrics, r.hash()});
  }
  return rep;
}

SeedSummary run_seeds(const RunConfig& cfg, std::size_t seeds, std::uint64_t first_seed) {
  SeedSummary out;
  std::vector<double> acc, fgt, f1, fin;
  for (std::size_t i = 0; i < seeds; ++i) {
    out.runs.push_back(run_config(cfg, first_seed + i));
    const auto& m = out.runs.back().metrics;
    acc.push_back(m.average_accuracy);
    fgt.push_back(m.forgetting);
    f1.push_back(m.macro_f1);
    fin.push_back(m.session_accuracy.back());
  }
  out.average_accuracy = summarize(acc);
  out.forgetting = summarize(fgt);
  out.macro_f1 = summarize(f1);
  out.final_accuracy = summarize(fin);
  return out;
}

}  // namespace fscil
