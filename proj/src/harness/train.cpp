#include "cki/train.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <thread>

#include "cki/rng.hpp"
#include "cki/schedules.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cki {

WindowBatch subset(const WindowBatch& all, const std::vector<int64_t>& idx) {
  const int64_t w = all.x.dim(1), C = all.x.dim(3);
  WindowBatch b;
  b.domain = all.domain;
  b.x = Tensor({static_cast<int64_t>(idx.size()), w, w, C});
  const int64_t stride = w * w * C;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(all.x.data() + idx[i] * stride, stride,
                b.x.data() + static_cast<int64_t>(i) * stride);
    b.labels.push_back(all.labels[static_cast<std::size_t>(idx[i])]);
    b.pixel_coords.push_back(all.pixel_coords[static_cast<std::size_t>(idx[i])]);
  }
  return b;
}

namespace {

struct Problem {
  SceneCube source;
  SceneCube target;
  SplitManifest target_split;
  std::vector<std::pair<int64_t, int64_t>> source_train;
  std::set<int> shared_source_classes;  // known only for synthetic pairs
  bool synthetic = false;
};

Problem load_problem(const RunConfig& cfg) {
  Problem p;
  if (cfg.synth.has_value()) {
    SynthResult sr = synth_cross_scene(*cfg.synth);
    p.source = std::move(sr.source);
    p.target = std::move(sr.target);
    p.synthetic = true;
    for (const auto& [s, t] : sr.shared_class_map) p.shared_source_classes.insert(s);
    if (cfg.normalize) {
      normalize_bands(p.source);
      normalize_bands(p.target);
    }
  } else {
    LoadOptions opts;
    opts.normalize = cfg.normalize;
    p.source = load_scene(cfg.source_scene, opts);
    p.target = load_scene(cfg.target_scene, opts);
  }

  if (!cfg.target_manifest.empty()) {
    p.target_split = load_manifest(cfg.target_manifest);
  } else {
    p.target_split = make_split(p.target, cfg.shots_per_class, cfg.seed);
  }

  if (!cfg.source_manifest.empty()) {
    p.source_train = load_manifest(cfg.source_manifest).all_train();
  } else {
    // the full labeled source scene serves as training data
    for (int64_t r = 0; r < p.source.height; ++r)
      for (int64_t c = 0; c < p.source.width; ++c)
        if (p.source.label_at(r, c) > 0) p.source_train.emplace_back(r, c);
  }
  return p;
}

void write_losses_header(std::ofstream& out) {
  out << "epoch,lr,lambda";
  for (const auto& f : LossReport::field_names()) out << "," << f;
  out << "\n";
}

void append_losses(std::ofstream& out, const EpochLog& e) {
  out << e.epoch << "," << e.lr << "," << e.lambda;
  for (double v : e.mean_losses.field_values()) out << "," << v;
  out << "\n";
}

/// Cycling index stream with per-pass reshuffling.
class IndexStream {
 public:
  IndexStream(int64_t n, Rng rng) : rng_(rng), order_(static_cast<std::size_t>(n)) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }
  std::vector<int64_t> take(int64_t count) {
    std::vector<int64_t> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }
  void reshuffle() {
    rng_.shuffle(order_);
    pos_ = 0;
  }

 private:
  Rng rng_;
  std::vector<int64_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace

EvalReport evaluate_model(CkiModel& model, const SceneCube& scene,
                          const std::vector<std::pair<int64_t, int64_t>>& coords,
                          EvalPath path, int64_t window, int64_t eval_batch) {
  std::vector<int> y_true, y_pred;
  y_true.reserve(coords.size());
  y_pred.reserve(coords.size());
  for (std::size_t start = 0; start < coords.size();
       start += static_cast<std::size_t>(eval_batch)) {
    const std::size_t stop = std::min(coords.size(), start + static_cast<std::size_t>(eval_batch));
    std::vector<std::pair<int64_t, int64_t>> chunk(coords.begin() + static_cast<long>(start),
                                                   coords.begin() + static_cast<long>(stop));
    WindowBatch wb = extract_windows(scene, chunk, static_cast<int>(window), Domain::target);
    const std::vector<int> pred = predict(model, wb, path);
    y_pred.insert(y_pred.end(), pred.begin(), pred.end());
    y_true.insert(y_true.end(), wb.labels.begin(), wb.labels.end());
  }
  return compute_metrics(confusion_matrix(y_true, y_pred, scene.num_classes()), scene.num_classes());
}

RunRecord train(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  Problem prob = load_problem(cfg);

  ModelConfig mc;
  mc.window = cfg.window;
  mc.common_channels = cfg.common_channels;
  mc.source_bands = prob.source.bands;
  mc.target_bands = prob.target.bands;
  mc.num_source_classes = prob.source.num_classes();
  mc.num_target_classes = prob.target.num_classes();
  mc.patch = cfg.patch;
  mc.init_seed = cfg.seed;
  CkiModel model(mc);

  LossWeights weights = cfg.loss_weights;
  const AblationFlags flags = cfg.flags;
  const bool target_only = cfg.mode == RunMode::target_only;
  const EvalPath eval_path =
      (!target_only && flags.di) ? EvalPath::student : EvalPath::shared;

  // pre-extract all training windows once; batches gather rows per step
  WindowBatch src_all = extract_windows(prob.source, prob.source_train,
                                        static_cast<int>(cfg.window), Domain::source);
  WindowBatch tgt_all = extract_windows(prob.target, prob.target_split.all_train(),
                                        static_cast<int>(cfg.window), Domain::target);

  AdamW opt(model.params.all());
  Rng run_rng(cfg.seed ^ 0x5eedbea7ULL);
  IndexStream src_stream(src_all.size(), run_rng.fork(1));
  IndexStream tgt_stream(tgt_all.size(), run_rng.fork(2));

  int64_t steps_per_epoch = cfg.steps_per_epoch;
  if (steps_per_epoch <= 0) {
    const int64_t base = target_only ? tgt_all.size() : src_all.size();
    steps_per_epoch = (base + cfg.batch_size - 1) / cfg.batch_size;
  }

  RunRecord rec;
  rec.config = cfg;
  rec.eval_path = eval_path;

  const bool emit = !cfg.output_dir.empty();
  std::ofstream losses_csv, eval_csv;
  if (emit) {
    fs::create_directories(cfg.output_dir);
    std::ofstream lock(fs::path(cfg.output_dir) / "run.lock");
    lock << run_config_to_json(cfg) << "\n";
    losses_csv.open(fs::path(cfg.output_dir) / "losses.csv");
    write_losses_header(losses_csv);
    eval_csv.open(fs::path(cfg.output_dir) / "eval.csv");
    eval_csv << "epoch,oa,aa,kappa\n";
  }

  double best_oa = -1.0;
  const int n_fields = static_cast<int>(LossReport::field_names().size());

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lam = lambda_schedule(epoch, cfg.warmup_epochs);
    const double lr = lr_schedule(cfg.lr, epoch, cfg.epochs, cfg.lr_step_gamma);
    weights.lambda_adv = lam;

    std::vector<double> sums(static_cast<std::size_t>(n_fields), 0.0);
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      const int64_t tb = std::min<int64_t>(cfg.batch_size, tgt_all.size());
      WindowBatch tgt_batch = subset(tgt_all, tgt_stream.take(tb));
      model.params.zero_grads();

      LossReport report;
      if (target_only) {
        Graph g;
        Var f_t = model.encode(g, tgt_batch.x, model.F_t);
        Var logits = model.head(g, model.G->forward(g, f_t, tgt_batch.size()), model.T_t);
        Var loss = cross_entropy(g, logits, tgt_batch.labels);
        report.target_ce = loss.scalar();
        report.total = report.target_ce;
        report.finite = std::isfinite(report.total);
        if (report.finite) g.backward(loss);
      } else {
        const int64_t sb = std::min<int64_t>(cfg.batch_size, src_all.size());
        WindowBatch src_batch = subset(src_all, src_stream.take(sb));
        report = cki_step(model, src_batch, tgt_batch, weights, flags, true).report;
      }

      if (!report.finite) {
        if (emit) {
          std::ofstream ab(fs::path(cfg.output_dir) / "abort_report.json");
          json j;
          const auto names = LossReport::field_names();
          const auto vals = report.field_values();
          for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = vals[i];
          j["epoch"] = epoch;
          j["step"] = step;
          ab << j.dump(2) << "\n";
        }
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));
      }
      opt.step(model.params.all(), lr, cfg.weight_decay);

      const auto vals = report.field_values();
      for (int i = 0; i < n_fields; ++i) sums[static_cast<std::size_t>(i)] += vals[static_cast<std::size_t>(i)];
    }

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    el.lambda = lam;
    {
      const double inv = 1.0 / static_cast<double>(steps_per_epoch);
      LossReport& m = el.mean_losses;
      std::vector<double*> slots = {&m.adv_domain, &m.nonadv_domain, &m.source_ce,
                                    &m.target_ce,  &m.dcor,          &m.kl_shared,
                                    &m.kl_comp,    &m.comp_ce,       &m.student_ce,
                                    &m.total};
      for (int i = 0; i < n_fields; ++i) *slots[static_cast<std::size_t>(i)] =
          sums[static_cast<std::size_t>(i)] * inv;
    }

    EvalReport er = evaluate_model(model, prob.target, prob.target_split.test_coords,
                                   eval_path, cfg.window, cfg.eval_batch);
    el.eval_oa = er.oa;
    el.eval_aa = er.aa;
    el.eval_kappa = er.kappa;
    if (emit) {
      append_losses(losses_csv, el);
      eval_csv << epoch << "," << er.oa << "," << er.aa << "," << er.kappa << "\n";
      if (er.oa > best_oa) {
        best_oa = er.oa;
        save_checkpoint(model, weights, flags,
                        (fs::path(cfg.output_dir) / "checkpoint_best.bin").string());
      }
    }
    rec.epochs.push_back(el);
    if (epoch == cfg.epochs - 1) rec.final_eval = er;
  }

  if (prob.synthetic && !target_only) {
    rec.has_weight_stats = true;
    rec.weight_stats = source_weight_stats(model, src_all, prob.shared_source_classes);
  }

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (emit) {
    save_report(rec.final_eval, cfg.output_dir);
    rec.checkpoint_path = (fs::path(cfg.output_dir) / "checkpoint.bin").string();
    save_checkpoint(model, weights, flags, rec.checkpoint_path);
    if (rec.has_weight_stats) {
      json j;
      j["omega_pre_shared_mean"] = rec.weight_stats.omega_shared;
      j["omega_pre_private_mean"] = rec.weight_stats.omega_private;
      j["sim_shared_mean"] = rec.weight_stats.sim_shared;
      j["sim_private_mean"] = rec.weight_stats.sim_private;
      j["n_shared"] = rec.weight_stats.n_shared;
      j["n_private"] = rec.weight_stats.n_private;
      std::ofstream out(fs::path(cfg.output_dir) / "omega_stats.json");
      out << j.dump(2) << "\n";
    }
  }
  return rec;
}

EvalReport evaluate(const std::string& checkpoint_path, const std::string& scene_header,
                    const std::string& manifest_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  LoadOptions opts;  // normalization matches the training default
  SceneCube scene = load_scene(scene_header, opts);
  if (scene.num_classes() != ck.cfg.num_target_classes)
    throw DataError("evaluate: scene has " + std::to_string(scene.num_classes()) +
                    " classes but checkpoint expects " +
                    std::to_string(ck.cfg.num_target_classes));
  SplitManifest m = load_manifest(manifest_path);
  const EvalPath path = ck.flags.di ? EvalPath::student : EvalPath::shared;
  return evaluate_model(*ck.model, scene, m.test_coords, path, ck.cfg.window, 128);
}

namespace {

void run_parallel(std::vector<RunConfig>& cfgs, std::vector<RunRecord>& out, int workers) {
  out.resize(cfgs.size());
  if (workers <= 0)
    workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min<int>(workers, static_cast<int>(cfgs.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= cfgs.size()) return;
          out[i] = train(cfgs[i]);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<uint64_t>& seeds,
                                int workers) {
  base.validate();
  const std::vector<std::pair<std::string, AblationFlags>> rows = {
      {"none", AblationFlags::none()},
      {"ASC", {true, false, false, false}},
      {"ASC+CKSP", {true, true, false, false}},
      {"ASC+CKSP+CE", {true, true, true, false}},
      {"ASC+CKSP+CE+DI", AblationFlags::all()},
  };

  std::vector<RunConfig> cfgs;
  for (const auto& [label, flags] : rows) {
    for (uint64_t seed : seeds) {
      RunConfig c = base;
      c.flags = flags;
      c.seed = seed;
      if (!base.output_dir.empty())
        c.output_dir =
            (fs::path(base.output_dir) / (label + "_seed" + std::to_string(seed))).string();
      cfgs.push_back(std::move(c));
    }
  }
  std::vector<RunRecord> recs;
  run_parallel(cfgs, recs, workers);

  std::vector<AblationRow> table;
  std::size_t k = 0;
  for (const auto& [label, flags] : rows) {
    AblationRow row;
    row.label = label;
    row.flags = flags;
    std::vector<double> oas, aas, kappas;
    for (std::size_t s = 0; s < seeds.size(); ++s, ++k) {
      row.runs.push_back(std::move(recs[k]));
      oas.push_back(row.runs.back().final_eval.oa);
      aas.push_back(row.runs.back().final_eval.aa);
      kappas.push_back(row.runs.back().final_eval.kappa);
    }
    row.mean_oa = mean_of(oas);
    row.mean_aa = mean_of(aas);
    row.mean_kappa = mean_of(kappas);
    row.std_oa = std_of(oas);
    table.push_back(std::move(row));
  }

  if (!base.output_dir.empty()) {
    fs::create_directories(base.output_dir);
    std::ofstream out(fs::path(base.output_dir) / "ablation.csv");
    out << "components,mean_oa,mean_aa,mean_kappa,std_oa";
    for (std::size_t s = 0; s < seeds.size(); ++s) out << ",oa_seed" << seeds[s];
    out << "\n";
    for (const auto& row : table) {
      out << row.label << "," << row.mean_oa << "," << row.mean_aa << "," << row.mean_kappa
          << "," << row.std_oa;
      for (const auto& r : row.runs) out << "," << r.final_eval.oa;
      out << "\n";
    }
  }
  return table;
}

std::vector<TauRow> sweep_temperature(const RunConfig& base, const std::vector<double>& taus,
                                      const std::vector<uint64_t>& seeds, int workers) {
  base.validate();
  if (!base.flags.di)
    throw ConfigError("sweep_temperature: the distillation flag must be active");

  std::vector<RunConfig> cfgs;
  for (double tau : taus) {
    for (uint64_t seed : seeds) {
      RunConfig c = base;
      c.loss_weights.tau = tau;
      c.seed = seed;
      if (!base.output_dir.empty())
        c.output_dir = (fs::path(base.output_dir) /
                        ("tau" + std::to_string(tau) + "_seed" + std::to_string(seed)))
                           .string();
      cfgs.push_back(std::move(c));
    }
  }
  std::vector<RunRecord> recs;
  run_parallel(cfgs, recs, workers);

  std::vector<TauRow> table;
  std::size_t k = 0;
  for (double tau : taus) {
    TauRow row;
    row.tau = tau;
    for (std::size_t s = 0; s < seeds.size(); ++s, ++k)
      row.oas.push_back(recs[k].final_eval.oa);
    row.mean_oa = mean_of(row.oas);
    row.std_oa = std_of(row.oas);
    table.push_back(std::move(row));
  }

  if (!base.output_dir.empty()) {
    fs::create_directories(base.output_dir);
    std::ofstream out(fs::path(base.output_dir) / "tau_sweep.csv");
    out << "tau,mean_oa,std_oa";
    for (std::size_t s = 0; s < seeds.size(); ++s) out << ",oa_seed" << seeds[s];
    out << "\n";
    for (const auto& row : table) {
      out << row.tau << "," << row.mean_oa << "," << row.std_oa;
      for (double oa : row.oas) out << "," << oa;
      out << "\n";
    }
    json j = json::array();
    for (const auto& row : table)
      j.push_back({{"tau", row.tau}, {"mean_oa", row.mean_oa}, {"std_oa", row.std_oa},
                   {"oas", row.oas}});
    std::ofstream jout(fs::path(base.output_dir) / "tau_sweep.json");
    jout << j.dump(2) << "\n";
  }
  return table;
}

}  // namespace cki
