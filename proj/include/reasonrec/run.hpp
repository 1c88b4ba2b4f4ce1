#pragma once

// Run configuration and the subcommands behind the command-line tool.
//
// Run directory layout:
//   config.json        fully resolved configuration, written before any work
//   metrics.jsonl      one object per training step ("kind": "train") and per
//                      validation pass ("kind": "val"); no wall-clock fields
//   timing.jsonl       wall-clock seconds per step and per validation pass
//   data/              generated corpus (catalog.jsonl, train/val/test.jsonl)
//   checkpoints/       step_NNNNNN.ckpt and last.ckpt
//   reports/           eval_<split>.json, latency.json, plots/*.svg
//   trajectories/      line-delimited trajectory dumps
//   .lock              present while a process owns the directory

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reasonrec/checkpoint.hpp"
#include "reasonrec/common.hpp"
#include "reasonrec/corpus.hpp"
#include "reasonrec/eval.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/sampler.hpp"
#include "reasonrec/tokenizer.hpp"
#include "reasonrec/trainer.hpp"

namespace reasonrec {

namespace fs = std::filesystem;

struct RunConfig {
  std::string name = "run";
  std::string output_dir = "runs/run";
  std::uint64_t seed = 7;
  int threads = 1;
  bool strict = false;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int eval_every = 0;        // 0: validation only at step 0 and at the end
  int log_every = 10;        // progress lines on stdout
  CorpusConfig corpus;
  ModelConfig model;
  SamplerConfig sampler;
  TrainConfig train;
  EvalConfig eval;
  std::string eval_split = "test";
  int val_users = 0;  // users per in-training validation pass; 0 = all
  int inspect_users = 4;
  LatencyConfig latency;

  int effective_threads() const { return strict ? 1 : std::max(1, threads); }

  // Eval settings derived from the sampler and training sections.
  EvalConfig resolved_eval() const {
    EvalConfig e = eval;
    e.reasoning_budget = sampler.reasoning_budget;
    e.use_reasoning = train.ablation != Ablation::kNoReasoning;
    e.reward_cutoff = train.reward_cutoff;
    e.beta = train.effective_beta();
    e.strict = strict;
    e.threads = effective_threads();
    return e;
  }

  void validate() const {
    if (name.empty()) throw ConfigError("name: must be non-empty");
    if (output_dir.empty()) throw ConfigError("output_dir: must be non-empty");
    if (threads < 1) throw ConfigError("threads: must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every: must be >= 0");
    if (eval_every < 0) throw ConfigError("eval_every: must be >= 0");
    if (log_every < 0) throw ConfigError("log_every: must be >= 0");
    if (val_users < 0) throw ConfigError("val_users: must be >= 0");
    if (inspect_users < 1) throw ConfigError("inspect_users: must be >= 1");
    parse_split(eval_split);
    corpus.validate();
    model.validate();
    sampler.validate(model.vocab_size);
    train.validate();
    resolved_eval().validate();
    latency.validate();
    if (model.max_context < corpus.context_length + sampler.reasoning_budget) {
      throw ConfigError("model.max_context: " + std::to_string(model.max_context) +
                        " is below corpus.context_length + sampler.reasoning_budget (" +
                        std::to_string(corpus.context_length + sampler.reasoning_budget) + ")");
    }
  }
};

namespace detail {

// Reads the keys of one JSON object section and rejects the rest.
class SectionReader {
 public:
  SectionReader(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError((prefix_.empty() ? std::string("config") : prefix_) + ": must be an object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(prefix_ + key + ": wrong type");
    }
  }

  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(prefix_ + key + ": " + e.what());
    }
  }

  const Json* section(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(prefix_ + k + ": unknown key");
  }

 private:
  const Json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::SectionReader top(j, "");
  top.get("name", c.name);
  top.get("output_dir", c.output_dir);
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  top.get("strict", c.strict);
  top.get("checkpoint_every", c.checkpoint_every);
  top.get("eval_every", c.eval_every);
  top.get("log_every", c.log_every);
  top.get("eval_split", c.eval_split);
  top.get("val_users", c.val_users);
  top.get("inspect_users", c.inspect_users);
  if (const Json* s = top.section("corpus")) {
    detail::SectionReader r(*s, "corpus.");
    auto& x = c.corpus;
    r.get("num_items", x.num_items);
    r.get("num_users", x.num_users);
    r.get("latent_dim", x.latent_dim);
    r.get("num_genres", x.num_genres);
    r.get("min_events", x.min_events);
    r.get("max_events", x.max_events);
    r.get("max_history", x.max_history);
    r.get("train_ratio", x.train_ratio);
    r.get("val_ratio", x.val_ratio);
    r.get("test_ratio", x.test_ratio);
    r.get("choice_temperature", x.choice_temperature);
    r.get("item_noise", x.item_noise);
    r.get("user_noise", x.user_noise);
    r.get("preference_strength", x.preference_strength);
    r.get("rating_noise", x.rating_noise);
    r.get("mean_gap_hours", x.mean_gap_hours);
    r.get("context_length", x.context_length);
    r.get("category", x.category);
    r.finish();
  }
  if (const Json* s = top.section("model")) {
    detail::SectionReader r(*s, "model.");
    auto& x = c.model;
    r.get("layers", x.layers);
    r.get("heads", x.heads);
    r.get("width", x.width);
    r.get("ff_width", x.ff_width);
    r.get("vocab_size", x.vocab_size);
    r.get("max_context", x.max_context);
    r.get("tau_sim", x.tau_sim);
    r.get("init_std", x.init_std);
    r.finish();
  }
  if (const Json* s = top.section("sampler")) {
    detail::SectionReader r(*s, "sampler.");
    auto& x = c.sampler;
    r.get("temperature", x.temperature);
    r.get("top_k", x.top_k);
    r.get("group_size", x.group_size);
    r.get("reasoning_budget", x.reasoning_budget);
    r.finish();
  }
  if (const Json* s = top.section("train")) {
    detail::SectionReader r(*s, "train.");
    auto& x = c.train;
    r.get("clip_eps", x.clip_eps);
    r.get("beta", x.beta);
    r.get("batch_size", x.batch_size);
    r.get("lr", x.lr);
    r.get("warmup_steps", x.warmup_steps);
    r.get("weight_decay", x.weight_decay);
    r.get("max_grad_norm", x.max_grad_norm);
    r.get("refresh_period", x.refresh_period);
    r.get_enum("estimator", x.estimator, parse_estimator);
    r.get_enum("ablation", x.ablation, parse_ablation);
    r.get("inner_epochs", x.inner_epochs);
    r.get("total_steps", x.total_steps);
    r.get("reward_cutoff", x.reward_cutoff);
    r.get("normalize_token_terms", x.normalize_token_terms);
    r.get_enum("pooling", x.pooling, parse_pooling);
    r.finish();
  }
  if (const Json* s = top.section("eval")) {
    detail::SectionReader r(*s, "eval.");
    r.get("ks", c.eval.ks);
    r.get("max_users", c.eval.max_users);
    r.finish();
  }
  if (const Json* s = top.section("latency")) {
    detail::SectionReader r(*s, "latency.");
    auto& x = c.latency;
    r.get("catalog_sizes", x.catalog_sizes);
    r.get("reps", x.reps);
    r.get("queries", x.queries);
    r.get("warmup", x.warmup);
    r.get("identifier_tokens", x.identifier_tokens);
    r.get("topk", x.topk);
    r.finish();
  }
  top.finish();
  c.latency.reasoning_budget = c.sampler.reasoning_budget;
  return c;
}

inline Json to_json(const RunConfig& c) {
  const auto& k = c.corpus;
  const auto& t = c.train;
  return {
      {"name", c.name},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"threads", c.threads},
      {"strict", c.strict},
      {"checkpoint_every", c.checkpoint_every},
      {"eval_every", c.eval_every},
      {"log_every", c.log_every},
      {"eval_split", c.eval_split},
      {"val_users", c.val_users},
      {"inspect_users", c.inspect_users},
      {"corpus",
       {{"num_items", k.num_items},
        {"num_users", k.num_users},
        {"latent_dim", k.latent_dim},
        {"num_genres", k.num_genres},
        {"min_events", k.min_events},
        {"max_events", k.max_events},
        {"max_history", k.max_history},
        {"train_ratio", k.train_ratio},
        {"val_ratio", k.val_ratio},
        {"test_ratio", k.test_ratio},
        {"choice_temperature", k.choice_temperature},
        {"item_noise", k.item_noise},
        {"user_noise", k.user_noise},
        {"preference_strength", k.preference_strength},
        {"rating_noise", k.rating_noise},
        {"mean_gap_hours", k.mean_gap_hours},
        {"context_length", k.context_length},
        {"category", k.category}}},
      {"model", model_config_to_json(c.model)},
      {"sampler",
       {{"temperature", c.sampler.temperature},
        {"top_k", c.sampler.top_k},
        {"group_size", c.sampler.group_size},
        {"reasoning_budget", c.sampler.reasoning_budget}}},
      {"train",
       {{"clip_eps", t.clip_eps},
        {"beta", t.beta},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"warmup_steps", t.warmup_steps},
        {"weight_decay", t.weight_decay},
        {"max_grad_norm", t.max_grad_norm},
        {"refresh_period", t.refresh_period},
        {"estimator", estimator_name(t.estimator)},
        {"ablation", ablation_name(t.ablation)},
        {"inner_epochs", t.inner_epochs},
        {"total_steps", t.total_steps},
        {"reward_cutoff", t.reward_cutoff},
        {"normalize_token_terms", t.normalize_token_terms},
        {"pooling", pooling_name(t.pooling)}}},
      {"eval", {{"ks", c.eval.ks}, {"max_users", c.eval.max_users}}},
      {"latency",
       {{"catalog_sizes", c.latency.catalog_sizes},
        {"reps", c.latency.reps},
        {"queries", c.latency.queries},
        {"warmup", c.latency.warmup},
        {"identifier_tokens", c.latency.identifier_tokens},
        {"topk", c.latency.topk}}},
  };
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path.string());
  Json j;
  try {
    j = Json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  bool strict = false;
  std::optional<std::string> ablation, estimator, pooling;
};

inline void apply_overrides(RunConfig& c, const Overrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.strict) c.strict = true;
  if (o.ablation) c.train.ablation = parse_ablation(*o.ablation);
  if (o.estimator) c.train.estimator = parse_estimator(*o.estimator);
  if (o.pooling) c.train.pooling = parse_pooling(*o.pooling);
}

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path metrics() const { return root / "metrics.jsonl"; }
  fs::path timing() const { return root / "timing.jsonl"; }
  fs::path data() const { return root / "data"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path reports() const { return root / "reports"; }
  fs::path trajectories() const { return root / "trajectories"; }
  fs::path lock() const { return root / ".lock"; }
  fs::path checkpoint(std::int64_t step) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06lld.ckpt", static_cast<long long>(step));
    return checkpoints() / buf;
  }
  fs::path last_checkpoint() const { return checkpoints() / "last.ckpt"; }
};

// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& path) : path_(path) {
    fs::create_directories(path.parent_path());
    std::FILE* f = std::fopen(path.c_str(), "wx");
    if (!f) throw std::runtime_error("run directory is locked by another process (" + path.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << body;
}

inline void write_config_echo(const RunConfig& c, const RunPaths& p) {
  write_text(p.config(), to_json(c).dump(2) + "\n");
}

// The corpus of the run: loaded from data/ when present, otherwise generated
// from the config and saved there.
inline World obtain_world(const RunConfig& c, const RunPaths& p) {
  if (fs::exists(p.data() / "catalog.jsonl")) return load_world(p.data());
  World w = generate_world(c.corpus, c.seed);
  save_world(w, p.data());
  return w;
}

inline std::vector<TokenSequence> catalog_prompts(const Catalog& catalog) {
  std::vector<TokenSequence> out;
  out.reserve(catalog.items.size());
  for (const auto& it : catalog.items) out.push_back(render_item_prompt(it, catalog.category));
  return out;
}

inline Json trajectory_json(const Trajectory<float>& tr, int user_id, int index) {
  return {{"user_id", user_id},
          {"index", index},
          {"target", tr.target},
          {"reasoning", display_tokens(tr.reasoning)},
          {"length", tr.length()},
          {"stop_reason", stop_reason_name(tr.stop_reason)},
          {"reward",
           {{"fused", tr.reward.fused},
            {"r_discrete", tr.reward.r_discrete},
            {"r_continuous", tr.reward.r_continuous},
            {"rank", tr.reward.rank},
            {"cutoff", tr.reward.cutoff}}},
          {"advantage", tr.advantage}};
}

struct TrainSummary {
  std::vector<StepRecord> steps;
  std::vector<EvalReport> val;  // step-0 pass first, final pass last
  std::vector<std::int64_t> val_steps;
};

inline Json val_record(const EvalReport& r, std::int64_t step) {
  Json j = r.to_json(false);
  j["kind"] = "val";
  j["step"] = step;
  j.erase("ranks");
  return j;
}

// Trains per the config, writing metrics, timing, checkpoints and the
// in-training validation passes into the run directory.
inline TrainSummary run_train(const RunConfig& c, const RunPaths& p, std::ostream& log) {
  c.validate();
  write_config_echo(c, p);
  const World world = obtain_world(c, p);
  const int threads = c.effective_threads();
  auto params = PolicyParams<float>::initialize(c.model, c.seed);
  Trainer<float> trainer(world, std::move(params), c.sampler, c.train, c.seed, threads);

  fs::create_directories(p.checkpoints());
  std::ofstream metrics(p.metrics(), std::ios::trunc);
  std::ofstream timing(p.timing(), std::ios::trunc);
  EvalConfig ec = c.resolved_eval();
  ec.max_users = c.val_users;
  const auto& val_users = world.val.empty() ? world.test : world.val;

  TrainSummary summary;
  auto validate_now = [&](std::int64_t step) {
    if (val_users.empty()) return;
    ItemEmbeddingTable<float> table;
    refresh_item_embeddings(trainer.params(), trainer.item_prompts(), table, c.train.pooling, threads);
    auto rep = evaluate(trainer.params(), table, val_users, world.catalog, ec, "val");
    metrics << val_record(rep, step).dump() << "\n" << std::flush;
    timing << Json{{"kind", "val"}, {"step", step}, {"wall_time_s", rep.wall_time_s}}.dump() << "\n";
    log << "val step " << step << " ndcg@" << ec.ks.front() << " " << rep.metrics.ndcg.at(ec.ks.front())
        << " reward " << rep.mean_reward << "\n";
    summary.val.push_back(std::move(rep));
    summary.val_steps.push_back(step);
  };
  auto checkpoint_now = [&](std::int64_t step) {
    save_checkpoint(trainer.params(), c.train.pooling, p.checkpoint(step));
    save_checkpoint(trainer.params(), c.train.pooling, p.last_checkpoint());
    if (!trainer.last_groups().empty()) {
      std::string body;
      for (const auto& g : trainer.last_groups())
        for (std::size_t i = 0; i < g.trajectories.size(); ++i)
          body += trajectory_json(g.trajectories[i], g.user_id, static_cast<int>(i)).dump() + "\n";
      char name[48];
      std::snprintf(name, sizeof name, "train_step_%06lld.jsonl", static_cast<long long>(step));
      write_text(p.trajectories() / name, body);
    }
  };

  validate_now(0);
  for (int s = 0; s < c.train.total_steps; ++s) {
    StepRecord rec = trainer.step();
    metrics << rec.to_json().dump() << "\n";
    timing << Json{{"kind", "train"}, {"step", rec.step}, {"wall_time_s", rec.wall_time_s}}.dump() << "\n";
    if (c.log_every > 0 && (s + 1) % c.log_every == 0) {
      log << "step " << rec.step << " reward " << rec.mean_reward << " loss " << rec.loss << " len "
          << rec.length.mean << " grad " << rec.grad_norm << " (" << rec.wall_time_s << " s)\n"
          << std::flush;
    }
    summary.steps.push_back(rec);
    const std::int64_t done = s + 1;
    if (c.checkpoint_every > 0 && done % c.checkpoint_every == 0 && done != c.train.total_steps)
      checkpoint_now(done);
    if (c.eval_every > 0 && done % c.eval_every == 0 && done != c.train.total_steps) validate_now(done);
  }
  checkpoint_now(c.train.total_steps);
  if (c.train.total_steps > 0) validate_now(c.train.total_steps);
  return summary;
}

inline fs::path resolve_checkpoint(const RunPaths& p, const std::string& which) {
  const fs::path path = which == "last" ? p.last_checkpoint() : fs::path(which);
  if (!fs::exists(path)) throw ConfigError("--checkpoint: " + path.string() + " does not exist");
  return path;
}

struct LoadedPolicy {
  PolicyParams<float> params;
  Pooling pooling = Pooling::kLast;
};

// Checkpoint params when given, else the seeded initialization.
inline LoadedPolicy load_policy(const RunConfig& c, const RunPaths& p, const std::optional<std::string>& checkpoint,
                                bool pooling_overridden) {
  LoadedPolicy out;
  out.pooling = c.train.pooling;
  if (checkpoint) {
    CheckpointInfo info;
    out.params = load_checkpoint<float>(resolve_checkpoint(p, *checkpoint), &info);
    if (!pooling_overridden) out.pooling = info.pooling;
  } else {
    out.params = PolicyParams<float>::initialize(c.model, c.seed);
  }
  return out;
}

inline EvalReport run_eval(const RunConfig& c, const RunPaths& p, const std::optional<std::string>& checkpoint,
                           bool pooling_overridden, std::ostream& out) {
  c.validate();
  const World world = obtain_world(c, p);
  auto pol = load_policy(c, p, checkpoint, pooling_overridden);
  const auto table = refresh_item_embeddings(pol.params, catalog_prompts(world.catalog), pol.pooling,
                                             c.effective_threads());
  const Split split = parse_split(c.eval_split);
  auto rep = evaluate(pol.params, table, world.split(split), world.catalog, c.resolved_eval(), c.eval_split);
  Json j = rep.to_json();
  j["ranks"] = rep.ranks;
  write_text(p.reports() / ("eval_" + c.eval_split + ".json"), j.dump(2) + "\n");
  out << rep.table();
  return rep;
}

inline LatencyReport run_bench_latency(const RunConfig& c, const RunPaths& p,
                                       const std::optional<std::string>& checkpoint, std::ostream& out) {
  c.validate();
  const World world = obtain_world(c, p);
  auto pol = load_policy(c, p, checkpoint, false);
  std::vector<TokenSequence> prompts;
  const auto& users = world.val.empty() ? world.train : world.val;
  for (const auto& h : users) prompts.push_back(render_user_prompt(h, world.catalog));
  auto rep = latency_bench(pol.params, prompts, c.latency, c.seed);
  write_text(p.reports() / "latency.json", rep.to_json().dump(2) + "\n");
  out << rep.table();
  return rep;
}

inline void run_inspect(const RunConfig& c, const RunPaths& p, const std::optional<std::string>& checkpoint,
                        bool pooling_overridden, std::ostream& out) {
  c.validate();
  const World world = obtain_world(c, p);
  auto pol = load_policy(c, p, checkpoint, pooling_overridden);
  const auto table = refresh_item_embeddings(pol.params, catalog_prompts(world.catalog), pol.pooling,
                                             c.effective_threads());
  const auto& users = world.split(parse_split(c.eval_split));
  const int n = std::min<int>(c.inspect_users, static_cast<int>(users.size()));
  const Stream root = root_stream(c.seed, StreamTag::kInspect);
  std::string body;
  for (int u = 0; u < n; ++u) {
    const auto& h = users[static_cast<std::size_t>(u)];
    const auto prompt = render_user_prompt(h, world.catalog);
    auto group = sample_group(pol.params, prompt, c.sampler, root.child(static_cast<std::uint64_t>(h.user_id)));
    std::vector<double> rewards;
    for (auto& tr : group) {
      tr.target = h.target;
      tr.reward = compute_reward<float>(score_items<float>(tr.final_hidden, table), h.target, c.train.reward_cutoff,
                                        c.train.effective_beta(), pol.params.config().tau_sim);
      rewards.push_back(tr.reward.fused);
    }
    if (group.size() >= 2) {
      const auto adv = compute_advantages(rewards, c.train.estimator);
      for (std::size_t i = 0; i < group.size(); ++i) group[i].advantage = adv.advantages[i];
    }
    for (std::size_t i = 0; i < group.size(); ++i) {
      const auto line = trajectory_json(group[i], h.user_id, static_cast<int>(i)).dump();
      body += line + "\n";
      out << line << "\n";
    }
  }
  write_text(p.trajectories() / ("inspect_v" + std::to_string(pol.params.version()) + ".jsonl"), body);
}

// Minimal deterministic SVG line chart.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel,
                                  const std::vector<double>& xs, const std::vector<double>& ys) {
  const double W = 640, H = 400, L = 70, R = 20, Tm = 40, B = 50;
  double x0 = xs.front(), x1 = xs.front(), y0 = ys.front(), y1 = ys.front();
  for (double x : xs) x0 = std::min(x0, x), x1 = std::max(x1, x);
  for (double y : ys) y0 = std::min(y0, y), y1 = std::max(y1, y);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << L << "\" y=\"" << H - B + 18 << "\" font-family=\"sans-serif\" font-size=\"11\">" << x0
    << "</text>\n";
  s << "<text x=\"" << W - R << "\" y=\"" << H - B + 18
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << x1 << "</text>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
    << "font-size=\"11\">" << y0 << "</text>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << Tm + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
    << "font-size=\"11\">" << y1 << "</text>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
    << "font-size=\"12\">" << xlabel << "</text>\n";
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) s << (i ? " " : "") << px(xs[i]) << "," << py(ys[i]);
  s << "\"/>\n</svg>\n";
  return s.str();
}

// Renders reports/plots/*.svg from metrics.jsonl; returns the files written.
inline std::vector<fs::path> run_plot_curves(const RunPaths& p) {
  std::ifstream f(p.metrics());
  if (!f) throw ConfigError("plot-curves: no metrics log at " + p.metrics().string());
  struct Series {
    std::string file, title, kind, field;
    std::vector<double> xs, ys;
  };
  std::vector<Series> series = {
      {"train_reward.svg", "Train reward", "train", "mean_reward", {}, {}},
      {"train_length.svg", "Train reasoning length", "train", "length.mean", {}, {}},
      {"train_loss.svg", "Train loss", "train", "loss", {}, {}},
      {"val_reward.svg", "Val reward", "val", "mean_reward", {}, {}},
      {"val_length.svg", "Val length", "val", "length.mean", {}, {}},
      {"val_ndcg.svg", "Val NDCG@5", "val", "ndcg.5", {}, {}},
  };
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    for (auto& s : series) {
      if (j.value("kind", "") != s.kind) continue;
      const auto dot = s.field.find('.');
      const Json* v = &j;
      if (dot == std::string::npos) {
        if (!j.contains(s.field)) continue;
        v = &j.at(s.field);
      } else {
        const auto a = s.field.substr(0, dot), b = s.field.substr(dot + 1);
        if (!j.contains(a) || !j.at(a).contains(b)) continue;
        v = &j.at(a).at(b);
      }
      s.xs.push_back(j.at("step").get<double>());
      s.ys.push_back(v->get<double>());
    }
  }
  bool any = false;
  for (const auto& s : series) any = any || !s.xs.empty();
  if (!any) throw ConfigError("plot-curves: metrics log " + p.metrics().string() + " has no records");
  std::vector<fs::path> written;
  for (const auto& s : series) {
    if (s.xs.empty()) continue;
    const auto path = p.reports() / "plots" / s.file;
    write_text(path, svg_line_chart(s.title, "step", s.xs, s.ys));
    written.push_back(path);
  }
  return written;
}

inline World run_gen_data(const RunConfig& c, const RunPaths& p, std::ostream& out) {
  c.validate();
  World w = generate_world(c.corpus, c.seed);
  save_world(w, p.data());
  out << "catalog " << w.catalog.size() << " items, users train " << w.train.size() << " val " << w.val.size()
      << " test " << w.test.size() << " -> " << p.data().string() << "\n";
  return w;
}

}  // namespace reasonrec
