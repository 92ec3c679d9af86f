#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "latent_loop/backbone.hpp"
#include "latent_loop/dynamics.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/gradcheck.hpp"
#include "latent_loop/keyvalue.hpp"
#include "latent_loop/objective.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/pretrain.hpp"
#include "latent_loop/protocols.hpp"
#include "latent_loop/synthetic.hpp"

namespace latent_loop {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

struct ConfigKey {
  const char* name;
  const char* fallback;
  const char* help;
};

/// Every accepted config key with its default. Anything else is rejected.
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "root seed for every random stream"},
      // backbone
      {"layers", "12", "transformer blocks per tower (L)"},
      {"width_vision", "48", "vision hidden width (d_v)"},
      {"width_text", "32", "text hidden width (d_t)"},
      {"embed_dim", "16", "shared embedding width (d)"},
      {"heads", "4", "attention heads"},
      {"mlp_ratio", "4", "MLP hidden multiplier"},
      {"patches", "16", "patch tokens per image"},
      {"text_length", "8", "prompt length including BOS and EOS"},
      {"codebook", "64", "latent codebook size (token vocabulary)"},
      {"logit_scale", "10", "frozen logit scale (tau)"},
      {"pretrain_steps", "150", "contrastive pretraining steps"},
      {"pretrain_batch", "16", "pairs per pretraining step"},
      {"pretrain_lr", "0.002", "pretraining learning rate"},
      // tasks
      {"classes", "16", "classes per synthetic task (C)"},
      {"latent_dim", "8", "latent prototype width"},
      {"noise", "1", "intra-class noise scale"},
      {"shots", "16", "support images per base class"},
      {"query_per_class", "20", "query images per class"},
      {"shift_prototype", "0", "prototype jitter of the task"},
      {"shift_noise", "0", "relative noise inflation of the task"},
      {"world_seed", "7", "codebook seed shared by every task"},
      {"base_fraction", "0.5", "share of classes in the base split"},
      {"protocol", "base-to-novel", "base-to-novel or cross-task"},
      {"targets", "2", "shifted target tasks written by gen-tasks for cross-task"},
      {"target_shift_prototype", "0.5", "prototype jitter of target tasks"},
      {"target_shift_noise", "0.5", "noise inflation of target tasks"},
      // refinement
      {"injection_depths", "7", "comma-separated injection depths (J)"},
      {"steps", "4", "reasoning steps (K)"},
      {"rank", "1", "projector bottleneck rank (r)"},
      {"sharing", "shared", "shared, per_layer, per_step or per_layer_step"},
      {"modalities", "both", "vision, text or both"},
      // adaptation
      {"lr", "0.0001", "AdamW learning rate"},
      {"batch", "4", "support examples per step"},
      {"epochs", "1", "passes over the support set"},
      {"lambda", "1", "anchor weight"},
      {"weight_decay", "0.01", "AdamW decoupled weight decay"},
      // artifacts
      {"backbone", "backbone.perlw", "backbone checkpoint"},
      {"task", "task", "task file stem (.perlw + .meta)"},
      {"target_tasks", "", "comma-separated target task stems for cross-task eval"},
      {"projector", "projector.perlw", "comma-separated projector checkpoints"},
      // sweep
      {"sweep_depths", "7", "'|'-separated injection depth lists"},
      {"sweep_steps", "4", "comma-separated K values"},
      {"sweep_sharing", "shared", "comma-separated sharing modes"},
      {"sweep_modalities", "both", "comma-separated modality subsets"},
      {"sweep_seeds", "0,1,2", "comma-separated adaptation seeds"},
      // dynamics
      {"setting", "perl", "setting column of dynamics CSVs"},
      {"dataset", "synthetic", "dataset column of dynamics CSVs"},
      {"side", "base", "query side analysed: base, novel or all"},
      {"map_examples", "4", "queries that get contribution maps"},
      // gradcheck
      {"gradcheck_tolerance", "0.0001", "largest accepted relative error"},
      {"gradcheck_fault", "", "op whose gradient is corrupted on purpose"},
  };
  return keys;
}

/// Resolved key: value settings of one run.
class RunConfig {
 public:
  static RunConfig resolve(const KeyValueText& file, const std::vector<std::string>& overrides,
                           std::optional<std::uint64_t> seed) {
    RunConfig rc;
    for (const auto& k : config_schema()) rc.values_.set(k.name, k.fallback);
    for (const auto& [key, value] : file.entries()) rc.assign(key, value, "config file");
    for (const auto& item : overrides) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
      rc.assign(std::string(KeyValueText::trim(std::string_view(item).substr(0, eq))),
                std::string(KeyValueText::trim(std::string_view(item).substr(eq + 1))), "--set");
    }
    if (seed) rc.values_.set("seed", std::to_string(*seed));
    return rc;
  }

  const std::string& str(std::string_view key) const { return values_.at(key); }
  std::uint64_t u64(std::string_view key) const { return parse_u64(str(key), key); }
  std::size_t size(std::string_view key) const { return static_cast<std::size_t>(u64(key)); }
  double real(std::string_view key) const { return parse_double(str(key), key); }
  std::vector<std::string> list(std::string_view key, char sep = ',') const { return split(str(key), sep); }
  const KeyValueText& values() const { return values_; }

  EncoderConfig encoder() const {
    EncoderConfig c;
    c.layers = size("layers");
    c.width_vision = size("width_vision");
    c.width_text = size("width_text");
    c.embed_dim = size("embed_dim");
    c.heads = size("heads");
    c.mlp_ratio = size("mlp_ratio");
    c.patches = size("patches");
    c.text_length = size("text_length");
    c.codebook = size("codebook");
    c.logit_scale = real("logit_scale");
    c.validate();
    return c;
  }

  PretrainConfig pretrain() const { return {size("pretrain_steps"), size("pretrain_batch"), real("pretrain_lr")}; }

  SyntheticTaskSpec task_spec() const {
    SyntheticTaskSpec s;
    s.classes = size("classes");
    s.latent_dim = size("latent_dim");
    s.noise = real("noise");
    s.codebook = size("codebook");
    s.shots = size("shots");
    s.query_per_class = size("query_per_class");
    s.shift_prototype = real("shift_prototype");
    s.shift_noise = real("shift_noise");
    s.world_seed = u64("world_seed");
    s.seed = u64("seed");
    s.validate();
    return s;
  }

  PerlConfig perl() const {
    PerlConfig c;
    c.injection_depths = parse_index_list(str("injection_depths"), "injection_depths");
    c.steps = size("steps");
    c.rank = size("rank");
    c.sharing = parse_sharing(str("sharing"));
    apply_modalities(c, str("modalities"));
    return c;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lr = real("lr");
    t.batch = size("batch");
    t.epochs = size("epochs");
    t.lambda = real("lambda");
    t.weight_decay = real("weight_decay");
    t.seed = u64("seed");
    t.validate();
    return t;
  }

  static void apply_modalities(PerlConfig& c, std::string_view m) {
    if (m == "both") {
      c.vision = c.text = true;
    } else if (m == "vision") {
      c.vision = true;
      c.text = false;
    } else if (m == "text") {
      c.vision = false;
      c.text = true;
    } else {
      throw ConfigError("modalities must be vision, text or both, got '" + std::string(m) + "'");
    }
  }

 private:
  void assign(const std::string& key, const std::string& value, std::string_view origin) {
    if (!values_.contains(key)) throw ConfigError("unknown config key '" + key + "' (" + std::string(origin) + ")");
    values_.set(key, value);
  }

  KeyValueText values_;
};

struct CommandContext {
  std::string command;
  RunConfig config;
  std::filesystem::path out_dir;
  bool zero_shot = false;
  bool force = false;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;

  std::filesystem::path output(const std::string& name) const { return out_dir / name; }

  // Refuses to clobber earlier results, then records the resolved config.
  void prepare(const std::vector<std::string>& outputs) const {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> all = outputs;
    all.push_back(snapshot_name());
    if (!force) {
      for (const auto& name : all) {
        if (std::filesystem::exists(output(name))) {
          throw InputError("output " + output(name).string() + " already exists (use --force to overwrite)");
        }
      }
    }
    config.values().save(output(snapshot_name()));
  }

  // <command>.config.resolved; re-running with it as --config reproduces the run.
  std::string snapshot_name() const { return command + ".config.resolved"; }
};

namespace cli_detail {

inline void require_file(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw InputError("missing input file " + p.string());
}

inline EncoderWeights load_backbone(const RunConfig& rc) {
  const std::filesystem::path p = rc.str("backbone");
  require_file(p);
  return EncoderWeights::load(p);
}

inline FewShotTask load_task_stem(const std::filesystem::path& stem) {
  require_file(std::filesystem::path(stem).replace_extension(".perlw"));
  require_file(std::filesystem::path(stem).replace_extension(".meta"));
  return load_task(stem);
}

inline ProjectorSet load_projector(const std::filesystem::path& p) {
  require_file(p);
  return ProjectorSet::load(p);
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string depth_label(const std::vector<std::size_t>& depths) {
  std::string s;
  for (std::size_t i = 0; i < depths.size(); ++i) s += (i ? "+" : "") + std::to_string(depths[i]);
  return s;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + p.string());
  f << text;
}

}  // namespace cli_detail

inline int cmd_pretrain(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  ctx.prepare({"backbone.perlw", "pretrain_log.csv"});
  const EncoderConfig ec = rc.encoder();
  std::vector<double> losses;
  const EncoderWeights w = pretrain_backbone(rc.task_spec(), ec, rc.pretrain(), rc.u64("seed"), &losses);
  w.save(ctx.output("backbone.perlw"));
  std::string log = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) log += std::to_string(i + 1) + "," + format_double(losses[i]) + "\n";
  cli_detail::write_text(ctx.output("pretrain_log.csv"), log);
  *ctx.out << "pretrained " << rc.size("pretrain_steps") << " steps -> " << ctx.output("backbone.perlw").string()
           << "\n";
  return kExitOk;
}

inline int cmd_gen_tasks(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const std::string protocol = rc.str("protocol");
  const EncoderConfig ec = rc.encoder();
  const SyntheticTaskSpec spec = rc.task_spec();
  if (protocol == "base-to-novel") {
    ctx.prepare({"task.perlw", "task.meta"});
    save_task(split_base_novel(generate_task(spec, ec), rc.real("base_fraction"), spec.seed), ctx.output("task"));
    *ctx.out << "wrote " << ctx.output("task").string() << " (" << spec.classes << " classes, base/novel split)\n";
  } else if (protocol == "cross-task") {
    const std::size_t targets = rc.size("targets");
    std::vector<std::string> outputs = {"task.perlw", "task.meta"};
    for (std::size_t i = 0; i < targets; ++i) {
      outputs.push_back("target_" + std::to_string(i) + ".perlw");
      outputs.push_back("target_" + std::to_string(i) + ".meta");
    }
    ctx.prepare(outputs);
    save_task(generate_task(spec, ec), ctx.output("task"));
    for (std::size_t i = 0; i < targets; ++i) {
      SyntheticTaskSpec t = spec;
      t.seed = spec.seed + 1 + i;
      t.shift_prototype = rc.real("target_shift_prototype");
      t.shift_noise = rc.real("target_shift_noise");
      save_task(generate_task(t, ec), ctx.output("target_" + std::to_string(i)));
    }
    *ctx.out << "wrote source task and " << targets << " shifted targets to " << ctx.out_dir.string() << "\n";
  } else {
    throw ConfigError("protocol must be base-to-novel or cross-task, got '" + protocol + "'");
  }
  return kExitOk;
}

inline int cmd_train(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const EncoderWeights w = cli_detail::load_backbone(rc);
  const FewShotTask task = cli_detail::load_task_stem(rc.str("task"));
  const PerlConfig cfg = rc.perl();
  const TrainConfig tc = rc.train();
  ctx.prepare({"projector.perlw", "train_log.csv"});
  const TrainResult r = train_few_shot(task, w, cfg, tc);
  r.projectors.save(ctx.output("projector.perlw"));
  write_train_log(ctx.output("train_log.csv"), r.log);
  *ctx.out << "trained " << r.log.size() << " steps, final loss " << format_double(r.log.back().loss.total) << " -> "
           << ctx.output("projector.perlw").string() << "\n";
  return kExitOk;
}

inline int cmd_eval(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const std::string protocol = rc.str("protocol");
  if (protocol != "base-to-novel" && protocol != "cross-task") {
    throw ConfigError("eval needs protocol base-to-novel or cross-task, got '" + protocol + "'");
  }
  const EncoderWeights w = cli_detail::load_backbone(rc);
  const FewShotTask task = cli_detail::load_task_stem(rc.str("task"));
  PerlConfig cfg = rc.perl();
  std::vector<ProjectorSet> runs;
  if (ctx.zero_shot) {
    cfg.steps = 0;
    runs.emplace_back();
  } else {
    const auto paths = rc.list("projector");
    if (paths.empty()) throw ConfigError("eval needs at least one projector (or --zero-shot)");
    for (const auto& p : paths) runs.push_back(cli_detail::load_projector(p));
  }
  std::vector<FewShotTask> targets;
  if (protocol == "cross-task") {
    const auto stems = rc.list("target_tasks");
    if (stems.empty()) throw ConfigError("cross-task eval needs target_tasks");
    for (const auto& s : stems) targets.push_back(cli_detail::load_task_stem(s));
  }
  ctx.prepare({"results.csv"});

  std::ostringstream csv;
  std::vector<std::vector<double>> rows;
  if (protocol == "base-to-novel") {
    csv << "protocol,run,steps,base,novel,hm\n";
    for (const auto& phi : runs) {
      const BaseNovelResult r = base_to_novel(task, PerlModel{&w, &phi, cfg});
      rows.push_back({r.base, r.novel, r.hm});
    }
  } else {
    csv << "protocol,run,steps,source";
    for (std::size_t i = 0; i < targets.size(); ++i) csv << ",target_" << i;
    csv << ",mean_target\n";
    for (const auto& phi : runs) {
      const PerlModel model{&w, &phi, cfg};
      std::vector<double> row = {evaluate(task, Side::all, model).accuracy};
      double total = 0.0;
      for (const auto& t : targets) {
        row.push_back(evaluate(t, Side::all, model).accuracy);
        total += row.back();
      }
      row.push_back(total / static_cast<double>(targets.size()));
      rows.push_back(std::move(row));
    }
  }
  auto emit = [&](const std::string& run, const std::vector<double>& v) {
    csv << protocol << ',' << run << ',' << cfg.steps;
    for (double x : v) csv << ',' << cli_detail::percent(x);
    csv << '\n';
  };
  for (std::size_t i = 0; i < rows.size(); ++i) emit(std::to_string(i), rows[i]);
  if (rows.size() > 1) {
    std::vector<double> mean(rows.front().size(), 0.0);
    for (const auto& r : rows)
      for (std::size_t j = 0; j < r.size(); ++j) mean[j] += r[j] / static_cast<double>(rows.size());
    if (protocol == "base-to-novel") mean[2] = (mean[0] > 0.0 && mean[1] > 0.0) ? harmonic_mean(mean[0], mean[1]) : 0.0;
    emit("mean", mean);
  }
  cli_detail::write_text(ctx.output("results.csv"), csv.str());
  *ctx.out << csv.str();
  return kExitOk;
}

inline int cmd_sweep(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  std::vector<std::vector<std::size_t>> depth_grid;
  for (const auto& d : rc.list("sweep_depths", '|')) depth_grid.push_back(parse_index_list(d, "sweep_depths"));
  std::vector<std::size_t> step_grid;
  for (const auto& k : rc.list("sweep_steps")) step_grid.push_back(static_cast<std::size_t>(parse_u64(k, "sweep_steps")));
  const auto sharing_grid = rc.list("sweep_sharing");
  const auto modality_grid = rc.list("sweep_modalities");
  std::vector<std::uint64_t> seeds;
  for (const auto& s : rc.list("sweep_seeds")) seeds.push_back(parse_u64(s, "sweep_seeds"));
  if (depth_grid.empty() || step_grid.empty() || sharing_grid.empty() || modality_grid.empty() || seeds.empty()) {
    throw ConfigError("sweep grid is empty");
  }
  const EncoderWeights w = cli_detail::load_backbone(rc);
  const FewShotTask task = cli_detail::load_task_stem(rc.str("task"));
  const TrainConfig base_tc = rc.train();
  const EncoderConfig clip = EncoderConfig::clip_b16_dims();
  ctx.prepare({"sweep.csv"});

  std::ostringstream csv;
  csv << "injection_depths,steps,sharing,modalities,seed,metric,value,parameter_count,clip_b16_parameter_count,"
         "block_eval_count\n";
  for (const auto& depths : depth_grid) {
    for (std::size_t k : step_grid) {
      for (const auto& sharing : sharing_grid) {
        for (const auto& modalities : modality_grid) {
          PerlConfig cfg;
          cfg.injection_depths = depths;
          cfg.steps = k;
          cfg.rank = rc.size("rank");
          cfg.sharing = parse_sharing(sharing);
          RunConfig::apply_modalities(cfg, modalities);
          cfg.validate(w.config.layers);
          const std::size_t params = parameter_count(cfg, w.config.width_vision, w.config.width_text);
          const std::size_t clip_params = parameter_count(cfg, clip.width_vision, clip.width_text);
          const std::size_t blocks = block_eval_count(depths.front(), k, w.config.layers);
          for (std::uint64_t seed : seeds) {
            TrainConfig tc = base_tc;
            tc.seed = seed;
            ProjectorSet phi;
            if (k > 0) phi = train_few_shot(task, w, cfg, tc).projectors;
            const BaseNovelResult r = base_to_novel(task, PerlModel{&w, &phi, cfg});
            const std::pair<const char*, double> metrics[] = {{"base", r.base}, {"novel", r.novel}, {"hm", r.hm}};
            for (const auto& [name, value] : metrics) {
              csv << cli_detail::depth_label(depths) << ',' << k << ',' << sharing << ',' << modalities << ','
                  << seed << ',' << name << ',' << cli_detail::percent(value) << ',' << params << ','
                  << clip_params << ',' << blocks << '\n';
            }
            *ctx.err << "sweep J=" << cli_detail::depth_label(depths) << " K=" << k << " " << sharing << " "
                     << modalities << " seed " << seed << ": HM " << cli_detail::percent(r.hm) << "\n";
          }
        }
      }
    }
  }
  cli_detail::write_text(ctx.output("sweep.csv"), csv.str());
  return kExitOk;
}

inline int cmd_dynamics(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const EncoderWeights w = cli_detail::load_backbone(rc);
  const FewShotTask task = cli_detail::load_task_stem(rc.str("task"));
  const PerlConfig cfg = rc.perl();
  const auto paths = rc.list("projector");
  if (paths.size() != 1) throw ConfigError("dynamics analyses exactly one projector");
  const ProjectorSet phi = cli_detail::load_projector(paths.front());
  const std::string side_key = rc.str("side");
  const Side side = side_key == "base" ? Side::base
                    : side_key == "novel" ? Side::novel
                    : side_key == "all"   ? Side::all
                                          : throw ConfigError("side must be base, novel or all");
  const std::size_t map_examples = rc.size("map_examples");
  ctx.prepare({"dynamics_metrics.csv", "dynamics_transitions.csv"});

  const PerlModel model{&w, &phi, cfg};
  const EvalResult ev = evaluate(task, side, model);
  const std::size_t steps = cfg.steps;
  std::vector<Tensor> class_mats;
  for (std::size_t k = 0; k <= steps; ++k) class_mats.push_back(class_matrix_at(ev.class_traces, k));

  std::vector<std::vector<Tensor>> logits;
  std::vector<std::vector<double>> jacobians;
  std::vector<TransitionRecord> records;
  const auto queries = task.query_for(ev.candidates);
  if (map_examples > 0) std::filesystem::create_directories(ctx.output("maps"));
  for (std::size_t i = 0; i < ev.traces.size(); ++i) {
    logits.push_back(ev.traces[i].logits);
    records.push_back(make_transition_record(i, ev.traces[i].logits, ev.labels[i]));
    const auto grads = input_gradients(model, queries[i].tokens, class_mats, ev.labels[i]);
    std::vector<double> norms;
    for (std::size_t k = 0; k < grads.size(); ++k) {
      norms.push_back(jacobian_norm(grads[k]));
      if (i < map_examples) {
        write_pgm(ctx.output("maps") / (std::to_string(i) + "_" + std::to_string(k) + ".pgm"),
                  contribution_map(grads[k]));
      }
    }
    jacobians.push_back(std::move(norms));
  }
  if (steps == 0) *ctx.err << "warning: K = 0, transition groups hold a single step\n";

  std::ostringstream metrics;
  metrics << kMetricsHeader << '\n';
  write_metrics_rows(metrics, rc.str("setting"), rc.str("dataset"), step_metrics(logits, ev.labels, &jacobians));
  cli_detail::write_text(ctx.output("dynamics_metrics.csv"), metrics.str());

  std::ostringstream transitions;
  transitions << kTransitionHeader << '\n';
  write_transition_rows(transitions, rc.str("setting"), group_transitions(records), steps + 1);
  cli_detail::write_text(ctx.output("dynamics_transitions.csv"), transitions.str());
  *ctx.out << metrics.str();
  return kExitOk;
}

inline std::string gradcheck_report_text(const GradcheckReport& report, double tolerance) {
  std::ostringstream s;
  s << "op,max_rel_error,checked,status\n";
  char buf[32];
  for (const auto& c : report.cases) {
    std::snprintf(buf, sizeof(buf), "%.3e", c.max_rel_error);
    s << c.op << ',' << buf << ',' << c.checked << ',' << (c.passed ? "pass" : "FAIL") << '\n';
  }
  std::snprintf(buf, sizeof(buf), "%.0e", tolerance);
  s << "# tolerance " << buf << ": " << (report.passed() ? "all checks passed" : "checks failed") << '\n';
  return s.str();
}

inline int cmd_gradcheck(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  GradcheckOptions opts;
  opts.tolerance = rc.real("gradcheck_tolerance");
  opts.fault = rc.str("gradcheck_fault");
  opts.seed = rc.u64("seed");
  ctx.prepare({"gradcheck.csv"});
  const GradcheckReport report = run_gradcheck(opts);
  const std::string text = gradcheck_report_text(report, opts.tolerance);
  cli_detail::write_text(ctx.output("gradcheck.csv"), text);
  *ctx.out << text;
  if (report.passed()) return kExitOk;
  for (const auto& c : report.cases)
    if (!c.passed) *ctx.err << "gradient check failed for op " << c.op << "\n";
  return kExitCheckFailed;
}

/// Entry point. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Iterative latent refinement for a frozen toy dual encoder", "latent-loop"};
  app.require_subcommand(1);
  struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    bool zero_shot = false;
    bool force = false;
  } flags;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "contrastively pretrain the toy backbone"},
      {"gen-tasks", "generate synthetic few-shot tasks"},
      {"train", "adapt thought projectors on the support set"},
      {"eval", "evaluate base-to-novel or cross-task accuracy"},
      {"sweep", "train and evaluate over an ablation grid"},
      {"dynamics", "export per-step metrics, KL transitions and contribution maps"},
      {"gradcheck", "compare analytic gradients with finite differences"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "key: value config file")->required();
    sub->add_option("--seed", flags.seed, "root seed (overrides the config)");
    sub->add_option("--out", flags.out_dir, "output directory");
    sub->add_option("--set", flags.overrides, "override a config key (key=value)")->take_all();
    sub->add_flag("--zero-shot", flags.zero_shot, "evaluate the frozen model (K = 0)");
    sub->add_flag("--force", flags.force, "overwrite existing outputs");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (flags.zero_shot && command != "eval") throw ConfigError("--zero-shot only applies to eval");
    if (!std::filesystem::exists(flags.config)) throw InputError("missing config file " + flags.config);
    CommandContext ctx{command, RunConfig::resolve(KeyValueText::load(flags.config), flags.overrides, flags.seed),
                       flags.out_dir, flags.zero_shot, flags.force, &out, &err};
    if (command == "pretrain") return cmd_pretrain(ctx);
    if (command == "gen-tasks") return cmd_gen_tasks(ctx);
    if (command == "train") return cmd_train(ctx);
    if (command == "eval") return cmd_eval(ctx);
    if (command == "sweep") return cmd_sweep(ctx);
    if (command == "dynamics") return cmd_dynamics(ctx);
    return cmd_gradcheck(ctx);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IndexError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "check failed: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

}  // namespace latent_loop
