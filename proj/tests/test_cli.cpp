#include <gtest/gtest.h>

#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "latent_loop/commands.hpp"

using namespace latent_loop;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyConfig =
    "# tiny end-to-end config\n"
    "layers: 4\n"
    "width_vision: 8\n"
    "width_text: 8\n"
    "embed_dim: 8\n"
    "heads: 2\n"
    "mlp_ratio: 2\n"
    "patches: 4\n"
    "text_length: 5\n"
    "codebook: 8\n"
    "pretrain_steps: 2\n"
    "pretrain_batch: 4\n"
    "classes: 4\n"
    "latent_dim: 4\n"
    "shots: 2\n"
    "query_per_class: 3\n"
    "injection_depths: 2\n"
    "steps: 2\n"
    "lr: 0.01\n";

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Pretrained backbone plus split task in `dir`, config at dir/tiny.cfg.
struct Workspace {
  fs::path dir;
  std::string config;

  explicit Workspace(const std::string& name) : dir(fixtures::temp_dir(name)) {
    config = (dir / "tiny.cfg").string();
    fixtures::write_file(config, kTinyConfig);
  }

  std::vector<std::string> cmd(const std::string& command, std::vector<std::string> extra = {}) const {
    std::vector<std::string> a = {command, "--config", config, "--out", dir.string(), "--set",
                                  "backbone=" + (dir / "backbone.perlw").string(), "task=" + (dir / "task").string(),
                                  "projector=" + (dir / "projector.perlw").string()};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }

  void prepare_inputs() const {
    ASSERT_EQ(run(cmd("pretrain")).code, kExitOk);
    ASSERT_EQ(run(cmd("gen-tasks")).code, kExitOk);
  }
};

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) { return split(line, ','); }

}  // namespace

TEST(Cli, PipelineIsByteReproducible) {
  std::vector<std::string> outputs;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Workspace ws("cli_repro_" + std::to_string(attempt));
    ws.prepare_inputs();
    ASSERT_EQ(run(ws.cmd("train")).code, kExitOk);
    ASSERT_EQ(run(ws.cmd("eval")).code, kExitOk);
    std::string all;
    for (const char* f : {"backbone.perlw", "task.perlw", "task.meta", "projector.perlw", "train_log.csv",
                          "results.csv"})
      all += fixtures::read_file(ws.dir / f);
    outputs.push_back(all);
  }
  EXPECT_EQ(outputs[0], outputs[1]);
}

TEST(Cli, ResolvedSnapshotReproducesTheRun) {
  Workspace ws("cli_snapshot");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("train", {"lambda=0.5", "--seed", "3"})).code, kExitOk);
  const std::string first = fixtures::read_file(ws.dir / "projector.perlw");
  const fs::path snapshot = ws.dir / "train.config.resolved";
  ASSERT_TRUE(fs::exists(snapshot));
  const auto resolved = KeyValueText::load(snapshot);
  EXPECT_EQ(resolved.at("lambda"), "0.5");
  EXPECT_EQ(resolved.at("seed"), "3");
  const fs::path again = ws.dir / "again";
  ASSERT_EQ(run({"train", "--config", snapshot.string(), "--out", again.string()}).code, kExitOk);
  EXPECT_EQ(fixtures::read_file(again / "projector.perlw"), first);
}

TEST(Cli, ResolvedDefaults) {
  Workspace ws("cli_defaults");
  fixtures::write_file(ws.dir / "empty.cfg", "");
  ASSERT_EQ(run({"gradcheck", "--config", (ws.dir / "empty.cfg").string(), "--out", ws.dir.string()}).code, kExitOk);
  const auto resolved = KeyValueText::load(ws.dir / "gradcheck.config.resolved");
  EXPECT_EQ(resolved.at("lr"), "0.0001");
  EXPECT_EQ(resolved.at("batch"), "4");
  EXPECT_EQ(resolved.at("epochs"), "1");
  EXPECT_EQ(resolved.at("steps"), "4");
  EXPECT_EQ(resolved.at("lambda"), "1");
  EXPECT_EQ(resolved.at("injection_depths"), "7");
  EXPECT_EQ(resolved.at("rank"), "1");
  EXPECT_EQ(resolved.at("sharing"), "shared");
}

TEST(Cli, ZeroLambdaOverrideZeroesAnchorColumn) {
  Workspace ws("cli_lambda");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("train", {"lambda=0", "epochs=2"})).code, kExitOk);
  const auto rows = lines(fixtures::read_file(ws.dir / "train_log.csv"));
  ASSERT_GT(rows.size(), 1u);
  EXPECT_EQ(rows[0], "step,loss_total,loss_cls,loss_anchor,mean_cos_v0_vK");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = fields(rows[i]);
    EXPECT_EQ(f[3], "0") << rows[i];
    EXPECT_EQ(f[1], f[2]) << rows[i];
  }
}

TEST(Cli, ZeroShotEvalMatchesFrozenModel) {
  Workspace ws("cli_zero_shot");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("eval", {"--zero-shot"})).code, kExitOk);
  const auto rows = lines(fixtures::read_file(ws.dir / "results.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "protocol,run,steps,base,novel,hm");
  const auto f = fields(rows[1]);
  EXPECT_EQ(f[2], "0");

  const EncoderWeights w = EncoderWeights::load(ws.dir / "backbone.perlw");
  const FewShotTask task = load_task(ws.dir / "task");
  PerlConfig cfg;
  cfg.injection_depths = {2};
  cfg.steps = 0;
  const BaseNovelResult want = base_to_novel(task, PerlModel{&w, nullptr, cfg});
  EXPECT_EQ(f[3], cli_detail::percent(want.base));
  EXPECT_EQ(f[4], cli_detail::percent(want.novel));
  EXPECT_EQ(f[5], cli_detail::percent(want.hm));
}

TEST(Cli, EvalHmColumnAndMeanRow) {
  Workspace ws("cli_hm");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("train")).code, kExitOk);
  fs::rename(ws.dir / "projector.perlw", ws.dir / "p0.perlw");
  ASSERT_EQ(run(ws.cmd("train", {"--seed", "1", "--force"})).code, kExitOk);
  const std::string list = (ws.dir / "p0.perlw").string() + "," + (ws.dir / "projector.perlw").string();
  ASSERT_EQ(run(ws.cmd("eval", {"projector=" + list})).code, kExitOk);
  const auto rows = lines(fixtures::read_file(ws.dir / "results.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(fields(rows[3])[1], "mean");
  for (std::size_t i = 1; i < 3; ++i) {
    const auto f = fields(rows[i]);
    const double base = std::stod(f[3]), novel = std::stod(f[4]), hm = std::stod(f[5]);
    if (base > 0 && novel > 0) {
      EXPECT_NEAR(hm, 2 * base * novel / (base + novel), 0.01);
    }
  }
}

TEST(Cli, DegenerateSweepEqualsTrainThenEval) {
  Workspace ws("cli_sweep");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("train")).code, kExitOk);
  ASSERT_EQ(run(ws.cmd("eval")).code, kExitOk);
  const auto eval_row = fields(lines(fixtures::read_file(ws.dir / "results.csv"))[1]);
  ASSERT_EQ(run(ws.cmd("sweep", {"sweep_depths=2", "sweep_steps=2", "sweep_seeds=0"})).code, kExitOk);
  const auto rows = lines(fixtures::read_file(ws.dir / "sweep.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0],
            "injection_depths,steps,sharing,modalities,seed,metric,value,parameter_count,clip_b16_parameter_count,"
            "block_eval_count");
  const char* metrics[] = {"base", "novel", "hm"};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto f = fields(rows[i + 1]);
    EXPECT_EQ(f[5], metrics[i]);
    EXPECT_EQ(f[6], eval_row[3 + i]) << metrics[i];
    EXPECT_EQ(f[7], std::to_string(parameter_count(PerlConfig{}, 8, 8)));
    EXPECT_EQ(f[8], "6402");
    EXPECT_EQ(f[9], std::to_string(block_eval_count(2, 2, 4)));
  }
}

TEST(Cli, DynamicsWritesMetricsTransitionsAndMaps) {
  Workspace ws("cli_dynamics");
  ws.prepare_inputs();
  ASSERT_EQ(run(ws.cmd("train")).code, kExitOk);
  ASSERT_EQ(run(ws.cmd("dynamics", {"map_examples=2"})).code, kExitOk);
  const auto metrics = lines(fixtures::read_file(ws.dir / "dynamics_metrics.csv"));
  ASSERT_EQ(metrics.size(), 4u);  // header + steps 0..2
  EXPECT_EQ(metrics[0], kMetricsHeader);
  const auto transitions = lines(fixtures::read_file(ws.dir / "dynamics_transitions.csv"));
  EXPECT_EQ(transitions.size(), 1u + 4 * 3);
  EXPECT_TRUE(fs::exists(ws.dir / "maps" / "1_2.pgm"));
  EXPECT_FALSE(fs::exists(ws.dir / "maps" / "2_0.pgm"));
}

TEST(Cli, MissingInputIsAUsageError) {
  Workspace ws("cli_missing");
  const CliRun r = run(ws.cmd("train"));
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("backbone.perlw"), std::string::npos) << r.err;
  EXPECT_EQ(run({"train", "--config", (ws.dir / "nope.cfg").string()}).code, kExitUsage);
}

TEST(Cli, UnknownKeyIsAUsageError) {
  Workspace ws("cli_unknown");
  const CliRun r = run(ws.cmd("gen-tasks", {"lamda=0"}));
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("lamda"), std::string::npos);
  fixtures::write_file(ws.dir / "bad.cfg", "warmup: 3\n");
  EXPECT_EQ(run({"gen-tasks", "--config", (ws.dir / "bad.cfg").string(), "--out", ws.dir.string()}).code, kExitUsage);
}

TEST(Cli, ParseErrorsAreUsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"train"}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate", "--config", "x"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, ExistingOutputsNeedForce) {
  Workspace ws("cli_force");
  ASSERT_EQ(run(ws.cmd("gen-tasks")).code, kExitOk);
  EXPECT_EQ(run(ws.cmd("gen-tasks")).code, kExitUsage);
  EXPECT_EQ(run(ws.cmd("gen-tasks", {"--force"})).code, kExitOk);
}

TEST(Cli, CrossTaskProtocolEndToEnd) {
  Workspace ws("cli_cross");
  ASSERT_EQ(run(ws.cmd("pretrain")).code, kExitOk);
  ASSERT_EQ(run(ws.cmd("gen-tasks", {"protocol=cross-task", "targets=2"})).code, kExitOk);
  ASSERT_EQ(run(ws.cmd("train")).code, kExitOk);
  const std::string targets = (ws.dir / "target_0").string() + "," + (ws.dir / "target_1").string();
  ASSERT_EQ(run(ws.cmd("eval", {"protocol=cross-task", "target_tasks=" + targets})).code, kExitOk);
  const auto rows = lines(fixtures::read_file(ws.dir / "results.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "protocol,run,steps,source,target_0,target_1,mean_target");
  const auto f = fields(rows[1]);
  EXPECT_NEAR(std::stod(f[6]), (std::stod(f[4]) + std::stod(f[5])) / 2.0, 0.006);
}

TEST(Cli, GradcheckFaultFailsNamingTheOp) {
  Workspace ws("cli_gradcheck");
  const CliRun ok = run(ws.cmd("gradcheck"));
  EXPECT_EQ(ok.code, kExitOk);
  EXPECT_NE(ok.out.find("all checks passed"), std::string::npos);
  const CliRun bad = run(ws.cmd("gradcheck", {"gradcheck_fault=softmax", "--force"}));
  EXPECT_EQ(bad.code, kExitCheckFailed);
  EXPECT_NE(bad.err.find("gradient check failed for op softmax"), std::string::npos) << bad.err;
  EXPECT_NE(fixtures::read_file(ws.dir / "gradcheck.csv").find("softmax"), std::string::npos);
}
