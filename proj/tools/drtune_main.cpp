#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "drtune/cli.hpp"
#include "drtune/config.hpp"

#ifndef DRTUNE_GIT_DESCRIBE
#define DRTUNE_GIT_DESCRIBE "unknown"
#endif

namespace {

struct CommonFlags {
  std::string config;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t k = 0, batch = 0, epochs = 0;
  double lr = 0.0;
  std::string schedule;
  std::string ablate;
  std::string k_sweep;
  bool freeze_encoder = false;
  std::string out;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f, bool finetune_only) {
  cmd->add_option("--config", f.config, "manifest file (ini-style)");
  cmd->add_option("--method", f.method, "ce | l2sp | drtune");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--k", f.k, "feature bank size K");
  cmd->add_option("--batch", f.batch, "mini-batch size B");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--lr", f.lr, "encoder learning rate");
  cmd->add_option("--schedule", f.schedule, "cosine | linear");
  cmd->add_option("--ablate-sc", f.ablate, "none | gr | clt | clt+cga | full");
  cmd->add_option("--out", f.out, "output directory");
  if (finetune_only) {
    cmd->add_option("--k-sweep", f.k_sweep, "comma-separated K values to sweep");
    cmd->add_flag("--freeze-encoder", f.freeze_encoder,
                  "train the head only (isolation mode)");
  }
}

drtune::ExperimentManifest build_manifest(const CLI::App* cmd, const CommonFlags& f) {
  const auto given = [cmd](const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  drtune::ExperimentManifest m;
  if (!f.config.empty()) m = drtune::parse_manifest_file(f.config);
  if (given("--method")) m.train.method = drtune::method_from_name(f.method);
  if (given("--seed")) m.train.seed = f.seed;
  if (given("--k")) m.train.bank_size = f.k;
  if (given("--batch")) m.train.batch_size = f.batch;
  if (given("--epochs")) m.train.epochs = f.epochs;
  if (given("--lr")) m.train.lr_encoder = f.lr;
  if (given("--schedule")) m.train.schedule = drtune::schedule_from_name(f.schedule);
  if (given("--ablate-sc"))
    m.train.switches = drtune::CalibrationSwitches::from_tag(f.ablate);
  if (given("--out")) m.out_dir = f.out;
  if (given("--k-sweep"))
    m.k_sweep = drtune::detail::parse_size_list(f.k_sweep, "--k-sweep");
  if (given("--freeze-encoder")) m.train.freeze_encoder = true;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"drtune: fine-tuning with feature-bank distribution regularization"};
  app.require_subcommand(1);

  CommonFlags pre_flags, ft_flags;
  CLI::App* pre = app.add_subcommand("pretrain", "train a source encoder from scratch");
  add_common_flags(pre, pre_flags, false);
  CLI::App* ft = app.add_subcommand("finetune", "fine-tune from a pretrained encoder");
  add_common_flags(ft, ft_flags, true);

  drtune::cli::DiagnoseArgs diag;
  CLI::App* dg = app.add_subcommand("diagnose", "drift diagnostics from bank snapshots");
  dg->add_option("--bank-p", diag.bank_pretrained, "pretrained bank snapshot csv");
  dg->add_option("--bank-d", diag.bank_downstream, "downstream bank snapshot csv");
  dg->add_option("--run", diag.run_dir, "run directory holding bank snapshots");
  dg->add_option("--out", diag.out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const drtune::cli::RunContext ctx{DRTUNE_GIT_DESCRIBE};
  try {
    if (pre->parsed()) {
      const auto manifest = build_manifest(pre, pre_flags);
      const auto path = drtune::cli::cmd_pretrain(manifest, ctx);
      std::printf("pretrain: checkpoint written to %s\n", path.string().c_str());
    } else if (ft->parsed()) {
      const auto manifest = build_manifest(ft, ft_flags);
      const auto outcome = drtune::cli::cmd_finetune(manifest, ctx);
      if (!outcome.sweep.empty()) {
        for (const auto& row : outcome.sweep)
          std::printf("k=%zu final_test_acc=%.4f\n", row.k, row.accuracy);
      } else {
        const auto& last = outcome.report.epochs.back();
        std::printf("final_test_acc=%.4f best_test_acc=%.4f",
                    outcome.report.final_test_acc, outcome.report.best_test_acc);
        if (manifest.train.method == drtune::Method::drtune)
          std::printf(" mmd_raw=%.6f mmd_calibrated=%.6f",
                      std::max(0.0, last.mmd_raw), std::max(0.0, last.mmd_calibrated));
        std::printf(" out=%s\n", manifest.out_dir.c_str());
      }
    } else if (dg->parsed()) {
      drtune::cli::cmd_diagnose(diag);
      std::printf("diagnose: wrote diagnostics to %s\n", diag.out_dir.c_str());
    }
  } catch (const drtune::Error& e) {
    std::fprintf(stderr, "drtune: %s\n", e.what());
    return e.is_validation() ? 1 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "drtune: %s\n", e.what());
    return 2;
  }
  return 0;
}
