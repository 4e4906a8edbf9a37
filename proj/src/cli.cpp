#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "advcomm/harness.hpp"
#include "advcomm/interpreter.hpp"

namespace advcomm::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string mean_pm(double m, double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f +- %.3f", m, s);
  return buf;
}

void write_text(const fs::path& path, const std::string& s) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << s;
}

std::vector<int> parse_steps(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-agent communication experiments: training, evaluation, interpretation, reporting"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train one phase, or the full experiment when --phase is omitted");
  std::string t_config, t_task, t_phase, t_prior, t_mode, t_out, t_label;
  std::vector<std::uint64_t> t_seeds;
  std::size_t t_steps = 0;
  bool t_resume = false;
  train->add_option("--config", t_config, "experiment config (JSON)")->check(CLI::ExistingFile);
  train->add_option("--task", t_task, "coverage | split_coverage | path_planning");
  train->add_option("--phase", t_phase, "cooperative | self_interested | readapt");
  train->add_option("--seed", t_seeds, "training seed(s)");
  train->add_option("--prior", t_prior, "checkpoint the phase starts from")->check(CLI::ExistingFile);
  train->add_option("--comm-mode", t_mode, "with_comms | no_comms | mask_si_outgoing");
  train->add_option("--steps", t_steps, "environment step budget for the phase");
  train->add_option("--out", t_out, "output checkpoint (single phase) or run directory");
  train->add_option("--label", t_label, "row label for the results table");
  train->add_flag("--resume", t_resume, "reuse finished checkpoints of the same configuration");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over fixed-length episodes");
  std::string e_ckpt, e_mode = "with_comms", e_out;
  std::size_t e_episodes = 100;
  int e_horizon = 0;
  std::uint64_t e_seed = 1000000;
  bool e_greedy = false;
  eval->add_option("--checkpoint", e_ckpt, "checkpoint path")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", e_episodes, "episode count");
  eval->add_option("--comm-mode", e_mode, "with_comms | no_comms | mask_si_outgoing");
  eval->add_option("--horizon", e_horizon, "episode length (default: the task's evaluation horizon)");
  eval->add_option("--seed", e_seed, "first episode seed");
  eval->add_flag("--greedy", e_greedy, "argmax actions instead of sampling");
  eval->add_option("--out", e_out, "write statistics as JSON");

  // interpret
  auto* interp = app.add_subcommand("interpret", "train a decoder on message encodings and report mAP");
  std::string i_ckpt, i_target = "first_message", i_out, i_grid;
  interpreter::CollectConfig i_collect;
  interpreter::DecoderConfig i_dec;
  i_collect.n_train = 5000;
  i_collect.n_val = 1000;
  i_collect.n_test = 500;
  interp->add_option("--checkpoint", i_ckpt, "checkpoint with the encoders to interpret")->required()->check(CLI::ExistingFile);
  interp->add_option("--target", i_target, "first_message | agnn_output_coverage");
  interp->add_option("--train", i_collect.n_train, "cooperative training pairs");
  interp->add_option("--val", i_collect.n_val, "cooperative validation pairs");
  interp->add_option("--test", i_collect.n_test, "cooperative test pairs");
  interp->add_option("--sample-prob", i_collect.sample_prob, "per-step sampling probability");
  interp->add_option("--seed", i_collect.seed, "sampling seed");
  interp->add_option("--epochs", i_dec.epochs, "decoder epochs");
  interp->add_option("--batch", i_dec.batch_size, "decoder batch size");
  interp->add_option("--lr", i_dec.lr, "decoder learning rate");
  interp->add_option("--channels", i_dec.channels, "decoder width");
  interp->add_option("--out", i_out, "output directory")->required();
  interp->add_option("--grid-steps", i_grid, "comma-separated steps for a reconstruction grid");

  // report
  auto* report = app.add_subcommand("report", "render the results table of a run");
  std::vector<std::string> r_dirs;
  std::string r_table;
  bool r_strict = false, r_json = false;
  report->add_option("--run-dir", r_dirs, "run directories (one table row each)")->check(CLI::ExistingDirectory);
  report->add_option("--table", r_table, "re-render a machine-readable table")->check(CLI::ExistingFile);
  report->add_flag("--strict", r_strict, "exit nonzero when a cell is missing");
  report->add_flag("--json", r_json, "print JSON instead of text");

  // plot
  auto* plot = app.add_subcommand("plot", "write SVG curves for a run or a single training log");
  std::string p_dir, p_log, p_out;
  plot->add_option("--run-dir", p_dir, "run directory")->check(CLI::ExistingDirectory);
  plot->add_option("--log", p_log, "metrics log (JSON lines)")->check(CLI::ExistingFile);
  plot->add_option("--out", p_out, "SVG path for --log");

  // selfcheck
  auto* self = app.add_subcommand("selfcheck", "gradient, equivalence, conservation and determinism suites");
  std::uint64_t s_seed = 7;
  self->add_option("--seed", s_seed, "seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code != 0) {
      const auto subs = app.get_subcommands();
      err << (subs.empty() ? app.help() : subs.front()->help());
    }
    return code;
  }

  try {
    if (*train) {
      ExperimentConfig cfg;
      if (!t_config.empty()) {
        cfg = load_config(t_config);
      } else if (!t_task.empty()) {
        cfg = ExperimentConfig::for_task(gridworld::task_from_string(t_task));
      } else {
        err << "train: need --config or --task\n" << train->help();
        return 2;
      }
      if (!t_task.empty() && gridworld::task_from_string(t_task) != cfg.env.task) {
        err << "train: --task " << t_task << " contradicts the config's task " << gridworld::to_string(cfg.env.task) << "\n";
        return 2;
      }
      if (!t_seeds.empty()) cfg.seeds = t_seeds;
      if (!t_label.empty()) cfg.label = t_label;

      if (t_phase.empty()) {
        if (!t_out.empty()) cfg.output_dir = t_out;
        auto res = run_experiment(cfg, [&](const std::string& s) { err << s << "\n"; }, t_resume);
        out << res.table.render();
        return 0;
      }

      const auto phase = trainer::phase_from_string(t_phase);
      trainer::PhaseSpec spec;
      spec.env = cfg.env;
      if (phase != Phase::cooperative) spec.env.si_agent = cfg.si_agent;
      spec.arch = cfg.arch;
      spec.trainer = cfg.trainer;
      spec.si_agent = static_cast<std::size_t>(cfg.si_agent);
      spec.mode = t_mode.empty() ? policy::CommMode::full : comm_mode_from_string(t_mode);
      spec.seed = cfg.seeds.front();
      if (t_steps) spec.steps = t_steps;
      std::optional<trainer::Checkpoint> prior;
      if (!t_prior.empty()) prior = trainer::load_checkpoint(t_prior);
      if (phase != Phase::cooperative && !prior) {
        err << "train: phase " << t_phase << " needs --prior\n";
        return 2;
      }
      const fs::path path = t_out.empty() ? default_output_root() / (cfg.row_label() + "-" + t_phase + "-s" +
                                                                     std::to_string(spec.seed) + ".ckpt")
                                          : fs::path(t_out);
      const std::string hash = config_hash(cfg);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      std::ofstream log(path.string() + ".jsonl");
      auto ck = trainer::run_phase(phase, spec, prior ? &*prior : nullptr, [&](const json& rec) {
        json r = rec;
        r["manifest"] = hash;
        log << r.dump() << "\n";
        log.flush();
        err << rec.value("phase", "") << " it " << rec.value("iteration", 0) << " steps " << rec.value("env_steps", 0)
            << " return " << rec.value("mean_return_coop", json(nullptr)).dump() << "\n";
      });
      ck.meta["manifest"] = hash;
      trainer::save_checkpoint(path, ck);
      out << "checkpoint " << path.string() << "\nmetrics " << path.string() << ".jsonl\n";
      return 0;
    }

    if (*eval) {
      const auto ck = trainer::load_checkpoint(e_ckpt);
      const int horizon = e_horizon > 0 ? e_horizon : gridworld::default_eval_horizon(ck.env);
      auto st = evaluate_checkpoint(ck, ck.env, comm_variant_from_string(e_mode), e_episodes, horizon, e_seed, e_greedy);
      st.manifest = ck.meta.value("manifest", std::string{});
      out << "episodes " << st.episodes << " horizon " << st.horizon << " mode " << to_string(st.variant) << "\n";
      out << "C  " << mean_pm(st.mean_coop, st.std_coop) << "\n";
      out << "SI " << (st.has_si ? mean_pm(st.mean_si, st.std_si) : std::string("N/A")) << "\n";
      if (!e_out.empty()) write_text(e_out, json(st).dump(2) + "\n");
      return 0;
    }

    if (*interp) {
      const auto ck = trainer::load_checkpoint(i_ckpt);
      i_collect.kind = interpreter::target_kind_from_string(i_target);
      const fs::path dir = i_out;
      err << "collecting samples\n";
      auto set = interpreter::collect_samples(ck, ck.env, i_collect);
      interpreter::save_samples(dir / "samples.advs", set);
      err << "training decoder\n";
      auto dec = interpreter::train_decoder(set, i_dec, [&](const interpreter::EpochRecord& r) {
        if (r.val_map) err << "epoch " << r.epoch << " loss " << r.train_loss << " val mAP " << *r.val_map << "\n";
      });
      interpreter::save_decoder(dir / "decoder.advc", dec);
      const auto rep = interpreter::evaluate_map(dec, set, interpreter::Split::test);
      json j{{"target", i_target},       {"map_coop", rep.map_coop}, {"map_si", rep.map_si},
             {"map_all", rep.map_all},   {"n_coop", rep.n_coop},     {"n_si", rep.n_si},
             {"skipped", rep.skipped},   {"best_epoch", dec.best_epoch}, {"best_val_map", dec.best_val_map},
             {"prevalence", interpreter::positive_prevalence(set, interpreter::Split::test)},
             {"manifest", ck.meta.value("manifest", std::string{})}};
      write_text(dir / "map.json", j.dump(2) + "\n");
      out << "test mAP cooperative " << rep.map_coop << " (" << rep.n_coop << ")\n";
      out << "test mAP self-interested " << (rep.n_si ? std::to_string(rep.map_si) : std::string("N/A")) << " (" << rep.n_si
          << ")\n";
      if (!i_grid.empty()) {
        const auto steps = parse_steps(i_grid);
        interpreter::reconstruct_grid(dec, ck, ck.env, i_collect.kind, i_collect.seed, steps, dir / "grid.png", 8,
                                      "manifest " + ck.meta.value("manifest", std::string{}));
        out << "grid " << (dir / "grid.png").string() << "\n";
      }
      return 0;
    }

    if (*report) {
      ResultsTable table;
      if (!r_table.empty()) {
        std::ifstream in(r_table);
        json j;
        in >> j;
        table = j.get<ResultsTable>();
      } else if (!r_dirs.empty()) {
        for (const auto& d : r_dirs) {
          auto t = table_from_run(d);
          for (const auto& row : t.rows) {
            table.rows.push_back(row);
            table.cells[row] = t.cells.at(row);
          }
          table.manifest += (table.manifest.empty() ? "" : ",") + t.manifest;
        }
        if (r_dirs.size() == 1) {
          write_text(fs::path(r_dirs[0]) / "table.txt", table.render());
          write_text(fs::path(r_dirs[0]) / "table.json", json(table).dump(2) + "\n");
        }
      } else {
        err << "report: need --run-dir or --table\n" << report->help();
        return 2;
      }
      out << (r_json ? json(table).dump(2) + "\n" : table.render());
      if (r_strict && !table.complete()) {
        err << "report: missing cells\n";
        return 3;
      }
      return 0;
    }

    if (*plot) {
      if (!p_dir.empty()) {
        for (const auto& w : emit_plots(p_dir)) err << "warning: " << w << "\n";
        out << "plots " << (fs::path(p_dir) / "plots").string() << "\n";
        return 0;
      }
      if (!p_log.empty()) {
        auto recs = read_jsonl(p_log);
        if (recs.empty()) err << "warning: " << p_log << " is empty\n";
        std::vector<std::vector<json>> phases;
        for (const auto& r : recs) {
          if (phases.empty() || phases.back().front().value("phase", "") != r.value("phase", "")) phases.emplace_back();
          phases.back().push_back(r);
        }
        const std::string manifest = recs.empty() ? "" : recs.front().value("manifest", std::string{});
        const fs::path dst = p_out.empty() ? fs::path(p_log).replace_extension(".svg") : fs::path(p_out);
        write_svg(dst, training_plot(phases, manifest));
        out << "plot " << dst.string() << "\n";
        return 0;
      }
      err << "plot: need --run-dir or --log\n" << plot->help();
      return 2;
    }

    if (*self) {
      bool ok = true;
      for (const auto& r : run_selfcheck(s_seed)) {
        out << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        ok = ok && r.pass;
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace advcomm::harness
