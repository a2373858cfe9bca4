#include <tubedpc/app.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace tubedpc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config (plant, weather, data, training, certification, run)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed for this command's randomness");
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tube-guaranteed differentiable predictive control for building HVAC"};
  app.require_subcommand(1);

  Common gen_c;
  std::string gen_out;
  std::optional<double> gen_days;
  auto* gen = app.add_subcommand("generate-data", "Simulate the RC plant under random setpoint excitation");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "Dataset CSV")->required();
  gen->add_option("--days", gen_days, "Override data.days");

  Common train_c;
  std::string variant, train_out, train_data, train_log;
  auto* tr = app.add_subcommand("train", "Train a controller variant");
  add_common(tr, train_c);
  tr->add_option("--variant", variant, "dpc-c, e2e or e2e-g")->required()->check(CLI::IsMember({"dpc-c", "e2e", "e2e-g"}));
  tr->add_option("--out", train_out, "Checkpoint path")->required();
  tr->add_option("--data", train_data, "Dataset CSV (generated from the config when omitted)")->check(CLI::ExistingFile);
  tr->add_option("--log", train_log, "Training log, one JSON record per line (default <out>.jsonl)");

  Common cert_c;
  std::string cert_ckpt, cert_report;
  std::optional<std::size_t> m_val;
  std::optional<double> delta, mu_bound;
  auto* cert = app.add_subcommand("certify", "Probabilistic constraint-satisfaction certificate");
  add_common(cert, cert_c);
  cert->add_option("--checkpoint", cert_ckpt)->required()->check(CLI::ExistingFile);
  cert->add_option("--m-val", m_val, "Number of virtual rollouts");
  cert->add_option("--delta", delta, "Confidence parameter");
  cert->add_option("--mu-bound", mu_bound, "Required worst-case satisfaction rate");
  cert->add_option("--report", cert_report, "Report JSON")->required();

  Common run_c;
  std::string run_ckpt, run_out, run_thermostat_name;
  std::optional<double> run_thermostat;
  bool run_online = false;
  auto* run = app.add_subcommand("run", "Deploy a checkpoint on the plant");
  add_common(run, run_c);
  auto* run_ck_opt = run->add_option("--checkpoint", run_ckpt)->check(CLI::ExistingFile);
  run->add_option("--thermostat", run_thermostat, "Fixed setpoint instead of a checkpoint")->excludes(run_ck_opt);
  run->add_option("--out", run_out, "Output directory")->required();
  run->add_flag("--online-tightening", run_online, "Recompute the tightening schedule from deployment-time Jacobians");

  Common cmp_c;
  std::string cmp_dpcc, cmp_e2e, cmp_e2eg, cmp_out;
  auto* cmp = app.add_subcommand("compare", "Deploy all three variants on identical plant and weather");
  add_common(cmp, cmp_c);
  cmp->add_option("--dpc-c", cmp_dpcc)->required()->check(CLI::ExistingFile);
  cmp->add_option("--e2e", cmp_e2e)->required()->check(CLI::ExistingFile);
  cmp->add_option("--e2e-g", cmp_e2eg)->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", cmp_out, "Output directory")->required();

  Common rep_c;
  std::string rep_dir, rep_variant = "unknown";
  auto* rep = app.add_subcommand("report", "Recompute the summary of a run directory from its CSV traces");
  add_common(rep, rep_c);
  rep->add_option("--run-dir", rep_dir)->required()->check(CLI::ExistingDirectory);
  rep->add_option("--variant", rep_variant);

  Common ins_c;
  std::string ins_ckpt, ins_out;
  auto* tube = app.add_subcommand("tube", "Tube certificate tools");
  tube->require_subcommand(1);
  auto* ins = tube->add_subcommand("inspect", "Dump P, K, rho, schedule and bounds as JSON");
  add_common(ins, ins_c);
  ins->add_option("--checkpoint", ins_ckpt)->required()->check(CLI::ExistingFile);
  ins->add_option("--out", ins_out, "Certificate JSON (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto a = load_app_config(gen_c.config);
      if (gen_days) a.data.days = *gen_days;
      auto d = generate_data(a, gen_c.seed.value_or(a.data.seed));
      write_dataset_csv(gen_out, d);
      std::cout << "wrote " << d.rows.size() << " rows to " << gen_out << '\n';
    } else if (*tr) {
      auto a = load_app_config(train_c.config);
      auto d = train_data.empty() ? generate_data(a, a.data.seed) : read_dataset_csv(train_data);
      std::ofstream log_os(train_log.empty() ? train_out + ".jsonl" : train_log);
      if (!log_os) throw std::runtime_error("cannot open training log");
      EventLog log(&log_os);
      auto r = train(parse_variant(variant), a, d, train_c.seed.value_or(a.training.seed), &log);
      save_checkpoint(train_out, r.checkpoint);
      print_json({{"variant", variant}, {"checkpoint", train_out}, {"best_val_composite", r.best_val},
                  {"warm_start_epochs", r.warm.epochs}, {"joint_epochs", r.joint_epochs},
                  {"certificate_reuses", r.certificate_reuses}});
    } else if (*cert) {
      auto a = load_app_config(cert_c.config);
      auto cfg = a.certification;
      if (m_val) cfg.m_val = *m_val;
      if (delta) cfg.delta = *delta;
      if (mu_bound) cfg.mu_bound = *mu_bound;
      cfg.validate();
      auto r = certify_checkpoint(load_checkpoint(cert_ckpt), cfg, cert_c.seed.value_or(a.certification_seed));
      write_json(cert_report, to_json(r));
      print_json({{"mu_tilde", r.mu_tilde}, {"mu_wc", r.mu_wc}, {"pass", r.pass}, {"diverged", r.diverged}});
      return r.pass ? 0 : 3;
    } else if (*run) {
      auto a = load_app_config(run_c.config);
      auto rc = a.run;
      if (run_c.seed) rc.noise_seed = *run_c.seed;
      rc.online_tightening = rc.online_tightening || run_online;
      std::filesystem::create_directories(run_out);
      Trace t;
      std::string name;
      if (run_thermostat) {
        t = deploy(thermostat_controller(*run_thermostat, rc.plant.n_thermostats), rc, a.training.horizon);
        name = "thermostat";
      } else if (!run_ckpt.empty()) {
        auto c = load_checkpoint(run_ckpt);
        t = deploy(policy_controller(c, rc.online_tightening), rc, c.meta.at("horizon").get<std::size_t>());
        name = c.variant;
      } else {
        throw std::invalid_argument("run needs --checkpoint or --thermostat");
      }
      print_json(report(run_out, name, t, rc));
    } else if (*cmp) {
      auto a = load_app_config(cmp_c.config);
      auto rc = a.run;
      if (cmp_c.seed) rc.noise_seed = *cmp_c.seed;
      std::filesystem::create_directories(cmp_out);
      std::vector<Trace> traces;
      auto rows = compare_variants({{"dpc-c", load_checkpoint(cmp_dpcc)}, {"e2e", load_checkpoint(cmp_e2e)},
                                    {"e2e-g", load_checkpoint(cmp_e2eg)}},
                                   rc, &traces);
      for (std::size_t i = 0; i < rows.size(); ++i) report(cmp_out + "/" + rows[i].variant, rows[i].variant, traces[i], rc);
      write_comparison(cmp_out + "/comparison.csv", cmp_out + "/comparison.json", rows);
      print_json(read_json(cmp_out + "/comparison.json"));
    } else if (*rep) {
      auto a = load_app_config(rep_c.config);
      auto t = read_trace_csv(rep_dir + "/temperature.csv", rep_dir + "/power.csv", a.run.dt_hours());
      auto s = summary_json(rep_variant, t, a.run);
      write_json(rep_dir + "/summary.json", s);
      print_json(s);
    } else if (*ins) {
      auto a = load_app_config(ins_c.config);
      auto j = tube_inspect(load_checkpoint(ins_ckpt), a, ins_c.seed.value_or(a.certification_seed));
      if (ins_out.empty())
        print_json(j);
      else
        write_json(ins_out, j);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
