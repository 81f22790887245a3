#include "fundus/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/gradsuite.hpp"
#include "fundus/parallel.hpp"
#include "fundus/png_io.hpp"
#include "fundus/synth.hpp"
#include "fundus/train.hpp"

namespace fundus::cli {

namespace {

namespace fs = std::filesystem;

struct SynthOptions {
  std::string out;
  int n = 4;
  int size = 64;
  std::uint64_t seed = 1;
};

struct TrainOptions {
  std::string task;
  std::string data;
  std::string out;
  std::uint64_t seed = 1;
  int steps = 100;
  double lr = 1e-3;
  int batch = 8;
  int size = 64;
  std::string optimizer = "adam";
  int base_channels = 8;
  double depth_scale = 0.25;
  int augment_copies = 0;
  int checkpoint_every = 0;
  std::string resume;
};

struct EvalOptions {
  std::string model;
  std::string data;
  std::string out = ".";
  std::string task;
};

struct PredictOptions {
  std::string model;
  std::string data;
  std::string out;
};

struct GradcheckOptions {
  std::string ops = "all";
  int seeds = 5;
  std::uint64_t seed = 0;
  double step = gradsuite::kDefaultStep;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << text;
  if (!f) throw IoError(path.string() + ": write failed");
}

/// Resolved options of a subcommand as `key = value` lines, in the syntax
/// accepted by --config.
std::string resolved_config(const CLI::App& app) {
  std::string text = app.config_to_str(true, false);
  // CLI11 prefixes the subcommand section; keep the bare keys so the text
  // can be fed back through --config.
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '[') continue;
    if (line.rfind("config", 0) == 0) continue;
    out += line + "\n";
  }
  return out;
}

void print_config(const CLI::App& app, std::ostream& out) {
  out << "# " << app.get_name() << " configuration\n" << resolved_config(app);
}

int run_synth(const SynthOptions& o, const CLI::App& app, std::ostream& out) {
  print_config(app, out);
  synth::SynthParams p;
  p.size = o.size;
  p.seed = o.seed;
  const auto manifest = synth::generate_dataset(p, o.n, o.out);
  out << "wrote " << manifest.ids.size() << " samples to " << o.out << "\n";
  return kExitOk;
}

int run_train(const TrainOptions& o, const CLI::App& app, std::ostream& out) {
  print_config(app, out);
  train::TrainConfig cfg;
  cfg.task = nets::parse_task(o.task);
  cfg.seed = o.seed;
  cfg.steps = o.steps;
  cfg.lr = o.lr;
  cfg.batch_size = o.batch;
  cfg.optimizer = train::parse_optimizer(o.optimizer);
  cfg.net.input_size = o.size;
  cfg.net.base_channels = o.base_channels;
  cfg.net.depth_scale = o.depth_scale;
  cfg.net.seed = o.seed;
  cfg.augment.seed = o.seed;
  cfg.augment_copies = o.augment_copies;
  cfg.checkpoint_every = o.checkpoint_every;
  cfg.checkpoint_dir = fs::path(o.out) / "checkpoints";
  cfg.validate();

  auto data = synth::load_dataset(o.data);
  train::Trainer trainer(cfg, std::move(data));
  if (!o.resume.empty()) {
    trainer.load_checkpoint(o.resume);
    out << "resumed at step " << trainer.steps_taken() << "\n";
  }
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "config.toml", resolved_config(app));

  const int every = std::max(1, cfg.steps / 20);
  trainer.run([&](const train::StepInfo& s) {
    if (s.step % every == 0 || s.step == cfg.steps) {
      out << "step " << s.step << " loss " << fmt("%.6f", s.loss) << " grad_norm " << fmt("%.6f", s.grad_norm)
          << "\n";
    }
    return true;
  });

  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < trainer.history().size(); ++i)
    csv += std::to_string(i + 1) + "," + fmt("%.9g", trainer.history()[i]) + "\n";
  write_text(fs::path(o.out) / "loss_history.csv", csv);
  trainer.save_checkpoint(fs::path(o.out) / "model.fnkt");
  out << "saved " << (fs::path(o.out) / "model.fnkt").string() << "\n";
  return kExitOk;
}

NetworkGraph load_model(const std::string& path, const std::string& task_flag, nets::Task& task) {
  const train::Checkpoint ckpt = train::read_checkpoint(path);
  task = task_flag.empty() ? train::task_from(ckpt.meta) : nets::parse_task(task_flag);
  NetworkGraph net = nets::build_for_task(task, train::net_config_from(ckpt.meta));
  train::apply_tensors(net, ckpt);
  return net;
}

int run_eval(const EvalOptions& o, const CLI::App& app, std::ostream& out) {
  print_config(app, out);
  nets::Task task;
  const NetworkGraph net = load_model(o.model, o.task, task);
  const auto data = synth::load_dataset(o.data);
  if (data.empty()) throw ArgumentError(o.data + ": dataset has no samples");
  const auto report = train::evaluate(net, task, data);
  fs::create_directories(o.out);
  report.write(fs::path(o.out) / "report.txt");
  out << report.serialize();
  return kExitOk;
}

int run_predict(const PredictOptions& o, const CLI::App& app, std::ostream& out) {
  print_config(app, out);
  nets::Task task;
  const NetworkGraph net = load_model(o.model, "", task);
  const auto data = synth::load_dataset(o.data);
  if (data.empty()) throw ArgumentError(o.data + ": dataset has no samples");
  const auto outputs = train::predict_outputs(net, task, data);
  fs::create_directories(o.out);

  std::string csv;
  switch (task) {
    case nets::Task::Classify: csv = "id,prob_pathological,label\n"; break;
    case nets::Task::Fovea: csv = "id,fovea_x,fovea_y\n"; break;
    case nets::Task::Segment:
      csv = "id,disc_pixels\n";
      fs::create_directories(fs::path(o.out) / "masks");
      break;
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor& z = outputs[i];
    csv += data[i].id;
    if (task == nets::Task::Classify) {
      const double p1 = 1.0 / (1.0 + std::exp(static_cast<double>(z[0]) - z[1]));
      csv += "," + fmt("%.6f", p1) + "," + (z[1] > z[0] ? "1" : "0");
    } else if (task == nets::Task::Fovea) {
      csv += "," + fmt("%.6f", z[0]) + "," + fmt("%.6f", z[1]);
    } else {
      const std::size_t plane = z.size() / 2;
      Tensor mask({z.dim(1), z.dim(2)});
      std::size_t count = 0;
      for (std::size_t k = 0; k < plane; ++k) {
        mask[k] = z[plane + k] > z[k] ? 1.0f : 0.0f;
        count += mask[k] != 0.0f;
      }
      png::write_mask(fs::path(o.out) / "masks" / (data[i].id + ".png"), mask);
      csv += "," + std::to_string(count);
    }
    csv += "\n";
  }
  write_text(fs::path(o.out) / "predictions.csv", csv);
  out << "wrote predictions for " << data.size() << " samples to " << o.out << "\n";
  return kExitOk;
}

int run_gradcheck(const GradcheckOptions& o, const CLI::App& app, std::ostream& out) {
  print_config(app, out);
  std::vector<std::string> cases;
  if (o.ops == "all") {
    cases = gradsuite::all_cases();
  } else {
    const auto known = gradsuite::all_cases();
    std::istringstream in(o.ops);
    for (std::string name; std::getline(in, name, ',');) {
      if (std::find(known.begin(), known.end(), name) == known.end()) {
        throw ConfigError("unknown gradcheck case '" + name + "'");
      }
      cases.push_back(name);
    }
  }
  if (o.seeds < 1) throw ConfigError("--seeds must be >= 1");

  bool ok = true;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %-12s %s\n", "case", "max_rel_err", "status");
  out << line;
  for (const auto& name : cases) {
    double worst = 0.0;
    for (int s = 0; s < o.seeds; ++s) {
      worst = std::max(worst, gradsuite::run_case(name, o.seed + static_cast<std::uint64_t>(s), o.step).max_rel_error);
    }
    const bool pass = worst < gradsuite::kTolerance;
    ok = ok && pass;
    std::snprintf(line, sizeof line, "%-22s %-12.3e %s\n", name.c_str(), worst, pass ? "ok" : "FAIL");
    out << line;
  }
  return ok ? kExitOk : kExitRuntime;
}

bool given(const std::vector<std::string>& argv, const std::string& flag) {
  for (const auto& a : argv)
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  return false;
}

/// Splices the entries of a --config file into the argument list as flags,
/// skipping keys already given on the command line.
void expand_config(const CLI::App& app, std::vector<std::string>& argv) {
  std::size_t sub_pos = argv.size();
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < argv.size(); ++i) {
    if (argv[i].rfind("-", 0) == 0) continue;
    sub = app.get_subcommand_no_throw(argv[i]);
    sub_pos = i;
    break;
  }
  if (sub == nullptr) return;

  std::string path;
  for (std::size_t i = sub_pos + 1; i < argv.size(); ++i) {
    if (argv[i] == "--config" && i + 1 < argv.size()) path = argv[i + 1];
    if (argv[i].rfind("--config=", 0) == 0) path = argv[i].substr(9);
  }
  if (path.empty()) return;
  if (!fs::is_regular_file(path)) throw ConfigError("config file '" + path + "' not found");

  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(path);
  } catch (const CLI::ParseError& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  std::vector<std::string> extra;
  for (const auto& item : items) {
    const std::string key = item.fullname();
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!item.parents.empty() || opt == nullptr || key == "config") {
      throw ConfigError("config file '" + path + "': unknown key '" + key + "' for '" + sub->get_name() + "'");
    }
    if (given(argv, flag)) continue;
    if (opt->get_type_size() == 0) {
      const std::string v = item.inputs.empty() ? "true" : item.inputs.front();
      if (v == "true" || v == "1") {
        extra.push_back(flag);
      } else if (v != "false" && v != "0") {
        throw ConfigError("config file '" + path + "': '" + key + "' expects true or false");
      }
      continue;
    }
    if (item.inputs.size() != 1) throw ConfigError("config file '" + path + "': '" + key + "' expects one value");
    extra.push_back(flag);
    extra.push_back(item.inputs.front());
  }
  argv.insert(argv.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, extra.begin(), extra.end());
}

}  // namespace

int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fundus image analysis networks: synthetic data, training and evaluation.", "fundus-netkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "fundus-netkit 0.1.0");
  bool deterministic = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", "key = value file; command-line flags take precedence");
    sub->add_flag("--deterministic", deterministic, "single-threaded numerics");
  };

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic fundus dataset");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--n", so.n, "samples per class")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--size", so.size, "image side in pixels")->check(CLI::Range(16, 4096))->capture_default_str();
  synth->add_option("--seed", so.seed, "dataset seed")->capture_default_str();
  add_common(synth);

  TrainOptions to;
  auto* trn = app.add_subcommand("train", "train a network on a dataset");
  trn->add_option("--task", to.task, "classify|fovea|segment")
      ->required()
      ->check(CLI::IsMember({"classify", "fovea", "segment"}));
  trn->add_option("--data", to.data, "dataset directory")->required();
  trn->add_option("--out", to.out, "output directory")->required();
  trn->add_option("--seed", to.seed, "training and initialization seed")->capture_default_str();
  trn->add_option("--steps", to.steps, "total optimization steps")->capture_default_str();
  trn->add_option("--lr", to.lr, "learning rate")->capture_default_str();
  trn->add_option("--batch", to.batch, "batch size")->capture_default_str();
  trn->add_option("--size", to.size, "network input size")->capture_default_str();
  trn->add_option("--optimizer", to.optimizer, "adam|sgd-momentum")
      ->check(CLI::IsMember({"adam", "sgd-momentum"}))
      ->capture_default_str();
  trn->add_option("--base-channels", to.base_channels, "width of the first stage")->capture_default_str();
  trn->add_option("--depth-scale", to.depth_scale, "fraction of the reference depth")->capture_default_str();
  trn->add_option("--augment-copies", to.augment_copies, "augmented copies per training sample")
      ->capture_default_str();
  trn->add_option("--checkpoint-every", to.checkpoint_every, "checkpoint interval in steps (0 disables)")
      ->capture_default_str();
  trn->add_option("--resume", to.resume, "checkpoint to resume from");
  add_common(trn);

  EvalOptions eo;
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint and write report.txt");
  evl->add_option("--model", eo.model, "checkpoint file")->required();
  evl->add_option("--data", eo.data, "dataset directory")->required();
  evl->add_option("--out", eo.out, "directory for report.txt")->capture_default_str();
  evl->add_option("--task", eo.task, "override the task stored in the checkpoint")
      ->check(CLI::IsMember({"classify", "fovea", "segment"}));
  add_common(evl);

  PredictOptions po;
  auto* prd = app.add_subcommand("predict", "write per-sample predictions");
  prd->add_option("--model", po.model, "checkpoint file")->required();
  prd->add_option("--data", po.data, "dataset directory")->required();
  prd->add_option("--out", po.out, "output directory")->required();
  add_common(prd);

  GradcheckOptions go;
  auto* gck = app.add_subcommand("gradcheck", "finite-difference check of every operator and loss");
  gck->add_option("--ops", go.ops, "'all' or a comma-separated list of cases")->capture_default_str();
  gck->add_option("--seeds", go.seeds, "random instances per case")->capture_default_str();
  gck->add_option("--seed", go.seed, "first instance seed")->capture_default_str();
  gck->add_option("--step", go.step, "central-difference step")->capture_default_str();
  add_common(gck);

  std::vector<std::string> argv_rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  for (const auto& a : argv_rev) {
    if (a.rfind("-", 0) == 0) continue;
    if (app.get_subcommand_no_throw(a) == nullptr) {
      err << "unknown subcommand '" << a << "'\n" << app.help();
      return kExitUsage;
    }
    break;
  }
  try {
    expand_config(app, argv_rev);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::reverse(argv_rev.begin(), argv_rev.end());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    if (e.get_exit_code() != 0 && app.get_subcommands().empty()) err << app.help();
    return kExitUsage;
  }

  if (deterministic) set_num_threads(1);
  try {
    if (synth->parsed()) return run_synth(so, *synth, out);
    if (trn->parsed()) return run_train(to, *trn, out);
    if (evl->parsed()) return run_eval(eo, *evl, out);
    if (prd->parsed()) return run_predict(po, *prd, out);
    return run_gradcheck(go, *gck, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace fundus::cli
