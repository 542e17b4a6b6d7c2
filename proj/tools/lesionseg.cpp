#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lesionseg/data.hpp"
#include "lesionseg/image_io.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/trainer.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace lesionseg;

namespace {

std::string sanitize(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == '#' || c == '|' || c == ' ') c = '_';
  return out;
}

void write_samples(const std::vector<Sample>& samples, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "labels");
  for (const auto& s : samples) {
    std::string stem = sanitize(s.source_id);
    save_image((fs::path(out_dir) / "images" / (stem + ".png")).string(), s.image);
    save_label((fs::path(out_dir) / "labels" / (stem + ".png")).string(), s.label);
  }
}

// optional run-configuration file, key=value per line; applied after flag parsing
void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file " + path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config file: bad line '" + line + "'");
    std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "arch") cfg.arch = v;
    else if (k == "data") cfg.data_root = v;
    else if (k == "seed") cfg.seed = std::stoull(v);
    else if (k == "epochs" || k == "max_epochs") cfg.max_epochs = std::stoi(v);
    else if (k == "batch" || k == "batch_size") cfg.batch_size = std::stoi(v);
    else if (k == "lr" || k == "learning_rate") cfg.learning_rate = std::stod(v);
    else if (k == "momentum") cfg.momentum = std::stod(v);
    else if (k == "l2") cfg.l2_lambda = std::stod(v);
    else if (k == "l1") cfg.l1_lambda = std::stod(v);
    else if (k == "patience") cfg.patience = std::stoi(v);
    else if (k == "lr_decay") cfg.lr_decay = std::stod(v);
    else if (k == "augment") cfg.augment = v != "0" && v != "false";
    else if (k == "init") cfg.init_policy = v;
    else if (k == "out") cfg.out_dir = v;
    else if (k == "test_fraction") cfg.test_fraction = std::stod(v);
    else if (k == "val_fraction") cfg.val_fraction = std::stod(v);
    else throw ConfigError("config file: unknown key '" + k + "'");
  }
}

int run_report(const std::vector<std::string>& runs, const std::string& out) {
  std::ofstream os(out);
  if (!os) throw IoError("cannot write " + out);
  os << "run,epoch,val_metric,acc_skin,acc_lesion,iou_skin,iou_lesion,bf1_skin,bf1_lesion\n";
  for (const auto& dir : runs) {
    std::ifstream is(fs::path(dir) / "valmetrics.csv");
    if (!is) throw IoError("run directory " + dir + " has no valmetrics.csv");
    std::string line;
    std::getline(is, line);  // header
    std::string name = fs::path(dir).filename().string();
    if (name.empty()) name = dir;
    while (std::getline(is, line))
      if (!line.empty()) os << name << ',' << line << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("LESIONSEG_THREADS"))
    openblas_set_num_threads(std::max(1, std::atoi(t)));

  CLI::App app{"skin lesion semantic segmentation toolkit"};
  app.require_subcommand(1);

  // train
  RunConfig cfg;
  std::string init_flag = "scratch", config_file;
  bool no_augment = false;
  auto* train_cmd = app.add_subcommand("train", "train a network");
  train_cmd->add_option("--arch", cfg.arch, "preset: sgn1..sgn6, fcn8, fcn16, fcn32, vgg16, vgg19, sgnvgg16")
      ->default_val("sgn3");
  train_cmd->add_option("--data", cfg.data_root, "dataset root with images/ and labels/");
  train_cmd->add_option("--seed", cfg.seed, "run seed")->default_val(1);
  train_cmd->add_option("--epochs", cfg.max_epochs, "maximum epochs")->default_val(100);
  train_cmd->add_option("--patience", cfg.patience, "validation patience in epochs")->default_val(10);
  train_cmd->add_option("--lr", cfg.learning_rate, "learning rate")->default_val(0.003);
  train_cmd->add_option("--momentum", cfg.momentum, "momentum")->default_val(0.9);
  train_cmd->add_option("--l2", cfg.l2_lambda, "l2 penalty")->default_val(0.0005);
  train_cmd->add_option("--l1", cfg.l1_lambda, "l1 penalty")->default_val(0.0);
  train_cmd->add_option("--batch", cfg.batch_size, "mini-batch size")->default_val(1);
  train_cmd->add_option("--lr-decay", cfg.lr_decay, "per-epoch learning rate multiplier")
      ->default_val(1.0);
  train_cmd->add_option("--init", init_flag, "scratch or transfer:PATH")->default_val("scratch");
  train_cmd->add_option("--test-fraction", cfg.test_fraction, "hold-out fraction")->default_val(0.3);
  train_cmd->add_option("--val-fraction", cfg.val_fraction,
                        "validation fraction carved from the training split (0 = validate on test)")
      ->default_val(0.0);
  train_cmd->add_flag("--no-augment", no_augment, "disable on-the-fly augmentation");
  train_cmd->add_option("--config", config_file, "run-configuration file (key=value lines)");
  train_cmd->add_option("--out", cfg.out_dir, "run output directory")->required();

  // eval
  std::string eval_ckpt, eval_data, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset root")->required();
  eval_cmd->add_option("--out", eval_out, "metrics CSV path")->required();

  // predict
  std::string pr_ckpt, pr_image, pr_out;
  auto* pred_cmd = app.add_subcommand("predict", "segment a single image");
  pred_cmd->add_option("--ckpt", pr_ckpt, "checkpoint file")->required();
  pred_cmd->add_option("--image", pr_image, "input image")->required();
  pred_cmd->add_option("--out", pr_out, "output directory")->required();

  // augment
  std::string au_data, au_recipe = "crop", au_out;
  std::uint64_t au_seed = 1;
  int au_crops = 10;
  auto* aug_cmd = app.add_subcommand("augment", "materialize an augmented dataset");
  aug_cmd->add_option("--data", au_data, "dataset root")->required();
  aug_cmd->add_option("--recipe", au_recipe, "crop (sampled crops) or full (filters + noise)")
      ->check(CLI::IsMember({"crop", "full"}));
  aug_cmd->add_option("--crops", au_crops, "crops per source for the crop recipe")->default_val(10);
  aug_cmd->add_option("--seed", au_seed, "seed")->default_val(1);
  aug_cmd->add_option("--out", au_out, "output dataset root")->required();

  // synth
  int sy_n = 8;
  std::string sy_size = "96x96", sy_out;
  std::uint64_t sy_seed = 1;
  auto* synth_cmd = app.add_subcommand("synth", "generate synthetic image/label pairs");
  synth_cmd->add_option("--n", sy_n, "number of samples")->default_val(8);
  synth_cmd->add_option("--size", sy_size, "HxW, e.g. 96x96")->default_val("96x96");
  synth_cmd->add_option("--seed", sy_seed, "seed")->default_val(1);
  synth_cmd->add_option("--out", sy_out, "output dataset root")->required();

  // report
  std::vector<std::string> rp_runs;
  std::string rp_out;
  auto* report_cmd = app.add_subcommand("report", "merge run valmetrics into one comparison CSV");
  report_cmd->add_option("--runs", rp_runs, "run directories")->required()->expected(-1);
  report_cmd->add_option("--out", rp_out, "comparison CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      if (!config_file.empty()) apply_config_file(cfg, config_file);
      if (no_augment) cfg.augment = false;
      if (init_flag.rfind("transfer:", 0) == 0) {
        cfg.init_policy = "transfer";
        cfg.donor_path = init_flag.substr(9);
      } else if (init_flag == "scratch") {
        cfg.init_policy = "scratch";
      } else {
        std::cerr << "error: --init must be scratch or transfer:PATH\n";
        return 1;
      }
      RunLog log = train(cfg);
      std::cout << "stop: " << log.stop_reason << "\nbest epoch " << log.best_epoch
                << ", metric " << log.best_metric << "\n";
    } else if (*eval_cmd) {
      Checkpoint ckpt = load_checkpoint(eval_ckpt);
      DatasetSplit ds = load_dataset(eval_data, 0.0, 1);
      std::vector<Sample> all = std::move(ds.train);
      all.insert(all.end(), std::make_move_iterator(ds.test.begin()),
                 std::make_move_iterator(ds.test.end()));
      if (all.empty()) throw IoError("no samples under " + eval_data);
      MetricsReport rep = evaluate(ckpt, all);
      std::ofstream os(eval_out);
      if (!os) throw IoError("cannot write " + eval_out);
      write_metrics_csv(rep, os);
      std::cout << "wrote " << eval_out << " (" << all.size() << " samples)\n";
    } else if (*pred_cmd) {
      Checkpoint ckpt = load_checkpoint(pr_ckpt);
      predict(ckpt, pr_image, pr_out);
      std::cout << "wrote label and overlay into " << pr_out << "\n";
    } else if (*aug_cmd) {
      DatasetSplit ds = load_dataset(au_data, 0.0, au_seed);
      std::vector<Sample> all = std::move(ds.train);
      all.insert(all.end(), std::make_move_iterator(ds.test.begin()),
                 std::make_move_iterator(ds.test.end()));
      if (all.empty()) throw IoError("no samples under " + au_data);
      Rng rng(au_seed);
      std::vector<Sample> out;
      if (au_recipe == "crop") {
        out = crop_protocol(all, {}, au_crops, 0.02, rng);
      } else {
        AugmentConfig acfg;
        acfg.noise_recipes = paper_noise_recipes();
        out = expand_augmented(all, acfg, rng);
      }
      write_samples(out, au_out);
      std::cout << out.size() << " samples written to " << au_out << "\n";
    } else if (*synth_cmd) {
      auto x = sy_size.find('x');
      if (x == std::string::npos) {
        std::cerr << "error: --size must look like 96x96\n";
        return 1;
      }
      int h = std::stoi(sy_size.substr(0, x)), w = std::stoi(sy_size.substr(x + 1));
      Rng rng(sy_seed);
      write_samples(synth_lesion(sy_n, h, w, rng), sy_out);
      std::cout << sy_n << " samples written to " << sy_out << "\n";
    } else if (*report_cmd) {
      run_report(rp_runs, rp_out);
      std::cout << "wrote " << rp_out << "\n";
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
