// Command-line front end: run, ablate, metrics, gen-blobs.
#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/errors.hpp"
#include "fscil/metrics.hpp"
#include "fscil/protocol.hpp"

namespace {

enum Exit : int { ok = 0, failure = 1, usage = 2, format = 3, contract = 4, numeric = 5, domain = 6 };

fscil::RunConfig resolve_config(const std::string& config, const std::string& profile) {
  if (!config.empty()) return fscil::load_config(config);
  return fscil::profile_by_name(profile);
}

void print_metrics(const fscil::Metrics& m) {
  std::cout << std::fixed << std::setprecision(2) << "session accuracy:";
  for (double a : m.session_accuracy) std::cout << ' ' << a;
  std::cout << "\naverage accuracy: " << m.average_accuracy << "\nforgetting: " << m.forgetting
            << "\nmacro F1: " << std::setprecision(4) << m.macro_f1 << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot class-incremental learning runner"};
  app.require_subcommand(1);

  std::string config, profile = "desk", out, run_dir;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::vector<std::string> toggles;

  auto* run = app.add_subcommand("run", "run the full protocol and persist the record");
  run->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  run->add_option("--profile", profile, "base profile when no config file is given (desk|full)");
  run->add_option("--seed", seed, "run seed");
  run->add_option("--seeds", seeds, "number of consecutive seeds to aggregate");
  run->add_option("--out", out, "output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "rerun with components disabled and print a table");
  ablate->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  ablate->add_option("--profile", profile, "base profile when no config file is given (desk|full)");
  ablate->add_option("--seed", seed, "run seed");
  ablate->add_option("--without", toggles, "ssl|prediction_net|stochastic_head|delta_params")->required();

  auto* metrics = app.add_subcommand("metrics", "recompute metrics from a run directory");
  metrics->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  fscil::BlobSpec blob;
  std::size_t test_per_class = 0;
  auto* gen = app.add_subcommand("gen-blobs", "write a synthetic Gaussian-cluster dataset as IDX files");
  gen->add_option("--classes", blob.classes)->required();
  gen->add_option("--dim", blob.dim)->required();
  gen->add_option("--shots", blob.train_per_class, "training samples per class")->required();
  gen->add_option("--test", test_per_class, "test samples per class (default: same as --shots)");
  gen->add_option("--separation", blob.separation);
  gen->add_option("--seed", blob.seed);
  gen->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*run) {
      const fscil::RunConfig cfg = resolve_config(config, profile);
      if (seeds <= 1) {
        const fscil::RunRecord rec = fscil::run_config(cfg, seed);
        fscil::write_run(rec, out);
        print_metrics(rec.metrics);
        std::cout << "record hash: " << std::hex << rec.hash() << std::dec << '\n';
      } else {
        const fscil::SeedSummary s = fscil::run_seeds(cfg, seeds, seed);
        for (const auto& rec : s.runs) {
          fscil::write_run(rec, std::filesystem::path(out) / ("seed_" + std::to_string(rec.seed)));
        }
        std::cout << std::fixed << std::setprecision(2) << "average accuracy: " << s.average_accuracy.mean
                  << " +- " << s.average_accuracy.std << "\nforgetting: " << s.forgetting.mean << " +- "
                  << s.forgetting.std << "\nmacro F1: " << std::setprecision(4) << s.macro_f1.mean << " +- "
                  << s.macro_f1.std << '\n';
      }
    } else if (*ablate) {
      const fscil::RunConfig cfg = resolve_config(config, profile);
      std::cout << fscil::run_ablation(cfg, toggles, seed).table();
    } else if (*metrics) {
      print_metrics(fscil::read_run_metrics(run_dir));
    } else if (*gen) {
      blob.test_per_class = test_per_class ? test_per_class : blob.train_per_class;
      const fscil::Blobs b = fscil::generate_blobs(blob);
      const std::filesystem::path dir(out);
      std::filesystem::create_directories(dir);
      fscil::save_idx_images(b.train, dir / "train-images.idx", dir / "train-labels.idx");
      fscil::save_idx_images(b.test, dir / "test-images.idx", dir / "test-labels.idx");
      std::cout << "bayes accuracy estimate: " << b.bayes_accuracy << '\n';
    }
  } catch (const fscil::ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << '\n';
    return usage;
  } catch (const fscil::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return usage;
  } catch (const fscil::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return format;
  } catch (const fscil::ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return contract;
  } catch (const fscil::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return numeric;
  } catch (const fscil::DomainError& e) {
    std::cerr << "domain error: " << e.what() << '\n';
    return domain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
  return ok;
}
