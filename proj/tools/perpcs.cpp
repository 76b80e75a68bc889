#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "perpcs/bench.hpp"
#include "perpcs/binary_io.hpp"

namespace {

using namespace perpcs;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out_dir;
  bool force = false;
};

RunConfig resolve_config(const Flags& f) {
  const std::filesystem::path file(f.config);
  RunConfig cfg = load_run_config(f.config.empty() ? nullptr : &file, perpcs_environment());
  if (f.seed) cfg.seed = *f.seed;
  if (f.workers) cfg.workers = *f.workers;
  if (f.out_dir) cfg.out_dir = *f.out_dir;
  cfg.finalize();
  cfg.validate();
  return cfg;
}

void inspect_recipe(const RunConfig& cfg, std::uint32_t target, std::ostream& out) {
  ArtifactManifest manifest(cfg.out_dir);
  const auto recipe = load_recipe(manifest.verify("recipe/" + std::to_string(target)));
  const auto pool = load_pool(manifest.verify("pool"));
  recipe.validate(pool);

  std::map<std::uint32_t, int> prototype;
  if (manifest.find("prototypes")) {
    const auto j = nlohmann::json::parse(read_file_text(manifest.verify("prototypes")));
    for (const auto& u : j.at("users")) prototype[u.at("user").get<std::uint32_t>()] = u.at("prototype").get<int>();
  }
  const auto proto_of = [&](std::uint32_t id) {
    auto it = prototype.find(id);
    return it == prototype.end() ? std::string("?") : std::to_string(it->second);
  };

  out << "recipe for target " << recipe.target << " (prototype " << proto_of(recipe.target) << "), pool "
      << recipe.pool_hash.substr(0, 16) << "\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-5s %-6s %-5s %-8s %-10s %s\n", "slot", "layer", "role", "sharer", "weight",
                "prototype");
  out << line;
  std::map<std::string, double> mass;
  for (std::size_t l = 0; l < recipe.slots.size(); ++l) {
    const auto& s = pool.slots()[l];
    for (const auto& e : recipe.slots[l]) {
      std::snprintf(line, sizeof line, "%-5zu %-6d %-5s %-8u %-10.6f %s\n", l, s.layer, to_string(s.role).c_str(),
                    e.sharer, static_cast<double>(e.weight), proto_of(e.sharer).c_str());
      out << line;
      mass[proto_of(e.sharer)] += e.weight / static_cast<double>(recipe.slots.size());
    }
  }
  out << "weight by sharer prototype:";
  for (const auto& [p, w] : mass) {
    std::snprintf(line, sizeof line, " %s=%.3f", p.c_str(), w);
    out << line;
  }
  out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized adapter assembly from shared pieces"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "run seed");
  app.add_option("--workers", flags.workers, "worker threads for per-user work")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", flags.out_dir, "run directory");
  app.add_flag("--force", flags.force, "redo stages whose outputs are up to date");

  const std::vector<std::pair<std::string, void (Runner::*)()>> stages{
      {"gen-data", &Runner::gen_data},         {"adapt-base", &Runner::adapt_base},
      {"train-sharers", &Runner::train_sharers}, {"train-gates", &Runner::train_gates},
      {"build-pool", &Runner::build_pool},     {"assemble", &Runner::assemble},
      {"evaluate", &Runner::evaluate},         {"sweep", &Runner::sweep},
      {"bench", &Runner::bench},               {"run-all", &Runner::run_all}};
  std::map<CLI::App*, void (Runner::*)()> handlers;
  for (const auto& [name, fn] : stages) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->fallthrough();
    handlers[sub] = fn;
  }
  std::uint32_t target = 0;
  auto* inspect = app.add_subcommand("inspect-recipe", "print a target's per-slot (sharer, weight) table");
  inspect->fallthrough();
  inspect->add_option("--user", target, "target user id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig cfg = resolve_config(flags);
    if (inspect->parsed()) {
      inspect_recipe(cfg, target, std::cout);
      return kExitOk;
    }
    Runner runner(cfg, flags.force, std::cerr);
    for (const auto& [sub, fn] : handlers)
      if (sub->parsed()) (runner.*fn)();
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
