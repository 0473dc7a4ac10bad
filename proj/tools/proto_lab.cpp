#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  for (std::size_t p = 0; (p = s.find('"', p)) != std::string::npos; p += 2) s.replace(p, 1, "\\\"");
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace protolab;
  if (argc < 2 || std::find(cli::kCommands.begin(), cli::kCommands.end(), std::string(argv[1])) == cli::kCommands.end()) {
    std::cerr << cli::usage();
    return 2;
  }
  const std::string command = argv[1];

  CLI::App app{"proto-lab"};
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--seed", seed, "seed override");
  try {
    app.parse(argc - 1, argv + 1);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage message=\"" << one_line(e.what()) << "\"\n" << cli::usage();
    return 2;
  }

  try {
    std::ifstream in(config_path);
    nlohmann::json cfg = nlohmann::json::parse(in);
    if (seed) cfg["seed"] = *seed;
    cli::run_command(command, cfg, out_dir);
  } catch (const Error& e) {
    std::cerr << "error kind=" << e.kind() << " message=\"" << one_line(e.what()) << "\"\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error kind=config message=\"" << one_line(e.what()) << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal message=\"" << one_line(e.what()) << "\"\n";
    return 1;
  }
  return 0;
}
