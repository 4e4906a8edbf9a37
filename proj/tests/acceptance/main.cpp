#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "acceptance.hpp"

#ifndef ADVCOMM_SOURCE_DIR
#define ADVCOMM_SOURCE_DIR "."
#endif

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string suite = "all";
  std::vector<std::string> only;
  acceptance::DeskOptions desk;
  desk.config_dir = std::filesystem::path(ADVCOMM_SOURCE_DIR) / "configs";
  const char* env_out = std::getenv("ADVCOMM_DESK_OUT");
  desk.output_root = env_out ? env_out : "desk";
  bool quiet = false;
  app.add_option("--suite", suite, "exact, desk or all")->check(CLI::IsMember({"exact", "desk", "all"}));
  app.add_option("--only", only, "criterion ids to run, e.g. P4 P12");
  app.add_option("--configs", desk.config_dir, "directory holding the desk experiment configs");
  app.add_option("--out", desk.output_root, "root for desk experiment runs (resumed when present)");
  app.add_flag("--quiet", quiet, "no progress on stderr");
  CLI11_PARSE(app, argc, argv);
  desk.verbose = !quiet;

  std::vector<acceptance::Criterion> all;
  if (suite != "desk")
    for (auto& c : acceptance::exact_criteria()) all.push_back(std::move(c));
  if (suite != "exact")
    for (auto& c : acceptance::desk_criteria(desk)) all.push_back(std::move(c));
  const std::set<std::string> wanted(only.begin(), only.end());

  std::size_t failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    acceptance::Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %s  [%7.1fs]  %s: %s\n", c.id.c_str(), o.pass ? "PASS" : "FAIL", secs, c.title.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
    ++ran;
  }
  if (ran == 0) {
    std::cerr << "no criteria selected\n";
    return 2;
  }
  return failed ? 1 : 0;
}
