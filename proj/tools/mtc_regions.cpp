// mtc-regions: command surface for the region-embedding pipeline.

#include "mtcr/io.hpp"
#include "mtcr/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

std::string quoted(std::string s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return "\"" + out + "\"";
}

int exit_code_for(mtcr::ErrorCode code) {
  switch (code) {
    case mtcr::ErrorCode::Config:
    case mtcr::ErrorCode::InvalidArgument: return 2;
    case mtcr::ErrorCode::Dependency: return 3;
    case mtcr::ErrorCode::Data:
    case mtcr::ErrorCode::Io:
    case mtcr::ErrorCode::Geometry: return 4;
    case mtcr::ErrorCode::Divergence: return 5;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Urban region embeddings from mobile traffic"};
  std::string stage, config_path, slot, seed, hops, margin, k;
  std::string stage_help = "one of: all";
  for (const auto& s : mtcr::pipeline_stages()) stage_help += ", " + s;
  app.add_option("stage", stage, stage_help)->required();
  app.add_option("--config", config_path, "pipeline config file")->required();
  app.add_option("--seed", seed, "override the global seed");
  app.add_option("--slot", slot, "run slot-scoped stages for this slot only (full, night, morning, afternoon)");
  app.add_option("--hops", hops, "override agg.hops");
  app.add_option("--margin", margin, "override agg.margin");
  app.add_option("--k", k, "override eval.cluster.k (comma-separated)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "error: stage=%s code=usage message=%s\n", stage.empty() ? "-" : stage.c_str(),
                 quoted(e.what()).c_str());
    return 64;
  }

  try {
    auto config = mtcr::PipelineConfig::load(config_path);
    if (!seed.empty()) config.set("seed", seed);
    if (!hops.empty()) config.set("agg.hops", hops);
    if (!margin.empty()) config.set("agg.margin", margin);
    if (!k.empty()) config.set("eval.cluster.k", k);
    std::optional<mtcr::TimeSlot> only;
    if (!slot.empty()) {
      try {
        only = mtcr::parse_time_slot(slot);
      } catch (const mtcr::Error& e) {
        throw mtcr::Error(mtcr::ErrorCode::Config, e.what());
      }
    }
    mtcr::Pipeline pipeline(std::move(config));
    for (const auto& o : pipeline.run(stage, only)) {
      std::cout << "stage=" << o.stage;
      if (o.slot) std::cout << " slot=" << mtcr::to_string(*o.slot);
      std::cout << " status=" << (o.skipped ? "up-to-date" : "ran") << " outputs=" << o.outputs.size() << "\n";
    }
  } catch (const mtcr::Error& e) {
    std::fprintf(stderr, "error: stage=%s code=%s message=%s\n", stage.c_str(),
                 std::string(mtcr::to_string(e.code())).c_str(), quoted(e.what()).c_str());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: stage=%s code=internal message=%s\n", stage.c_str(), quoted(e.what()).c_str());
    return 1;
  }
  return 0;
}
