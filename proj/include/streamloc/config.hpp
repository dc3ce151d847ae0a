#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "streamloc/engine.hpp"
#include "streamloc/metrics.hpp"
#include "streamloc/synth.hpp"
#include "streamloc/trainer.hpp"

namespace streamloc {

// One config object drives every command. Values resolve as
// override flag > config file > default; unknown keys are rejected.
struct RunConfig {
    CorpusSpec data;
    ModelConfig model;
    TrainConfig train;
    EngineConfig engine;
    EvalOptions eval;
    std::string sweep_windows = "0:0,-4:4,-8:8,-16:16";
    int sweep_epochs = 3;

    // Applies a parsed config file; throws ConfigError on unknown keys or
    // type mismatches.
    void apply_json(const nlohmann::json& j);
    // Applies one "section.key=value" override.
    void apply_override(const std::string& assignment);
    // Cross-field derivation (vocabulary from event types, shared switches)
    // plus validation of every section.
    void finalize();

    nlohmann::json to_json() const;

    static std::string help_text();
};

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::string>& overrides);
RunConfig default_run_config(const std::vector<std::string>& overrides = {});

std::vector<std::pair<int, int>> parse_sweep_windows(const std::string& text);

}  // namespace streamloc
