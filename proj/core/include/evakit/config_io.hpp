#pragma once

#include <string>
#include <string_view>

#include "evakit/eva.hpp"
#include "evakit/model.hpp"
#include "evakit/trainer.hpp"

namespace evakit {

// `git describe` of the source tree at configure time.
std::string git_describe();

// JSON text round trips. Parsing starts from the defaults, so missing keys keep
// their default values; unknown keys and wrong types throw ConfigError.
std::string to_json(const EvaConfig& cfg);
std::string to_json(const TinyLMConfig& cfg);
std::string to_json(const FinetuneRecipe& recipe);
std::string to_json(const DemoConfig& cfg);

EvaConfig eva_config_from_json(std::string_view text);
TinyLMConfig tiny_lm_config_from_json(std::string_view text);
FinetuneRecipe finetune_recipe_from_json(std::string_view text);
DemoConfig demo_config_from_json(std::string_view text);

}  // namespace evakit
