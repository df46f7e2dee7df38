#pragma once

#include <json.hpp>

#include "duo/model.hpp"

namespace duo {

inline nlohmann::json config_to_json(const DuoConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},
                        {"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"d_ff_big", c.d_ff_big},
                        {"d_ff_small", c.d_ff_small},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"rope_theta", c.rope_theta},
                        {"norm_eps", c.norm_eps},
                        {"tied_embeddings", c.tied_embeddings},
                        {"skip_scope", c.skip_scope == SkipScope::FfnOnly ? "ffn_only" : "whole_block"}};
}

inline DuoConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "n_layers",   "d_model",    "n_heads",   "d_ff_big",        "d_ff_small", "vocab_size",
      "max_seq_len", "rope_theta", "norm_eps",  "tied_embeddings", "skip_scope"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("model config: unknown key '" + it.key() + "'");
  }
  DuoConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff_big = j.value("d_ff_big", c.d_ff_big);
  c.d_ff_small = j.value("d_ff_small", c.d_ff_small);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.tied_embeddings = j.value("tied_embeddings", c.tied_embeddings);
  const std::string scope = j.value("skip_scope", std::string("ffn_only"));
  if (scope == "ffn_only")
    c.skip_scope = SkipScope::FfnOnly;
  else if (scope == "whole_block")
    c.skip_scope = SkipScope::WholeBlock;
  else
    throw ConfigError("model config: skip_scope must be ffn_only or whole_block");
  return c;
}

}  // namespace duo
