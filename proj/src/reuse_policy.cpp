#include "flashblock/reuse_policy.hpp"

#include "flashblock/errors.hpp"

namespace flashblock {

std::string_view to_string(ReuseMode mode) {
  switch (mode) {
    case ReuseMode::TokenThreshold: return "token-threshold";
    case ReuseMode::HeadGated: return "head-gated";
    case ReuseMode::AlwaysRecompute: return "always-recompute";
    case ReuseMode::AlwaysReuse: return "always-reuse";
  }
  return "unknown";
}

ReuseMode parse_reuse_mode(std::string_view text) {
  if (text == "token-threshold" || text == "reuse") return ReuseMode::TokenThreshold;
  if (text == "head-gated") return ReuseMode::HeadGated;
  if (text == "always-recompute" || text == "dense") return ReuseMode::AlwaysRecompute;
  if (text == "always-reuse") return ReuseMode::AlwaysReuse;
  throw ConfigError("unknown reuse mode '" + std::string(text) + "'");
}

void ReuseConfig::validate() const {
  if (tau < 1) throw ConfigError("tau must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw ConfigError("gamma must lie in [0, 1], got " + std::to_string(gamma));
  }
}

ReuseDecision decide(const ReuseConfig& config, bool cache_valid, bool first_visit,
                     std::size_t updated_tokens, bool head_gate) {
  if (first_visit || !cache_valid) return ReuseDecision::Recompute;
  switch (config.mode) {
    case ReuseMode::AlwaysRecompute: return ReuseDecision::Recompute;
    case ReuseMode::AlwaysReuse: return ReuseDecision::Reuse;
    case ReuseMode::HeadGated:
      if (!head_gate) return ReuseDecision::Recompute;
      [[fallthrough]];
    case ReuseMode::TokenThreshold:
      return updated_tokens < config.tau ? ReuseDecision::Reuse : ReuseDecision::Recompute;
  }
  return ReuseDecision::Recompute;
}

std::size_t count_updated_tokens(std::span<const TokenId> previous,
                                 std::span<const TokenId> current) {
  if (previous.size() != current.size()) {
    throw ShapeError("count_updated_tokens: blocks of length " + std::to_string(previous.size()) +
                     " and " + std::to_string(current.size()));
  }
  std::size_t changed = 0;
  for (std::size_t i = 0; i < previous.size(); ++i) changed += previous[i] != current[i];
  return changed;
}

bool HeadGateTable::enabled(std::size_t layer, std::size_t head) const {
  for (const auto& h : heads) {
    if (h.layer == layer && h.head == head) return h.enabled;
  }
  return false;
}

nlohmann::json HeadGateTable::to_json() const {
  nlohmann::json doc;
  doc["gamma"] = gamma;
  doc["metric"] = "mean adjacent-step cosine similarity of block-external output";
  auto& list = doc["heads"] = nlohmann::json::array();
  for (const auto& h : heads) {
    list.push_back({{"layer", h.layer},
                    {"head", h.head},
                    {"similarity", h.similarity},
                    {"min_similarity", h.min_similarity},
                    {"enabled", h.enabled}});
  }
  return doc;
}

HeadGateTable HeadGateTable::from_json(const nlohmann::json& doc) {
  HeadGateTable table;
  try {
    table.gamma = doc.at("gamma").get<double>();
    for (const auto& entry : doc.at("heads")) {
      HeadGate h;
      h.layer = entry.at("layer").get<std::size_t>();
      h.head = entry.at("head").get<std::size_t>();
      h.similarity = entry.at("similarity").get<double>();
      h.min_similarity = entry.value("min_similarity", h.similarity);
      h.enabled = entry.at("enabled").get<bool>();
      table.heads.push_back(h);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed head gate table: ") + e.what());
  }
  if (!(table.gamma >= 0.0 && table.gamma <= 1.0)) throw ConfigError("gamma outside [0, 1]");
  for (const auto& h : table.heads) {
    if (h.enabled != (h.similarity > table.gamma)) {
      throw ConfigError("head gate (" + std::to_string(h.layer) + ", " + std::to_string(h.head) +
                        ") enabled flag disagrees with similarity > gamma");
    }
  }
  return table;
}

}  // namespace flashblock
