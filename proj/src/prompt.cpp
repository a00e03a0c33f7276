#include "attnreg/prompt.hpp"

#include <json.hpp>

#include "attnreg/errors.hpp"

namespace attnreg {

const char* token_name(Token t) {
  static const char* names[kVocabSize] = {"<pad>", "lesion", "clear", "left", "right",
                                          "both",  "upper",  "lower", "whole"};
  return names[static_cast<std::size_t>(t)];
}

bool is_pathology_token(std::size_t id) {
  return id == static_cast<std::size_t>(Token::lesion) || id == static_cast<std::size_t>(Token::clear);
}

namespace {

std::size_t id_of(Token t) { return static_cast<std::size_t>(t); }

Token laterality_token(Laterality l) {
  switch (l) {
    case Laterality::left: return Token::left;
    case Laterality::right: return Token::right;
    case Laterality::both: return Token::both;
  }
  return Token::pad;
}

Token region_token(Region r) {
  switch (r) {
    case Region::upper: return Token::upper;
    case Region::lower: return Token::lower;
    case Region::whole: return Token::whole;
  }
  return Token::pad;
}

}  // namespace

Prompt Prompt::make(Pathology pathology, std::optional<Laterality> laterality, std::optional<Region> region,
                    std::size_t max_tokens) {
  Prompt p;
  p.pathology = pathology;
  p.laterality = laterality;
  p.region = region;
  p.token_ids.push_back(id_of(pathology == Pathology::lesion ? Token::lesion : Token::clear));
  p.k_path.push_back(0);
  if (laterality) p.token_ids.push_back(id_of(laterality_token(*laterality)));
  if (region) p.token_ids.push_back(id_of(region_token(*region)));
  if (p.token_ids.size() > max_tokens) throw ValidationError("prompt longer than the token limit");
  p.token_ids.resize(max_tokens, id_of(Token::pad));
  return p;
}

Prompt Prompt::null_prompt(std::size_t max_tokens) {
  Prompt p;
  p.token_ids.assign(max_tokens, id_of(Token::pad));
  return p;
}

Prompt Prompt::from_json(const std::string& text, std::size_t max_tokens) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("prompt is not valid JSON: ") + ex.what());
  }
  if (!j.is_object()) throw ValidationError("prompt must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "pathology" && key != "laterality" && key != "region")
      throw ValidationError("unknown prompt field '" + key + "'");
  if (!j.contains("pathology") || !j["pathology"].is_string())
    throw ValidationError("prompt needs a string field 'pathology'");
  const auto path = j["pathology"].get<std::string>();
  Pathology pathology;
  if (path == "lesion")
    pathology = Pathology::lesion;
  else if (path == "clear")
    pathology = Pathology::clear;
  else
    throw ValidationError("unknown pathology '" + path + "'");
  std::optional<Laterality> lat;
  std::optional<Region> reg;
  if (j.contains("laterality")) {
    if (!j["laterality"].is_string()) throw ValidationError("prompt laterality must be a string");
    lat = parse_laterality(j["laterality"].get<std::string>());
  }
  if (j.contains("region")) {
    if (!j["region"].is_string()) throw ValidationError("prompt region must be a string");
    reg = parse_region(j["region"].get<std::string>());
  }
  return make(pathology, lat, reg, max_tokens);
}

std::string Prompt::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  if (pathology) j["pathology"] = *pathology == Pathology::lesion ? "lesion" : "clear";
  if (laterality) j["laterality"] = attnreg::to_string(*laterality);
  if (region) j["region"] = attnreg::to_string(*region);
  return j.dump();
}

void Prompt::validate(std::size_t max_tokens) const {
  if (token_ids.size() > max_tokens) throw ValidationError("prompt longer than the token limit");
  for (auto id : token_ids)
    if (id >= kVocabSize) throw ValidationError("unknown token id " + std::to_string(id));
  for (auto k : k_path) {
    if (k >= token_ids.size()) throw ValidationError("pathology index out of range");
    if (!is_pathology_token(token_ids[k])) throw ValidationError("pathology index does not point at a pathology token");
  }
}

}  // namespace attnreg
