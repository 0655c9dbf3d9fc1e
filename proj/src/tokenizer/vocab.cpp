#include "tokenizer/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "core/checksum.hpp"

namespace countlab {

namespace {
const char* kSpecials[] = {"<pad>", "<bos>", "<eos>", "<img>"};

bool all_digits(const std::string& w) {
  if (w.empty()) return false;
  return std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
}
}  // namespace

std::vector<std::string> Vocab::split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    if (all_digits(w)) {
      for (char c : w) out.emplace_back(1, c);
    } else {
      out.push_back(w);
    }
  }
  return out;
}

void Vocab::push(const std::string& tok) {
  if (ids_.count(tok)) throw std::runtime_error("vocab: duplicate token " + tok);
  ids_[tok] = static_cast<int>(tokens_.size());
  tokens_.push_back(tok);
}

Vocab Vocab::build(const std::vector<std::string>& corpus, bool canonical) {
  Vocab v;
  for (const char* s : kSpecials) v.push(s);
  for (char d = '0'; d <= '9'; ++d) v.push(std::string(1, d));
  std::vector<std::string> rest;
  std::set<std::string> seen;
  for (const auto& line : corpus) {
    for (const auto& tok : split_tokens(line)) {
      if (v.contains(tok) || seen.count(tok)) continue;
      seen.insert(tok);
      rest.push_back(tok);
    }
  }
  if (canonical) std::sort(rest.begin(), rest.end());
  for (const auto& tok : rest) v.push(tok);
  return v;
}

int Vocab::id(const std::string& tok) const {
  auto it = ids_.find(tok);
  if (it == ids_.end()) throw std::runtime_error("vocab: unknown token '" + tok + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::runtime_error("vocab: id out of range");
  return tokens_[id];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& tok : split_tokens(text)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids, bool rejoin_digits) const {
  std::string out;
  bool prev_digit = false;
  for (int i : ids) {
    const std::string& tok = token(i);
    const bool dig = is_digit_token(tok);
    if (!out.empty() && !(rejoin_digits && dig && prev_digit)) out += ' ';
    out += tok;
    prev_digit = dig;
  }
  return out;
}

std::string Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (int i = 0; i < size(); ++i) j[tokens_[i]] = i;
  return j.dump(2);
}

Vocab Vocab::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  std::vector<std::string> toks(j.size());
  for (auto& [tok, id] : j.items()) {
    int i = id.get<int>();
    if (i < 0 || i >= static_cast<int>(toks.size()) || !toks[i].empty())
      throw std::runtime_error("vocab: ids not dense");
    toks[i] = tok;
  }
  Vocab v;
  for (const auto& tok : toks) v.push(tok);
  for (int i = 0; i < 4; ++i)
    if (v.tokens_[i] != kSpecials[i]) throw std::runtime_error("vocab: specials misplaced");
  return v;
}

uint64_t Vocab::checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int i = 0; i < size(); ++i) {
    h = fnv1a64(tokens_[i].data(), tokens_[i].size(), h);
    uint32_t id = static_cast<uint32_t>(i);
    h = fnv1a64(&id, sizeof(id), h);
  }
  return h;
}

}  // namespace countlab
