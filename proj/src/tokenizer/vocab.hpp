#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace countlab {

// Whitespace tokenizer with single-digit splitting: any whitespace-delimited
// word made only of digits contributes one token per digit, so no multi-digit
// token can ever enter the vocabulary. Ids are dense; specials and the ten
// digits are always present at fixed positions.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kImg = 3;

  // Splits text into model tokens: whitespace words, digit words exploded to
  // single digits.
  static std::vector<std::string> split_tokens(const std::string& text);

  // canonical=true sorts non-special, non-digit tokens so any corpus line
  // order yields the same vocabulary.
  static Vocab build(const std::vector<std::string>& corpus, bool canonical = true);

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& tok) const { return ids_.count(tok) > 0; }
  int id(const std::string& tok) const;
  const std::string& token(int id) const;

  std::vector<int> encode(const std::string& text) const;
  // Joins tokens with single spaces; with rejoin_digits, maximal runs of
  // digit tokens concatenate into one number word ("4","1" -> "41").
  std::string decode(const std::vector<int>& ids, bool rejoin_digits = true) const;

  std::string to_json() const;
  static Vocab from_json(const std::string& text);
  uint64_t checksum() const;

  static bool is_digit_token(const std::string& tok) {
    return tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9';
  }

 private:
  void push(const std::string& tok);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace countlab
