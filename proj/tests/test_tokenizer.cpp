#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "core/rng.hpp"
#include "model/sequence.hpp"
#include "tokenizer/vocab.hpp"

using namespace countlab;

TEST_CASE("split_tokens: digit words explode into single digits") {
  const auto toks = Vocab::split_tokens("How many 123 stones? 7");
  const std::vector<std::string> want{"How", "many", "1", "2", "3", "stones?", "7"};
  CHECK(toks == want);
}

TEST_CASE("vocab: no multi-digit token can enter, specials and digits always present") {
  Vocab v = Vocab::build({"count 42 and 7 things", "[ a b c ]"});
  for (int i = 0; i < v.size(); ++i) {
    const std::string& t = v.token(i);
    bool all_digits = !t.empty();
    for (char ch : t) all_digits = all_digits && ch >= '0' && ch <= '9';
    if (all_digits) CHECK(t.size() == 1);
  }
  CHECK(v.id("<pad>") == Vocab::kPad);
  CHECK(v.id("<bos>") == Vocab::kBos);
  CHECK(v.id("<eos>") == Vocab::kEos);
  CHECK(v.id("<img>") == Vocab::kImg);
  for (int d = 0; d <= 9; ++d) CHECK(v.contains(std::string(1, '0' + d)));
}

TEST_CASE("vocab: canonical build is order independent") {
  std::vector<std::string> corpus = {"alpha beta", "gamma delta 12", "[ a b c ]",
                                     "How many black stones?"};
  Vocab v1 = Vocab::build(corpus, true);
  std::reverse(corpus.begin(), corpus.end());
  Vocab v2 = Vocab::build(corpus, true);
  CHECK(v1.checksum() == v2.checksum());
  CHECK(v1.size() == v2.size());
  for (int i = 0; i < v1.size(); ++i) CHECK(v1.token(i) == v2.token(i));
}

TEST_CASE("encode/decode: digits rejoin into numbers, words round trip") {
  Vocab v = Vocab::build({"there are 41 stones on this board"});
  const auto ids = v.encode("there are 41 stones");
  CHECK(ids.size() == 5);  // "41" becomes two digit tokens
  CHECK(v.decode(ids, true) == "there are 41 stones");
  CHECK(v.decode(ids, false) == "there are 4 1 stones");
}

TEST_CASE("encode: unknown tokens are an error, not a silent drop") {
  Vocab v = Vocab::build({"known words only"});
  CHECK_THROWS(v.encode("known unknown"));
}

TEST_CASE("vocab json round trip preserves ids and checksum") {
  Vocab v = Vocab::build({"How many black stones are on this board? 42", "[ a b c ] True False"});
  Vocab back = Vocab::from_json(v.to_json());
  CHECK(back.size() == v.size());
  CHECK(back.checksum() == v.checksum());
  for (int i = 0; i < v.size(); ++i) CHECK(back.token(i) == v.token(i));
  CHECK_THROWS(Vocab::from_json("{\"tokens\": [\"a\"]}"));
}

TEST_CASE("frozen corpus covers every template the generators can emit") {
  const GenPreset preset = GenPreset::desk();
  const Vocab v = Vocab::build(vocab_corpus(preset), true);
  Rng rng(5);
  // Counting text, every answer magnitude.
  for (int n : {0, 9, 10, preset.text_max}) {
    TextSample t = gen_text(n, preset.text_len, preset.target_letter, rng);
    CHECK_NOTHROW(v.encode(t.input_text()));
    CHECK_NOTHROW(v.encode(t.prompt));
    CHECK_NOTHROW(v.encode(t.answer));
  }
  // Board prompts and comparison templates.
  CHECK_NOTHROW(v.encode(counting_vision_prompt()));
  ComparisonSample c = gen_comparison_text(3, 5, preset.text_len, preset.target_letter, rng);
  CHECK_NOTHROW(v.encode(c.prompt));
  CHECK_NOTHROW(v.encode(c.answer));
  BoardSpec bs;
  bs.grid_size = preset.grid_size;
  bs.stone_px = preset.stone_px;
  bs.target_count = 4;
  bs.distractor_count = 2;
  bs.seed = 11;
  ComparisonSample cv =
      gen_comparison_vision(bs, 6, preset.text_len, preset.target_letter, rng);
  CHECK_NOTHROW(v.encode(cv.prompt));
  CHECK(v.contains("True"));
  CHECK(v.contains("False"));
}
