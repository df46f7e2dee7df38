#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "duo/corpus.hpp"
#include "duo/textgen.hpp"

using namespace duo;

TEST_CASE("encode/decode round-trip on text") {
  const std::string s = "Hello, world!\nline two\ttabbed\x7f";
  CHECK(decode(encode(s)) == s);
}

TEST_CASE("encode/decode round-trip on 1 MiB of random bytes") {
  Rng rng(77);
  std::string s(1 << 20, '\0');
  for (auto& c : s) c = static_cast<char>(rng.below(256));
  auto ids = encode(s);
  REQUIRE(ids.size() == s.size());
  for (int id : ids) {
    REQUIRE(id >= 0);
    REQUIRE(id < 256);
  }
  CHECK(decode(ids) == s);
}

TEST_CASE("decode rejects out-of-vocab ids") {
  CHECK_THROWS_AS(decode({0, 300}), ContractError);
  CHECK_THROWS_AS(decode({-1}), ContractError);
}

TEST_CASE("corpus boundary validation") {
  TokenizedCorpus c;
  c.append_document("abc");
  c.append_document("de");
  REQUIRE(c.ids.size() == 5);
  REQUIRE(c.boundaries == std::vector<std::size_t>{3, 5});
  c.check();

  TokenizedCorpus bad = c;
  bad.boundaries = {3, 3};
  CHECK_THROWS_AS(bad.check(), ContractError);
  bad.boundaries = {3, 4};
  CHECK_THROWS_AS(bad.check(), ContractError);  // must end at corpus length
}

TEST_CASE("batch stream: targets are inputs shifted by one") {
  TokenizedCorpus c;
  c.append_document(textgen::prose(4096, 1));
  BatchStream stream(c, 16, 4, 9);
  for (int step = 0; step < 8; ++step) {
    auto b = stream.next();
    REQUIRE(b.inputs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(b.inputs[i].size() == 16);
      REQUIRE(b.targets[i].size() == 16);
      // shifted: last 15 inputs equal first 15 targets
      for (std::size_t j = 0; j + 1 < 16; ++j) CHECK(b.inputs[i][j + 1] == b.targets[i][j]);
      // window is contiguous in the corpus
      auto it = std::search(c.ids.begin(), c.ids.end(), b.inputs[i].begin(), b.inputs[i].end());
      CHECK(it != c.ids.end());
    }
  }
}

TEST_CASE("batch stream: deterministic for a fixed seed, different across seeds") {
  TokenizedCorpus c;
  c.append_document(textgen::code(4096, 2));
  BatchStream a(c, 32, 2, 5), b(c, 32, 2, 5), d(c, 32, 2, 6);
  bool all_same = true, any_diff = false;
  for (int step = 0; step < 6; ++step) {
    auto ba = a.next(), bb = b.next(), bd = d.next();
    if (ba.inputs != bb.inputs) all_same = false;
    if (ba.inputs != bd.inputs) any_diff = true;
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("batch stream: epoch coverage, each token in at most two windows over two epochs") {
  TokenizedCorpus c;
  c.append_document(textgen::prose(2000, 3));
  const std::size_t seq = 25;
  BatchStream stream(c, seq, 1, 11);
  const std::size_t per_epoch = stream.windows_per_epoch();
  REQUIRE(per_epoch == (c.ids.size() - 1) / seq);

  std::map<std::size_t, int> input_hits;  // window start -> count
  std::set<std::vector<int>> epoch1, epoch2;
  for (std::size_t i = 0; i < 2 * per_epoch; ++i) {
    auto b = stream.next();
    (i < per_epoch ? epoch1 : epoch2).insert(b.inputs[0]);
  }
  // every distinct window appears exactly once per epoch
  CHECK(epoch1.size() == per_epoch);
  CHECK(epoch2.size() == per_epoch);
  CHECK(epoch1 == epoch2);
}

TEST_CASE("textgen generators are deterministic and roughly sized") {
  auto p1 = textgen::prose(10000, 42), p2 = textgen::prose(10000, 42);
  CHECK(p1 == p2);
  CHECK(p1.size() >= 10000);
  CHECK(p1.size() < 10400);
  auto c1 = textgen::code(10000, 42);
  CHECK(c1 != p1);
  CHECK(textgen::prose(10000, 43) != p1);
}
