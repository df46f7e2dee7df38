#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "duo/tensor.hpp"

namespace duo {

enum class Split { Train, HoldoutText, HoldoutCode };

// Byte-level tokenization: ids are the bytes themselves, vocab 256.
inline std::vector<int> encode(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

inline std::string decode(const std::vector<int>& ids, std::size_t vocab = 256) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw ContractError("decode: id out of vocab range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

struct TokenizedCorpus {
  std::vector<int> ids;
  std::vector<std::size_t> boundaries;  // strictly increasing, last == ids.size()
  Split split = Split::Train;
  std::size_t vocab_size = 256;

  void append_document(const std::string& text) {
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    boundaries.push_back(ids.size());
  }

  void check() const {
    std::size_t prev = 0;
    for (std::size_t b : boundaries) {
      if (b <= prev && !(b == 0 && prev == 0)) throw ContractError("corpus: boundaries not strictly increasing");
      prev = b;
    }
    if (!boundaries.empty() && boundaries.back() != ids.size())
      throw ContractError("corpus: boundaries must end at corpus length");
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw ContractError("corpus: id out of range");
  }

  static TokenizedCorpus from_files(const std::vector<std::string>& paths, Split split) {
    TokenizedCorpus c;
    c.split = split;
    for (const auto& p : paths) {
      std::ifstream f(p, std::ios::binary);
      if (!f) throw ContractError("corpus: cannot open " + p);
      std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
      c.append_document(text);
    }
    c.check();
    return c;
  }
};

// Deterministic stream of (input, target) windows. Windows are
// non-overlapping within an epoch (stride seq_len) and shuffled per epoch
// from the stream seed; targets are inputs shifted by one.
class BatchStream {
 public:
  BatchStream(const TokenizedCorpus& corpus, std::size_t seq_len, std::size_t batch_size,
              std::uint64_t seed)
      : corpus_(corpus), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (corpus.ids.size() < seq_len + 1) throw ContractError("BatchStream: corpus smaller than seq_len+1");
    const std::size_t n_windows = (corpus.ids.size() - 1) / seq_len;
    order_.resize(n_windows);
    reshuffle();
  }

  struct Batch {
    std::vector<std::vector<int>> inputs, targets;
  };

  Batch next() {
    Batch b;
    for (std::size_t i = 0; i < batch_size_; ++i) {
      if (cursor_ >= order_.size()) {
        ++epoch_;
        reshuffle();
      }
      const std::size_t start = order_[cursor_++] * seq_len_;
      std::vector<int> in(corpus_.ids.begin() + start, corpus_.ids.begin() + start + seq_len_);
      std::vector<int> tg(corpus_.ids.begin() + start + 1, corpus_.ids.begin() + start + seq_len_ + 1);
      b.inputs.push_back(std::move(in));
      b.targets.push_back(std::move(tg));
    }
    return b;
  }

  std::size_t windows_per_epoch() const { return order_.size(); }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(Rng::mix(seed_, epoch_));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    cursor_ = 0;
  }

  const TokenizedCorpus& corpus_;
  std::size_t seq_len_, batch_size_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace duo
