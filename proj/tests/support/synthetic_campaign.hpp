#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "somnlp/annotation.hpp"
#include "somnlp/rng.hpp"

namespace somnlp::testing {

struct Synthetic {
  std::vector<annotation::AnnotationItem> items;
  std::vector<annotation::AnnotationRecord> records;
  std::vector<bool> planted;  // per item: the annotators disagree
};

/// `n` fakenews items, both annotators label each one; exactly
/// `disagreements` of them (chosen by `seed`) get opposite stage-1 labels.
inline Synthetic synthetic_campaign(std::size_t n, std::size_t disagreements, std::uint64_t seed) {
  Synthetic s;
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  s.planted.assign(n, false);
  for (std::size_t i = 0; i < disagreements; ++i) s.planted[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "syn-" + std::to_string(100000 + i);
    s.items.push_back({id, "qoraal " + std::to_string(i), annotation::Task::fakenews, "synthetic"});
    const std::string a = rng.bernoulli(0.5) ? "fake" : "real";
    const std::string b = s.planted[i] ? (a == "fake" ? "real" : "fake") : a;
    s.records.push_back({id, "ann-a", a, std::nullopt, "t"});
    s.records.push_back({id, "ann-b", b, std::nullopt, "t"});
  }
  return s;
}

}  // namespace somnlp::testing
