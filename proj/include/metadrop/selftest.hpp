#pragma once

#include <string>
#include <vector>

namespace metadrop {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Compact invariant suite: gradient checks against finite differences,
/// closed-form oracles, projection and attack contracts, reduction
/// identities. Runs in seconds; every entry reports pass/fail.
std::vector<SelfTestResult> run_selftest();

}  // namespace metadrop
