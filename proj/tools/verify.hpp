#pragma once

#include <cstdio>

namespace advkit::cli {

/// Runs the quick invariant suite, printing one PASS/FAIL line per check.
bool run_verify(std::FILE* out);

}  // namespace advkit::cli
