#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace kvnn {

/// Subcommands: gen-data, train, eval, count, fit-poly, selfcheck, krr-baseline.
/// Returns 0 on success, 1 when a requested check fails, 2 on usage errors and
/// 3 on runtime errors. With --json-errors failures are also written to `err`
/// as {"error": {"code", "message"}}.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

/// 557057 -> "557,057"
std::string with_thousands(unsigned long long n);

}  // namespace kvnn
