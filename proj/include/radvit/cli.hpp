#pragma once

#include <string>
#include <vector>

namespace radvit {

/// Entry point of the `radvit` tool. Returns the process exit status:
/// 0 success, 1 usage error, 2 data error, 3 numeric failure.
int run_cli(int argc, char** argv);
/// Same, with argv[0] omitted.
int run_cli(const std::vector<std::string>& args);

}  // namespace radvit
