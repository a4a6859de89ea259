#pragma once

#include <iosfwd>

namespace ff {

// Entry point of the `fusionformer` tool. Returns the process exit code;
// failures print one line to `err`.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace ff
