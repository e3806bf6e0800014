#pragma once

#include <ostream>

namespace cnx {

// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure
// (I/O, corrupt files, failed equivalence check).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cnx
