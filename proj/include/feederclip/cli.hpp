#pragma once

#include <ostream>

namespace feederclip {

/// Entry point of the command-line tool. Returns 0 on success, 1 on a usage
/// error, 2 on a runtime error.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace feederclip
