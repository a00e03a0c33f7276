#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace attnreg {

// Runs one subcommand (phantoms, train, edit, eval, dump-attn). `args`
// excludes the program name. Returns 0 on success, 2 on usage or validation
// errors, 1 on runtime failures.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace attnreg
