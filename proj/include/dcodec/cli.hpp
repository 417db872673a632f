#pragma once

#include <iostream>
#include <string>
#include <vector>

// Command-line front end. run() returns the process exit code: 0 when every
// output was written and validated, 1 on any failure (message on `err`).
namespace dcodec::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dcodec::cli
